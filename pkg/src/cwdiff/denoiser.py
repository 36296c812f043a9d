"""Small conditional conv encoder-decoder that predicts the velocity target.

Inputs are the noisy latent stack concatenated with the (log-compressed)
conditioning image; a global context vector from a separate conv encoder is
added to the timestep embedding and injected through per-block scale/shift.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Graph, ModelParams, ParamFactory, backprop, evaluate, forward


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 24
    width: int = 24
    levels: int = 1  # number of 2x downsamplings below the input resolution
    temb_dim: int = 64
    ctx_dim: int = 64
    groups: int = 8
    cfg_drop: float = 0.05
    # zero the network input on channels at zero signal level (they carry no data)
    mask_zero_snr: bool = True

    def __post_init__(self):
        if self.width <= 0 or self.latent_channels <= 0 or self.levels < 1:
            raise ValueError("widths must be positive and levels >= 1")
        if not 0.0 <= self.cfg_drop < 1.0:
            raise ValueError(f"cfg_drop must lie in [0, 1), got {self.cfg_drop}")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class ConditionContext:
    vector: np.ndarray  # (B, ctx_dim)
    null: np.ndarray  # (B,) bool


def timestep_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t / max(T-1, 1); returns (len(t), dim) or (dim,)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 0) or np.any(t > T - 1):
        raise ValueError(f"timestep outside [0, {T - 1}]")
    x = t.astype(np.float64) / max(T - 1, 1)
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), dim // 2))
    ang = x[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
    return emb[0] if scalar else emb


def condition_image(I: np.ndarray) -> np.ndarray:
    """(B, 3, H, W) HDR radiance -> NHWC log1p network input."""
    return np.ascontiguousarray(np.moveaxis(np.log1p(np.maximum(I, 0)), 1, -1), dtype=np.float32)


def cfg_combine(v_cond, v_uncond, w: float):
    return v_uncond + w * (v_cond - v_uncond)


def _resblock(g: Graph, h: int, emb: int, name: str, c: int, groups: int) -> int:
    x = g.conv(g.op("silu", g.groupnorm(h, f"{name}.n0", groups)), f"{name}.c0")
    scale = g.op("affine", g.linear(emb, f"{name}.s"), scale=1.0, shift=1.0)
    shift = g.linear(emb, f"{name}.t")
    bshape = dict(shape=(-1, 1, 1, c))
    x = g.op("add", g.op("mul", x, g.op("reshape", scale, **bshape)),
             g.op("reshape", shift, **bshape))
    x = g.conv(g.op("silu", g.groupnorm(x, f"{name}.n1", groups)), f"{name}.c1")
    return g.op("add", h, x)


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        self.cond_graph = self._build_cond()
        self.graph = self._build()

    @staticmethod
    def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> ModelParams:
        pf = ParamFactory(rng)
        w = cfg.width
        pf.conv("cond.c0", 3, 16)
        pf.conv("cond.c1", 16, 32)
        pf.conv("cond.c2", 32, 32)
        pf.linear("cond.proj", 32, cfg.ctx_dim)
        pf.linear("temb.0", cfg.temb_dim, 4 * w)
        pf.linear("temb.1", 4 * w, 4 * w)
        pf.linear("ctx.proj", cfg.ctx_dim, 4 * w)
        pf.conv("in", cfg.latent_channels + 3, w)

        def block(name, c):
            pf.norm(f"{name}.n0", c)
            pf.conv(f"{name}.c0", c, c)
            # small but nonzero so the embedding branch trains from the first step
            pf.linear(f"{name}.s", 4 * w, c, gain=0.1)
            pf.linear(f"{name}.t", 4 * w, c, gain=0.1)
            pf.norm(f"{name}.n1", c)
            pf.conv(f"{name}.c1", c, c)

        c = w
        block("enc0", c)
        for lv in range(cfg.levels):
            pf.conv(f"down{lv}", c, 2 * c)
            c *= 2
            block(f"enc{lv + 1}", c)
        block("mid", c)
        for lv in reversed(range(cfg.levels)):
            pf.conv(f"up{lv}", c + c // 2, c // 2)
            c //= 2
            block(f"dec{lv}", c)
        pf.norm("out.n", c)
        pf.conv("out", c, cfg.latent_channels, zero=True)
        params = pf.params
        params.meta.update({"kind": "denoiser", "config": asdict(cfg)})
        return params

    def _build_cond(self) -> Graph:
        g = Graph()
        img = g.input("img")
        x = g.op("silu", g.conv(img, "cond.c0"))
        x = g.op("down2", x)
        x = g.op("silu", g.conv(x, "cond.c1"))
        x = g.op("down2", x)
        x = g.op("silu", g.conv(x, "cond.c2"))
        g.outputs = [g.linear(g.op("meanpool", x), "cond.proj")]
        return g

    def _build(self) -> Graph:
        cfg = self.cfg
        g = Graph()
        z = g.input("z")
        img = g.input("img")
        temb = g.input("temb")
        ctx = g.input("ctx", differentiable=True)
        emb = g.linear(g.op("silu", g.linear(temb, "temb.0")), "temb.1")
        emb = g.op("silu", g.op("add", emb, g.linear(ctx, "ctx.proj")))
        c = cfg.width
        h = g.conv(g.op("concat", z, img), "in")
        h = _resblock(g, h, emb, "enc0", c, cfg.groups)
        skips = [h]
        for lv in range(cfg.levels):
            c *= 2
            h = g.conv(g.op("down2", h), f"down{lv}")
            h = _resblock(g, h, emb, f"enc{lv + 1}", c, cfg.groups)
            skips.append(h)
        skips.pop()
        h = _resblock(g, h, emb, "mid", c, cfg.groups)
        for lv in reversed(range(cfg.levels)):
            c //= 2
            h = g.conv(g.op("concat", g.op("up2", h), skips.pop()), f"up{lv}")
            h = _resblock(g, h, emb, f"dec{lv}", c, cfg.groups)
        h = g.op("silu", g.groupnorm(h, "out.n", cfg.groups))
        g.outputs = [g.conv(h, "out")]
        return g

    # -- inference ------------------------------------------------------------
    def context(self, img_nhwc: np.ndarray, null=None) -> np.ndarray:
        vec = evaluate(self.cond_graph, [img_nhwc], self.params)[0]
        if null is not None:
            vec = vec * (~np.asarray(null, bool))[:, None].astype(vec.dtype)
        return vec

    def predict(self, t, T: int, z: np.ndarray, img_nhwc: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        """z (B, C, H, W) -> v_hat (B, C, H, W)."""
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        temb = timestep_embedding(t, T, self.cfg.temb_dim)
        zin = np.ascontiguousarray(np.moveaxis(z, 1, -1), dtype=np.float32)
        out = evaluate(self.graph, {"z": zin, "img": img_nhwc, "temb": temb,
                                    "ctx": ctx.astype(np.float32)}, self.params)[0]
        return np.moveaxis(out, -1, 1)

    # -- training -------------------------------------------------------------
    def loss_and_grads(self, t, T: int, z, img_nhwc, keep, target, mask=None):
        """Masked mean-squared velocity loss and parameter gradients.

        ``keep`` (B,) zeros the context of dropped elements; ``mask`` (B, C)
        or (B, C, H, W) restricts the loss to selected channels.
        """
        ctr = forward(self.cond_graph, [img_nhwc], self.params)
        keep_f = np.asarray(keep, np.float32)[:, None]
        ctx = ctr.output_values()[0] * keep_f
        temb = timestep_embedding(np.asarray(t), T, self.cfg.temb_dim)
        zin = np.ascontiguousarray(np.moveaxis(z, 1, -1), dtype=np.float32)
        tr = forward(self.graph, {"z": zin, "img": img_nhwc, "temb": temb, "ctx": ctx}, self.params)
        v_hat = tr.output_values()[0]
        tgt = np.moveaxis(target, 1, -1).astype(np.float32)
        r = v_hat - tgt
        if mask is None:
            m = np.ones_like(r)
        else:
            mask = np.asarray(mask, np.float32)
            m = np.broadcast_to(mask[:, None, None, :] if mask.ndim == 2 else np.moveaxis(mask, 1, -1),
                                r.shape).astype(np.float32)
        denom = max(float(m.sum()), 1.0)
        loss = float((m * r * r).sum() / denom)
        seed = (2.0 / denom) * m * r
        g_main = backprop(tr, [seed], params=self.params)
        g_cond = backprop(ctr, [g_main.inputs["ctx"] * keep_f])
        grads = dict(g_main.params)
        for k, v in g_cond.params.items():
            grads[k] = grads[k] + v
        return loss, grads, np.moveaxis(v_hat, -1, 1)


def encode_condition(model: Denoiser, I_L: np.ndarray, rng: np.random.Generator | None = None,
                     training: bool = False, drop: float | None = None) -> ConditionContext:
    """Global context for images (B, 3, H, W); in training mode each element is
    replaced by the null (zero) context with probability ``drop``."""
    if I_L.ndim != 4 or I_L.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) image, got {I_L.shape}")
    p = model.cfg.cfg_drop if drop is None else drop
    null = np.zeros(I_L.shape[0], bool)
    if training:
        if rng is None:
            raise ValueError("training mode needs an rng")
        null = rng.random(I_L.shape[0]) < p
    return ConditionContext(model.context(condition_image(I_L), null), null)


def denoise(model: Denoiser, t, T: int, z_t: np.ndarray, I_L: np.ndarray,
            context: ConditionContext) -> np.ndarray:
    if not np.all(np.isfinite(z_t)):
        raise ValueError("NaN or inf in latent input")
    if z_t.shape[1] != model.cfg.latent_channels:
        raise ValueError(f"latent has {z_t.shape[1]} channels, model expects {model.cfg.latent_channels}")
    return model.predict(t, T, z_t, condition_image(I_L), context.vector)
