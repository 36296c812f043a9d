"""Per-pixel lighting features: an MLP autoencoder over log-radiance
environment maps with environment, shading and specular decoders.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import scenes
from .numerics import (Graph, ModelParams, OptimizerState, ParamFactory, adam_step, backprop,
                       cosine_lr, evaluate, forward)
from .scenes import SceneTensors

log = logging.getLogger(__name__)


def log1p_radiance(x):
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("radiance must be non-negative")
    return np.log1p(x)


def expm1_radiance(y):
    """Inverse of :func:`log1p_radiance`; negative raw values clamp to zero radiance."""
    return np.expm1(np.maximum(y, 0))


def reflect_dir(n, v, atol: float = 1e-6):
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if (np.abs(np.linalg.norm(n, axis=-1) - 1) > atol).any() or \
            (np.abs(np.linalg.norm(v, axis=-1) - 1) > atol).any():
        raise ValueError("reflect_dir expects unit vectors")
    return 2.0 * (n * v).sum(-1, keepdims=True) * n - v


def positional_encode(x, n_freq: int = 4):
    """[sin(2^k pi x), cos(2^k pi x)] for k < n_freq, per component."""
    x = np.asarray(x)
    freqs = (2.0 ** np.arange(n_freq)) * math.pi
    ang = x[..., :, None] * freqs
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*x.shape[:-1], -1)


@dataclass(frozen=True)
class IlrConfig:
    n_dirs: int = 16
    n_features: int = 16
    enc_layers: int = 7
    enc_width: int = 64
    dec_width: int = 128
    dec_layers: tuple[int, int, int] = (3, 3, 6)
    n_freq: int = 4
    steps: int = 3000
    batch: int = 512
    lr: float = 2e-3
    weight_decay: float = 1e-4

    @property
    def spec_inputs(self) -> int:
        return self.n_features + 1 + 6 * self.n_freq + 1

    @classmethod
    def from_dict(cls, d: dict) -> "IlrConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def _mlp(g: Graph, x: int, prefix: str, n_layers: int, norm: bool = False) -> int:
    for i in range(n_layers - 1):
        x = g.linear(x, f"{prefix}.{i}")
        if norm:
            x = g.batchnorm(x, f"{prefix}.bn{i}")
        x = g.op("silu", x)
    return g.linear(x, f"{prefix}.{n_layers - 1}")


def init_params(cfg: IlrConfig, rng: np.random.Generator) -> ModelParams:
    pf = ParamFactory(rng)
    widths = [3 * cfg.n_dirs] + [cfg.enc_width] * (cfg.enc_layers - 1) + [cfg.n_features]
    for i in range(cfg.enc_layers):
        pf.linear(f"enc.{i}", widths[i], widths[i + 1])
        if i < cfg.enc_layers - 1:
            pf.norm(f"enc.bn{i}", widths[i + 1], running=True)
    outs = {"decE": 3 * cfg.n_dirs, "decS": 3, "decI": 3}
    ins = {"decE": cfg.n_features, "decS": cfg.n_features, "decI": cfg.spec_inputs}
    for (name, n_out), layers in zip(outs.items(), cfg.dec_layers):
        w = [ins[name]] + [cfg.dec_width] * (layers - 1) + [n_out]
        for i in range(layers):
            pf.linear(f"{name}.{i}", w[i], w[i + 1])
    return pf.params


class Ilr:
    """Holds the four graphs and their parameters; all methods work on pixel rows."""

    def __init__(self, cfg: IlrConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        L = cfg.dec_layers

        g = Graph()
        x = g.input("env_log")
        g.outputs = [g.op("tanh", _mlp(g, x, "enc", cfg.enc_layers, norm=True))]
        self.enc = g

        self.dec = {}
        for name, layers in zip(("decE", "decS", "decI"), L):
            g = Graph()
            x = g.input("x")
            g.outputs = [_mlp(g, x, name, layers)]
            self.dec[name] = g

        self.train_graph = self._build_train_graph()

    def _build_train_graph(self) -> Graph:
        cfg = self.cfg
        g = Graph()
        env_log = g.input("env_log")
        spec_aux = g.input("spec_aux")  # R, gamma(r), n.v
        spec_aux_rand = g.input("spec_aux_rand")
        t_env, t_s, t_is, t_is_rand = (g.input(n) for n in ("t_env", "t_s", "t_is", "t_is_rand"))
        albedo, image = g.input("albedo"), g.input("image")
        f = g.op("tanh", _mlp(g, env_log, "enc", cfg.enc_layers, norm=True))
        e_raw = _mlp(g, f, "decE", cfg.dec_layers[0])
        s_raw = _mlp(g, f, "decS", cfg.dec_layers[1])
        is_raw = _mlp(g, g.op("concat", f, spec_aux), "decI", cfg.dec_layers[2])
        is_rand_raw = _mlp(g, g.op("concat", f, spec_aux_rand), "decI", cfg.dec_layers[2])
        img = g.op("add", g.op("mul", albedo, g.op("expm1pos", s_raw)), g.op("expm1pos", is_raw))
        losses = [g.op("mse", e_raw, t_env), g.op("mse", s_raw, t_s), g.op("mse", is_raw, t_is),
                  g.op("mse", is_rand_raw, t_is_rand), g.op("mse", img, image)]
        total = losses[0]
        for term in losses[1:]:
            total = g.op("add", total, term)
        g.outputs = [total]
        return g

    # -- pixel-level API ---------------------------------------------------------
    def encode_env(self, env: np.ndarray) -> np.ndarray:
        """env (P, C, 3) radiance -> features (P, F) in (-1, 1)."""
        env = np.asarray(env)
        if not np.all(np.isfinite(env)):
            raise ValueError("non-finite radiance")
        x = log1p_radiance(env).reshape(env.shape[0], -1).astype(np.float32)
        return evaluate(self.enc, [x], self.params)[0]

    def _clamp_features(self, f):
        f = np.asarray(f, dtype=np.float32)
        bad = int(np.count_nonzero(np.abs(f) > 1))
        if bad:
            log.warning("clamped %d lighting feature values into [-1, 1]", bad)
            f = np.clip(f, -1, 1)
        return f

    def decode_env(self, f) -> np.ndarray:
        f = self._clamp_features(f)
        raw = evaluate(self.dec["decE"], [f], self.params)[0]
        return expm1_radiance(raw).reshape(f.shape[0], self.cfg.n_dirs, 3)

    def decode_shading(self, f) -> np.ndarray:
        f = self._clamp_features(f)
        return expm1_radiance(evaluate(self.dec["decS"], [f], self.params)[0])

    def spec_aux(self, R, normals, views) -> np.ndarray:
        """Decoder_I side inputs per pixel: roughness, gamma(r_local), n.v."""
        v_loc = scenes.to_local(np.asarray(normals, np.float64), np.asarray(views, np.float64))
        v_loc /= np.linalg.norm(v_loc, axis=-1, keepdims=True)
        r = reflect_dir(np.broadcast_to([0.0, 0.0, 1.0], v_loc.shape), v_loc)
        ndv = np.clip(v_loc[:, 2:3], 0.0, 1.0)
        return np.concatenate([np.asarray(R, np.float64).reshape(-1, 1),
                               positional_encode(r, self.cfg.n_freq), ndv], axis=1).astype(np.float32)

    def decode_specular(self, f, R, normals, views) -> np.ndarray:
        f = self._clamp_features(f)
        x = np.concatenate([f, self.spec_aux(R, normals, views)], axis=1)
        return expm1_radiance(evaluate(self.dec["decI"], [x], self.params)[0])

    # -- image-level API -----------------------------------------------------------
    def encode_images(self, E: np.ndarray) -> np.ndarray:
        """E (n, H, W, C, 3) -> features (n, F, H, W)."""
        n, h, w = E.shape[:3]
        f = self.encode_env(E.reshape(n * h * w, E.shape[3], 3))
        return np.moveaxis(f.reshape(n, h, w, -1), -1, 1)

    def decode_env_images(self, f: np.ndarray) -> np.ndarray:
        n, F, h, w = f.shape
        e = self.decode_env(np.moveaxis(f, 1, -1).reshape(-1, F))
        return e.reshape(n, h, w, self.cfg.n_dirs, 3)

    def neural_render(self, f, A, R, N, V) -> np.ndarray:
        """I = A * S(f) + I_s(f, R, gamma(r), n.v) for image stacks (n, ., H, W)."""
        n, F, h, w = f.shape
        if A.shape != (n, 3, h, w) or N.shape != (n, 3, h, w) or R.shape != (n, h, w):
            raise ValueError("neural_render inputs are not aligned")
        if V.ndim == 3:
            V = np.broadcast_to(V, N.shape)
        fp = np.moveaxis(f, 1, -1).reshape(-1, F)
        normals = np.moveaxis(N, 1, -1).reshape(-1, 3)
        views = np.moveaxis(V, 1, -1).reshape(-1, 3)
        S = self.decode_shading(fp)
        I_s = self.decode_specular(fp, R.reshape(-1), normals, views)
        S_img = np.moveaxis(S.reshape(n, h, w, 3), -1, 1)
        Is_img = np.moveaxis(I_s.reshape(n, h, w, 3), -1, 1)
        return A * S_img + Is_img


# -- training -----------------------------------------------------------------------

@dataclass
class PixelSet:
    env: np.ndarray  # (P, C, 3)
    S: np.ndarray
    I_s: np.ndarray
    A: np.ndarray
    I: np.ndarray
    R: np.ndarray  # (P,)
    normals: np.ndarray
    views: np.ndarray

    def __len__(self):
        return self.env.shape[0]

    @classmethod
    def from_scenes(cls, sc: SceneTensors, V: np.ndarray) -> "PixelSet":
        def pix(x):
            return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])
        n = len(sc)
        return cls(env=sc.E.reshape(-1, sc.E.shape[-2], 3), S=pix(sc.S), I_s=pix(sc.I_s),
                   A=pix(sc.A), I=pix(sc.I), R=sc.R.reshape(-1), normals=pix(sc.N),
                   views=pix(np.broadcast_to(V, (n,) + V.shape)))


class TrainingDiverged(RuntimeError):
    pass


def train_ilr(pixels: PixelSet, cfg: IlrConfig, rng: np.random.Generator,
              progress=None) -> tuple[Ilr, list[float]]:
    """Jointly fit encoder and the three decoders; returns the model and loss history."""
    model = Ilr(cfg, init_params(cfg, rng))
    params = model.params
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    quad = scenes.hemisphere_quadrature(cfg.n_dirs)
    history: list[float] = []
    P = len(pixels)
    initial = None
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(P, size=min(cfg.batch, P), replace=False))
        env = pixels.env[idx]
        R = pixels.R[idx]
        R_rand = rng.uniform(0.0, 1.0, size=R.shape)
        normals, views = pixels.normals[idx], pixels.views[idx]
        sw = scenes.specular_weights(R_rand, normals.astype(np.float64), views.astype(np.float64), quad)
        is_rand = np.einsum("pcz,pc->pz", env.astype(np.float64), sw)
        feed = {
            "env_log": np.log1p(env).reshape(len(idx), -1).astype(np.float32),
            "spec_aux": model.spec_aux(R, normals, views),
            "spec_aux_rand": model.spec_aux(R_rand, normals, views),
            "t_env": np.log1p(env).reshape(len(idx), -1).astype(np.float32),
            "t_s": np.log1p(pixels.S[idx]).astype(np.float32),
            "t_is": np.log1p(pixels.I_s[idx]).astype(np.float32),
            "t_is_rand": np.log1p(is_rand).astype(np.float32),
            "albedo": pixels.A[idx].astype(np.float32),
            "image": pixels.I[idx].astype(np.float32),
        }
        trace = forward(model.train_graph, feed, params, training=True)
        loss = float(trace.output_values()[0])
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if initial is None:
            initial = loss
        elif loss > 10 * initial:
            raise TrainingDiverged(f"loss {loss:.4g} exceeds 10x initial {initial:.4g} at step {step}")
        grads = backprop(trace, params=params)
        adam_step(params, grads.params, state, lr=cosine_lr(cfg.lr, step, cfg.steps, warmup=100))
        for k, v in trace.buffer_updates.items():
            params[k] = v.astype(np.float32)
        history.append(loss)
        if progress is not None and (step % 200 == 0 or step == cfg.steps - 1):
            progress(step, loss)
    params.meta.update({"kind": "ilr", "config": asdict(cfg), "steps": cfg.steps})
    return model, history


def env_r2(model: Ilr, env: np.ndarray, batch: int = 65536) -> float:
    """Log-space R^2 of decode(encode(E)) against E over pixel rows (P, C, 3)."""
    y = np.log1p(env.reshape(env.shape[0], -1).astype(np.float64))
    sse = 0.0
    for lo in range(0, env.shape[0], batch):
        e = env[lo:lo + batch]
        rec = model.decode_env(model.encode_env(e)).reshape(e.shape[0], -1)
        sse += float(((np.log1p(rec) - y[lo:lo + batch]) ** 2).sum())
    sst = float(((y - y.mean(axis=0)) ** 2).sum())
    return 1.0 - sse / sst
