"""Channel-grouped diffusion over the packed modality stack.

Forward noising and velocity targets take a per-channel signal level, so one
code path serves both the continuous per-group cosine schedule (PDM) and the
binary switching schedule (SDM). Samplers talk to the network through two
methods, ``context(img_nhwc, null)`` and ``predict(t, T, z, img_nhwc, ctx)``,
which lets tests substitute an oracle.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import scenes
from .denoiser import cfg_combine, condition_image
from .numerics import NonFiniteGradient, OptimizerState, adam_step, cosine_lr
from .rng import stream
from .schedule import CONTINUOUS, SDM_SWITCH, GroupLayout, ScheduleTable

log = logging.getLogger(__name__)

NOISE_POLICIES = ("fresh", "zeros", "fixed-seed")


class NonFiniteLoss(FloatingPointError):
    pass


# -- packing ----------------------------------------------------------------------

@dataclass
class LatentStack:
    z: np.ndarray  # (B, C, H, W), channels N(3) D(1) A(3) R(1) f(F)
    layout: GroupLayout
    n_clamped: int = 0


@dataclass
class Modalities:
    """Denormalized predictions; E is recovered from ``f`` by the lighting decoder."""

    N: np.ndarray  # (B, 3, H, W) unit normals
    D: np.ndarray  # (B, H, W)
    A: np.ndarray  # (B, 3, H, W)
    R: np.ndarray  # (B, H, W)
    f: np.ndarray  # (B, F, H, W)


def pack_modalities(scene: scenes.SceneTensors, features: np.ndarray) -> LatentStack:
    """Normalize and stack (N, D, A, R, f) into [-1, 1]; out-of-range values are clamped."""
    n, _, h, w = scene.N.shape
    if features.shape[0] != n or features.shape[2:] != (h, w):
        raise ValueError(f"features {features.shape} do not match scenes {scene.N.shape}")
    d, n_d = scenes.normalize_depth(scene.D)
    parts = [scene.N, d[:, None], scenes.to_unit_range(scene.A),
             scenes.to_unit_range(scene.R)[:, None], features]
    z = np.concatenate([np.asarray(p, np.float64) for p in parts], axis=1)
    bad = int(np.count_nonzero(np.abs(z) > 1)) + n_d
    if bad:
        log.warning("clamped %d latent values into [-1, 1]", bad)
    z = np.clip(z, -1.0, 1.0).astype(np.float32)
    return LatentStack(z, GroupLayout.for_features(features.shape[1]), bad)


def unpack_modalities(stack: LatentStack | np.ndarray, layout: GroupLayout | None = None) -> Modalities:
    z = stack.z if isinstance(stack, LatentStack) else np.asarray(stack)
    layout = stack.layout if isinstance(stack, LatentStack) else layout
    if layout is None:
        layout = GroupLayout.for_features(z.shape[1] - 8)
    if z.shape[1] != layout.n_channels:
        raise ValueError(f"stack has {z.shape[1]} channels, layout expects {layout.n_channels}")
    bad = int(np.count_nonzero(np.abs(z) > 1))
    if bad:
        log.warning("clamped %d latent values into [-1, 1]", bad)
        z = np.clip(z, -1.0, 1.0)
    z = z.astype(np.float64)
    N = z[:, 0:3]
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    fallback = np.zeros_like(N)
    fallback[:, 2] = 1.0
    N = np.where(norm > 1e-6, N / np.maximum(norm, 1e-6), fallback)
    return Modalities(N=N, D=scenes.denormalize_depth(z[:, 3]), A=scenes.from_unit_range(z[:, 4:7]),
                      R=scenes.from_unit_range(z[:, 7]), f=z[:, 8:].astype(np.float32))


# -- forward process and velocity algebra ---------------------------------------------

def _channel_alphas(alphas, z: np.ndarray) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError("signal levels must lie in [0, 1]")
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != z.shape[1]:
        raise ValueError(f"{a.shape[-1]} signal levels for {z.shape[1]} channels")
    return a[:, :, None, None]


def forward_diffuse(z0, noise, alphas) -> np.ndarray:
    """Per channel c: sqrt(a_c) z0 + sqrt(1 - a_c) noise. ``alphas`` is (C,) or (B, C)."""
    if np.shape(noise) != np.shape(z0):
        raise ValueError("noise and data shapes differ")
    a = _channel_alphas(alphas, z0)
    out = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * noise
    return out.astype(np.result_type(z0, noise))


def velocity_target(z0, noise, alphas) -> np.ndarray:
    if np.shape(noise) != np.shape(z0):
        raise ValueError("noise and data shapes differ")
    a = _channel_alphas(alphas, z0)
    out = np.sqrt(a) * noise - np.sqrt(1.0 - a) * z0
    return out.astype(np.result_type(z0, noise))


def recover_x0_eps(z_t, v_hat, alphas) -> tuple[np.ndarray, np.ndarray]:
    a = _channel_alphas(alphas, z_t)
    sa, sb = np.sqrt(a), np.sqrt(1.0 - a)
    dt = np.result_type(z_t, v_hat)
    return (sa * z_t - sb * v_hat).astype(dt), (sb * z_t + sa * v_hat).astype(dt)


# -- training --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    warmup: int = 50
    lr_floor: float = 1e-5
    sdm_own_conditions: float = 1.0  # SDM only: share of elements conditioned on the model's own guess


def network_input(model, z_t: np.ndarray, alphas) -> np.ndarray:
    """z_t as the network sees it: channels at zero signal are zeroed when the
    model is configured to mask them."""
    if not getattr(model.cfg, "mask_zero_snr", False):
        return z_t
    a = np.asarray(alphas)
    a = a[None, :] if a.ndim == 1 else a
    return np.where(a[:, :, None, None] == 0.0, 0.0, z_t).astype(z_t.dtype)


def _draw_step(table: ScheduleTable, z0: np.ndarray, rng: np.random.Generator, drop: float):
    B = z0.shape[0]
    t = rng.integers(0, table.T, size=B)
    alphas = table.channel_alphas(t)
    noise = rng.standard_normal(z0.shape).astype(np.float32)
    keep = rng.random(B) >= drop
    return t, alphas, noise, keep


def _apply(model, loss, grads, opt: OptimizerState, lr):
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss}")
    try:
        adam_step(model.params, grads, opt, lr=lr)
    except NonFiniteGradient as exc:
        raise NonFiniteLoss(str(exc)) from exc
    return loss


def train_step_pdm(model, batch: tuple[np.ndarray, np.ndarray], opt: OptimizerState,
                   table: ScheduleTable, rng: np.random.Generator, lr: float | None = None) -> float:
    """One optimizer step on the velocity loss; ``batch`` is (z0 (B,C,H,W), I_L (B,3,H,W))."""
    if table.spec.mode != CONTINUOUS:
        raise ValueError("train_step_pdm needs a continuous schedule")
    z0, I_L = batch
    t, alphas, noise, keep = _draw_step(table, z0, rng, model.cfg.cfg_drop)
    z_t = forward_diffuse(z0, noise, alphas)
    v = velocity_target(z0, noise, alphas)
    loss, grads, _ = model.loss_and_grads(t, table.T, network_input(model, z_t, alphas),
                                          condition_image(I_L), keep, v)
    return _apply(model, loss, grads, opt, lr)


def sdm_loss_mask(table: ScheduleTable, t) -> np.ndarray:
    """1 on channels whose group sits at zero signal for step(s) t, else 0."""
    return (table.channel_alphas(t) == 0.0).astype(np.float32)


def _joint_guess(model, I_L: np.ndarray, table: ScheduleTable, keep) -> np.ndarray:
    """The first SDM prediction (all groups at zero signal), without gradients."""
    T = table.T
    a = table.channel_alphas(T - 1)
    z = np.zeros((I_L.shape[0], table.layout.n_channels) + I_L.shape[2:], np.float32)
    img = condition_image(I_L)
    v = model.predict(T - 1, T, network_input(model, z, a), img, model.context(img, ~np.asarray(keep)))
    return np.clip(-v, -1.0, 1.0)


def train_step_sdm(model, batch: tuple[np.ndarray, np.ndarray], opt: OptimizerState,
                   table: ScheduleTable, rng: np.random.Generator, lr: float | None = None,
                   own_conditions: float = 0.0) -> float:
    """Velocity loss restricted to the zero-signal groups of each element's step.

    With probability ``own_conditions`` an element's clean condition groups are
    replaced by the model's own joint prediction, which is what sampling feeds
    back at every re-prediction step.
    """
    if table.spec.mode != SDM_SWITCH:
        raise ValueError("train_step_sdm needs the switching schedule")
    z0, I_L = batch
    t, alphas, noise, keep = _draw_step(table, z0, rng, model.cfg.cfg_drop)
    z_t = forward_diffuse(z0, noise, alphas)
    if own_conditions > 0:
        swap = (rng.random(z0.shape[0]) < own_conditions) & (t < table.T - 1)
        if swap.any():
            guess = _joint_guess(model, I_L[swap], table, keep[swap])
            z_t[swap] = np.where(alphas[swap][:, :, None, None] == 1.0, guess, z_t[swap])
    v = velocity_target(z0, noise, alphas)
    mask = sdm_loss_mask(table, t)
    loss, grads, _ = model.loss_and_grads(t, table.T, network_input(model, z_t, alphas),
                                          condition_image(I_L), keep, v, mask)
    return _apply(model, loss, grads, opt, lr)


def train_diffusion(model, z0: np.ndarray, I_L: np.ndarray, table: ScheduleTable, cfg: TrainConfig,
                    rng: np.random.Generator, progress=None, opt: OptimizerState | None = None,
                    start: int = 0) -> tuple[list[float], OptimizerState]:
    step_fn = train_step_sdm if table.spec.mode == SDM_SWITCH else train_step_pdm
    opt = opt or OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    n = z0.shape[0]
    for step in range(start, cfg.steps):
        idx = np.sort(rng.choice(n, size=min(cfg.batch, n), replace=False))
        lr = cosine_lr(cfg.lr, step, cfg.steps, warmup=cfg.warmup, floor=cfg.lr_floor)
        extra = {"own_conditions": cfg.sdm_own_conditions} if step_fn is train_step_sdm else {}
        loss = step_fn(model, (z0[idx], I_L[idx]), opt, table, rng, lr=lr, **extra)
        history.append(loss)
        if progress is not None and (step % 100 == 0 or step == cfg.steps - 1):
            progress(step, loss)
    return history, opt


# -- sampling ------------------------------------------------------------------------

class _Guided:
    """Conditional and null contexts for a batch of images, plus the CFG mix."""

    def __init__(self, model, I_L: np.ndarray, w: float):
        if I_L.ndim != 4 or I_L.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image, got {I_L.shape}")
        self.model = model
        self.w = float(w)
        self.img = condition_image(I_L)
        B = I_L.shape[0]
        self.ctx = model.context(self.img, np.zeros(B, bool))
        self.null = model.context(self.img, np.ones(B, bool)) if self.w != 1.0 else None

    def velocity(self, t: int, T: int, z: np.ndarray, alphas) -> np.ndarray:
        z = network_input(self.model, z, alphas)
        if self.null is None:
            return self.model.predict(t, T, z, self.img, self.ctx)
        both = self.model.predict(t, T, np.concatenate([z, z]), np.concatenate([self.img, self.img]),
                                  np.concatenate([self.ctx, self.null]))
        B = z.shape[0]
        return cfg_combine(both[:B], both[B:], self.w)


def ddim_grid(T: int, steps: int) -> list[int]:
    """Descending timesteps from T-1 to 0; the model runs at all but the last entry.

    Trailing spacing: the points sit at T - i*T/steps - 1, so the grid always starts
    at the zero-SNR step and the stride is the same for every T. The final jump
    lands on t = 0, where alpha_bar is exactly 1.
    """
    if steps < 1:
        raise ValueError("need at least one sampling step")
    if steps > T:
        raise ValueError(f"{steps} sampling steps exceed T={T}")
    grid = np.round(T - np.arange(steps) * (T / steps)).astype(int) - 1
    return [int(t) for t in dict.fromkeys([*grid.tolist(), 0])]


def ddim_sample_pdm(model, I_L: np.ndarray, table: ScheduleTable, steps: int, guidance: float = 1.5,
                    rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """Deterministic (eta = 0) sampler; starts from ``noise`` or a draw from ``rng``."""
    grid = ddim_grid(table.T, steps)
    C = table.layout.n_channels
    shape = (I_L.shape[0], C) + I_L.shape[2:]
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit start noise")
        noise = rng.standard_normal(shape)
    z = np.asarray(noise, np.float32).reshape(shape)
    guided = _Guided(model, I_L, guidance)
    evals = grid[:-1] if len(grid) > 1 else grid
    for i, t in enumerate(evals):
        a = table.channel_alphas(t)
        v = guided.velocity(t, table.T, z, a)
        x0, eps = recover_x0_eps(z, v, a)
        if i + 1 < len(evals):
            z = forward_diffuse(x0, eps, table.channel_alphas(grid[i + 1]))
        else:
            z = x0
    return np.clip(z, -1.0, 1.0)


@dataclass
class NoiseSource:
    """Noise for the switching sampler under one of the three policies.

    ``fresh`` draws a new tensor per step, ``fixed-seed`` reuses one tensor
    for every step, ``zeros`` feeds zeros (including the initial state).
    """

    policy: str
    rngs: list[np.random.Generator] = field(default_factory=list)
    _fixed: np.ndarray | None = None

    def __post_init__(self):
        if self.policy not in NOISE_POLICIES:
            raise ValueError(f"unknown noise policy {self.policy!r}; pick one of {NOISE_POLICIES}")

    def draw(self, shape) -> np.ndarray:
        if self.policy == "zeros":
            return np.zeros(shape, np.float32)
        if self.policy == "fixed-seed" and self._fixed is not None:
            return self._fixed
        if not self.rngs:
            raise ValueError(f"policy {self.policy!r} needs random streams")
        per = shape[1:]
        out = np.stack([r.standard_normal(per) for r in self.rngs]).astype(np.float32)
        if self.policy == "fixed-seed":
            self._fixed = out
        return out


def sdm_sample(model, I_L: np.ndarray, table: ScheduleTable, noise: NoiseSource | str = "fresh",
               rng: np.random.Generator | None = None, guidance: float = 1.5) -> np.ndarray:
    """Joint prediction at t = T-1, then one group re-predicted per step down to t = 0."""
    if table.spec.mode != SDM_SWITCH:
        raise ValueError("sdm_sample needs the switching schedule")
    if isinstance(noise, str):
        rngs = [] if rng is None else [rng]
        if noise != "zeros" and I_L.shape[0] > 1 and rng is not None:
            rngs = [stream(int(rng.integers(2**63)), f"sdm/{i}") for i in range(I_L.shape[0])]
        noise = NoiseSource(noise, rngs)
    T = table.T
    shape = (I_L.shape[0], table.layout.n_channels) + I_L.shape[2:]
    guided = _Guided(model, I_L, guidance)
    z = noise.draw(shape)
    current = -guided.velocity(T - 1, T, z, table.channel_alphas(T - 1))
    for t in range(T - 2, -1, -1):
        a = table.channel_alphas(t)[None, :, None, None]
        z = np.where(a == 1.0, current, noise.draw(shape)).astype(np.float32)
        a_t = table.channel_alphas(t)
        x0, _ = recover_x0_eps(z, guided.velocity(t, T, z, a_t), a_t)
        current = np.where(a == 0.0, x0, current)
    return np.clip(current, -1.0, 1.0)


# -- sample sets ------------------------------------------------------------------------

@dataclass
class SampleSet:
    samples: np.ndarray  # (n_images, K, C, H, W)
    mode: str
    T: int
    steps: int
    seed: int
    noise_policy: str | None = None

    def __post_init__(self):
        if self.samples.ndim != 5 or self.samples.shape[1] < 1:
            raise ValueError("samples must be (n_images, K >= 1, C, H, W)")

    @property
    def K(self) -> int:
        return self.samples.shape[1]


def _sample_rngs(seed: int, first: int, n: int, k: int, tag: str) -> list[np.random.Generator]:
    return [stream(seed, f"{tag}/{first + i}/{k}") for i in range(n)]


def draw_samples(model, I_L: np.ndarray, table: ScheduleTable, *, K: int, seed: int,
                 steps: int = 10, guidance: float = 1.5, noise_policy: str = "fresh",
                 batch: int = 64, first_index: int = 0) -> SampleSet:
    """K samples per image. Each (image, sample) pair owns a random stream derived
    from (seed, image index, sample index), so chunking does not change the draw."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n = I_L.shape[0]
    C = table.layout.n_channels
    sdm = table.spec.mode == SDM_SWITCH
    out = np.empty((n, K, C) + I_L.shape[2:], np.float32)
    per = max(1, batch)
    for k in range(K):
        for lo in range(0, n, per):
            hi = min(n, lo + per)
            rngs = _sample_rngs(seed, first_index + lo, hi - lo, k, "sample")
            if sdm:
                src = NoiseSource(noise_policy, rngs)
                out[lo:hi, k] = sdm_sample(model, I_L[lo:hi], table, src, guidance=guidance)
            else:
                z = np.stack([r.standard_normal((C,) + I_L.shape[2:]) for r in rngs])
                out[lo:hi, k] = ddim_sample_pdm(model, I_L[lo:hi], table, min(steps, table.T),
                                                guidance, noise=z)
    return SampleSet(out, "sdm" if sdm else "pdm", table.T, table.T if sdm else min(steps, table.T),
                     seed, noise_policy if sdm else None)
