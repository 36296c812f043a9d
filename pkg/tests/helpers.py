"""Test doubles for the diffusion samplers and small model factories."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cwdiff.denoiser import Denoiser, DenoiserConfig
from cwdiff.schedule import ScheduleTable


@dataclass(frozen=True)
class _Cfg:
    mask_zero_snr: bool = True
    cfg_drop: float = 0.0


class OracleModel:
    """Returns the exact velocity for known clean latents ``z0``.

    From z_t = sqrt(a) z0 + sqrt(1-a) eps it follows that
    v = (sqrt(a) z_t - z0) / sqrt(1-a) for a < 1; at a = 1 any v gives back z0
    so it returns 0 there. Also records every call.
    """

    def __init__(self, z0: np.ndarray, table: ScheduleTable, mask: bool = True):
        self.z0 = np.asarray(z0, np.float64)
        self.table = table
        self.cfg = _Cfg(mask)
        self.calls: list[tuple[int, np.ndarray]] = []

    def context(self, img, null=None):
        return np.zeros((img.shape[0], 1), np.float32)

    def predict(self, t, T, z, img, ctx):
        t = int(np.asarray(t).reshape(-1)[0])
        a = self.table.channel_alphas(t)[None, :, None, None]
        self.calls.append((t, z.copy()))
        B = z.shape[0]
        z0 = np.concatenate([self.z0] * (B // self.z0.shape[0]))
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (np.sqrt(a) * z - z0) / np.sqrt(1.0 - a)
        return np.where(a >= 1.0, 0.0, v).astype(np.float32)


def small_config(**kw) -> DenoiserConfig:
    base = dict(latent_channels=24, width=8, groups=4, temb_dim=8, ctx_dim=8)
    base.update(kw)
    return DenoiserConfig(**base)


def random_model(seed: int = 0, scale: float = 0.05, **kw) -> Denoiser:
    """Small denoiser with a perturbed (nonzero) output head."""
    cfg = small_config(**kw)
    params = Denoiser.init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for k in params.trainable():
        params[k] = params[k] + scale * rng.standard_normal(params[k].shape).astype(np.float32)
    return Denoiser(cfg, params)
