"""Per-group noise schedules.

Two families: a cosine schedule with a per-group exponent ``tau`` (larger
``tau`` keeps less signal at a given step, so that group is resolved later
when sampling), and the binary switching schedule used by the iterative
single-group refinement model.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

GROUPS = ("geometry", "material", "lighting")

CONTINUOUS = "continuous-cosine"
SDM_SWITCH = "sdm-switch"

# (alpha_G, alpha_M, alpha_L) for t mod 3 == 0, 1, 2
_SDM_PATTERN = ((1.0, 1.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 1.0))


@dataclass(frozen=True)
class GroupLayout:
    """Channel slices of the latent stack: geometry (N, D), material (A, R), lighting (f)."""

    geometry: tuple[int, int]
    material: tuple[int, int]
    lighting: tuple[int, int]

    @classmethod
    def for_features(cls, n_features: int) -> "GroupLayout":
        return cls((0, 4), (4, 8), (8, 8 + n_features))

    def __post_init__(self):
        spans = [self.geometry, self.material, self.lighting]
        if spans[0][0] != 0 or any(a[1] != b[0] for a, b in zip(spans, spans[1:])):
            raise ValueError(f"group ranges must be contiguous from 0: {spans}")
        if any(lo >= hi for lo, hi in spans):
            raise ValueError(f"empty group range in {spans}")

    @property
    def n_channels(self) -> int:
        return self.lighting[1]

    def spans(self) -> list[tuple[int, int]]:
        return [self.geometry, self.material, self.lighting]

    def expand(self, group_values) -> np.ndarray:
        """Broadcast per-group values (..., 3) to per-channel values (..., n_channels)."""
        group_values = np.asarray(group_values, dtype=np.float64)
        reps = [hi - lo for lo, hi in self.spans()]
        return np.repeat(group_values, reps, axis=-1)


@dataclass(frozen=True)
class ScheduleSpec:
    T: int
    taus: tuple[float, float, float] = (1.0, 1.0, 1.0)
    s: float = 0.008
    b: float = 1.0
    mode: str = CONTINUOUS

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not 0.0 <= self.s < self.b <= 1.0:
            raise ValueError(f"need 0 <= s < b <= 1, got s={self.s}, b={self.b}")
        if len(self.taus) != 3 or any(t <= 0 for t in self.taus):
            raise ValueError(f"taus must be three positive values, got {self.taus}")
        if self.mode not in (CONTINUOUS, SDM_SWITCH):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == SDM_SWITCH:
            check_sdm_T(self.T)


def check_sdm_T(T: int) -> None:
    if T != 1 and (T < 4 or (T - 1) % 3):
        raise ValueError(f"switching schedule needs T = 1 or T = 3n+1 (n >= 1), got {T}")


def alpha_bar_cosine(t_norm: float, tau: float, s: float = 0.008, b: float = 1.0) -> float:
    """Normalized cosine signal level at normalized time ``t_norm``.

    alpha = cos(((b - s) t + s) pi/2)^(2 tau), rescaled so that t=0 gives 1
    and t=1 gives 0 when b=1.
    """
    if not 0.0 <= t_norm <= 1.0:
        raise ValueError(f"t_norm must lie in [0, 1], got {t_norm}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return float(_alpha_bar_array(np.asarray(t_norm, dtype=np.float64), tau, s, b))


def _alpha_bar_array(t_norm: np.ndarray, tau: float, s: float, b: float) -> np.ndarray:
    half_pi = 0.5 * math.pi
    # clip tiny negative cosines from rounding at the b=1 endpoint
    v_s = max(math.cos(s * half_pi), 0.0) ** (2 * tau)
    v_b = max(math.cos(b * half_pi), 0.0) ** (2 * tau)
    alpha = np.maximum(np.cos(((b - s) * t_norm + s) * half_pi), 0.0) ** (2 * tau)
    return np.clip((v_b - alpha) / (v_b - v_s), 0.0, 1.0)


def sdm_alpha(t: int, T: int) -> tuple[float, float, float]:
    check_sdm_T(T)
    if not 0 <= t <= T - 1:
        raise ValueError(f"t={t} outside [0, {T - 1}]")
    if t == T - 1:
        return (0.0, 0.0, 0.0)
    return _SDM_PATTERN[t % 3]


@dataclass
class ScheduleTable:
    """alpha_bar[t, g] for integer t in [0, T-1] and groups (G, M, L)."""

    alpha_bar: np.ndarray
    spec: ScheduleSpec
    layout: GroupLayout | None = field(default=None)

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0]

    def channel_alphas(self, t) -> np.ndarray:
        """Per-channel alpha_bar for integer step(s) ``t`` -> (..., n_channels)."""
        if self.layout is None:
            raise ValueError("table has no group layout")
        return self.layout.expand(self.alpha_bar[np.asarray(t)])


def build_schedule(spec: ScheduleSpec, layout: GroupLayout | None = None) -> ScheduleTable:
    T = spec.T
    if spec.mode == SDM_SWITCH:
        table = np.array([sdm_alpha(t, T) for t in range(T)], dtype=np.float64)
    else:
        t_norm = np.arange(T, dtype=np.float64) / (T - 1) if T > 1 else np.ones(1)
        table = np.stack([_alpha_bar_array(t_norm, tau, spec.s, spec.b) for tau in spec.taus],
                         axis=1)
    return ScheduleTable(table, spec, layout)


def snr(alpha_bar: float) -> float:
    if alpha_bar >= 1.0:
        return math.inf
    return alpha_bar / (1.0 - alpha_bar)


def export_curves(table: ScheduleTable) -> list[tuple[int, str, float, float]]:
    rows = []
    for g, name in enumerate(GROUPS):
        for t in range(table.T):
            a = float(table.alpha_bar[t, g])
            rows.append((t, name, a, snr(a)))
    return rows


def curves_csv(table: ScheduleTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "group", "alpha_bar", "snr"])
    for t, g, a, r in export_curves(table):
        w.writerow([t, g, repr(a), "inf" if math.isinf(r) else repr(r)])
    return buf.getvalue()
