"""Scoring of sampled modality stacks and the three trend sweeps.

Errors are reported in native units (E in log1p space, I as the neural
re-render of the predicted modalities). Sample variance is measured in the
normalized latent space, per modality group of channels.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as dfn
from .schedule import GroupLayout

MODALITIES = ("N", "D", "A", "R", "E", "I")
# latent channel spans used for variance; E is represented by its features f
LATENT_SPANS = {"N": (0, 3), "D": (3, 4), "A": (4, 7), "R": (7, 8), "E": (8, None)}


@dataclass
class Decoded:
    N: np.ndarray
    D: np.ndarray
    A: np.ndarray
    R: np.ndarray
    E: np.ndarray
    I: np.ndarray | None = None


@dataclass
class MetricsRecord:
    mse: dict[str, float]
    variance: dict[str, float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in {**self.mse, **self.variance}.items():
            if not v >= 0:
                raise ValueError(f"metric {k} must be non-negative, got {v}")


def _sq_err(a, b) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return (a - b) ** 2


def _per_image(sq: np.ndarray) -> np.ndarray:
    return sq.reshape(sq.shape[0], -1).mean(axis=1)


def mse_per_modality(pred, truth, per_image: bool = False) -> dict:
    """MSE for every modality present on both sides; E compared after log1p."""
    out = {}
    for k in MODALITIES:
        p, t = getattr(pred, k, None), getattr(truth, k, None)
        if p is None or t is None:
            continue
        if k == "E":
            p, t = np.log1p(np.maximum(p, 0)), np.log1p(np.maximum(t, 0))
        sq = _sq_err(p, t)
        out[k] = _per_image(sq) if per_image else float(sq.mean())
    return out


def decode(mod: dfn.Modalities, ilr, V) -> Decoded:
    if ilr is None:
        raise ValueError("decoding predictions needs trained lighting parameters")
    E = ilr.decode_env_images(mod.f)
    I = ilr.neural_render(mod.f, mod.A, mod.R, mod.N, V)
    return Decoded(mod.N, mod.D, mod.A, mod.R, E, I)


def rerender_error(pred: dfn.Modalities, I_truth: np.ndarray, ilr, V) -> float:
    if ilr is None:
        raise ValueError("re-render error needs trained lighting parameters")
    I = ilr.neural_render(pred.f, pred.A, pred.R, pred.N, V)
    return float(_sq_err(I, I_truth).mean())


def _samples_array(samples) -> np.ndarray:
    s = samples.samples if isinstance(samples, dfn.SampleSet) else np.asarray(samples)
    if s.ndim != 5 or s.shape[1] < 1:
        raise ValueError("samples must be (n_images, K >= 1, C, H, W)")
    return s


def sample_variance(samples, per_image: bool = False) -> dict:
    """Unbiased across-sample variance per element, averaged per modality span."""
    s = _samples_array(samples)
    if s.shape[1] == 1:
        var = np.zeros((s.shape[0],) + s.shape[2:])
    else:
        var = s.astype(np.float64).var(axis=1, ddof=1)
    out = {}
    for k, (lo, hi) in LATENT_SPANS.items():
        part = var[:, lo:hi]
        out[k] = _per_image(part) if per_image else float(part.mean())
    return out


def pdm_aggregate(samples, truth, ilr, V, mode: str = "mean", layout: GroupLayout | None = None) -> MetricsRecord:
    """``mean`` scores the element-wise average sample; ``best`` picks, for every
    image and modality independently, the sample with the lowest error."""
    s = _samples_array(samples)
    n, K = s.shape[:2]
    var = sample_variance(s)
    if mode == "mean":
        mse = mse_per_modality(decode(dfn.unpack_modalities(s.mean(axis=1), layout), ilr, V), truth)
    elif mode == "best":
        per = [mse_per_modality(decode(dfn.unpack_modalities(s[:, k], layout), ilr, V), truth,
                                per_image=True) for k in range(K)]
        mse = {m: float(np.min(np.stack([p[m] for p in per]), axis=0).mean()) for m in per[0]}
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return MetricsRecord(mse, var, {"mode": mode, "K": K, "best_selection": "per-modality"})


@dataclass
class Correlation:
    r: float
    n: int
    defined: bool = True
    reason: str = ""


def variance_error_correlation(variance, error) -> Correlation:
    x = np.asarray(variance, np.float64).ravel()
    y = np.asarray(error, np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("variance and error lists differ in length")
    if x.size < 3:
        return Correlation(math.nan, int(x.size), False, "fewer than 3 images")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(math.nan, int(x.size), False, "zero-variance input")
    r = float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))
    return Correlation(r, int(x.size))


# -- sweep evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    mean: MetricsRecord
    best: MetricsRecord | None
    image_variance: np.ndarray  # per image, all latent channels
    image_error: np.ndarray  # per image, latent MSE of the mean sample


def evaluate_samples(samples, truth, z_truth: np.ndarray, ilr, V, best: bool = True) -> EvalResult:
    s = _samples_array(samples)
    mean = pdm_aggregate(s, truth, ilr, V, "mean")
    rec_best = pdm_aggregate(s, truth, ilr, V, "best") if best else None
    var = s.var(axis=1, ddof=1) if s.shape[1] > 1 else np.zeros((s.shape[0],) + s.shape[2:])
    err = (s.mean(axis=1) - z_truth) ** 2
    return EvalResult(mean, rec_best, _per_image(var), _per_image(err))


@dataclass
class SweepData:
    """Everything a sweep variant needs: packed latents, images, truth, lighting model."""

    z_train: np.ndarray
    I_train: np.ndarray
    z_test: np.ndarray
    I_test: np.ndarray
    truth: object  # SceneTensors of the test split
    ilr: object
    V: np.ndarray
    layout: GroupLayout


@dataclass
class Variant:
    label: str
    mode: str  # "pdm" | "sdm"
    T: int
    taus: tuple[float, float, float]
    seed: int
    steps: int  # sampler steps (PDM)


@dataclass
class VariantResult:
    variant: Variant
    result: EvalResult | None
    train_seconds: float
    sample_seconds: float
    final_loss: float
    error: str = ""


@dataclass
class SweepTable:
    kind: str
    rows: list[VariantResult]
    checks: dict[str, bool]
    detail: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["label", "mode", "T", "tau_G", "tau_M", "tau_L", "seed", "sampler_steps"]
        head += [f"mse_{m}" for m in MODALITIES] + [f"var_{m}" for m in LATENT_SPANS]
        head += ["final_loss", "error"]
        w.writerow(head)
        for r in self.rows:
            v = r.variant
            row = [v.label, v.mode, v.T, *v.taus, v.seed, v.steps]
            if r.result is None:
                row += [""] * (len(MODALITIES) + len(LATENT_SPANS))
            else:
                row += [f"{r.result.mean.mse[m]:.8g}" for m in MODALITIES]
                row += [f"{r.result.mean.variance[m]:.8g}" for m in LATENT_SPANS]
            row += [f"{r.final_loss:.8g}", r.error]
            w.writerow(row)
        return buf.getvalue()

    def timings(self) -> dict:
        """Wall-clock seconds per variant; kept out of the CSV so tables stay reproducible."""
        return {r.variant.label: {"train": r.train_seconds, "sample": r.sample_seconds} for r in self.rows}

    def summary(self) -> str:
        parts = [f"{k}={'PASS' if ok else 'FAIL'}" for k, ok in self.checks.items()]
        return f"{self.kind}: {'PASS' if self.passed else 'FAIL'} ({', '.join(parts)})"


@dataclass(frozen=True)
class SweepSettings:
    train: dfn.TrainConfig = field(default_factory=dfn.TrainConfig)
    model: object = None  # DenoiserConfig
    K: int = 10
    guidance: float = 1.5
    noise_policy: str = "fresh"
    sample_batch: int = 64


def train_variant(v: Variant, data: SweepData, settings: SweepSettings, cache: dict | None = None,
                  progress=None):
    """Train (or fetch from ``cache``) the model for one variant.

    Returns ``(model | None, table, loss_history, seconds, error)``. The cache key
    covers only what training sees, so sweeps that differ in sampler settings
    share models.
    """
    from .denoiser import Denoiser, DenoiserConfig
    from .rng import stream
    from .schedule import CONTINUOUS, SDM_SWITCH, ScheduleSpec, build_schedule

    mcfg = settings.model or DenoiserConfig(latent_channels=data.layout.n_channels)
    key = ("model", v.mode, v.T, tuple(v.taus), v.seed, settings.train, mcfg)
    if cache is not None and key in cache:
        return cache[key]
    spec = ScheduleSpec(v.T, tuple(v.taus), mode=SDM_SWITCH if v.mode == "sdm" else CONTINUOUS)
    table = build_schedule(spec, data.layout)
    model = Denoiser(mcfg, Denoiser.init_params(mcfg, stream(v.seed, "denoiser/init")))
    t0 = time.perf_counter()
    try:
        hist, _ = dfn.train_diffusion(model, data.z_train, data.I_train, table, settings.train,
                                      stream(v.seed, "denoiser/train"), progress=progress)
        out = (model, table, hist, time.perf_counter() - t0, None)
    except dfn.NonFiniteLoss as exc:
        out = (None, table, [], time.perf_counter() - t0, f"diverged: {exc}")
    if cache is not None:
        cache[key] = out
    return out


def run_variant(v: Variant, data: SweepData, settings: SweepSettings, cache: dict | None = None,
                progress=None) -> VariantResult:
    """Train one model from (seed, data) and score K samples per test image."""
    K = settings.K if v.mode == "pdm" else (1 if settings.noise_policy == "zeros" else settings.K)
    key = ("result", v.mode, v.T, tuple(v.taus), v.seed, v.steps, settings, K)
    if cache is not None and key in cache:
        return cache[key]
    model, table, hist, t_train, err = train_variant(v, data, settings, cache, progress)
    if model is None:
        res = VariantResult(v, None, t_train, 0.0, math.nan, err)
    else:
        t1 = time.perf_counter()
        ss = dfn.draw_samples(model, data.I_test, table, K=K, seed=v.seed, steps=v.steps,
                              guidance=settings.guidance, noise_policy=settings.noise_policy,
                              batch=settings.sample_batch)
        t2 = time.perf_counter()
        result = evaluate_samples(ss, data.truth, data.z_test, data.ilr, data.V, best=v.mode == "pdm")
        res = VariantResult(v, result, t_train, t2 - t1, float(np.mean(hist[-100:])))
        res.model = model
    if cache is not None:
        cache[key] = res
    return res


def _count_le(a: dict, b: dict, keys) -> int:
    return sum(1 for k in keys if a[k] <= b[k])


def tsweep_checks(rows: list[VariantResult]) -> tuple[dict, dict]:
    ok = [r for r in rows if r.result is not None]
    if len(ok) != len(rows):
        return {"all_variants_trained": False}, {}
    by_T = sorted(ok, key=lambda r: r.variant.T)
    var = {r.variant.T: r.result.mean.variance for r in by_T}
    Ts = [r.variant.T for r in by_T]
    mono = all(var[a][m] <= var[b][m] for a, b in zip(Ts, Ts[1:]) for m in LATENT_SPANS)
    low = max(var[Ts[0]].values()) < 1e-4
    lo_mse, hi_mse = by_T[0].result.mean.mse, by_T[-1].result.mean.mse
    wins = _count_le(lo_mse, hi_mse, MODALITIES)
    corr = variance_error_correlation(by_T[-1].result.image_variance, by_T[-1].result.image_error)
    checks = {"variance_non_decreasing": mono, "variance_T1_below_1e-4": low,
              "mse_lowT_wins_4_of_6": wins >= 4}
    detail = {"variance": var, "mse_wins": wins, "pearson_r_largest_T": corr.r,
              "pearson_defined": corr.defined}
    return checks, detail


def aggregate_normalized_error(mse: dict, baseline: dict, keys=MODALITIES) -> float:
    return float(np.mean([mse[k] / baseline[k] for k in keys]))


def order_checks(rows: list[VariantResult], forward: tuple, reverse: tuple) -> tuple[dict, dict]:
    seeds = sorted({r.variant.seed for r in rows})
    wins, scores = 0, {}
    refs = [r for r in rows if tuple(r.variant.taus) not in (tuple(forward), tuple(reverse))]
    if not refs or refs[0].result is None:
        return {"forward_order_wins_2_of_3": False}, {"scores": scores, "wins": wins}
    b = refs[0].result.mean.mse
    for s in seeds:
        get = {tuple(r.variant.taus): r for r in rows if r.variant.seed == s}
        fw, rv = get.get(tuple(forward)), get.get(tuple(reverse))
        if any(x is None or x.result is None for x in (fw, rv)):
            continue
        a_f = aggregate_normalized_error(fw.result.mean.mse, b)
        a_r = aggregate_normalized_error(rv.result.mean.mse, b)
        scores[s] = (a_f, a_r)
        wins += a_f < a_r
    need = (2 * len(seeds) + 2) // 3
    return {"forward_order_wins_2_of_3": wins >= need}, {"scores": scores, "wins": wins}


def sdm_checks(rows: list[VariantResult], keys=("N", "D", "A", "R", "E")) -> tuple[dict, dict]:
    get = {r.variant.T: r for r in rows}
    if any(r.result is None for r in rows) or 1 not in get or len(get) < 2:
        return {"all_variants_trained": False}, {}
    one = get[1].result.mean.mse
    out, detail = {}, {}
    for T, r in sorted(get.items()):
        if T == 1:
            continue
        wins = _count_le(r.result.mean.mse, one, keys)
        out[f"T{T}_le_T1_on_3_of_5"] = wins >= 3
        detail[f"T{T}_wins"] = wins
    return out, detail


def run_ablation(kind: str, data: SweepData, settings: SweepSettings, *, seeds=(0,),
                 Ts=(1, 8, 64), taus=((1.0, 1.0, 1.0), (0.9, 1.2, 1.5), (1.5, 1.2, 0.9)),
                 order_T: int = 64, sdm_Ts=(1, 4), tsweep_steps: int = 2, order_steps: int = 10,
                 sdm_train_steps: int | None = None, cache: dict | None = None,
                 progress=None) -> SweepTable:
    """Train and score every variant of one sweep; failed variants are flagged, not fatal.

    ``sdm_train_steps`` overrides the training length of the SDM variants only.
    """
    variants: list[Variant] = []
    if kind == "T-sweep":
        variants = [Variant(f"T={T}", "pdm", T, (1.0, 1.0, 1.0), seeds[0], min(tsweep_steps, T))
                    for T in Ts]
    elif kind == "tau-order":
        # the uniform reference only sets the per-modality scale, so one seed is enough
        variants = [Variant(f"tau={t}/seed={s}", "pdm", order_T, tuple(t), s, min(order_steps, order_T))
                    for s in seeds for i, t in enumerate(taus) if i > 0 or s == seeds[0]]
    elif kind == "sdm-steps":
        variants = [Variant(f"T={T}", "sdm", T, (1.0, 1.0, 1.0), seeds[0], T) for T in sdm_Ts]
        if sdm_train_steps is not None:
            settings = replace(settings, train=replace(settings.train, steps=sdm_train_steps))
    else:
        raise ValueError(f"unknown ablation {kind!r}")
    rows = []
    for v in variants:
        if progress is not None:
            progress(f"variant {v.label}")
        rows.append(run_variant(v, data, settings, cache))
    if kind == "T-sweep":
        checks, detail = tsweep_checks(rows)
    elif kind == "tau-order":
        checks, detail = order_checks(rows, taus[1], taus[2])
    else:
        checks, detail = sdm_checks(rows)
    return SweepTable(kind, rows, checks, detail)
