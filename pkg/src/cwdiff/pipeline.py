"""Stage helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diffusion as dfn
from . import lighting, scenes
from .checkpoint import Checkpoint, load_checkpoint, rng_state, save_checkpoint
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig
from .evalharness import SweepData, SweepSettings, SweepTable, run_ablation
from .rng import stream

log = logging.getLogger(__name__)


def make_dataset(cfg: RunConfig) -> dict[str, scenes.SceneTensors]:
    sc = cfg.scene_config()
    d = cfg.raw["data"]
    return {split: scenes.make_split(cfg.seed, split, d[split], sc) for split in ("train", "test")}


def write_dataset(cfg: RunConfig, splits, path) -> dict:
    seeds = {k: scenes.scene_seeds(cfg.seed, k, len(v)) for k, v in splits.items()}
    return scenes.write_dataset(splits, path, seed=cfg.seed, config=cfg.scene_config(), seeds=seeds)


def views_for(sc: scenes.SceneConfig) -> np.ndarray:
    return scenes.view_dirs(sc.height, sc.width, sc.fov_deg)


def train_lighting(cfg: RunConfig, train: scenes.SceneTensors, progress=None) -> lighting.Ilr:
    V = views_for(cfg.scene_config())
    pixels = lighting.PixelSet.from_scenes(train, V)
    model, _ = lighting.train_ilr(pixels, cfg.ilr_config(), stream(cfg.seed, "ilr/train"), progress)
    return model


def save_ilr(path, model: lighting.Ilr, steps: int) -> str:
    return save_checkpoint(path, Checkpoint("ilr", asdict(model.cfg), model.params, steps))


def load_ilr(path) -> lighting.Ilr:
    ck = load_checkpoint(path, "ilr")
    return lighting.Ilr(lighting.IlrConfig.from_dict(ck.config), ck.params)


def save_denoiser(path, model: Denoiser, step: int, schedule: dict, rng=None) -> str:
    config = {"model": asdict(model.cfg), "schedule": schedule}
    return save_checkpoint(path, Checkpoint("denoiser", config, model.params, step,
                                            rng_state(rng) if rng is not None else None))


def load_denoiser(path) -> tuple[Denoiser, dict]:
    ck = load_checkpoint(path, "denoiser")
    cfg = DenoiserConfig.from_dict(ck.config["model"])
    return Denoiser(cfg, ck.params), ck.config["schedule"]


def ilr_quality(model: lighting.Ilr, test: scenes.SceneTensors, V: np.ndarray) -> dict:
    """Held-out log-space R^2, plus two image errors against the true I: the neural
    re-render from true modalities, and the quadrature render of the decoded env maps."""
    from .evalharness import rerender_error

    f = model.encode_images(test.E)
    r2 = lighting.env_r2(model, test.E.reshape(-1, test.E.shape[-2], 3))
    neural = rerender_error(dfn.Modalities(test.N, test.D, test.A, test.R, f), test.I, model, V)
    quad = scenes.hemisphere_quadrature(model.cfg.n_dirs)
    rec_img = scenes.render(test.A, test.R, test.N, model.decode_env_images(f), V, quad)[0]
    recon = float(np.mean((rec_img - test.I) ** 2))
    return {"env_r2_log": r2, "neural_rerender_mse": neural, "reconstruction_render_mse": recon}


def latents(ilr: lighting.Ilr, sc: scenes.SceneTensors) -> np.ndarray:
    return dfn.pack_modalities(sc, ilr.encode_images(sc.E)).z


def sweep_data(cfg: RunConfig, splits, ilr: lighting.Ilr) -> SweepData:
    tr, te = splits["train"], splits["test"]
    return SweepData(latents(ilr, tr), tr.I.astype(np.float32), latents(ilr, te),
                     te.I.astype(np.float32), te, ilr, views_for(cfg.scene_config()), cfg.layout())


def load_splits(path) -> dict[str, scenes.SceneTensors]:
    splits, _ = scenes.read_dataset(Path(path))
    return splits


def sweep_settings(cfg: RunConfig) -> SweepSettings:
    s, ab = cfg.raw["sampler"], cfg.raw["ablation"]
    return SweepSettings(train=cfg.train_config(), model=cfg.model_config(), K=s["K"],
                         guidance=ab["guidance"], noise_policy=s["noise_policy"], sample_batch=s["batch"])


def run_sweep(cfg: RunConfig, kind: str, data: SweepData, cache: dict | None = None,
              progress=None) -> SweepTable:
    """One trend sweep with every knob taken from ``cfg``; the order sweep runs all
    configured seeds, the others only the root seed."""
    ab = cfg.raw["ablation"]
    seeds = ab["seeds"] if kind == "tau-order" else [cfg.seed]
    return run_ablation(kind, data, sweep_settings(cfg), seeds=seeds, Ts=ab["T_values"],
                        taus=[tuple(t) for t in ab["taus"]], order_T=ab["order_T"],
                        sdm_Ts=ab["sdm_T_values"], tsweep_steps=ab["tsweep_steps"],
                        order_steps=ab["order_steps"], sdm_train_steps=ab["sdm_train_steps"],
                        cache=cache, progress=progress)
