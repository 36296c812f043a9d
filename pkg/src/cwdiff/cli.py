"""Command-line entry point: ``cwdiff <command> [--config PATH] [--out DIR] ...``.

Every command writes into a fresh run directory (``--out`` or
``$CWDIFF_OUT/<command>-seed<N>``) containing ``config.yaml``, the command's
outputs and a ``result.json`` summary. Progress goes to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
from pathlib import Path

log = logging.getLogger("cwdiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CHECKSUM = 5
EXIT_DIVERGED = 6
EXIT_OUTPUT_EXISTS = 7
EXIT_CHECK_FAILED = 8

OUT_ENV = "CWDIFF_OUT"


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
    common.add_argument("--out", type=Path, help="run directory (must be new or empty)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--threads", type=int, help="BLAS/numba thread count (1 = reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cwdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-scenes", parents=[common], help="generate the procedural dataset")

    s = sub.add_parser("train-ilr", parents=[common], help="train the lighting autoencoder")
    s.add_argument("--dataset", type=Path)

    s = sub.add_parser("train-diffusion", parents=[common], help="train a PDM or SDM denoiser")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--ilr", type=Path, help="lighting checkpoint (.json)")
    s.add_argument("--mode", choices=["pdm", "sdm"])
    s.add_argument("--T", type=int)

    s = sub.add_parser("sample", parents=[common], help="draw K samples per test image")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--denoiser", type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--count", type=int, help="number of images (default: whole split)")
    s.add_argument("--K", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--noise-policy", choices=["fresh", "zeros", "fixed-seed"])
    s.add_argument("--mode", choices=["pdm", "sdm"], help="must match the checkpoint if given")

    s = sub.add_parser("render", parents=[common], help="neural re-render of modalities")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--ilr", type=Path)
    s.add_argument("--samples", type=Path, help="samples.bin from `sample`; ground truth if omitted")
    s.add_argument("--split", default="test")

    s = sub.add_parser("eval", parents=[common], help="score samples against ground truth")
    s.add_argument("--dataset", type=Path)
    s.add_argument("--ilr", type=Path)
    s.add_argument("--samples", type=Path)
    s.add_argument("--split", default="test")

    s = sub.add_parser("ablate", parents=[common], help="run one trend sweep")
    s.add_argument("--kind", required=True, choices=["T-sweep", "tau-order", "sdm-steps"])
    s.add_argument("--dataset", type=Path)
    s.add_argument("--ilr", type=Path)

    s = sub.add_parser("plot-schedule", parents=[common], help="export per-group alpha-bar curves")
    s.add_argument("--T", type=int)
    s.add_argument("--taus", type=float, nargs=3)
    s.add_argument("--mode", choices=["pdm", "sdm"])

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--coords", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-4)
    return p


# -- run directory ---------------------------------------------------------------

class Run:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        root = Path(os.environ.get(OUT_ENV, "runs"))
        self.dir = args.out or root / f"{args.command}-seed{cfg.seed}"
        if self.dir.exists() and any(self.dir.iterdir()):
            raise CliError(EXIT_OUTPUT_EXISTS, f"run directory {self.dir} exists and is not empty")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        self.metrics: dict = {}
        self.t0 = time.perf_counter()
        from .tensorio import atomic_write

        atomic_write(self.dir / "config.yaml", cfg.dump())

    def path(self, name: str) -> Path:
        return self.dir / name

    def record(self, name: str, digest: str | None = None) -> None:
        from .tensorio import sha256

        self.outputs[name] = digest or sha256(self.path(name).read_bytes())

    def write_text(self, name: str, text: str) -> None:
        from .tensorio import atomic_write

        atomic_write(self.path(name), text)
        self.record(name)

    def finish(self, status: str = "ok", **extra) -> dict:
        import numpy as np

        from . import __version__
        from .numerics import kernels
        from .tensorio import write_json

        result = {
            "command": self.args.command,
            "status": status,
            "seed": self.cfg.seed,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "versions": {"cwdiff": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "backend": kernels.backend()},
            **extra,
        }
        write_json(self.path("result.json"), result)
        write_json(self.path("timing.json"), {"seconds": round(time.perf_counter() - self.t0, 3)})
        return result


def _need(path, what: str, cfg_key: str | None = None, cfg=None) -> Path:
    if path is None and cfg is not None and cfg_key:
        path = cfg.raw["paths"].get(cfg_key)
    if path is None:
        raise CliError(EXIT_MISSING, f"missing required input: {what}")
    path = Path(path)
    if not path.exists() and path.with_suffix(".json").exists():
        path = path.with_suffix(".json")  # checkpoint given by stem
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return path


def _progress(label):
    def report(step, loss):
        log.info("%s step %d loss %.5f", label, step, loss)
    return report


# -- commands ----------------------------------------------------------------------

def cmd_gen_scenes(run: Run):
    from . import pipeline

    splits = pipeline.make_dataset(run.cfg)
    manifest = pipeline.write_dataset(run.cfg, splits, run.path("dataset"))
    for name, info in manifest["blobs"].items():
        run.outputs[f"dataset/{info['file']}"] = info["sha256"]
    run.metrics["counts"] = manifest["counts"]


def cmd_train_ilr(run: Run):
    from . import pipeline

    splits = pipeline.load_splits(_need(run.args.dataset, "dataset", "dataset", run.cfg))
    model = pipeline.train_lighting(run.cfg, splits["train"], _progress("ilr"))
    digest = pipeline.save_ilr(run.path("ilr"), model, model.cfg.steps)
    run.record("ilr.bin", digest)
    run.record("ilr.json")
    V = pipeline.views_for(run.cfg.scene_config())
    run.metrics.update(pipeline.ilr_quality(model, splits["test"], V))
    run.write_text("metrics.csv", "metric,value\n" + "".join(
        f"{k},{v:.8g}\n" for k, v in sorted(run.metrics.items())))


def cmd_train_diffusion(run: Run):
    import numpy as np

    from . import diffusion as dfn
    from . import pipeline
    from .denoiser import Denoiser
    from .rng import stream
    from .schedule import build_schedule

    a = run.args
    splits = pipeline.load_splits(_need(a.dataset, "dataset", "dataset", run.cfg))
    ilr = pipeline.load_ilr(_need(a.ilr, "lighting checkpoint", "ilr", run.cfg))
    spec = run.cfg.schedule_spec(a.mode, a.T)
    table = build_schedule(spec, run.cfg.layout())
    z = pipeline.latents(ilr, splits["train"])
    mcfg = run.cfg.model_config()
    model = Denoiser(mcfg, Denoiser.init_params(mcfg, stream(run.cfg.seed, "denoiser/init")))
    rng = stream(run.cfg.seed, "denoiser/train")
    try:
        hist, _ = dfn.train_diffusion(model, z, splits["train"].I.astype(np.float32), table,
                                      run.cfg.train_config(), rng, progress=_progress("denoiser"))
    except dfn.NonFiniteLoss as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from exc
    sched = {"mode": "sdm" if spec.mode == "sdm-switch" else "pdm", "T": spec.T,
             "taus": list(spec.taus), "s": spec.s, "b": spec.b,
             "n_features": run.cfg.raw["lighting"]["n_features"]}
    digest = pipeline.save_denoiser(run.path("denoiser"), model, len(hist), sched, rng)
    run.record("denoiser.bin", digest)
    run.record("denoiser.json")
    run.write_text("loss.csv", "step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(hist)))
    run.metrics["final_loss"] = float(np.mean(hist[-100:]))


def _table_from(sched: dict):
    from .schedule import CONTINUOUS, SDM_SWITCH, GroupLayout, ScheduleSpec, build_schedule

    spec = ScheduleSpec(sched["T"], tuple(sched["taus"]), sched["s"], sched["b"],
                        SDM_SWITCH if sched["mode"] == "sdm" else CONTINUOUS)
    return build_schedule(spec, GroupLayout.for_features(sched["n_features"]))


def cmd_sample(run: Run):
    import numpy as np

    from . import diffusion as dfn
    from . import pipeline
    from .tensorio import write_blob

    a, s = run.args, run.cfg.raw["sampler"]
    splits = pipeline.load_splits(_need(a.dataset, "dataset", "dataset", run.cfg))
    model, sched = pipeline.load_denoiser(_need(a.denoiser, "denoiser checkpoint", "denoiser", run.cfg))
    if a.mode and a.mode != sched["mode"]:
        raise CliError(EXIT_CONFIG, f"--mode {a.mode} does not match the {sched['mode']} checkpoint")
    if a.split not in splits:
        raise CliError(EXIT_MISSING, f"dataset has no split {a.split!r}")
    table = _table_from(sched)
    I = splits[a.split].I[: a.count].astype(np.float32)
    ss = dfn.draw_samples(model, I, table, K=a.K or s["K"], seed=run.cfg.seed,
                          steps=a.steps or s["steps"],
                          guidance=s["guidance"] if a.guidance is None else a.guidance,
                          noise_policy=a.noise_policy or s["noise_policy"], batch=s["batch"])
    digest = write_blob(run.path("samples.bin"), {"samples": ss.samples})
    run.record("samples.bin", digest)
    run.metrics.update({"mode": ss.mode, "T": ss.T, "steps": ss.steps, "K": ss.K,
                        "noise_policy": ss.noise_policy, "n_images": int(I.shape[0])})


def _load_samples(path):
    from .tensorio import read_blob

    return read_blob(path)["samples"]


def cmd_render(run: Run):
    import numpy as np

    from . import diffusion as dfn
    from . import pipeline
    from .tensorio import write_blob

    a = run.args
    splits = pipeline.load_splits(_need(a.dataset, "dataset", "dataset", run.cfg))
    ilr = pipeline.load_ilr(_need(a.ilr, "lighting checkpoint", "ilr", run.cfg))
    sc = splits[a.split]
    V = pipeline.views_for(run.cfg.scene_config())
    if a.samples is not None:
        s = _load_samples(_need(a.samples, "samples"))
        mod = dfn.unpack_modalities(s.mean(axis=1), run.cfg.layout())
        sc = sc.subset(slice(0, s.shape[0]))
    else:
        mod = dfn.Modalities(sc.N, sc.D, sc.A, sc.R, ilr.encode_images(sc.E))
    img = ilr.neural_render(mod.f, mod.A, mod.R, mod.N, V)
    run.record("render.bin", write_blob(run.path("render.bin"), {"I": img}))
    run.metrics["rerender_mse"] = float(np.mean((img - sc.I) ** 2))


def cmd_eval(run: Run):
    from . import evalharness as ev
    from . import pipeline

    a = run.args
    splits = pipeline.load_splits(_need(a.dataset, "dataset", "dataset", run.cfg))
    ilr = pipeline.load_ilr(_need(a.ilr, "lighting checkpoint", "ilr", run.cfg))
    s = _load_samples(_need(a.samples, "samples"))
    sc = splits[a.split].subset(slice(0, s.shape[0]))
    z_truth = pipeline.latents(ilr, sc)
    res = ev.evaluate_samples(s, sc, z_truth, ilr, pipeline.views_for(run.cfg.scene_config()))
    corr = ev.variance_error_correlation(res.image_variance, res.image_error)
    lines = ["protocol," + ",".join(f"mse_{m}" for m in ev.MODALITIES) + "," +
             ",".join(f"var_{m}" for m in ev.LATENT_SPANS)]
    for rec in (res.mean, res.best):
        lines.append(rec.meta["mode"] + "," + ",".join(f"{rec.mse[m]:.8g}" for m in ev.MODALITIES)
                     + "," + ",".join(f"{rec.variance[m]:.8g}" for m in ev.LATENT_SPANS))
    run.write_text("metrics.csv", "\n".join(lines) + "\n")
    run.metrics.update({"pearson_variance_error": corr.r if corr.defined else None,
                        "pearson_note": corr.reason, "K": int(s.shape[1])})


def cmd_ablate(run: Run):
    from . import pipeline
    from .tensorio import write_json

    a = run.args
    splits = pipeline.load_splits(_need(a.dataset, "dataset", "dataset", run.cfg))
    ilr = pipeline.load_ilr(_need(a.ilr, "lighting checkpoint", "ilr", run.cfg))
    data = pipeline.sweep_data(run.cfg, splits, ilr)
    table = pipeline.run_sweep(run.cfg, a.kind, data, progress=log.info)
    name = a.kind.replace("-", "_")
    run.write_text(f"sweep_{name}.csv", table.csv())
    run.write_text("summary.txt", table.summary() + "\n")
    run.metrics.update({"checks": table.checks, "detail": _jsonable(table.detail)})
    write_json(run.path("sweep_timing.json"), table.timings())
    if not table.passed:
        raise CliError(EXIT_CHECK_FAILED, table.summary())


def _jsonable(x):
    import numpy as np

    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def cmd_plot_schedule(run: Run):
    from . import schedule as sch

    a = run.args
    spec = run.cfg.schedule_spec(a.mode, a.T)
    if a.taus:
        from dataclasses import replace

        spec = replace(spec, taus=tuple(a.taus))
    table = sch.build_schedule(spec)
    run.write_text("schedule.csv", sch.curves_csv(table))
    _plot_svg(table, run.path("schedule.svg"))
    run.record("schedule.svg")
    run.metrics.update({"T": spec.T, "taus": list(spec.taus), "rows": 3 * spec.T})


def _plot_svg(table, path: Path) -> None:
    import io

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .schedule import GROUPS
    from .tensorio import atomic_write

    matplotlib.rcParams["svg.hashsalt"] = "cwdiff"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for g, name in enumerate(GROUPS):
        tau = table.spec.taus[g]
        ax.plot(range(table.T), table.alpha_bar[:, g], label=f"{name} (tau={tau:g})")
    ax.set_xlabel("t")
    ax.set_ylabel("alpha_bar")
    ax.legend(frameon=False)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def cmd_gradcheck(run: Run):
    from .numerics.gradsuite import run_suite

    a = run.args
    reports = run_suite(run.cfg.seed, a.coords, a.tolerance)
    lines = ["op,max_rel_error,n_checked,passed"]
    for name, r in reports.items():
        lines.append(f"{name},{r.max_rel_error:.6e},{r.n_checked},{int(r.passed(a.tolerance))}")
    run.write_text("gradcheck.csv", "\n".join(lines) + "\n")
    worst = max(r.max_rel_error for r in reports.values())
    run.metrics.update({"max_rel_error": worst, "tolerance": a.tolerance})
    if worst >= a.tolerance:
        raise CliError(EXIT_CHECK_FAILED, f"gradient check failed: max relative error {worst:.3e}")


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train-ilr": cmd_train_ilr,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot-schedule": cmd_plot_schedule,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    _set_threads(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from .checkpoint import FormatError
    from .config import ConfigError, RunConfig
    from .tensorio import ChecksumError

    run = None
    try:
        try:
            overrides = {} if args.seed is None else {"seed": args.seed}
            if args.config is not None and not args.config.exists():
                raise CliError(EXIT_MISSING, f"config file not found: {args.config}")
            cfg = RunConfig.load(args.config, overrides)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from exc
        run = Run(args, cfg)
        COMMANDS[args.command](run)
        run.finish()
        log.info("wrote %s", run.dir)
        return EXIT_OK
    except CliError as exc:
        log.error("%s", exc)
        if run is not None:
            run.finish("error", error=str(exc), exit_code=exc.code)
        return exc.code
    except (ChecksumError, FormatError) as exc:
        log.error("integrity error: %s", exc)
        if run is not None:
            run.finish("error", error=str(exc), exit_code=EXIT_CHECKSUM)
        return EXIT_CHECKSUM
    except FileNotFoundError as exc:
        log.error("missing input: %s", exc)
        if run is not None:
            run.finish("error", error=str(exc), exit_code=EXIT_MISSING)
        return EXIT_MISSING


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
