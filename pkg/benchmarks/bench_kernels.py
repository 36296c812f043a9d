"""Time the numba kernels against their numpy fallbacks, plus one denoiser
training step and one sampling pass at the default sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Numbers go to stdout as a small table; nothing is written to disk.
"""
import argparse
import time

import numpy as np

from cwdiff.numerics import kernels


def best_of(fn, repeat):
    fn()  # warm-up, also triggers JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((32, 16, 16, 24)).astype(np.float32)
    cols = kernels.im2col3x3_numpy(x)
    env = rng.random((2048 * 4, 16, 3)).astype(np.float32)
    cos_l = rng.random((2048 * 4, 16)).astype(np.float32)
    spec_w = rng.random((2048 * 4, 16)).astype(np.float32)
    h = rng.standard_normal((32, 16, 16, 48))
    gam, bet = np.ones(48), np.zeros(48)
    return {
        "im2col3x3": (lambda f: f(x), "im2col3x3"),
        "col2im3x3": (lambda f: f(cols), "col2im3x3"),
        "shade": (lambda f: f(env, cos_l, spec_w), "shade"),
        "groupnorm_fwd": (lambda f: f(h, gam, bet, 8, 1e-5), "groupnorm_fwd"),
    }


def model_cases(rng):
    from cwdiff import diffusion as dfn
    from cwdiff.denoiser import Denoiser, DenoiserConfig
    from cwdiff.numerics.optim import OptimizerState
    from cwdiff.schedule import GroupLayout, ScheduleSpec, build_schedule

    cfg = DenoiserConfig()
    model = Denoiser(cfg, Denoiser.init_params(cfg, rng))
    table = build_schedule(ScheduleSpec(64, (0.9, 1.2, 1.5)), GroupLayout.for_features(16))
    z = rng.uniform(-1, 1, (32, 24, 16, 16)).astype(np.float32)
    img = rng.gamma(1.0, 1.0, (32, 3, 16, 16)).astype(np.float32)
    state = OptimizerState(lr=1e-4)

    def train_step():
        dfn.train_step_pdm(model, (z, img), state, table, np.random.default_rng(0))

    def sample():
        dfn.ddim_sample_pdm(model, img, table, 10, 1.5, rng=np.random.default_rng(0))

    return {"train step (B=32)": train_step, "DDIM 10 steps, w=1.5 (B=32)": sample}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"backend: {kernels.backend()}")
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (call, stem) in kernel_cases(rng).items():
        t_np = best_of(lambda: call(getattr(kernels, f"{stem}_numpy")), args.repeat)
        if kernels.HAS_NUMBA:
            t_nb = best_of(lambda: call(getattr(kernels, f"{stem}_numba")), args.repeat)
            print(f"{name:<28}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<28}{t_np * 1e3:>12.2f}{'-':>12}{'-':>10}")

    print(f"\n{'end to end':<36}{'ms':>10}")
    for name, fn in model_cases(rng).items():
        print(f"{name:<36}{best_of(fn, max(1, args.repeat // 2)) * 1e3:>10.1f}")


if __name__ == "__main__":
    main()
