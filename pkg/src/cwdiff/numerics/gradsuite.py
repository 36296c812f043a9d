"""One tiny graph per differentiable op, each checked against central differences."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import GradCheckReport, Graph, ModelParams, grad_check


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _case_linear(rng):
    g = Graph()
    g.outputs = [g.linear(g.input("x", True), "l")]
    p = ModelParams({"l.w": rng.standard_normal((8, 6)), "l.b": rng.standard_normal(6)})
    return g, {"x": rng.standard_normal((6, 8))}, p, False


def _case_conv(rng):
    g = Graph()
    g.outputs = [g.conv(g.input("x", True), "c")]
    p = ModelParams({"c.w": rng.standard_normal((3, 3, 3, 4)) * 0.3, "c.b": rng.standard_normal(4)})
    return g, {"x": rng.standard_normal((2, 5, 4, 3))}, p, False


def _unary(kind, make_x, **attrs):
    def case(rng):
        g = Graph()
        g.outputs = [g.op(kind, g.input("x", True), **attrs)]
        return g, {"x": make_x(rng)}, ModelParams(), False
    return case


def _case_groupnorm(rng):
    g = Graph()
    g.outputs = [g.groupnorm(g.input("x", True), "n", 2)]
    p = ModelParams({"n.g": 1 + 0.3 * rng.standard_normal(4), "n.b": rng.standard_normal(4)})
    return g, {"x": rng.standard_normal((2, 4, 4, 4))}, p, False


def _batchnorm(training):
    def case(rng):
        g = Graph()
        g.outputs = [g.batchnorm(g.input("x", True), "bn")]
        p = ModelParams({"bn.g": 1 + 0.3 * rng.standard_normal(5), "bn.b": rng.standard_normal(5),
                         "bn.rm": rng.standard_normal(5), "bn.rv": rng.uniform(0.5, 2, 5)},
                        buffers=("bn.rm", "bn.rv"))
        return g, {"x": rng.standard_normal((20, 5))}, p, training
    return case


def _binary(kind, shape_b):
    def case(rng):
        g = Graph()
        g.outputs = [g.op(kind, g.input("a", True), g.input("b", True))]
        return g, {"a": rng.standard_normal((4, 5, 6)), "b": rng.standard_normal(shape_b)}, ModelParams(), False
    return case


def _case_concat(rng):
    g = Graph()
    g.outputs = [g.op("concat", g.input("a", True), g.input("b", True))]
    return g, {"a": rng.standard_normal((4, 5, 2)), "b": rng.standard_normal((4, 5, 4))}, ModelParams(), False


def _case_mse(masked):
    def case(rng):
        g = Graph()
        ins = [g.input("p", True), g.input("t", True)]
        feed = {"p": rng.standard_normal((8, 8)), "t": rng.standard_normal((8, 8))}
        if masked:
            ins.append(g.input("m"))
            feed["m"] = (rng.random((8, 8)) < 0.5).astype(float)
        g.outputs = [g.op("mse", *ins)]
        return g, feed, ModelParams(), False
    return case


CASES: dict[str, Callable] = {
    "linear": _case_linear,
    "conv3x3": _case_conv,
    "down2": _unary("down2", lambda r: r.standard_normal((2, 4, 6, 3))),
    "up2": _unary("up2", lambda r: r.standard_normal((2, 4, 5, 3))),
    "silu": _unary("silu", lambda r: r.standard_normal((10, 12))),
    "tanh": _unary("tanh", lambda r: r.standard_normal((10, 12))),
    # kept away from the kink at 0
    "expm1pos": _unary("expm1pos", lambda r: _away_from_zero(r, (10, 12))),
    "groupnorm": _case_groupnorm,
    "batchnorm[train]": _batchnorm(True),
    "batchnorm[eval]": _batchnorm(False),
    "add": _binary("add", (5, 1)),
    "mul": _binary("mul", (4, 5, 6)),
    "affine": _unary("affine", lambda r: r.standard_normal((10, 12)), scale=-1.7, shift=0.3),
    "concat": _case_concat,
    "reshape": _unary("reshape", lambda r: r.standard_normal((10, 12)), shape=(8, 15)),
    "meanpool": _unary("meanpool", lambda r: r.standard_normal((2, 3, 4, 5))),
    "mse": _case_mse(False),
    "mse[masked]": _case_mse(True),
}


def run_suite(seed: int = 0, n_coords: int = 100, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = {}
    for i, (name, make) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, i])
        graph, feed, params, training = make(rng)
        reports[name] = grad_check(graph, feed, params, tolerance, n_coords=n_coords, seed=seed + i,
                                   training=training)
    return reports
