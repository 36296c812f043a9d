"""Static op graphs with a forward evaluator and reverse-mode gradients."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ops import OPS, ShapeError


@dataclass
class Node:
    op: str  # "input", "param" or a key of OPS
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class ModelParams:
    """Named parameter tensors plus non-trainable buffers (e.g. running stats)."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 buffers: Sequence[str] = (), meta: dict | None = None):
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.buffers: set[str] = set(buffers)
        self.meta: dict = dict(meta or {})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in self.buffers]

    def n_params(self) -> int:
        return int(sum(self.tensors[k].size for k in self.trainable()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()},
                           self.buffers, self.meta)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           self.buffers, self.meta)

    def update(self, other: "ModelParams") -> None:
        self.tensors.update(other.tensors)
        self.buffers |= other.buffers

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}
        self.outputs: list[int] = []

    def _push(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input {i} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, name: str, differentiable: bool = False) -> int:
        nid = self._push(Node("input", (), {"differentiable": differentiable}, name))
        self.input_ids[name] = nid
        return nid

    def param(self, name: str) -> int:
        return self._push(Node("param", (), {}, name))

    def op(self, kind: str, *inputs: int, **attrs) -> int:
        if kind not in OPS:
            raise KeyError(f"unknown op {kind!r}")
        return self._push(Node(kind, tuple(inputs), attrs))

    # thin sugar used by the network builders
    def linear(self, x, prefix):
        return self.op("linear", x, self.param(prefix + ".w"), self.param(prefix + ".b"))

    def conv(self, x, prefix):
        return self.op("conv3x3", x, self.param(prefix + ".w"), self.param(prefix + ".b"))

    def groupnorm(self, x, prefix, groups):
        return self.op("groupnorm", x, self.param(prefix + ".g"), self.param(prefix + ".b"),
                       groups=groups)

    def batchnorm(self, x, prefix):
        return self.op("batchnorm", x, self.param(prefix + ".g"), self.param(prefix + ".b"),
                       self.param(prefix + ".rm"), self.param(prefix + ".rv"),
                       mean_name=prefix + ".rm", var_name=prefix + ".rv")

    def ancestors(self, targets: Sequence[int]) -> list[int]:
        need = set(targets)
        for nid in range(max(targets), -1, -1):
            if nid in need:
                need.update(self.nodes[nid].inputs)
        return sorted(need)


class _Ctx:
    def __init__(self, training: bool):
        self.training = training
        self.buffer_updates: dict[str, np.ndarray] = {}


@dataclass
class Trace:
    graph: Graph
    values: dict[int, np.ndarray]
    caches: dict[int, object]
    order: list[int]
    outputs: list[int]
    buffer_updates: dict[str, np.ndarray]

    def output_values(self) -> list[np.ndarray]:
        return [self.values[i] for i in self.outputs]


def _bind_inputs(graph: Graph, inputs) -> dict[str, np.ndarray]:
    if isinstance(inputs, Mapping):
        return dict(inputs)
    names = list(graph.input_ids)
    if len(inputs) != len(names):
        raise ValueError(f"graph takes {len(names)} inputs, got {len(inputs)}")
    return dict(zip(names, inputs))


def forward(graph: Graph, inputs, params: ModelParams, *, training: bool = False,
            outputs: Sequence[int] | None = None) -> Trace:
    """Run the graph and keep everything needed for :func:`backprop`."""
    feed = _bind_inputs(graph, inputs)
    outs = list(graph.outputs if outputs is None else outputs)
    order = graph.ancestors(outs)
    ctx = _Ctx(training)
    values: dict[int, np.ndarray] = {}
    caches: dict[int, object] = {}
    for nid in order:
        node = graph.nodes[nid]
        if node.op == "input":
            if node.name not in feed:
                raise ShapeError(nid, f"missing input {node.name!r}")
            values[nid] = np.asarray(feed[node.name])
        elif node.op == "param":
            if node.name not in params:
                raise ShapeError(nid, f"missing parameter {node.name!r}")
            values[nid] = params[node.name]
        else:
            fwd = OPS[node.op][0]
            try:
                out, cache = fwd([values[i] for i in node.inputs], node.attrs, ctx)
            except ShapeError:
                raise
            except ValueError as exc:
                raise ShapeError(nid, f"{node.op}: {exc}") from exc
            values[nid] = out
            caches[nid] = cache
    return Trace(graph, values, caches, order, outs, ctx.buffer_updates)


def evaluate(graph: Graph, inputs, params: ModelParams, *, training: bool = False,
             outputs: Sequence[int] | None = None) -> list[np.ndarray]:
    return forward(graph, inputs, params, training=training, outputs=outputs).output_values()


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    inputs: dict[str, np.ndarray]


def backprop(trace: Trace, seeds: Sequence[np.ndarray] | np.ndarray | None = None,
             params: ModelParams | None = None) -> Gradients:
    """Reverse pass over ``trace``.

    ``seeds`` holds one upstream gradient per traced output (a scalar output
    defaults to 1). Parameters the outputs do not depend on get exact zeros;
    pass ``params`` to get zeros for parameters absent from the graph as well.
    """
    graph = trace.graph
    if seeds is None:
        seeds = [np.ones_like(trace.values[o]) for o in trace.outputs]
    elif isinstance(seeds, np.ndarray):
        seeds = [seeds]
    if len(seeds) != len(trace.outputs):
        raise ValueError(f"{len(trace.outputs)} outputs but {len(seeds)} seeds")
    grads: dict[int, np.ndarray] = {}
    for o, s in zip(trace.outputs, seeds):
        s = np.asarray(s, dtype=trace.values[o].dtype)
        if s.shape != trace.values[o].shape:
            raise ShapeError(o, f"seed shape {s.shape} != output shape {trace.values[o].shape}")
        grads[o] = grads[o] + s if o in grads else s
    for nid in reversed(trace.order):
        node = graph.nodes[nid]
        if node.op in ("input", "param") or nid not in grads:
            continue
        bwd = OPS[node.op][1]
        in_grads = bwd(grads.pop(nid), trace.caches[nid], node.attrs)
        for src, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            grads[src] = grads[src] + gi if src in grads else gi

    pgrads: dict[str, np.ndarray] = {}
    igrads: dict[str, np.ndarray] = {}
    for nid in trace.order:
        node = graph.nodes[nid]
        if node.op == "param":
            val = trace.values[nid]
            g = grads.get(nid)
            if node.name in pgrads:
                if g is not None:
                    pgrads[node.name] = pgrads[node.name] + g
            else:
                pgrads[node.name] = g if g is not None else np.zeros_like(val)
        elif node.op == "input" and node.attrs.get("differentiable"):
            g = grads.get(nid)
            igrads[node.name] = g if g is not None else np.zeros_like(trace.values[nid])
    if params is not None:
        for name in params.trainable():
            if name not in pgrads:
                pgrads[name] = np.zeros_like(params[name])
        for name in params.buffers:
            pgrads.pop(name, None)
    return Gradients(pgrads, igrads)


def init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamFactory:
    """Creates parameters in a fixed order from one generator."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params = ModelParams()

    def linear(self, prefix, n_in, n_out, zero=False, gain=1.0):
        if zero:
            self.params[prefix + ".w"] = np.zeros((n_in, n_out), self.dtype)
            self.params[prefix + ".b"] = np.zeros(n_out, self.dtype)
        else:
            self.params[prefix + ".w"] = gain * init_uniform(self.rng, (n_in, n_out), n_in, self.dtype)
            self.params[prefix + ".b"] = gain * init_uniform(self.rng, (n_out,), n_in, self.dtype)

    def conv(self, prefix, c_in, c_out, zero=False):
        fan = 9 * c_in
        if zero:
            self.params[prefix + ".w"] = np.zeros((3, 3, c_in, c_out), self.dtype)
            self.params[prefix + ".b"] = np.zeros(c_out, self.dtype)
        else:
            self.params[prefix + ".w"] = init_uniform(self.rng, (3, 3, c_in, c_out), fan, self.dtype)
            self.params[prefix + ".b"] = init_uniform(self.rng, (c_out,), fan, self.dtype)

    def norm(self, prefix, c, running=False):
        self.params[prefix + ".g"] = np.ones(c, self.dtype)
        self.params[prefix + ".b"] = np.zeros(c, self.dtype)
        if running:
            self.params[prefix + ".rm"] = np.zeros(c, self.dtype)
            self.params[prefix + ".rv"] = np.ones(c, self.dtype)
            self.params.buffers |= {prefix + ".rm", prefix + ".rv"}


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple] | None
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(graph: Graph, inputs, params: ModelParams, tolerance: float = 1e-4, *,
               n_coords: int = 100, step: float = 1e-5, seed: int = 0,
               training: bool = False) -> GradCheckReport:
    """Compare backprop against central differences on random coordinates.

    Runs in float64. The scalar probed is ``sum(seed_k * out_k)`` with random
    normal seeds, so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    feed = {k: np.asarray(v, dtype=np.float64) for k, v in _bind_inputs(graph, inputs).items()}
    p64 = params.astype(np.float64)
    trace = forward(graph, feed, p64, training=training)
    seeds = [rng.standard_normal(v.shape) for v in trace.output_values()]
    grads = backprop(trace, seeds)

    def objective() -> float:
        outs = evaluate(graph, feed, p64, training=training)
        return float(sum((s * o).sum() for s, o in zip(seeds, outs)))

    coords = []
    for name, g in grads.params.items():
        if name in p64.buffers:
            continue
        coords += [("param", name, idx) for idx in np.ndindex(g.shape)]
    for name in grads.inputs:
        coords += [("input", name, idx) for idx in np.ndindex(feed[name].shape)]
    if not coords:
        return GradCheckReport(0.0, None, 0)
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst, worst_err = None, 0.0
    for k in sorted(pick):
        kind, name, idx = coords[k]
        arr = p64[name] if kind == "param" else feed[name]
        analytic = (grads.params if kind == "param" else grads.inputs)[name][idx]
        orig = arr[idx]
        arr[idx] = orig + step
        fp = objective()
        arr[idx] = orig - step
        fm = objective()
        arr[idx] = orig
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        if err > worst_err or worst is None:
            worst_err, worst = err, (name, idx)
    return GradCheckReport(float(worst_err), worst, len(pick))
