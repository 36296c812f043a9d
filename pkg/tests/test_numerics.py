import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwdiff.numerics import kernels
from cwdiff.numerics.gradsuite import CASES, run_suite
from cwdiff.numerics.graph import Graph, ModelParams, backprop, evaluate, forward, grad_check
from cwdiff.numerics.ops import ShapeError
from cwdiff.numerics.optim import NonFiniteGradient, OptimizerState, adam_step, cosine_lr


def _mlp(rng, act="silu"):
    g = Graph()
    h = g.op(act, g.linear(g.input("x", True), "l1"))
    g.outputs = [g.linear(h, "l2")]
    p = ModelParams({"l1.w": rng.standard_normal((3, 5)), "l1.b": rng.standard_normal(5),
                     "l2.w": rng.standard_normal((5, 2)), "l2.b": rng.standard_normal(2)})
    return g, p


def test_identity_graph():
    g = Graph()
    x = g.input("x", True)
    g.outputs = [x]
    v = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(evaluate(g, {"x": v}, ModelParams())[0], v)


def test_zero_linear_annihilates():
    g = Graph()
    g.outputs = [g.linear(g.input("x"), "l")]
    p = ModelParams({"l.w": np.zeros((4, 3)), "l.b": np.zeros(3)})
    out = evaluate(g, {"x": np.random.default_rng(0).standard_normal((7, 4))}, p)[0]
    assert out.shape == (7, 3) and not out.any()


def test_two_layer_affine_matches_hand_product():
    g = Graph()
    g.outputs = [g.linear(g.linear(g.input("x"), "a"), "b")]
    W1 = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]])
    b1 = np.array([0.5, -0.5])
    W2 = np.array([[2.0], [1.0]])
    b2 = np.array([1.0])
    x = np.array([[1.0, 2.0, 3.0]])
    # x@W1 = [10, 3], + b1 = [10.5, 2.5]; @W2 = 23.5, + 1
    out = evaluate(g, {"x": x}, ModelParams({"a.w": W1, "a.b": b1, "b.w": W2, "b.b": b2}))[0]
    assert out[0, 0] == pytest.approx(24.5)


def test_sum_gradient_is_ones():
    g = Graph()
    g.outputs = [g.input("x", True)]
    x = np.random.default_rng(1).standard_normal((3, 4))
    grads = backprop(forward(g, {"x": x}, ModelParams()), np.ones_like(x))
    np.testing.assert_array_equal(grads.inputs["x"], np.ones_like(x))


def test_half_squared_norm_gradient_is_x():
    g = Graph()
    x = g.input("x", True)
    g.outputs = [g.op("mse", x, g.input("zero"))]
    v = np.random.default_rng(2).standard_normal((4, 5))
    # mse = sum(x^2)/n, so d/dx (n/2 * mse) = x
    grads = backprop(forward(g, {"x": v, "zero": np.zeros_like(v)}, ModelParams()), np.array(v.size / 2))
    np.testing.assert_allclose(grads.inputs["x"], v, rtol=1e-12)


def test_random_mlp_matches_finite_differences():
    g, p = _mlp(np.random.default_rng(3))
    rep = grad_check(g, {"x": np.random.default_rng(4).standard_normal((4, 3))}, p, n_coords=100)
    assert rep.passed(1e-4)


def test_affine_graph_grad_check_tight():
    g = Graph()
    g.outputs = [g.linear(g.input("x", True), "l")]
    rng = np.random.default_rng(5)
    p = ModelParams({"l.w": rng.standard_normal((6, 4)), "l.b": rng.standard_normal(4)})
    rep = grad_check(g, {"x": rng.standard_normal((5, 6))}, p, n_coords=100)
    assert rep.max_rel_error < 1e-8


@pytest.mark.parametrize("act", ["silu", "tanh"])
def test_activation_grad_check(act):
    g, p = _mlp(np.random.default_rng(6), act)
    rep = grad_check(g, {"x": np.random.default_rng(7).standard_normal((4, 3))}, p)
    assert rep.max_rel_error < 1e-4


def test_constant_graph_has_zero_gradients():
    g = Graph()
    g.input("x", True)
    g.outputs = [g.param("c")]
    p = ModelParams({"c": np.ones(3), "unused": np.ones(2)})
    grads = backprop(forward(g, {"x": np.ones(4)}, p), np.ones(3), params=p)
    assert not grads.inputs.get("x", np.zeros(1)).any()
    assert not grads.params["unused"].any()


@pytest.mark.parametrize("name", list(CASES))
def test_every_op_passes_grad_check(name):
    make = CASES[name]
    rng = np.random.default_rng(11)
    graph, feed, params, training = make(rng)
    rep = grad_check(graph, feed, params, n_coords=100, training=training)
    assert rep.n_checked == 100
    assert rep.passed(1e-4), (name, rep)


def test_run_suite_covers_required_ops():
    reps = run_suite(seed=1, n_coords=20)
    required = {"linear", "conv3x3", "down2", "up2", "silu", "tanh", "groupnorm", "batchnorm[train]",
                "add", "mul", "concat", "mse"}
    assert required <= set(reps)


def test_forward_and_backprop_bitwise_deterministic():
    g, p = _mlp(np.random.default_rng(8))
    x = np.random.default_rng(9).standard_normal((6, 3))
    t1, t2 = forward(g, {"x": x}, p), forward(g, {"x": x}, p)
    np.testing.assert_array_equal(t1.output_values()[0], t2.output_values()[0])
    s = np.ones((6, 2))
    g1, g2 = backprop(t1, s), backprop(t2, s)
    for k in g1.params:
        assert g1.params[k].tobytes() == g2.params[k].tobytes()


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_gradient_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    g, p = _mlp(rng)
    tr = forward(g, {"x": rng.standard_normal((4, 3))}, p)
    s1, s2 = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    gc = backprop(tr, a * s1 + b * s2)
    g1, g2 = backprop(tr, s1), backprop(tr, s2)
    for k in gc.params:
        np.testing.assert_allclose(gc.params[k], a * g1.params[k] + b * g2.params[k], atol=1e-10)


def test_shape_error_names_node():
    g = Graph()
    g.outputs = [g.linear(g.input("x"), "l")]
    p = ModelParams({"l.w": np.zeros((4, 3)), "l.b": np.zeros(3)})
    with pytest.raises(ShapeError):
        evaluate(g, {"x": np.zeros((2, 5))}, p)


# -- optimizer -------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params_and_decays_moments():
    q = ModelParams({"w": np.array([[3.0, -1.0]])})
    adam_step(q, {"w": np.zeros((1, 2))}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(q["w"], [[3.0, -1.0]])

    p = ModelParams({"w": np.array([[1.0, -2.0]])})
    state = OptimizerState(lr=0.1)
    adam_step(p, {"w": np.array([[1.0, 1.0]])}, state)
    m, v = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.zeros((1, 2))}, state)
    np.testing.assert_allclose(state.m["w"], 0.9 * m)
    np.testing.assert_allclose(state.v["w"], 0.999 * v)


def test_adam_first_step_closed_form():
    lr, eps = 0.01, 1e-8
    g = np.array([0.3, -2.0, 1e-3])
    p = ModelParams({"w": np.zeros(3)})
    adam_step(p, {"w": g}, OptimizerState(lr=lr, eps=eps))
    np.testing.assert_allclose(p["w"], -lr * g / (np.abs(g) + eps), rtol=1e-9)


def test_adam_symmetry():
    p = ModelParams({"a": np.ones((2, 2)), "b": np.ones((2, 2))})
    st_ = OptimizerState(lr=0.05, weight_decay=0.1)
    for i in range(3):
        g = np.full((2, 2), 0.1 * (i + 1))
        adam_step(p, {"a": g, "b": g.copy()}, st_)
    np.testing.assert_array_equal(p["a"], p["b"])


def test_adam_rejects_non_finite():
    p = ModelParams({"w": np.zeros(2)})
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, OptimizerState())


def test_cosine_lr_shape():
    assert cosine_lr(1.0, 0, 100, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(1.0, 10, 100, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(1.0, 100, 100, warmup=10, floor=0.01) == pytest.approx(0.01)


# -- numba kernels vs numpy fallback ---------------------------------------------------

needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")


@needs_numba
def test_im2col_col2im_bitwise():
    x = np.random.default_rng(0).standard_normal((2, 5, 6, 3)).astype(np.float32)
    a = kernels.im2col3x3_numpy(x)
    b = kernels.im2col3x3_numba(x)
    assert a.tobytes() == b.tobytes()
    assert kernels.col2im3x3_numpy(a).tobytes() == kernels.col2im3x3_numba(a).tobytes()


@needs_numba
def test_shade_bitwise():
    rng = np.random.default_rng(1)
    env = rng.random((50, 16, 3)).astype(np.float32)
    cos_l = rng.random((50, 16)).astype(np.float32)
    spec_w = rng.random((50, 16)).astype(np.float32)
    for u, v in zip(kernels.shade_numpy(env, cos_l, spec_w), kernels.shade_numba(env, cos_l, spec_w)):
        assert u.tobytes() == v.tobytes()


@needs_numba
def test_groupnorm_paths_agree():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 4, 8))
    gam, bet = rng.standard_normal(8), rng.standard_normal(8)
    ya, xa, ra = kernels.groupnorm_fwd_numpy(x, gam, bet, 4, 1e-5)
    yb, xb, rb = kernels.groupnorm_fwd_numba(x, gam, bet, 4, 1e-5)
    np.testing.assert_allclose(ya, yb, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ra, rb, rtol=1e-10)
    g = rng.standard_normal(x.shape)
    for u, v in zip(kernels.groupnorm_bwd_numpy(g, xa, ra, gam, 4), kernels.groupnorm_bwd_numba(g, xb, rb, gam, 4)):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-11)


def test_backend_reports_choice():
    assert kernels.backend() in ("numba", "numpy")


def test_env_flag_selects_numpy_fallback():
    import os
    import subprocess
    import sys

    env = dict(os.environ, CWDIFF_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from cwdiff.numerics import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
