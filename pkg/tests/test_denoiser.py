import numpy as np
import pytest

from cwdiff.denoiser import (Denoiser, DenoiserConfig, cfg_combine, condition_image, denoise,
                             encode_condition, timestep_embedding)
from cwdiff.numerics.optim import OptimizerState, adam_step

CFG = DenoiserConfig(latent_channels=24, width=16, groups=4, temb_dim=16, ctx_dim=16)


@pytest.fixture(scope="module")
def model():
    return Denoiser(CFG, Denoiser.init_params(CFG, np.random.default_rng(0)))


def _inputs(B=3, seed=1):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((B, 24, 16, 16)).astype(np.float32)
    I = rng.gamma(1.0, 1.0, (B, 3, 16, 16)).astype(np.float32)
    return z, I


def _perturb(model, seed=5):
    rng = np.random.default_rng(seed)
    p = model.params.copy()
    for k in p.trainable():
        p[k] = p[k] + 0.05 * rng.standard_normal(p[k].shape).astype(np.float32)
    return Denoiser(model.cfg, p)


def test_timestep_embedding_t0():
    e = timestep_embedding(0, 10, 16)
    np.testing.assert_array_equal(e[:8], 0.0)
    np.testing.assert_array_equal(e[8:], 1.0)


def test_timestep_embedding_deterministic_and_distinct():
    a, b = timestep_embedding(9, 10, 16), timestep_embedding(9, 10, 16)
    assert a.tobytes() == b.tobytes()
    assert np.linalg.norm(timestep_embedding(9, 10, 16) - timestep_embedding(0, 10, 16)) > 0


def test_timestep_embedding_rejects_out_of_range():
    with pytest.raises(ValueError):
        timestep_embedding(10, 10, 16)
    with pytest.raises(ValueError):
        timestep_embedding(0, 10, 15)


def test_encode_condition_eval_never_null(model):
    _, I = _inputs(8)
    ctx = encode_condition(model, I)
    assert not ctx.null.any()


def test_encode_condition_drop_one_always_null(model):
    _, I = _inputs(8)
    ctx = encode_condition(model, I, np.random.default_rng(0), training=True, drop=1.0)
    assert ctx.null.all() and not ctx.vector.any()


def test_encode_condition_drop_rate():
    cfg = DenoiserConfig(latent_channels=24, width=8, groups=4, temb_dim=8, ctx_dim=8)
    m = Denoiser(cfg, Denoiser.init_params(cfg, np.random.default_rng(0)))
    I = np.ones((10_000, 3, 4, 4), np.float32)
    ctx = encode_condition(m, I, np.random.default_rng(3), training=True, drop=0.05)
    assert 0.035 <= ctx.null.mean() <= 0.065


def test_untrained_head_outputs_zero(model):
    z, I = _inputs()
    v = denoise(model, 3, 10, z, I, encode_condition(model, I))
    assert v.shape == z.shape and not v.any()


def test_denoise_deterministic_and_batch_equivariant(model):
    m = _perturb(model)
    z, I = _inputs(4)
    ctx = encode_condition(m, I)
    a = denoise(m, 5, 10, z, I, ctx)
    b = denoise(m, 5, 10, z, I, ctx)
    assert a.tobytes() == b.tobytes()
    perm = np.array([2, 0, 3, 1])
    c = denoise(m, 5, 10, z[perm], I[perm], encode_condition(m, I[perm]))
    np.testing.assert_allclose(c, a[perm], rtol=1e-5, atol=1e-6)
    single = np.concatenate([denoise(m, 5, 10, z[i:i + 1], I[i:i + 1], encode_condition(m, I[i:i + 1]))
                             for i in range(4)])
    np.testing.assert_allclose(single, a, rtol=1e-5, atol=1e-6)


def test_denoise_rejects_bad_inputs(model):
    z, I = _inputs()
    ctx = encode_condition(model, I)
    with pytest.raises(ValueError):
        denoise(model, 0, 10, z[:, :20], I, ctx)
    z[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        denoise(model, 0, 10, z, I, ctx)
    with pytest.raises(ValueError):
        encode_condition(model, I[:, :2])


def test_cfg_combine():
    c, u = np.array([1.0, 3.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    assert cfg_combine(1.0, 0.0, 2.0) == 2.0


def test_default_size_in_budget():
    cfg = DenoiserConfig()
    n = Denoiser.init_params(cfg, np.random.default_rng(0)).n_params()
    assert 100_000 <= n <= 1_000_000


def test_every_parameter_block_gets_gradient(model):
    m = Denoiser(model.cfg, model.params.copy())
    z, I = _inputs(4)
    rng = np.random.default_rng(2)
    target = rng.standard_normal(z.shape).astype(np.float32)
    t = np.array([1, 3, 5, 7])
    img = condition_image(I)
    keep = np.ones(4)
    state = OptimizerState(lr=1e-2)
    _, grads, _ = m.loss_and_grads(t, 10, z, img, keep, target)
    adam_step(m.params, grads, state)
    _, grads, _ = m.loss_and_grads(t, 10, z, img, keep, target)
    dead = [k for k, g in grads.items() if not np.any(g)]
    assert not dead, dead


def test_loss_mask_zeroes_masked_channel_gradients(model):
    m = _perturb(model)
    z, I = _inputs(2)
    target = np.random.default_rng(4).standard_normal(z.shape).astype(np.float32)
    mask = np.zeros((2, 24), np.float32)
    mask[:, 8:] = 1
    loss, grads, v_hat = m.loss_and_grads(np.array([0, 0]), 4, z, condition_image(I), np.ones(2), target, mask)
    r = v_hat - target
    assert loss == pytest.approx(float((r[:, 8:] ** 2).mean()), rel=1e-5)
    # shifting only the masked-out targets leaves loss and gradients unchanged
    t2 = target.copy()
    t2[:, :8] += 5.0
    loss2, grads2, _ = m.loss_and_grads(np.array([0, 0]), 4, z, condition_image(I), np.ones(2), t2, mask)
    assert loss2 == loss
    for k in grads:
        assert grads[k].tobytes() == grads2[k].tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(cfg_drop=1.0)
    with pytest.raises(ValueError):
        DenoiserConfig(levels=0)
