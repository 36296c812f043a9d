import numpy as np
import pytest
from helpers import OracleModel, random_model, small_config
from hypothesis import given, settings
from hypothesis import strategies as st

from cwdiff import diffusion as dfn
from cwdiff.denoiser import Denoiser
from cwdiff.numerics.optim import OptimizerState
from cwdiff.scenes import SceneConfig, make_split
from cwdiff.schedule import CONTINUOUS, SDM_SWITCH, GroupLayout, ScheduleSpec, build_schedule

LAYOUT = GroupLayout.for_features(16)
C = LAYOUT.n_channels


def _table(T, taus=(1.0, 1.0, 1.0), mode=CONTINUOUS):
    return build_schedule(ScheduleSpec(T, taus, mode=mode), LAYOUT)


def _latents(B=2, H=4, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (B, C, H, H)).astype(np.float32)


def _images(B=2, H=4, seed=1):
    return np.random.default_rng(seed).gamma(1.0, 1.0, (B, 3, H, H)).astype(np.float32)


# -- forward process ------------------------------------------------------------------

def test_forward_diffuse_examples():
    z0, eps = np.ones((1, 2, 1, 1)), np.zeros((1, 2, 1, 1))
    np.testing.assert_array_equal(dfn.forward_diffuse(z0, eps, [1.0, 1.0]), z0)
    n = np.full((1, 2, 1, 1), 0.3)
    np.testing.assert_array_equal(dfn.forward_diffuse(z0, n, [0.0, 0.0]), n)
    assert dfn.forward_diffuse(z0, eps, [0.25, 0.25])[0, 0, 0, 0] == pytest.approx(0.5)


def test_velocity_target_examples():
    z0 = np.full((1, 1, 1, 1), 1.0)
    n = np.full((1, 1, 1, 1), 0.7)
    assert dfn.velocity_target(z0, n, [1.0])[0, 0, 0, 0] == pytest.approx(0.7)
    assert dfn.velocity_target(z0, n, [0.0])[0, 0, 0, 0] == pytest.approx(-1.0)
    assert dfn.velocity_target(z0, 0 * n, [0.25])[0, 0, 0, 0] == pytest.approx(-np.sqrt(0.75))


def test_recover_examples():
    z, v = _latents(), _latents(seed=3)
    x0, _ = dfn.recover_x0_eps(z, v, np.ones(C))
    np.testing.assert_array_equal(x0, z)
    x0, _ = dfn.recover_x0_eps(z, v, np.zeros(C))
    np.testing.assert_array_equal(x0, -v)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), per_channel=st.booleans())
def test_velocity_identity_round_trip(seed, per_channel):
    rng = np.random.default_rng(seed)
    z0 = rng.uniform(-1, 1, (2, C, 3, 3)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    a = rng.uniform(0, 1, (2, C) if per_channel else C)
    zt = dfn.forward_diffuse(z0, eps, a)
    x0, e = dfn.recover_x0_eps(zt, dfn.velocity_target(z0, eps, a), a)
    np.testing.assert_allclose(x0, z0, atol=1e-6)
    np.testing.assert_allclose(e, eps, atol=1e-5)


def test_alpha_validation():
    z = _latents()
    with pytest.raises(ValueError):
        dfn.forward_diffuse(z, z, np.full(C, 1.5))
    with pytest.raises(ValueError):
        dfn.forward_diffuse(z, z, np.full(C - 1, 0.5))
    with pytest.raises(ValueError):
        dfn.forward_diffuse(z, z[:1], np.full(C, 0.5))


def test_forward_moments():
    rng = np.random.default_rng(0)
    N = 100_000
    for a in (0.0, 0.25, 0.5, 0.9, 1.0):
        z0 = np.full((N, 1, 1, 1), 0.6)
        zt = dfn.forward_diffuse(z0, rng.standard_normal(z0.shape), [a]).ravel()
        sd = np.sqrt(1 - a)
        assert abs(zt.mean() - np.sqrt(a) * 0.6) <= 4 * sd / np.sqrt(N) + 1e-12
        if a < 1:
            assert abs(zt.var() / (1 - a) - 1) < 0.02
        else:
            assert np.ptp(zt) == 0


# -- packing -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scenes_small():
    return make_split(0, "unit", 3, SceneConfig(height=8, width=8))


def test_pack_unpack_round_trip(scenes_small):
    sc = scenes_small
    f = np.random.default_rng(0).uniform(-0.9, 0.9, (3, 16, 8, 8)).astype(np.float32)
    st_ = dfn.pack_modalities(sc, f)
    assert st_.z.shape == (3, 24, 8, 8) and st_.n_clamped == 0
    m = dfn.unpack_modalities(st_)
    np.testing.assert_allclose(m.N, sc.N, atol=1e-6)
    np.testing.assert_allclose(m.D, sc.D, rtol=1e-6)
    np.testing.assert_allclose(m.A, sc.A, atol=1e-6)
    np.testing.assert_allclose(m.R, sc.R, atol=1e-6)
    np.testing.assert_array_equal(m.f, f)


def test_pack_channel_conventions(scenes_small):
    sc = scenes_small.subset(slice(0, 1))
    sc.N[:] = 0
    sc.N[:, 2] = 1
    sc.A[:] = 0.5
    sc.D[:] = 0.5
    z = dfn.pack_modalities(sc, np.zeros((1, 16, 8, 8), np.float32)).z
    np.testing.assert_array_equal(z[:, 0:3, 0, 0], [[0, 0, 1]])
    np.testing.assert_array_equal(z[:, 4:7], 0.0)
    np.testing.assert_allclose(z[:, 3], -1.0, atol=1e-6)


def test_pack_clamps_out_of_range(scenes_small):
    f = np.full((3, 16, 8, 8), 2.0, np.float32)
    st_ = dfn.pack_modalities(scenes_small, f)
    assert st_.n_clamped >= f.size and st_.z.max() <= 1.0


def test_unpack_degenerate_normal_falls_back_to_zenith():
    z = np.zeros((1, C, 2, 2), np.float32)
    m = dfn.unpack_modalities(z, LAYOUT)
    np.testing.assert_array_equal(m.N[0, :, 0, 0], [0, 0, 1])


# -- training steps ------------------------------------------------------------------------

class _LossStub:
    """Network stub that replays the training rng to produce the exact velocity."""

    def __init__(self, table, z0, seed, mask=True):
        from helpers import _Cfg
        self.cfg = _Cfg(mask)
        rng = np.random.default_rng(seed)
        t = rng.integers(0, table.T, size=z0.shape[0])
        a = table.channel_alphas(t)
        noise = rng.standard_normal(z0.shape).astype(np.float32)
        self.expected_t = t
        a4 = a[:, :, None, None]
        self.v = (np.sqrt(a4) * noise - np.sqrt(1 - a4) * z0).astype(np.float32)
        self.masks = []
        self.params = None

    def loss_and_grads(self, t, T, z, img, keep, target, mask=None):
        np.testing.assert_array_equal(t, self.expected_t)
        np.testing.assert_allclose(target, self.v, atol=1e-6)
        self.masks.append(mask)
        r = self.v - target
        return float((r * r).mean()), {}, self.v


@pytest.mark.parametrize("mode,T", [(CONTINUOUS, 16), (SDM_SWITCH, 4)])
def test_oracle_training_loss_is_zero(mode, T):
    table = _table(T, mode=mode)
    z0 = _latents(8)
    stub = _LossStub(table, z0, seed=7)
    step = dfn.train_step_pdm if mode == CONTINUOUS else dfn.train_step_sdm
    loss = step(stub, (z0, _images(8)), OptimizerState(), table, np.random.default_rng(7))
    assert loss == 0.0


def test_initial_loss_matches_moment_prediction():
    cfg = small_config(cfg_drop=0.0, mask_zero_snr=False)
    model = Denoiser(cfg, Denoiser.init_params(cfg, np.random.default_rng(0)))
    table = _table(32)
    rng = np.random.default_rng(1)
    losses = []
    for _ in range(10):
        z0 = rng.standard_normal((1000, C, 4, 4)).astype(np.float32)
        losses.append(dfn.train_step_pdm(model, (z0, _images(1000)), OptimizerState(lr=0.0), table, rng))
    assert 0.9 <= np.mean(losses) <= 1.1


def test_training_is_deterministic():
    def run():
        cfg = small_config()
        model = Denoiser(cfg, Denoiser.init_params(cfg, np.random.default_rng(0)))
        hist, _ = dfn.train_diffusion(model, _latents(16), _images(16), _table(8),
                                      dfn.TrainConfig(steps=5, batch=4, warmup=1),
                                      np.random.default_rng(3))
        return hist, model.params.checksum()
    assert run() == run()


def test_sdm_loss_mask_per_step():
    table = _table(4, mode=SDM_SWITCH)
    np.testing.assert_array_equal(dfn.sdm_loss_mask(table, 3), np.ones(C))
    np.testing.assert_array_equal(dfn.sdm_loss_mask(table, 0), [0] * 8 + [1] * 16)
    np.testing.assert_array_equal(dfn.sdm_loss_mask(table, 2), [1] * 4 + [0] * 20)
    np.testing.assert_array_equal(dfn.sdm_loss_mask(table, 1), [0] * 4 + [1] * 4 + [0] * 16)


def test_train_step_sdm_passes_zero_signal_mask():
    table = _table(4, mode=SDM_SWITCH)
    z0 = _latents(6)
    stub = _LossStub(table, z0, seed=2)
    dfn.train_step_sdm(stub, (z0, _images(6)), OptimizerState(), table, np.random.default_rng(2))
    np.testing.assert_array_equal(stub.masks[0], dfn.sdm_loss_mask(table, stub.expected_t))


def test_sdm_own_conditions_replace_clean_groups_only():
    cfg = small_config(cfg_drop=0.0)
    table = _table(4, mode=SDM_SWITCH)
    z0, img = _latents(16), _images(16)
    seen = {}

    class Spy(Denoiser):
        def loss_and_grads(self, t, T, z, img_nhwc, keep, target, mask=None):
            seen.update(t=np.asarray(t), z=z, target=target, mask=mask)
            return super().loss_and_grads(t, T, z, img_nhwc, keep, target, mask)

    model = Spy(cfg, Denoiser.init_params(cfg, np.random.default_rng(0)))
    guess = dfn._joint_guess(model, img, table, np.ones(16, bool))
    dfn.train_step_sdm(model, (z0, img), OptimizerState(lr=0.0), table, np.random.default_rng(4),
                       own_conditions=1.0)
    a = table.channel_alphas(seen["t"])[:, :, None, None]
    a = np.broadcast_to(a, z0.shape)
    clean = a == 1.0
    np.testing.assert_allclose(seen["z"][clean], guess[clean], atol=1e-6)
    assert np.all(seen["z"][a == 0.0] == 0.0)  # zero-signal groups stay masked
    np.testing.assert_array_equal(seen["mask"], dfn.sdm_loss_mask(table, seen["t"]))
    assert 0 < clean.mean() < 1


def test_step_functions_check_schedule_mode():
    with pytest.raises(ValueError):
        dfn.train_step_pdm(None, (None, None), OptimizerState(), _table(4, mode=SDM_SWITCH), None)
    with pytest.raises(ValueError):
        dfn.train_step_sdm(None, (None, None), OptimizerState(), _table(4), None)


def test_divergence_raises():
    cfg = small_config()
    model = Denoiser(cfg, Denoiser.init_params(cfg, np.random.default_rng(0)))
    z = _latents(4)
    z[0, 0, 0, 0] = np.inf
    with pytest.raises(dfn.NonFiniteLoss):
        dfn.train_step_pdm(model, (z, _images(4)), OptimizerState(), _table(8), np.random.default_rng(0))


# -- samplers -------------------------------------------------------------------------------

def test_ddim_grid():
    assert dfn.ddim_grid(64, 1) == [63, 0]
    assert dfn.ddim_grid(64, 2) == [63, 31, 0]
    assert dfn.ddim_grid(8, 2) == [7, 3, 0]
    assert dfn.ddim_grid(5, 5) == [4, 3, 2, 1, 0]
    assert len(dfn.ddim_grid(256, 10)) == 11
    assert dfn.ddim_grid(1, 1) == [0]
    with pytest.raises(ValueError):
        dfn.ddim_grid(4, 5)


@pytest.mark.parametrize("steps", [1, 2, 10])
@pytest.mark.parametrize("taus", [(1.0, 1.0, 1.0), (0.9, 1.2, 1.5), (1.5, 1.2, 0.9)])
@pytest.mark.parametrize("guidance", [1.0, 1.5])
def test_oracle_ddim_reconstructs(steps, taus, guidance):
    table = _table(64, taus)
    z0 = _latents(2, seed=4) * 0.9
    oracle = OracleModel(z0, table)
    out = dfn.ddim_sample_pdm(oracle, _images(2), table, steps, guidance, rng=np.random.default_rng(0))
    np.testing.assert_allclose(out, z0, atol=1e-5)


def test_ddim_single_step_is_x0_prediction():
    m = random_model(0)
    table = _table(32)
    I = _images(2)
    noise = np.random.default_rng(5).standard_normal((2, C, 4, 4)).astype(np.float32)
    out = dfn.ddim_sample_pdm(m, I, table, 1, 1.0, noise=noise)
    a = table.channel_alphas(31)
    g = dfn._Guided(m, I, 1.0)
    x0, _ = dfn.recover_x0_eps(noise, g.velocity(31, 32, noise, a), a)
    np.testing.assert_array_equal(out, np.clip(x0, -1, 1))


def test_ddim_seeds_differ_for_large_T():
    m = random_model(0)
    table = _table(64)
    I = _images(1)
    a = dfn.ddim_sample_pdm(m, I, table, 10, 1.5, rng=np.random.default_rng(0))
    b = dfn.ddim_sample_pdm(m, I, table, 10, 1.5, rng=np.random.default_rng(1))
    assert np.linalg.norm(a - b) > 0


def test_T1_masked_sampling_ignores_start_noise():
    m = random_model(0)
    table = _table(1)
    I = _images(1)
    a = dfn.ddim_sample_pdm(m, I, table, 1, 1.5, rng=np.random.default_rng(0))
    b = dfn.ddim_sample_pdm(m, I, table, 1, 1.5, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def _zero_groups(table, t):
    a = table.alpha_bar[t]
    return tuple(int(x == 0) for x in a)


def test_sdm_T1_single_shot():
    table = _table(1, mode=SDM_SWITCH)
    z0 = _latents(2) * 0.9
    oracle = OracleModel(z0, table)
    out = dfn.sdm_sample(oracle, _images(2), table, "zeros", guidance=1.0)
    assert [t for t, _ in oracle.calls] == [0]
    np.testing.assert_allclose(out, z0, atol=1e-6)


def test_sdm_T4_refinement_order():
    table = _table(4, mode=SDM_SWITCH)
    z0 = _latents(2) * 0.9
    oracle = OracleModel(z0, table)
    out = dfn.sdm_sample(oracle, _images(2), table, "fresh", rng=np.random.default_rng(0), guidance=1.0)
    ts = [t for t, _ in oracle.calls]
    assert ts == [3, 2, 1, 0]
    # joint step, then geometry, material, lighting
    assert [_zero_groups(table, t) for t in ts] == [(1, 1, 1), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    np.testing.assert_allclose(out, z0, atol=1e-6)
    # conditioning groups carry the previous prediction, not noise
    _, z_at_2 = oracle.calls[1]
    np.testing.assert_allclose(z_at_2[:, 4:], z0[:, 4:], atol=1e-6)


def test_sdm_zeros_policy_is_bitwise_deterministic():
    m = random_model(3)
    table = _table(4, mode=SDM_SWITCH)
    I = _images(2)
    a = dfn.sdm_sample(m, I, table, "zeros")
    b = dfn.sdm_sample(m, I, table, "zeros")
    assert a.tobytes() == b.tobytes()


def test_noise_source_policies():
    rng = [np.random.default_rng(0)]
    src = dfn.NoiseSource("fixed-seed", rng)
    a, b = src.draw((1, 2, 3)), src.draw((1, 2, 3))
    assert a is b
    fresh = dfn.NoiseSource("fresh", [np.random.default_rng(0)])
    assert not np.array_equal(fresh.draw((1, 4)), fresh.draw((1, 4)))
    assert not dfn.NoiseSource("zeros").draw((2, 3)).any()
    with pytest.raises(ValueError):
        dfn.NoiseSource("bogus")
    with pytest.raises(ValueError):
        dfn.NoiseSource("fresh").draw((1, 2))


def test_sdm_sample_checks_mode():
    with pytest.raises(ValueError):
        dfn.sdm_sample(random_model(), _images(1), _table(4), "zeros")


def test_draw_samples_independent_of_chunking():
    m = random_model(1)
    table = _table(16)
    I = _images(3)
    a = dfn.draw_samples(m, I, table, K=2, seed=5, steps=3, batch=1)
    b = dfn.draw_samples(m, I, table, K=2, seed=5, steps=3, batch=64)
    # same streams either way; BLAS blocking differs with batch size, so only to rounding
    np.testing.assert_allclose(a.samples, b.samples, atol=1e-5)
    again = dfn.draw_samples(m, I, table, K=2, seed=5, steps=3, batch=64)
    assert again.samples.tobytes() == b.samples.tobytes()
    assert a.samples.shape == (3, 2, C, 4, 4) and a.K == 2 and a.mode == "pdm"
    # a subset of images drawn on its own matches the same rows
    c = dfn.draw_samples(m, I[1:], table, K=2, seed=5, steps=3, first_index=1)
    np.testing.assert_allclose(c.samples, a.samples[1:], atol=1e-5)


def test_draw_samples_sdm_zeros_has_no_spread():
    m = random_model(2)
    table = _table(4, mode=SDM_SWITCH)
    ss = dfn.draw_samples(m, _images(2), table, K=3, seed=0, noise_policy="zeros")
    assert ss.mode == "sdm" and ss.steps == 4
    assert np.all(np.ptp(ss.samples, axis=1) == 0)
    with pytest.raises(ValueError):
        dfn.draw_samples(m, _images(2), table, K=0, seed=0)
