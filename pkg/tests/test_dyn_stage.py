import numpy as np
import pytest

from demotraj.config import Config
from demotraj.dyn_stage import (
    DynStage,
    GaussianLatent,
    LengthMismatch,
    WrongHistoryLength,
    dynamics_informed_loss,
    kl_loss,
)
from demotraj.dynamics import inverse_arrays, rollout_arrays, step_state
from demotraj.numkernel.params import ParamStore
from demotraj.numkernel.tensor import Tape, Tensor

P, S = 15, 10


def _stage(cfg: Config, seed: int = 0) -> DynStage:
    return DynStage(ParamStore(seed), cfg, P, S)


def _straight(n: int = 3, speed: float = 12.0, dt: float = 0.2) -> np.ndarray:
    t = np.arange(P) * dt
    h = np.zeros((n, P, 4))
    h[..., 0] = speed * t - speed * t[-1]
    h[..., 2] = speed
    return h


def _gauss(mean, log_var) -> GaussianLatent:
    return GaussianLatent(Tensor(np.atleast_2d(mean)), Tensor(np.atleast_2d(log_var)))


def test_kl_zero_when_equal(rng):
    m, lv = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert abs(float(kl_loss([_gauss(m, lv)], [_gauss(m, lv)]).data)) < 1e-12


def test_kl_unit_shift_is_half():
    kl = kl_loss([_gauss([[1.0]], [[0.0]])], [_gauss([[0.0]], [[0.0]])])
    assert float(kl.data) == pytest.approx(0.5, abs=1e-12)


def test_kl_nonnegative(rng):
    for _ in range(200):
        q = _gauss(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
        p = _gauss(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
        assert float(kl_loss([q], [p]).data) >= 0.0


def test_kl_length_mismatch():
    g = _gauss([[0.0]], [[0.0]])
    with pytest.raises(LengthMismatch):
        kl_loss([g, g], [g])


def test_di_loss_zero_for_exact_controls(attrs):
    init = np.array([0.0, 0.0, 14.0, 0.0])
    ctrl = np.zeros((S, 4))
    ctrl[:, 0] = np.linspace(0.0, 0.05, S)
    ctrl[:, 3] = 1.5
    states = np.concatenate([init[None], rollout_arrays(init, ctrl, attrs, 0.2)])
    recovered, _ = inverse_arrays(states[:-1], states[1:], attrs, 0.2)
    loss = dynamics_informed_loss(states[None], recovered[None], attrs, 0.2)
    assert float(loss.data) < 1e-12


def test_di_loss_positive_for_zero_controls_on_accelerating_data(attrs):
    init = np.array([0.0, 0.0, 14.0, 0.0])
    ctrl = np.zeros((S, 4))
    ctrl[:, 3] = 2.0
    states = np.concatenate([init[None], rollout_arrays(init, ctrl, attrs, 0.2)])
    assert float(dynamics_informed_loss(states[None], np.zeros((1, S, 4)), attrs, 0.2).data) > 0.0


def test_di_loss_length_mismatch(attrs):
    with pytest.raises(LengthMismatch):
        dynamics_informed_loss(np.zeros((1, S, 4)), np.zeros((1, S, 4)), attrs, 0.2)


def test_embed_history_rejects_wrong_length(cfg):
    with pytest.raises(WrongHistoryLength):
        _stage(cfg).embed_history(np.zeros((2, P - 1, 4)))


def test_embed_history_is_deterministic(cfg):
    st = _stage(cfg)
    h = _straight(2)
    a, b = st.embed_history(h).data, st.embed_history(h).data
    np.testing.assert_array_equal(a[0], a[1])
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, cfg.model.d_model)


def test_fit_normalizer_standardizes_columns(cfg, rng):
    st = _stage(cfg)
    h = _straight(40) + rng.normal(0.0, 0.5, size=(40, P, 4))
    st.fit_normalizer(h)
    cols = (st._history_columns(h) - st.hist_mean) / st.hist_std
    np.testing.assert_allclose(cols.mean(axis=0), 0.0, atol=1e-9)
    assert np.all(cols.std(axis=0) <= 1.0 + 1e-9)


def test_prior_log_var_clamped(cfg, rng):
    st = _stage(cfg)
    lo, hi = cfg.model.logvar_min, cfg.model.logvar_max
    ctx = Tensor(rng.normal(0.0, 1e3, size=(16, cfg.model.d_model)))
    for g in (st.prior(ctx), st.posterior(ctx, ctx)):
        assert g.log_var.data.min() >= lo and g.log_var.data.max() <= hi
        assert g.mean.shape == (16, cfg.model.z_dim)


def test_generated_steering_within_limit(cfg, rng):
    st = _stage(cfg)
    ctx = Tensor(rng.normal(0.0, 50.0, size=(64, cfg.model.d_model)))
    z = rng.normal(0.0, 50.0, size=(64, cfg.model.z_dim))
    ctrl = st.generate_control(ctx, z, np.zeros(64)).data
    assert np.all(np.abs(ctrl[:, 2]) <= cfg.dynamics.steer_limit)
    assert np.all(np.abs(ctrl[:, 3]) <= cfg.dynamics.accel_limit)


def test_generate_lengths(cfg):
    out = _stage(cfg).iterative_generate(_straight(3), np.zeros(3))
    assert out.short_traj.shape == (3, S, 4)
    assert out.controls.shape == (3, S, 4)
    assert out.dyn_features.shape == (3, cfg.model.d_model)
    assert np.all(np.isfinite(out.dyn_features.data))


def test_zero_controls_give_straight_line(cfg):
    h = _straight(2)
    out = _stage(cfg).iterative_generate(h, np.zeros(2), control_override=lambda k, c: np.zeros(c.shape))
    traj = out.short_traj.data
    np.testing.assert_allclose(traj[..., 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.diff(traj[..., 0], axis=-1), 12.0 * 0.2, atol=1e-9)


def test_first_step_continues_history(cfg):
    h = _straight(2)
    out = _stage(cfg).iterative_generate(h, np.zeros(2))
    expect = step_state(h[:, -1], out.controls.data[:, 0], cfg.dynamics.attrs(), cfg.horizon.dt_s)
    np.testing.assert_array_equal(out.short_traj.data[:, 0], expect)


def test_teacher_forcing_on_own_rollout_is_a_no_op(cfg, rng):
    st = _stage(cfg)
    h = _straight(2)
    noise = rng.standard_normal((S, 2, cfg.model.z_dim))
    free = st.iterative_generate(h, np.zeros(2), noise=noise)
    forced = st.iterative_generate(h, np.zeros(2), teacher=free.short_traj.data, noise=noise)
    np.testing.assert_array_equal(forced.controls.data, free.controls.data)
    np.testing.assert_array_equal(forced.one_step.data, free.short_traj.data)


def test_posterior_pass_runs_on_teacher(cfg, rng):
    st = _stage(cfg)
    h = _straight(2)
    teacher = st.iterative_generate(h, np.zeros(2)).short_traj.data
    post = st.iterative_generate(h, np.zeros(2), mode="posterior", teacher=teacher,
                                 noise=rng.standard_normal((S, 2, cfg.model.z_dim)))
    assert len(post.posteriors) == len(post.priors) == S
    assert float(kl_loss(post.posteriors, post.priors).data) >= 0.0


def test_posterior_needs_teacher(cfg):
    with pytest.raises(ValueError):
        _stage(cfg).iterative_generate(_straight(1), np.zeros(1), mode="posterior")


def test_reparameterization_gradient(rng):
    mean = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    g = GaussianLatent(mean, Tensor(np.zeros((1, 5))))
    n = 200_000
    with Tape() as tape:
        z = g.sample(rng.standard_normal((n, 5)))
        loss = (z * z).sum() * (1.0 / n)
    tape.backward(loss)
    np.testing.assert_allclose(mean.grad, 2.0 * mean.data, atol=0.02)
