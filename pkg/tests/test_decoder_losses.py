import math

import numpy as np
import pytest

from demotraj.config import Config
from demotraj.decoder_losses import (
    NUM_MANEUVERS,
    Decoder,
    DecoderOutput,
    LossWeights,
    Maneuver,
    ModeUnknown,
    PredictionSet,
    accuracy_loss,
    bivariate_nll,
    cross_entropy,
    label_maneuver,
    total_loss,
)
from demotraj.model import DemoModel, build_batch
from demotraj.numkernel.params import ParamStore
from demotraj.numkernel.tensor import Tape, Tensor

F = 25


def _decoder(cfg: Config) -> Decoder:
    return Decoder(ParamStore(0), cfg, F)


def _output(B=2, K=NUM_MANEUVERS, mean=None, logits=None) -> DecoderOutput:
    mean = np.zeros((B, K, F, 2)) if mean is None else mean
    logits = np.zeros((B, K)) if logits is None else logits
    return DecoderOutput(Tensor(mean), Tensor(np.ones((B, K, F, 2))), Tensor(np.zeros((B, K, F))), Tensor(logits))


def test_decoder_shapes_and_probabilities(cfg, rng):
    dec = _decoder(cfg)
    d = cfg.model.d_model
    out = dec(Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(3, d))), np.zeros((3, F, 2)))
    assert out.mean.shape == (3, 6, F, 2)
    probs = out.probs()
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.sigma.data > 0) and np.all(np.abs(out.rho.data) < 1)
    for ps in out.prediction_sets():
        assert ps.trajectories.shape == (6, F, 2)


def test_prediction_sets_undo_frame(rng):
    out = _output(B=1, mean=np.tile([[1.0, 0.0]], (1, 6, F, 1)))
    ps = out.prediction_sets(np.array([[10.0, 5.0]]), np.array([math.pi / 2]))[0]
    np.testing.assert_allclose(ps.trajectories[0, 0], [10.0, 6.0], atol=1e-12)


def test_cross_entropy_uniform_is_log_k():
    ce = cross_entropy(np.zeros((4, 6)), np.array([0, 1, 2, 5]))
    assert float(ce.data) == pytest.approx(math.log(6), abs=1e-12)


def test_ce_only_weights(rng):
    out = _output(logits=rng.normal(size=(2, 6)), mean=rng.normal(size=(2, 6, F, 2)))
    gt, lab = rng.normal(size=(2, F, 2)), np.array([0, 4])
    total, parts = total_loss(out, {"kl": None, "di": None}, gt, lab, LossWeights(0, 0, 1, 0), "highway")
    assert float(total.data) == pytest.approx(float(cross_entropy(out.logits, lab).data), abs=1e-12)
    assert "ac" not in parts


def test_perfect_prediction_leaves_only_nll_constant():
    gt = np.zeros((1, F, 2))
    out = _output(B=1)
    loss = accuracy_loss(out, gt, np.array([2]), "highway")
    # unit sigma, zero correlation: the NLL floor is log(2 pi)
    assert float(loss.data) == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_nuscenes_loss_zero_for_exact_candidate(rng):
    gt = rng.normal(size=(2, F, 2))
    mean = rng.normal(size=(2, 6, F, 2))
    mean[:, 3] = gt
    loss = accuracy_loss(_output(mean=mean), gt, np.zeros(2, dtype=int), "nuscenes")
    assert float(loss.data) < 1e-5


def test_unknown_mode():
    out = _output(B=1)
    with pytest.raises(ModeUnknown):
        accuracy_loss(out, np.zeros((1, F, 2)), np.zeros(1, dtype=int), "argoverse")
    with pytest.raises(ModeUnknown):
        total_loss(out, {}, np.zeros((1, F, 2)), np.zeros(1, dtype=int), LossWeights(), "argoverse")


def test_bivariate_nll_matches_closed_form():
    mean = np.zeros((1, 2))
    sigma = np.array([[2.0, 0.5]])
    rho = np.array([0.3])
    gt = np.array([[1.0, -0.4]])
    got = float(bivariate_nll(Tensor(mean), Tensor(sigma), Tensor(rho), gt).data[0])
    cov = np.array([[4.0, 0.3 * 2.0 * 0.5], [0.3 * 2.0 * 0.5, 0.25]])
    want = 0.5 * gt[0] @ np.linalg.solve(cov, gt[0]) + 0.5 * math.log(np.linalg.det(cov)) + math.log(2 * math.pi)
    assert got == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize(
    "shift, accel, lat, lon",
    [
        (0.0, 0.0, "keep", "normal"),
        (3.5, 0.0, "left_change", "normal"),
        (-3.5, -1.0, "right_change", "braking"),
        (1.75, 0.0, "keep", "normal"),
        (-1.75, 0.0, "keep", "normal"),
        (1.7500001, -0.5, "left_change", "normal"),
    ],
)
def test_labels(shift, accel, lat, lon):
    hist = np.array([[0.0, 0.0, 20.0, 0.0]])
    n, dt = 25, 0.2
    fut = np.zeros((n, 4))
    fut[:, 2] = 20.0 + accel * dt * np.arange(1, n + 1)
    fut[-1, 1] = shift
    assert label_maneuver(hist, fut, dt) == Maneuver(lat, lon)


def test_maneuver_index_roundtrip():
    for k in range(NUM_MANEUVERS):
        assert Maneuver.from_index(k).index == k
    with pytest.raises(ValueError):
        Maneuver("sideways", "normal")


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1, 1)


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((6, F)), np.ones(6) / 6)
    with pytest.raises(ValueError):
        PredictionSet(np.zeros((6, F, 2)), np.ones(5) / 5)
    ps = PredictionSet(np.arange(6)[:, None, None] * np.ones((6, F, 2)), np.eye(6)[4])
    assert ps.best[0, 0] == 4.0
    again = PredictionSet.from_dict(ps.to_dict())
    np.testing.assert_array_equal(again.trajectories, ps.trajectories)


def test_gradient_reaches_every_parameter(small_cfg, scenes):
    model = DemoModel(small_cfg)
    batch = build_batch(scenes[:4], small_cfg)
    model.store.zero_grad()
    with Tape() as tape:
        loss, _ = model.loss(batch, np.random.default_rng(0))
    tape.backward(loss)
    dead = [name for name, p in model.store.items() if not np.any(p.grad)]
    assert dead == []
