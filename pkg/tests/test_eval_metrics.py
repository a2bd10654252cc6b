import json
import math

import numpy as np
import pytest

from demotraj.decoder_losses import PredictionSet
from demotraj.eval_metrics import (
    HorizonExceeded,
    KTooLarge,
    MetricReport,
    baseline_predictions,
    const_velocity_baseline,
    evaluate,
    format_table,
    min_ade,
    min_fde,
    rmse_at,
)

DT = 0.2
F = 25


def _line(offset_y: float = 0.0) -> np.ndarray:
    t = DT * np.arange(1, F + 1)
    return np.stack([10.0 * t, np.full(F, offset_y)], axis=1)


def _offsets_set(probs) -> PredictionSet:
    return PredictionSet(np.stack([_line(1.0), _line(2.0), _line(3.0)]), np.asarray(probs, dtype=float))


def test_rmse_perfect_is_zero():
    assert rmse_at([_line()], [_line()], 2, DT) == 0.0


def test_rmse_two_scene_fixture():
    preds = [_line(3.0), _line(4.0)]
    assert rmse_at(preds, [_line(), _line()], 1, DT) == pytest.approx(3.5355, abs=1e-4)


def test_rmse_single_scene_is_its_error():
    assert rmse_at([_line(2.5)], [_line()], 5, DT) == pytest.approx(2.5, abs=1e-12)


def test_rmse_mixture_between_parts(rng):
    a = [_line(e) for e in rng.uniform(0, 2, 5)]
    b = [_line(e) for e in rng.uniform(3, 6, 7)]
    gts = [_line()] * 12
    ra, rb = rmse_at(a, gts[:5], 3, DT), rmse_at(b, gts[:7], 3, DT)
    assert min(ra, rb) <= rmse_at(a + b, gts, 3, DT) <= max(ra, rb)


def test_rmse_horizon_exceeded():
    with pytest.raises(HorizonExceeded):
        rmse_at([_line()], [_line()], 6, DT)
    with pytest.raises(HorizonExceeded):
        rmse_at([_line()], [_line()], 0, DT)


def test_min_ade_exact_candidate():
    ps = PredictionSet(np.stack([_line(), _line(1.0)]), np.array([0.3, 0.7]))
    assert min_ade(ps, _line(), 1) == pytest.approx(1.0)
    assert min_ade(ps, _line(), 2) == 0.0
    assert min_fde(ps, _line(), 2) == 0.0


def test_min_ade_top_k_fixture():
    ps = _offsets_set([0.3, 0.2, 0.5])  # ranking 3 m, 1 m, 2 m
    assert min_ade(ps, _line(), 2) == 1.0
    assert min_fde(ps, _line(), 2) == 1.0
    assert min_ade(ps, _line(), 1) == 3.0


def test_k_too_large():
    with pytest.raises(KTooLarge):
        min_ade(_offsets_set([0.2, 0.3, 0.5]), _line(), 4)
    with pytest.raises(KTooLarge):
        min_fde(_offsets_set([0.2, 0.3, 0.5]), _line(), 0)


def test_min_ade_monotone_in_k(rng):
    for _ in range(1000):
        ps = PredictionSet(rng.normal(size=(6, 5, 2)), rng.dirichlet(np.ones(6)))
        gt = rng.normal(size=(5, 2))
        vals = [min_ade(ps, gt, k) for k in range(1, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cv_baseline_exact_on_constant_velocity():
    hist = np.zeros((15, 4))
    hist[:, 0] = 12.0 * DT * np.arange(15)
    hist[:, 2] = 12.0
    pred = const_velocity_baseline(hist, F, DT)
    np.testing.assert_allclose(pred[:, 0], hist[-1, 0] + 12.0 * DT * np.arange(1, F + 1), atol=1e-12)
    np.testing.assert_allclose(pred[:, 1], 0.0, atol=1e-12)


def test_cv_baseline_stationary():
    hist = np.tile([[4.0, -2.0, 0.0, 0.0]], (15, 1))
    np.testing.assert_array_equal(const_velocity_baseline(hist, F, DT), np.tile([[4.0, -2.0]], (F, 1)))


def test_cv_baseline_error_grows_on_accelerating_scene():
    a, v0 = 1.5, 10.0
    t_all = DT * np.arange(15 + F)
    x = v0 * t_all + 0.5 * a * t_all**2
    hist = np.stack([x[:15], np.zeros(15), v0 + a * t_all[:15], np.zeros(15)], axis=1)
    gt = np.stack([x[15:], np.zeros(F)], axis=1)
    err = np.abs(const_velocity_baseline(hist, F, DT)[:, 0] - gt[:, 0])
    assert np.all(np.diff(err) > 0)
    # the gap is the closed-form half a t^2
    np.testing.assert_allclose(err, 0.5 * a * (DT * np.arange(1, F + 1)) ** 2, atol=1e-9)


def test_cv_baseline_follows_heading():
    ang = math.radians(30.0)
    hist = np.zeros((3, 4))
    hist[:, 0] = np.cos(ang) * np.arange(3)
    hist[:, 1] = np.sin(ang) * np.arange(3)
    hist[:, 2] = 5.0
    pred = const_velocity_baseline(hist, 2, DT)
    np.testing.assert_allclose(pred[0] - hist[-1, :2], 5.0 * DT * np.array([np.cos(ang), np.sin(ang)]), atol=1e-12)


def test_evaluate_report_and_table(tmp_path):
    preds = [_offsets_set([0.3, 0.2, 0.5]), _offsets_set([0.6, 0.3, 0.1])]
    rep = evaluate(preds, [_line(), _line()], DT, ks=(1, 3), label="demo")
    assert sorted(rep.rmse_per_second) == [1, 2, 3, 4, 5]
    assert rep.rmse_per_second[1] == pytest.approx(math.sqrt((9 + 1) / 2))
    assert rep.min_ade_k[3] == 1.0
    again = MetricReport.from_dict(json.loads(rep.to_json()))
    assert again == rep
    base = evaluate(baseline_predictions([np.zeros((2, 4))] * 2, F, DT), [_line(), _line()], DT, (1,), "cv")
    table = format_table([rep, base])
    assert table.splitlines()[0].split()[:3] == ["model", "n", "1s"]
    assert "demo" in table and "cv" in table
    with pytest.raises(KTooLarge):
        evaluate(preds, [_line(), _line()], DT, ks=(6,))


def test_report_rejects_bad_values():
    with pytest.raises(ValueError):
        MetricReport({1: float("nan")})
    with pytest.raises(ValueError):
        MetricReport({1: -1.0})
