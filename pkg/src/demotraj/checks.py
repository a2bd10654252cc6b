"""Invariant checks shared by ``demo verify`` and the test suite.

Each check returns a :class:`CheckResult`; ``run_all`` collects them into
the pass/fail matrix the CLI prints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import Config
from .data_io import HorizonSpec, synth_scenario
from .dynamics import (
    FullContinuousState,
    KinematicState,
    VehicleAttributes,
    continuous_rates,
    inverse_arrays,
    rk4_step,
    rollout_arrays,
    rotate_positions,
    step_state,
)
from .eval_metrics import min_ade, rmse_at
from .decoder_losses import PredictionSet
from .dyn_stage import GaussianLatent, kl_loss
from .numkernel import layers as L
from .numkernel import tensor as T
from .numkernel.gradcheck import gradcheck
from .numkernel.params import ParamStore
from .numkernel.tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------- dynamics

GOLDEN_VY = 3900.0 / 35000.0


def golden_step_vy(attrs: VehicleAttributes | None = None) -> float:
    attrs = attrs or VehicleAttributes()
    out = step_state(np.array([0.0, 0.0, 10.0, 0.0]), np.array([0.0, 0.1, 0.05, 0.0]), attrs, 0.1)
    return float(out[3])


def roundtrip_errors(n: int = 10_000, seed: int = 0, attrs: VehicleAttributes | None = None,
                     dt: float = 0.1) -> dict[str, float]:
    """Worst absolute errors of the inverse map over random (state, control) pairs with |delta| <= 0.3."""
    attrs = attrs or VehicleAttributes()
    rng = np.random.default_rng(seed)
    s0 = np.stack([
        rng.uniform(-50, 50, n), rng.uniform(-50, 50, n),
        rng.uniform(1.0, 35.0, n), rng.uniform(-2.0, 2.0, n),
    ], axis=-1)
    ctrl = np.stack([
        rng.uniform(-math.pi, math.pi, n), rng.uniform(-0.5, 0.5, n),
        rng.uniform(-0.3, 0.3, n), rng.uniform(-5.0, 5.0, n),
    ], axis=-1)
    s1 = step_state(s0, ctrl, attrs, dt)
    rec, _ = inverse_arrays(s0, s1, attrs, dt)
    dphi = np.angle(np.exp(1j * (rec[:, 0] - ctrl[:, 0])))
    replay = step_state(s0, rec, attrs, dt)
    return {
        "accel": float(np.max(np.abs(rec[:, 3] - ctrl[:, 3]))),
        "phi": float(np.max(np.abs(dphi))),
        "vy": float(np.max(np.abs(replay[:, 3] - s1[:, 3]))),
    }


def _profile(t: float, amp: float) -> tuple[float, float]:
    return amp * math.sin(math.pi * t), 0.5 * math.cos(math.pi * t)


def convergence_errors(dts=(0.1, 0.05, 0.025), amp: float = 0.015, horizon: float = 2.0,
                       attrs: VehicleAttributes | None = None, h_ref: float = 1e-4) -> list[float]:
    """Final position error of the discrete model against a fine RK4 solution.

    The discrete model is driven with the reference's yaw and yaw-rate
    histories; its acceleration input is the reference's effective
    longitudinal rate, since the discrete vx row carries no coupling terms.
    """
    attrs = attrs or VehicleAttributes()
    n_ref = int(round(horizon / h_ref))
    state = FullContinuousState(KinematicState(0.0, 0.0, 20.0, 0.0), 0.0, 0.0)
    ref = [state.as_array()]
    for k in range(n_ref):
        steer, accel = _profile(k * h_ref, amp)
        # hold the controls over each fine step
        state = rk4_step(state, steer, accel, attrs, h_ref)
        ref.append(state.as_array())
    ref = np.array(ref)
    errs = []
    for dt in dts:
        stride = int(round(dt / h_ref))
        s = ref[0, :4].copy()
        for k in range(int(round(horizon / dt))):
            y6 = ref[k * stride]
            steer, accel = _profile(k * dt, amp)
            a_eff = continuous_rates(y6, steer, accel, attrs)[2]
            s = step_state(s, np.array([y6[4], y6[5], steer, a_eff]), attrs, dt)
        errs.append(float(np.hypot(*(s[:2] - ref[-1, :2]))))
    return errs


def frame_equivariance_error(n: int = 100, seed: int = 1, attrs: VehicleAttributes | None = None) -> float:
    """Worst position gap between rotating a rollout and rolling out a rotated start."""
    attrs = attrs or VehicleAttributes()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        theta = rng.uniform(-math.pi, math.pi)
        s0 = np.array([rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(5, 30), rng.uniform(-1, 1)])
        ctrl = np.stack([np.cumsum(rng.uniform(-0.05, 0.05, 20)), rng.uniform(-0.2, 0.2, 20),
                         rng.uniform(-0.1, 0.1, 20), rng.uniform(-2, 2, 20)], axis=-1)
        base = rotate_positions(rollout_arrays(s0, ctrl, attrs, 0.1), theta)
        rc = ctrl.copy()
        rc[:, 0] += theta
        rot = rollout_arrays(rotate_positions(s0, theta), rc, attrs, 0.1)
        worst = max(worst, float(np.max(np.abs(base[:, :2] - rot[:, :2]))))
    return worst


# ---------------------------------------------------------------- gradients


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _relu_mlp_case(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    W1, b1 = _param(rng, 3, 5), _param(rng, 5)
    W2, b2 = _param(rng, 5, 2), _param(rng, 2)
    # resample until no hidden pre-activation sits near the kink
    while np.min(np.abs(x.data @ W1.data + b1.data)) < 1e-3:
        b1.data = rng.normal(size=5)
    return (lambda x, W1, b1, W2, b2: L.mlp(x, [(W1, b1), (W2, b2)], "relu")), [x, W1, b1, W2, b2]


def _gcn_case(rng):
    x = _param(rng, 2, 4, 3)
    W, b = _param(rng, 3, 3), _param(rng, 3)
    adj = (rng.uniform(size=(2, 4, 4)) < 0.5).astype(float)
    adj = np.triu(adj, 1)
    adj = adj + np.swapaxes(adj, -1, -2)
    a_hat = L.normalized_adjacency(adj)
    while np.min(np.abs(a_hat @ x.data @ W.data + b.data)) < 1e-3:
        b.data = rng.normal(size=3)
    return (lambda x, W, b: L.graph_conv(x, adj, W, b)), [x, W, b]


def _attention_case(rng):
    store = ParamStore(int(rng.integers(1 << 30)))
    smlp = L.ScoreMLP(store, "s", 4)
    vmlp = L.MLP(store, "v", [3, 3], activation="gelu", final_activation="gelu")
    Q, K, V = _param(rng, 2, 3, 3), _param(rng, 2, 4, 3), _param(rng, 2, 4, 3)
    mask = np.array([[True, True, False, True]])[:, None, :]
    params = [smlp.l1.W, smlp.l1.b, smlp.l2.W, smlp.l2.b, vmlp.layers[0].W, vmlp.layers[0].b]
    def fn(Q, K, V, *ps):
        return L.attention_head(Q, K, V, 3, smlp, vmlp, mask)
    return fn, [Q, K, V] + list(params)


def _ssm_case(rng):
    store = ParamStore(int(rng.integers(1 << 30)))
    scan = L.SelectiveScan(store, "ssm", 3, 2)
    for p in scan.params.values():
        p.data = p.data + rng.normal(0, 0.1, size=p.shape)
    x = _param(rng, 2, 5, 3)
    names = list(scan.params)
    def fn(x, *ps):
        return L.selective_ssm_scan(x, dict(zip(names, ps)))
    return fn, [x] + [scan.params[n] for n in names]


def _gru_cell_case(rng):
    x, h = _param(rng, 3, 4), _param(rng, 3, 5)
    ps = {"W_i": _param(rng, 4, 15, scale=0.5), "W_h": _param(rng, 5, 15, scale=0.5),
          "b_i": _param(rng, 15), "b_h": _param(rng, 15)}
    names = list(ps)
    return (lambda x, h, *p: L.gru_cell(x, h, dict(zip(names, p)))), [x, h] + list(ps.values())


def _gru_seq_case(rng):
    gi = _param(rng, 2, 6, 12)
    return (lambda g, W, b: T.gru_recurrence(g, W, b)), [gi, _param(rng, 4, 12, scale=0.5), _param(rng, 12)]


def _kl_case(rng):
    mq, lq, mp, lp = (_param(rng, 3, 4) for _ in range(4))
    return (lambda a, b, c, d: kl_loss([GaussianLatent(a, b)], [GaussianLatent(c, d)])), [mq, lq, mp, lp]


def _dynamics_case(rng):
    s = Tensor(np.column_stack([rng.normal(size=4), rng.normal(size=4), rng.uniform(5, 20, 4), rng.normal(0, 0.5, 4)]), requires_grad=True)
    c = Tensor(np.column_stack([rng.normal(0, 0.5, 4), rng.normal(0, 0.2, 4), rng.normal(0, 0.1, 4), rng.normal(size=4)]), requires_grad=True)
    return (lambda s, c: step_state(s, c, VehicleAttributes(), 0.1)), [s, c]


LAYER_CASES: dict[str, Callable] = {
    "matmul": lambda r: (lambda a, b: a @ b, [_param(r, 3, 4), _param(r, 4, 2)]),
    "elementwise": lambda r: (lambda a, b: (a * b + a / (b * b + 1.0) - T.exp(a * 0.3)).sum(axis=0),
                              [_param(r, 3, 4), _param(r, 4)]),
    "shape_ops": lambda r: (lambda a, b: T.concat([T.reshape(a, (4, 3)), T.transpose(b)], axis=0)[1:5, ::2].mean(axis=1),
                            [_param(r, 3, 4), _param(r, 3, 3)]),
    "gelu": lambda r: (T.gelu, [_param(r, 5, 3, scale=2.0)]),
    "sigmoid_tanh_softplus": lambda r: (lambda a: T.sigmoid(a) * T.tanh(a) + T.softplus(a), [_param(r, 4, 3, scale=2.0)]),
    "softmax": lambda r: (lambda a: T.softmax(a, axis=-1), [_param(r, 3, 5)]),
    "log_softmax": lambda r: (lambda a: T.log_softmax(a, axis=0), [_param(r, 4, 3)]),
    "glu": lambda r: (L.glu, [_param(r, 3, 4), _param(r, 4, 2), _param(r, 2), _param(r, 4, 2), _param(r, 2)]),
    "layer_norm": lambda r: (L.layer_norm, [_param(r, 3, 6), _param(r, 6), _param(r, 6)]),
    "mlp_relu": _relu_mlp_case,
    "gru_cell": _gru_cell_case,
    "gru_sequence": _gru_seq_case,
    "attention_head": _attention_case,
    "selective_ssm_scan": _ssm_case,
    "linear_scan": lambda r: (lambda a, u: T.linear_scan(a, u, axis=-2),
                              [Tensor(r.uniform(0.2, 0.95, (2, 5, 3)), requires_grad=True), _param(r, 2, 5, 3)]),
    "graph_conv": _gcn_case,
    "kl_loss": _kl_case,
    "discrete_dynamics": _dynamics_case,
}


def layer_gradcheck(name: str, draws: int = 10, seed: int = 0, eps: float = 1e-6) -> float:
    """Worst relative error over ``draws`` random parameter draws."""
    builder = LAYER_CASES[name]
    worst = 0.0
    for k in range(draws):
        rng = np.random.default_rng([seed, k])
        fn, inputs = builder(rng)
        worst = max(worst, gradcheck(fn, inputs, eps=eps, seed=k))
    return worst


# ---------------------------------------------------------------- losses and metrics


def kl_fixture() -> float:
    one = GaussianLatent(Tensor(np.array([[1.0]])), Tensor(np.array([[0.0]])))
    std = GaussianLatent(Tensor(np.array([[0.0]])), Tensor(np.array([[0.0]])))
    return float(kl_loss([one], [std]).data)


def kl_min_random(n: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    q = GaussianLatent(Tensor(rng.normal(size=(n, 4))), Tensor(rng.uniform(-3, 3, (n, 4))))
    p = GaussianLatent(Tensor(rng.normal(size=(n, 4))), Tensor(rng.uniform(-3, 3, (n, 4))))
    mq, lq, mp, lp = q.mean.data, q.log_var.data, p.mean.data, p.log_var.data
    per = 0.5 * (np.exp(lq - lp) + (mq - mp) ** 2 * np.exp(-lp) - 1 - (lq - lp)).sum(axis=-1)
    # the batched loss is the mean of the per-pair values
    assert abs(float(kl_loss([q], [p]).data) - per.mean()) < 1e-9
    return float(per.min())


def rmse_fixture() -> float:
    gt = np.zeros((2, 5, 2))
    pred = gt.copy()
    pred[0, :, 0] = 3.0
    pred[1, :, 1] = 4.0
    return rmse_at(pred, gt, 1, 0.2)


def min_ade_fixture() -> float:
    gt = np.zeros((4, 2))
    cands = np.stack([np.full((4, 2), [d, 0.0]) for d in (1.0, 2.0, 3.0)])
    # probability order 3 m, 1 m, 2 m
    return min_ade(PredictionSet(cands, np.array([0.3, 0.2, 0.5])), gt, 2)


def min_ade_monotone(n: int = 1000, seed: int = 0) -> int:
    """Number of random prediction sets where minADE increases with K (should be 0)."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        p = rng.uniform(size=6)
        ps = PredictionSet(rng.normal(size=(6, 8, 2)) * 3, p / p.sum())
        gt = rng.normal(size=(8, 2))
        vals = [min_ade(ps, gt, k) for k in range(1, 7)]
        bad += int(any(b > a for a, b in zip(vals, vals[1:])))
    return bad


# ---------------------------------------------------------------- model-level


def permutation_equivariance_error(n: int = 100, seed: int = 3, cfg: Config | None = None) -> float:
    """Worst |F_i(pi scene) - pi F_i(scene)| over random scenes and permutations of surrounding rows."""
    from .interaction import InteractionStage, vehicle_adjacency

    cfg = cfg or Config()
    d = cfg.model.d_model
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    steps = 6
    stage = InteractionStage(store, cfg, steps)
    worst = 0.0
    # scenes are evaluated in batches to keep the check fast
    batch = 10
    for start in range(0, n, batch):
        B = min(batch, n - start)
        V = 1 + int(rng.integers(2, cfg.data.n_max + 1))
        seq = rng.normal(size=(B, V, steps, 4)) * np.array([10, 3, 3, 0.5]) + np.array([0, 0, 20, 0])
        F_d = Tensor(rng.normal(size=(B, V, d)))
        mask = rng.uniform(size=(B, V)) < 0.85
        mask[:, 0] = True
        adj = vehicle_adjacency(seq[:, :, -1, :2], mask, cfg.model.graph_radius_m)
        out = stage(seq, F_d, mask, adj).data
        perm = np.concatenate([[0], 1 + rng.permutation(V - 1)])
        adj_p = vehicle_adjacency(seq[:, perm, -1, :2], mask[:, perm], cfg.model.graph_radius_m)
        out_p = stage(seq[:, perm], Tensor(F_d.data[:, perm]), mask[:, perm], adj_p).data
        diff = np.abs(out_p - out[:, perm])[mask[:, perm]]
        worst = max(worst, float(diff.max()))
    return worst


def latency_ms(model=None, repeats: int = 7, seed: int = 0) -> float:
    """Median single-scene inference time (8 surrounding vehicles, highway mode)."""
    from .model import DemoModel

    if model is None:
        model = DemoModel(Config())
    hz = HorizonSpec.from_config(model.cfg.horizon)
    scene, _ = synth_scenario("lane_change_left", 0.1, seed, horizon=hz, n_surround=model.cfg.data.n_max)
    model.predict([scene])  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict([scene])
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


LATENCY_BUDGET_MS = 50.0


def run_all(model=None, quick: bool = True) -> list[CheckResult]:
    """Run every invariant; ``quick`` trims sample counts for interactive use."""
    out: list[CheckResult] = []

    def add(name, passed, detail):
        out.append(CheckResult(name, bool(passed), detail))

    draws = 3 if quick else 10
    for name in LAYER_CASES:
        err = layer_gradcheck(name, draws=draws)
        add(f"gradcheck:{name}", err < 1e-4, f"max rel err {err:.2e}")
    e = roundtrip_errors(2000 if quick else 10_000)
    add("dynamics:roundtrip", max(e.values()) < 1e-9, ", ".join(f"{k} {v:.1e}" for k, v in e.items()))
    vy = golden_step_vy()
    add("dynamics:golden_step", abs(vy - GOLDEN_VY) < 1e-12, f"vy'={vy:.12f}")
    errs = convergence_errors()
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    add("dynamics:convergence", all(1.5 <= r <= 2.5 for r in ratios), "ratios " + ", ".join(f"{r:.3f}" for r in ratios))
    fe = frame_equivariance_error(20 if quick else 100)
    add("dynamics:frame_equivariance", fe < 1e-9, f"max {fe:.1e}")
    kl = kl_fixture()
    add("loss:kl_fixture", abs(kl - 0.5) < 1e-12, f"KL={kl:.15f}")
    add("loss:kl_nonnegative", kl_min_random() >= 0.0, "1000 random pairs")
    r = rmse_fixture()
    add("metric:rmse_fixture", abs(r - 3.5355) < 1e-4, f"{r:.6f}")
    a = min_ade_fixture()
    add("metric:min_ade_topk", a == 1.0, f"{a}")
    bad = min_ade_monotone(200 if quick else 1000)
    add("metric:min_ade_monotone", bad == 0, f"{bad} violations")
    pe = permutation_equivariance_error(20 if quick else 100)
    add("interaction:permutation_equivariance", pe < 1e-9, f"max {pe:.1e}")
    ms = latency_ms(model)
    add("latency:single_scene", ms < LATENCY_BUDGET_MS, f"{ms:.1f} ms (budget {LATENCY_BUDGET_MS:.0f} ms)")
    return out
