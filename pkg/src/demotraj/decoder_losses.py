"""Multi-modal decoder, maneuver labels and the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .numkernel import tensor as T
from .numkernel.layers import GLU, MLP
from .numkernel.params import ParamStore
from .numkernel.tensor import Tensor

LATERAL = ("keep", "left_change", "right_change")
LONGITUDINAL = ("normal", "braking")


class ModeUnknown(ValueError):
    pass


@dataclass(frozen=True)
class Maneuver:
    lateral: str = "keep"
    longitudinal: str = "normal"

    def __post_init__(self) -> None:
        if self.lateral not in LATERAL or self.longitudinal not in LONGITUDINAL:
            raise ValueError(f"unknown maneuver ({self.lateral}, {self.longitudinal})")

    @property
    def index(self) -> int:
        return LATERAL.index(self.lateral) * len(LONGITUDINAL) + LONGITUDINAL.index(self.longitudinal)

    @classmethod
    def from_index(cls, k: int) -> "Maneuver":
        lat, lon = divmod(int(k), len(LONGITUDINAL))
        return cls(LATERAL[lat], LONGITUDINAL[lon])


NUM_MANEUVERS = len(LATERAL) * len(LONGITUDINAL)


@dataclass
class PredictionSet:
    """K candidate futures ``(K, F, 2)`` and their probabilities ``(K,)``."""

    trajectories: np.ndarray
    maneuver_probs: np.ndarray

    def __post_init__(self) -> None:
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.maneuver_probs = np.asarray(self.maneuver_probs, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[-1] != 2:
            raise ValueError(f"trajectories must be (K, F, 2), got {self.trajectories.shape}")
        if self.maneuver_probs.shape != self.trajectories.shape[:1]:
            raise ValueError("one probability per candidate")

    @property
    def best(self) -> np.ndarray:
        return self.trajectories[int(np.argmax(self.maneuver_probs))]

    def to_dict(self) -> dict:
        return {"trajectories": self.trajectories.tolist(), "maneuver_probs": self.maneuver_probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        return cls(np.array(d["trajectories"], dtype=np.float64), np.array(d["maneuver_probs"], dtype=np.float64))


@dataclass(frozen=True)
class LossWeights:
    w_kl: float = 0.5
    w_di: float = 1.0
    w_ce: float = 1.0
    w_ac: float = 1.0

    def __post_init__(self) -> None:
        w = (self.w_kl, self.w_di, self.w_ce, self.w_ac)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")

    @classmethod
    def from_config(cls, cfg: Config) -> "LossWeights":
        lc = cfg.loss
        return cls(lc.w_kl, lc.w_di, lc.w_ce, lc.w_ac)


def label_maneuver(history: np.ndarray, future: np.ndarray, dt: float,
                   lane_threshold: float = 1.75, brake_threshold: float = -0.5) -> Maneuver:
    """Label from net lateral shift (+y is left) and mean future acceleration.

    Both thresholds are strict, so a shift of exactly 1.75 m is ``keep``.
    """
    last = np.asarray(history)[-1]
    future = np.asarray(future)
    shift = future[-1, 1] - last[1]
    if shift > lane_threshold:
        lat = "left_change"
    elif shift < -lane_threshold:
        lat = "right_change"
    else:
        lat = "keep"
    v0 = math.hypot(last[2], last[3])
    v1 = math.hypot(future[-1, 2], future[-1, 3])
    mean_acc = (v1 - v0) / (len(future) * dt)
    return Maneuver(lat, "braking" if mean_acc < brake_threshold else "normal")


def label_scene(scene, cfg: Config | None = None) -> Maneuver:
    if scene.target_future is None:
        raise ValueError(f"{scene.scene_id}: no future to label")
    dc = (cfg or Config()).data
    return label_maneuver(scene.target_history, scene.target_future, scene.dt_s,
                          dc.lane_change_threshold_m, dc.brake_threshold_mps2)


# ----------------------------------------------------------------------- decoder


@dataclass
class DecoderOutput:
    mean: Tensor  # (B, K, F, 2)
    sigma: Tensor  # (B, K, F, 2)
    rho: Tensor  # (B, K, F)
    logits: Tensor  # (B, K)

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def prediction_sets(self, offsets: np.ndarray | None = None, rotation: np.ndarray | None = None) -> list[PredictionSet]:
        """Per-scene PredictionSets mapped back to world coordinates.

        ``rotation`` (B,) is applied first, then the ``offsets`` (B, 2) shift.
        """
        mu = self.mean.data
        if rotation is not None:
            c, s = np.cos(rotation)[:, None, None], np.sin(rotation)[:, None, None]
            mu = np.stack([c * mu[..., 0] - s * mu[..., 1], s * mu[..., 0] + c * mu[..., 1]], axis=-1)
        if offsets is not None:
            mu = mu + offsets[:, None, None, :]
        return [PredictionSet(m, p) for m, p in zip(mu, self.probs())]


class Decoder:
    """Composite token -> GLU -> probability head and K maneuver-conditioned trajectories.

    Each candidate is a residual over a constant-velocity anchor: the head
    emits velocity corrections that are integrated into positions.
    """

    def __init__(self, store: ParamStore, cfg: Config, f_steps: int) -> None:
        m = cfg.model
        d, K = m.d_model, m.num_maneuvers
        self.cfg, self.f_steps, self.K = cfg, f_steps, K
        self.dt = cfg.horizon.dt_s
        self.tok_i = MLP(store, "dec.tok_i", [d, d, d], activation="gelu")
        self.tok_d = MLP(store, "dec.tok_d", [d, d, d], activation="gelu")
        self.glu = GLU(store, "dec.glu", 2 * d, d)
        self.prob_head = MLP(store, "dec.prob", [d, d, K], activation="gelu", final_gain=0.1)
        self.traj_head = MLP(store, "dec.traj", [d + K, 2 * d, 2 * d, 5 * f_steps], activation="gelu", final_gain=0.1)

    def __call__(self, F_i_target, F_d_target, anchor: np.ndarray) -> DecoderOutput:
        """F_i_target, F_d_target (B, d); anchor (B, F, 2) baseline positions."""
        lc = self.cfg.loss
        B = F_i_target.shape[0]
        g = self.glu(T.concat([self.tok_i(F_i_target), self.tok_d(F_d_target)], axis=-1))
        logits = self.prob_head(g)
        onehot = np.broadcast_to(np.eye(self.K), (B, self.K, self.K))
        gk = T.broadcast_to(T.reshape(g, (B, 1, -1)), (B, self.K, g.shape[-1]))
        raw = T.reshape(self.traj_head(T.concat([gk, onehot], axis=-1)), (B, self.K, self.f_steps, 5))
        # integrate velocity corrections
        steps = np.tril(np.ones((self.f_steps, self.f_steps))) * (self.dt * self.cfg.model.vel_scale_mps)
        dpos = T.matmul(Tensor(steps), raw[..., 0:2])
        mean = dpos + anchor[:, None, :, :]
        sigma = T.softplus(raw[..., 2:4]) + lc.sigma_floor
        rho = T.tanh(raw[..., 4]) * lc.rho_limit
        return DecoderOutput(mean, sigma, rho, logits)


# ------------------------------------------------------------------------ losses


def cross_entropy(logits, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    logp = T.log_softmax(T.as_tensor(logits), axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -_mean(picked, weights)


def _mean(x: Tensor, weights: np.ndarray | None) -> Tensor:
    if weights is None:
        return x.mean()
    w = np.asarray(weights, dtype=np.float64)
    return (x * w).sum() * (1.0 / max(w.sum(), 1e-12))


def bivariate_nll(mean, sigma, rho, gt: np.ndarray) -> Tensor:
    """Per-step negative log-likelihood of ``gt`` under the bivariate Gaussian; (..., F)."""
    dx = (gt[..., 0] - mean[..., 0]) / sigma[..., 0]
    dy = (gt[..., 1] - mean[..., 1]) / sigma[..., 1]
    one_m = 1.0 - rho * rho
    quad = (dx * dx + dy * dy - 2.0 * rho * dx * dy) / (2.0 * one_m)
    return quad + T.log(sigma[..., 0]) + T.log(sigma[..., 1]) + 0.5 * T.log(one_m) + math.log(2 * math.pi)


def _displacement(mean, gt: np.ndarray) -> Tensor:
    diff = mean - gt
    return T.sqrt((diff * diff).sum(axis=-1) + 1e-12)


def accuracy_loss(out: DecoderOutput, gt_future: np.ndarray, gt_maneuver: np.ndarray, mode: str,
                  ade_weight: float = 0.5, weights: np.ndarray | None = None) -> Tensor:
    """highway: MSE + NLL of the ground-truth maneuver's candidate; nuscenes: weighted minADE/minFDE."""
    B = gt_future.shape[0]
    if mode == "highway":
        idx = np.asarray(gt_maneuver, dtype=int)
        rows = np.arange(B)
        mu, sg, rh = out.mean[rows, idx], out.sigma[rows, idx], out.rho[rows, idx]
        diff = mu - gt_future
        mse = (diff * diff).sum(axis=-1).mean(axis=-1)
        nll = bivariate_nll(mu, sg, rh, gt_future).mean(axis=-1)
        return _mean(mse + nll, weights)
    if mode == "nuscenes":
        disp = _displacement(out.mean, gt_future[:, None])  # (B, K, F)
        ade = disp.mean(axis=-1)
        fde = disp[..., -1]
        pick_a = np.zeros(ade.shape)
        pick_a[np.arange(B), ade.data.argmin(axis=-1)] = 1.0
        pick_f = np.zeros(fde.shape)
        pick_f[np.arange(B), fde.data.argmin(axis=-1)] = 1.0
        per = (ade * pick_a).sum(axis=-1) * ade_weight + (fde * pick_f).sum(axis=-1) * (1.0 - ade_weight)
        return _mean(per, weights)
    raise ModeUnknown(f"unknown dataset mode {mode!r}")


def total_loss(out: DecoderOutput, stage_losses: dict, gt_future: np.ndarray, gt_maneuver: np.ndarray,
               weights: LossWeights, mode: str, ade_weight: float = 0.5,
               scene_weights: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """``w_kl L_KL + w_di L_DI + w_ce L_CE + w_ac L_AC``; returns the total and its parts."""
    if mode not in ("highway", "nuscenes"):
        raise ModeUnknown(f"unknown dataset mode {mode!r}")
    parts = {"kl": stage_losses.get("kl"), "di": stage_losses.get("di")}
    if weights.w_ce > 0:
        parts["ce"] = cross_entropy(out.logits, gt_maneuver, scene_weights)
    if weights.w_ac > 0:
        parts["ac"] = accuracy_loss(out, gt_future, gt_maneuver, mode, ade_weight, scene_weights)
    total = None
    for key, w in (("kl", weights.w_kl), ("di", weights.w_di), ("ce", weights.w_ce), ("ac", weights.w_ac)):
        term = parts.get(key)
        if w == 0 or term is None:
            continue
        term = T.as_tensor(term) * w
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all weighted loss terms are missing")
    report = {k: float(T.as_tensor(v).data) for k, v in parts.items() if v is not None}
    report["total"] = float(total.data)
    return total, report
