"""Displacement metrics, the constant-velocity baseline and metric reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoder_losses import PredictionSet


class HorizonExceeded(ValueError):
    pass


class KTooLarge(ValueError):
    pass


def _step_index(second: float, dt: float, steps: int) -> int:
    k = second / dt
    idx = int(round(k))
    if second <= 0 or abs(k - idx) > 1e-9 or idx > steps:
        raise HorizonExceeded(f"{second} s is not a valid step for dt={dt} and {steps} steps")
    return idx - 1


def rmse_at(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], second: float, dt: float) -> float:
    """sqrt(mean squared Euclidean error at ``second``) over scenes.

    ``preds`` are each scene's most probable trajectory ``(F, 2)``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)[..., :2]
    if preds.shape != gts.shape or len(preds) == 0:
        raise ValueError(f"prediction and ground truth shapes differ: {preds.shape} vs {gts.shape}")
    i = _step_index(second, dt, preds.shape[1])
    err = preds[:, i] - gts[:, i]
    return float(math.sqrt(np.mean(np.sum(err * err, axis=-1))))


def _top_k(pred: PredictionSet, k: int) -> np.ndarray:
    n = len(pred.maneuver_probs)
    if k < 1 or k > n:
        raise KTooLarge(f"K={k} but only {n} candidates")
    order = np.argsort(-pred.maneuver_probs, kind="stable")[:k]
    return pred.trajectories[order]


def min_ade(pred: PredictionSet, gt: np.ndarray, k: int) -> float:
    """Minimum mean displacement over the ``k`` most probable candidates."""
    cand = _top_k(pred, k)
    d = np.linalg.norm(cand - np.asarray(gt)[None, :, :2], axis=-1)
    return float(d.mean(axis=-1).min())


def min_fde(pred: PredictionSet, gt: np.ndarray, k: int) -> float:
    cand = _top_k(pred, k)
    d = np.linalg.norm(cand[:, -1] - np.asarray(gt)[-1, :2], axis=-1)
    return float(d.min())


def const_velocity_baseline(history: np.ndarray, f_steps: int, dt: float) -> np.ndarray:
    """Extrapolate the last speed along the heading of the last history displacement.

    Speed is |(vx, vy)|; a stationary last pair falls back to the heading
    implied by the body-frame velocity.
    """
    history = np.asarray(history, dtype=np.float64)
    if len(history) < 2:
        raise ValueError("constant-velocity baseline needs at least two history states")
    last = history[-1]
    step = last[:2] - history[-2, :2]
    speed = math.hypot(last[2], last[3])
    norm = math.hypot(*step)
    direction = step / norm if norm > 1e-9 else np.array([1.0, 0.0])
    t = dt * np.arange(1, f_steps + 1)
    return last[:2] + speed * t[:, None] * direction[None, :]


@dataclass
class MetricReport:
    rmse_per_second: dict[int, float] = field(default_factory=dict)
    min_ade_k: dict[int, float] = field(default_factory=dict)
    min_fde_k: dict[int, float] = field(default_factory=dict)
    count: int = 0
    label: str = "model"

    def __post_init__(self) -> None:
        vals = list(self.rmse_per_second.values()) + list(self.min_ade_k.values()) + list(self.min_fde_k.values())
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("metric values must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "count": self.count,
            "rmse_per_second": {str(k): v for k, v in sorted(self.rmse_per_second.items())},
            "min_ade_k": {str(k): v for k, v in sorted(self.min_ade_k.items())},
            "min_fde_k": {str(k): v for k, v in sorted(self.min_fde_k.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        conv = lambda m: {int(k): float(v) for k, v in m.items()}
        return cls(conv(d["rmse_per_second"]), conv(d["min_ade_k"]), conv(d["min_fde_k"]), int(d["count"]), d.get("label", "model"))


def format_table(reports: Sequence[MetricReport]) -> str:
    """Aligned plain-text table: one row per report, RMSE per second then minADE/minFDE."""
    secs = sorted({s for r in reports for s in r.rmse_per_second})
    ks = sorted({k for r in reports for k in r.min_ade_k})
    header = ["model", "n"] + [f"{s}s" for s in secs] + [f"minADE_{k}" for k in ks] + [f"minFDE_{k}" for k in ks]
    rows = [header]
    for r in reports:
        row = [r.label, str(r.count)]
        row += [f"{r.rmse_per_second[s]:.4f}" if s in r.rmse_per_second else "-" for s in secs]
        row += [f"{r.min_ade_k[k]:.4f}" if k in r.min_ade_k else "-" for k in ks]
        row += [f"{r.min_fde_k[k]:.4f}" if k in r.min_fde_k else "-" for k in ks]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def evaluate(preds: Sequence[PredictionSet], gts: Sequence[np.ndarray], dt: float,
             ks: Sequence[int] = (1, 6), label: str = "model") -> MetricReport:
    """Full report; scenes are reduced in the given order so results are reproducible."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (and at least one) predictions and ground truths")
    gts = [np.asarray(g, dtype=np.float64)[:, :2] for g in gts]
    steps = gts[0].shape[0]
    best = [p.best for p in preds]
    whole = int(math.floor(steps * dt + 1e-9))
    rmse = {s: rmse_at(best, gts, s, dt) for s in range(1, whole + 1)}
    n_cand = min(len(p.maneuver_probs) for p in preds)
    ade, fde = {}, {}
    for k in ks:
        if k > n_cand:
            raise KTooLarge(f"K={k} but only {n_cand} candidates")
        ade[k] = float(np.mean([min_ade(p, g, k) for p, g in zip(preds, gts)]))
        fde[k] = float(np.mean([min_fde(p, g, k) for p, g in zip(preds, gts)]))
    return MetricReport(rmse, ade, fde, len(preds), label)


def baseline_predictions(histories: Sequence[np.ndarray], f_steps: int, dt: float) -> list[PredictionSet]:
    return [PredictionSet(const_velocity_baseline(h, f_steps, dt)[None], np.ones(1)) for h in histories]
