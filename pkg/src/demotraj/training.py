"""Training loop and model evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .data_io import Scene
from .decoder_losses import PredictionSet
from .eval_metrics import MetricReport, baseline_predictions, evaluate
from .model import DemoModel, build_batch
from .numkernel.params import CosineSchedule, optimizer_step
from .numkernel.tensor import Tape

LOSS_COLUMNS = ("epoch", "lr", "total", "kl", "di", "ce", "ac", "seconds")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    total: float
    kl: float
    di: float
    ce: float
    ac: float
    seconds: float

    def csv_row(self) -> str:
        vals = asdict(self)
        return ",".join(str(vals[c]) if c == "epoch" else repr(float(vals[c])) for c in LOSS_COLUMNS)


def train(
    model: DemoModel,
    scenes: Sequence[Scene],
    epochs: int | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Minibatch AdamW with a cosine schedule over every optimizer step.

    Batch order comes from ``cfg.train.seed``, so identical inputs give
    identical parameters.  A fresh model fits its input statistics on
    ``scenes`` first; a resumed one keeps the loaded statistics.
    """
    tc = model.cfg.train
    epochs = tc.epochs if epochs is None else epochs
    if not scenes:
        raise ValueError("no training scenes")
    n, bs = len(scenes), max(1, tc.batch_size)
    per_epoch = math.ceil(n / bs)
    sched = CosineSchedule(tc.lr_init, tc.lr_min, max(1, epochs * per_epoch))
    if model.store.step == 0:
        model.fit_input_stats(scenes)
    rng = np.random.default_rng(tc.seed)
    logs = []
    for ep in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = dict.fromkeys(("total", "kl", "di", "ce", "ac"), 0.0)
        lr = sched.lr(model.store.step)
        for i in range(per_epoch):
            idx = order[i * bs : (i + 1) * bs]
            batch = build_batch([scenes[j] for j in idx], model.cfg)
            model.store.zero_grad()
            with Tape() as tape:
                loss, parts = model.loss(batch, rng)
            tape.backward(loss)
            lr = optimizer_step(model.store, weight_decay=tc.weight_decay, schedule=sched, max_grad_norm=tc.grad_clip)
            for k in sums:
                sums[k] += parts.get(k, 0.0) * len(idx)
        log = EpochLog(ep, lr, *(sums[k] / n for k in ("total", "kl", "di", "ce", "ac")), time.perf_counter() - t0)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return logs


def predict(model: DemoModel, scenes: Sequence[Scene], batch_size: int = 32) -> list[PredictionSet]:
    out: list[PredictionSet] = []
    for i in range(0, len(scenes), batch_size):
        out.extend(model.predict(scenes[i : i + batch_size]))
    return out


def evaluate_model(model: DemoModel, scenes: Sequence[Scene], ks: Sequence[int] = (1, 6)) -> tuple[MetricReport, MetricReport]:
    """Model and constant-velocity reports on scenes with known futures."""
    preds = predict(model, scenes)
    gts = [sc.target_future for sc in scenes]
    dt = model.horizon.dt_s
    report = evaluate(preds, gts, dt, ks, label="demo")
    base = evaluate(baseline_predictions([sc.target_history for sc in scenes], model.horizon.f_steps, dt),
                    gts, dt, (1,), label="const_vel")
    return report, base
