"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

REL_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    seed: int = 0,
    max_entries: int | None = None,
) -> float:
    """Max relative error between tape and finite-difference gradients.

    Non-scalar outputs are contracted with a fixed random cotangent so one
    backward pass covers the whole Jacobian.  ``max_entries`` subsamples the
    perturbed coordinates of large inputs.
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    cot = rng.standard_normal(out.shape) if out.data.ndim else np.array(1.0)
    tape.backward(out, seed=cot)

    def value() -> float:
        return float((fn(*inputs).data * cot).sum())

    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst
