"""Neural layers built on the tape: functional forms plus parameter-owning wrappers.

Wrappers register their weights in a :class:`ParamStore` under a dotted
prefix and are plain callables.  Affine weights are drawn from
``uniform(+-1/sqrt(fan_in))``.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import ShapeMismatch, Tensor

Activation = Callable[[Tensor], Tensor] | None

ACTIVATIONS: dict[str, Activation] = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "none": None,
}

MASK_FILL = -1e9


def _act(name_or_fn) -> Activation:
    if name_or_fn is None or callable(name_or_fn):
        return name_or_fn
    return ACTIVATIONS[name_or_fn]


# ------------------------------------------------------------------ functional


def linear(x, W, b=None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    y = T.matmul(x, W)
    return y if b is None else y + b


def glu(x, Wa, b, Wb, b_hat) -> Tensor:
    """(x Wa + b) * sigmoid(x Wb + b_hat)."""
    return linear(x, Wa, b) * T.sigmoid(linear(x, Wb, b_hat))


def layer_norm(x, gain, bias) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeMismatch("layer_norm needs a feature axis of length >= 2")
    return T.normalize(x) * gain + bias


def mlp(x, layers: Sequence[tuple], activation="relu", final_activation=None) -> Tensor:
    act, final = _act(activation), _act(final_activation)
    n = len(layers)
    for i, (W, b) in enumerate(layers):
        x = linear(x, W, b)
        f = final if i == n - 1 else act
        if f is not None:
            x = f(x)
    return x


def gru_cell(x, h, params: dict) -> Tensor:
    """Standard GRU update with fused gate weights.

    ``params`` holds ``W_i`` (in, 3H), ``W_h`` (H, 3H), ``b_i`` and ``b_h``
    (3H,), gate order reset, update, candidate.
    """
    H = h.shape[-1]
    if params["W_h"].shape != (H, 3 * H) or params["W_i"].shape[0] != x.shape[-1]:
        raise ShapeMismatch("gru_cell: parameter shapes do not match x/h")
    gi = linear(x, params["W_i"], params["b_i"])
    gh = linear(h, params["W_h"], params["b_h"])
    r = T.sigmoid(gi[..., :H] + gh[..., :H])
    z = T.sigmoid(gi[..., H : 2 * H] + gh[..., H : 2 * H])
    n = T.tanh(gi[..., 2 * H :] + r * gh[..., 2 * H :])
    return (1.0 - z) * n + z * h


def attention_head(Q, K, V, scale_dim: int, score_mlp=None, value_mlp=None, key_mask=None) -> Tensor:
    """softmax(score_mlp(Q K^T / sqrt(d))) @ value_mlp(V).

    ``key_mask`` (broadcastable to the score matrix, True = keep) removes
    keys before the softmax.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"attention: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = T.matmul(Q, T.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(scale_dim))
    if score_mlp is not None:
        scores = score_mlp(scores)
    if key_mask is not None:
        scores = T.where(key_mask, scores, MASK_FILL)
    weights = T.softmax(scores, axis=-1)
    values = V if value_mlp is None else value_mlp(V)
    return T.matmul(weights, values)


def selective_ssm_scan(x, params: dict, return_state: bool = False):
    """Causal diagonal state-space scan with input-dependent step, B and C.

    x: (..., T, D).  With per-step ``dt = softplus(x W_dt + b_dt)``::

        h_t = exp(-dt_t A) * h_{t-1} + (dt_t x_t) B_t
        y_t = <h_t, C_t> + D_skip * x_t

    where h_t is (D, N) and A = exp(A_log) > 0.
    """
    steps = x.shape[-2]
    if steps < 1:
        raise ValueError("EmptySequence: selective scan needs at least one step")
    dt = T.softplus(linear(x, params["W_dt"], params["b_dt"]))  # (..., T, D)
    Bm = linear(x, params["W_B"])  # (..., T, N)
    Cm = linear(x, params["W_C"])  # (..., T, N)
    A = T.exp(params["A_log"])  # (D, N)
    dt_e = T.reshape(dt, dt.shape + (1,))
    decay = T.exp(-(dt_e * A))  # (..., T, D, N)
    u = T.reshape(dt * x, dt.shape + (1,)) * T.reshape(Bm, Bm.shape[:-1] + (1, Bm.shape[-1]))
    H = T.linear_scan(decay, u, axis=-3)  # (..., T, D, N)
    y = (H * T.reshape(Cm, Cm.shape[:-1] + (1, Cm.shape[-1]))).sum(axis=-1) + x * params["D_skip"]
    return (y, H) if return_state else y


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over the last two axes."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.shape[-1] != adj.shape[-2]:
        raise ShapeMismatch("adjacency must be square")
    a = adj + np.eye(adj.shape[-1])
    d = a.sum(axis=-1)
    inv = 1.0 / np.sqrt(d)
    return a * inv[..., :, None] * inv[..., None, :]


def graph_conv(node_feats, adjacency: np.ndarray, W, b=None, activation="relu") -> Tensor:
    """act(D^-1/2 (A+I) D^-1/2 X W + b)."""
    if adjacency.shape[-1] != node_feats.shape[-2]:
        raise ShapeMismatch("adjacency size does not match node count")
    a_hat = normalized_adjacency(adjacency)
    y = linear(T.matmul(Tensor(a_hat), node_feats), W, b)
    f = _act(activation)
    return y if f is None else f(y)


# ---------------------------------------------------------------- wrappers


class Linear:
    """Affine map with variance-preserving uniform init: Var(W) = gain**2 / n_in."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, bias: bool = True, gain: float = 1.0):
        self.W = store.uniform(f"{name}.W", (n_in, n_out), gain * math.sqrt(3.0 / n_in))
        self.b = store.uniform(f"{name}.b", (n_out,), 1.0 / math.sqrt(n_in)) if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


# weight gains that keep activations at unit scale through rectifier-like layers
ACTIVATION_GAIN = {"relu": math.sqrt(2.0), "gelu": math.sqrt(2.0)}


class MLP:
    """Affine stack with an activation between layers and an optional final one."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        sizes: Sequence[int],
        activation="relu",
        final_activation=None,
        final_gain: float = 1.0,
    ):
        n = len(sizes) - 1
        hidden_gain = ACTIVATION_GAIN.get(activation, 1.0) if isinstance(activation, str) else 1.0
        self.layers = [
            Linear(store, f"{name}.{i}", sizes[i], sizes[i + 1], gain=final_gain if i == n - 1 else hidden_gain)
            for i in range(n)
        ]
        self.activation = activation
        self.final_activation = final_activation

    def __call__(self, x) -> Tensor:
        return mlp(x, [(l.W, l.b) for l in self.layers], self.activation, self.final_activation)


class GLU:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int):
        self.a = Linear(store, f"{name}.a", n_in, n_out)
        self.g = Linear(store, f"{name}.g", n_in, n_out)

    def __call__(self, x) -> Tensor:
        return glu(x, self.a.W, self.a.b, self.g.W, self.g.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.constant(f"{name}.gain", (dim,), 1.0)
        self.bias = store.constant(f"{name}.bias", (dim,), 0.0)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


# sigmoid(b) = 0.9: the update gate starts by keeping ~90% of the state
_KEEP_09 = math.log(9.0)


class GRUCell:
    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int):
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        b_i = store.rng.uniform(-bound, bound, size=3 * hidden)
        b_i[hidden : 2 * hidden] = _KEEP_09
        self.params = {
            "W_i": store.uniform(f"{name}.W_i", (n_in, 3 * hidden), bound),
            "W_h": store.uniform(f"{name}.W_h", (hidden, 3 * hidden), bound),
            "b_i": store.add(f"{name}.b_i", b_i),
            "b_h": store.uniform(f"{name}.b_h", (3 * hidden,), bound),
        }

    def __call__(self, x, h) -> Tensor:
        return gru_cell(x, h, self.params)


class GRU:
    """Multi-layer GRU over axis -2 of (..., T, F); returns the top layer's final state."""

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int, layers: int = 2):
        self.cells = [GRUCell(store, f"{name}.{i}", n_in if i == 0 else hidden, hidden) for i in range(layers)]
        self.hidden = hidden

    def __call__(self, x, return_sequence: bool = False) -> Tensor:
        seq = x
        for cell in self.cells:
            gates = linear(seq, cell.params["W_i"], cell.params["b_i"])
            seq = T.gru_recurrence(gates, cell.params["W_h"], cell.params["b_h"])
        return seq if return_sequence else seq[..., -1, :]


class SelectiveScan:
    def __init__(self, store: ParamStore, name: str, dim: int, state: int = 8, init_decay: float = 0.9):
        bound = 1.0 / math.sqrt(dim)
        # softplus(b_dt) * A = -log(init_decay) with A = 1
        target_dt = -math.log(init_decay)
        self.params = {
            "W_dt": store.uniform(f"{name}.W_dt", (dim, dim), 0.1 * bound),
            "b_dt": store.constant(f"{name}.b_dt", (dim,), math.log(math.expm1(target_dt))),
            "W_B": store.uniform(f"{name}.W_B", (dim, state), bound),
            "W_C": store.uniform(f"{name}.W_C", (dim, state), bound),
            "A_log": store.constant(f"{name}.A_log", (dim, state), 0.0),
            "D_skip": store.constant(f"{name}.D_skip", (dim,), 1.0),
        }

    def __call__(self, x) -> Tensor:
        return selective_ssm_scan(x, self.params)


class GraphConv:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, activation="relu"):
        self.lin = Linear(store, name, n_in, n_out)
        self.activation = activation

    def __call__(self, x, adjacency: np.ndarray) -> Tensor:
        return graph_conv(x, adjacency, self.lin.W, self.lin.b, self.activation)


class ScoreMLP:
    """Elementwise MLP on attention scores (1 -> hidden -> 1).

    Acting on each score independently keeps attention equivariant to key order.
    """

    def __init__(self, store: ParamStore, name: str, hidden: int = 8):
        self.l1 = Linear(store, f"{name}.0", 1, hidden)
        self.l2 = Linear(store, f"{name}.1", hidden, 1)

    def __call__(self, s) -> Tensor:
        shape = s.shape
        h = T.gelu(linear(T.reshape(s, shape + (1,)), self.l1.W, self.l1.b))
        return T.reshape(linear(h, self.l2.W, self.l2.b), shape)
