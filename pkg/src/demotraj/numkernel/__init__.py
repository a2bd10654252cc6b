"""Minimal float64 tensor kernel with reverse-mode differentiation."""

from . import layers
from .layers import (
    GLU,
    GRU,
    MLP,
    GraphConv,
    GRUCell,
    LayerNorm,
    Linear,
    ScoreMLP,
    SelectiveScan,
    attention_head,
    glu,
    graph_conv,
    gru_cell,
    layer_norm,
    mlp,
    normalized_adjacency,
    selective_ssm_scan,
)
from .params import (
    CheckpointError,
    CosineSchedule,
    ParamStore,
    load_checkpoint,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)
from .tensor import (
    MissingGradient,
    NonFiniteError,
    ShapeMismatch,
    Tape,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    cos,
    div,
    exp,
    gelu,
    getitem,
    gru_recurrence,
    linear_scan,
    log,
    log_softmax,
    matmul,
    mul,
    normalize,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    where,
)
