"""Interaction learning stage.

Shapes use B scenes, V vehicle slots (row 0 is the target), T frames
(history plus short-term), M memory tokens and d features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .numkernel import tensor as T
from .numkernel.layers import GLU, MLP, GRU, GraphConv, LayerNorm, Linear, ScoreMLP, SelectiveScan, attention_head
from .numkernel.params import ParamStore
from .numkernel.tensor import Tensor


class LengthMismatch(ValueError):
    pass


@dataclass
class FusionConfig:
    num_blocks: int = 2
    d_t: int = 32
    d_s: int = 32
    heads: int = 2

    def __post_init__(self) -> None:
        if self.num_blocks < 1:
            raise ValueError("need at least one cross-modal block")


@dataclass
class Embedded:
    """Spatially embedded modalities."""

    vehicles: Tensor  # (B, V, T, d)
    memory: Tensor  # (B, M, T or 1, d)
    dyn: Tensor  # (B, V, d)


class TemporalEncoder:
    """sigmoid(FC(h + scan(LN(h)))) with h = lift(x), per vehicle sequence.

    The scan sits in a pre-norm residual block so that the normalization does
    not erase the overall scale of the motion (speed, distance travelled).
    """

    def __init__(self, store: ParamStore, cfg: Config, steps: int) -> None:
        d = cfg.model.d_model
        self.steps = steps
        m = cfg.model
        self.scale = np.array([1 / m.pos_scale_m, 1 / m.lat_scale_m] + [1 / m.vel_scale_mps] * 2)
        self.lift = Linear(store, "inter.temporal.lift", 4, d)
        self.norm = LayerNorm(store, "inter.temporal.ln", d)
        self.scan = SelectiveScan(store, "inter.temporal.scan", d, cfg.model.ssm_state)
        # sigmoid has slope 1/4 at the origin
        self.fc = Linear(store, "inter.temporal.fc", d, d, gain=4.0)

    def __call__(self, seq) -> Tensor:
        """seq: (B, V, T, 4) scene-frame states -> F_v (B, V, T, d) in (0, 1)."""
        if seq.shape[-2] != self.steps:
            raise LengthMismatch(f"expected {self.steps} steps, got {seq.shape[-2]}")
        h = self.lift(T.as_tensor(seq) * self.scale)
        return T.sigmoid(self.fc(h + self.scan(self.norm(h))))


class SpatialEmbedding:
    """Three parameter-independent GLU + GELU maps (vehicles, map, dynamics)."""

    def __init__(self, store: ParamStore, d: int) -> None:
        self.vehicle = GLU(store, "inter.embed.vehicle", d, d)
        self.map = GLU(store, "inter.embed.map", d, d)
        self.dyn = GLU(store, "inter.embed.dyn", d, d)

    def __call__(self, F_v, F_h, F_d) -> Embedded:
        return Embedded(T.gelu(self.vehicle(F_v)), T.gelu(self.map(F_h)), T.gelu(self.dyn(F_d)))


class _Channel:
    """One Q/K/V system: queries from every vehicle frame, keys and values from masked memory.

    Memory is either per frame ``(B, M, T, d)`` (each frame attends its own
    tokens) or shared ``(B, M, d)`` (every frame attends the same tokens).
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, key_dim: int, score_hidden: int) -> None:
        self.heads, self.key_dim = heads, key_dim
        self.q_mlp = MLP(store, f"{name}.q_mlp", [d, d, d], activation="gelu")
        self.k_mlp = MLP(store, f"{name}.k_mlp", [d, d, d], activation="gelu")
        self.v_mlp = MLP(store, f"{name}.v_mlp", [d, d, d], activation="gelu")
        self.W_Q = Linear(store, f"{name}.W_Q", d, heads * key_dim, bias=False)
        self.W_K = Linear(store, f"{name}.W_K", d, heads * key_dim, bias=False)
        self.W_V = Linear(store, f"{name}.W_V", d, heads * key_dim, bias=False)
        self.score_mlp = ScoreMLP(store, f"{name}.score_mlp", score_hidden)
        self.value_mlp = MLP(store, f"{name}.value_mlp", [key_dim, key_dim], activation="gelu", final_activation="gelu")
        self.out = Linear(store, f"{name}.out", heads * key_dim, d)

    def __call__(self, veh: Tensor, mem: Tensor, values: Tensor, dyn: Tensor, dyn_target: Tensor, key_mask: np.ndarray) -> Tensor:
        """veh (B,V,T,d); mem/values (B,M,T,d) or (B,M,d); key_mask (B,M) -> (B,V,T,d)."""
        B, V, Tn, _ = veh.shape
        h, k = self.heads, self.key_dim
        q = self.W_Q(self.q_mlp(veh) + T.reshape(dyn, (B, V, 1, -1)))
        if mem.ndim == 4:
            kx = self.W_K(self.k_mlp(mem) + T.reshape(dyn_target, (B, 1, 1, -1)))
            vx = self.W_V(self.v_mlp(values))
            # (B, R, T, h*k) -> (B, T, h, R, k)
            split = lambda x: T.transpose(T.reshape(x, x.shape[:3] + (h, k)), (0, 2, 3, 1, 4))
            H = attention_head(split(q), split(kx), split(vx), k, self.score_mlp, self.value_mlp,
                               key_mask[:, None, None, None, :])
            H = T.transpose(H, (0, 3, 1, 2, 4))  # (B, V, T, h, k)
        else:
            kx = self.W_K(self.k_mlp(mem) + T.reshape(dyn_target, (B, 1, -1)))
            vx = self.W_V(self.v_mlp(values))
            qs = T.transpose(T.reshape(q, (B, V * Tn, h, k)), (0, 2, 1, 3))
            split = lambda x: T.transpose(T.reshape(x, (B, x.shape[1], h, k)), (0, 2, 1, 3))
            H = attention_head(qs, split(kx), split(vx), k, self.score_mlp, self.value_mlp, key_mask[:, None, None, :])
            H = T.reshape(T.transpose(H, (0, 2, 1, 3)), (B, V, Tn, h, k))
        # scenes with no valid key contribute nothing
        H = H * key_mask.any(axis=1).astype(np.float64)[:, None, None, None, None]
        return self.out(T.reshape(H, (B, V, Tn, h * k)))


class CrossModalAttention:
    """N parallel blocks, each summing a target-spatial and a surrounding-spatial channel.

    The accumulated embedding is ``sum_i MLP(LN(Hc_i + Fh)) + (Hc_i + Fh)``
    with Fh mean-pooled over memory tokens.  Without a map, memory rows are
    the map-branch embeddings of the vehicles themselves: the target channel
    attends the target's frames and the surrounding channel attends, frame
    by frame, the other present vehicles.
    """

    def __init__(self, store: ParamStore, d: int, fc: FusionConfig, score_hidden: int) -> None:
        self.fc = fc
        self.blocks = []
        for i in range(fc.num_blocks):
            name = f"inter.fusion.{i}"
            self.blocks.append(
                (
                    _Channel(store, f"{name}.target", d, fc.heads, fc.d_t, score_hidden),
                    _Channel(store, f"{name}.surround", d, fc.heads, fc.d_s, score_hidden),
                    LayerNorm(store, f"{name}.ln", d),
                    MLP(store, f"{name}.mlp", [d, d, d], activation="gelu"),
                )
            )

    def _memory(self, emb: Embedded, vehicle_mask: np.ndarray, memory_mask: np.ndarray, memory_is_vehicles: bool):
        veh, mem = emb.vehicles, emb.memory
        B, V, Tn, d = veh.shape
        if memory_is_vehicles:
            tgt_mem = mem[:, 0]  # (B, T, d): one token per target frame
            tgt = (tgt_mem, veh[:, 0], np.ones((B, Tn), dtype=bool))
            sur_mask = vehicle_mask.copy()
            sur_mask[:, 0] = False
            sur = (mem, veh, sur_mask)
            w = vehicle_mask.astype(np.float64)
            pooled = (mem * (w / w.sum(axis=1, keepdims=True))[:, :, None, None]).sum(axis=1, keepdims=True)
            return tgt, sur, pooled
        # map tokens: values carry the channel's time-pooled vehicle features
        tokens = T.reshape(mem, (B, mem.shape[1], d))
        w = vehicle_mask.astype(np.float64).copy()
        w[:, 0] = 0.0
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        target_feat = T.reshape(veh[:, 0].mean(axis=1), (B, 1, d))
        sur_feat = T.reshape((veh.mean(axis=2) * w[:, :, None]).sum(axis=1), (B, 1, d))
        mw = memory_mask.astype(np.float64)
        mw = mw / np.maximum(mw.sum(axis=1, keepdims=True), 1.0)
        pooled = T.reshape((tokens * mw[:, :, None]).sum(axis=1), (B, 1, 1, d))
        return (tokens, tokens + target_feat, memory_mask), (tokens, tokens + sur_feat, memory_mask), pooled

    def block_outputs(self, emb: Embedded, vehicle_mask: np.ndarray, memory_mask: np.ndarray, memory_is_vehicles: bool) -> list[Tensor]:
        veh, dyn = emb.vehicles, emb.dyn
        dyn_target = dyn[:, 0, :]
        tgt, sur, pooled_h = self._memory(emb, vehicle_mask, memory_mask, memory_is_vehicles)
        outs = []
        for ch_t, ch_s, ln, post in self.blocks:
            Hc = ch_t(veh, tgt[0], tgt[1], dyn, dyn_target, tgt[2]) + ch_s(veh, sur[0], sur[1], dyn, dyn_target, sur[2])
            r = Hc + pooled_h
            outs.append(post(ln(r)) + r)
        return outs

    def __call__(self, emb: Embedded, vehicle_mask: np.ndarray, memory_mask: np.ndarray, memory_is_vehicles: bool) -> Tensor:
        outs = self.block_outputs(emb, vehicle_mask, memory_mask, memory_is_vehicles)
        H_e = outs[0]
        for o in outs[1:]:
            H_e = H_e + o
        return H_e


class EncoderBlock:
    """Post-LN transformer encoder block over the vehicle axis."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int = 2) -> None:
        self.heads, self.dk = heads, d // heads
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d)
        self.proj = Linear(store, f"{name}.proj", d, d)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ffn = MLP(store, f"{name}.ffn", [d, 2 * d, d], activation="gelu")
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, V, d = x.shape
        qkv = T.reshape(self.qkv(x), (B, V, 3, self.heads, self.dk))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, V, dk)
        att = attention_head(qkv[0], qkv[1], qkv[2], self.dk, key_mask=mask[:, None, None, :])
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, V, d))
        x = self.ln1(x + self.proj(att))
        return self.ln2(x + self.ffn(x))


def vehicle_adjacency(positions: np.ndarray, mask: np.ndarray, radius: float) -> np.ndarray:
    """Fully connect present vehicles within ``radius`` of the target (row 0); no self loops.

    positions (B, V, 2) at the current frame, mask (B, V).
    """
    d = np.hypot(positions[..., 0] - positions[:, :1, 0], positions[..., 1] - positions[:, :1, 1])
    near = mask & (d <= radius)
    adj = (near[:, :, None] & near[:, None, :]).astype(np.float64)
    idx = np.arange(adj.shape[-1])
    adj[:, idx, idx] = 0.0
    return adj


class SpatioTemporalEncoder:
    def __init__(self, store: ParamStore, d: int) -> None:
        self.gru = GRU(store, "inter.st.gru", d, d, layers=2)
        self.gcn1 = GraphConv(store, "inter.st.gcn1", d, d)
        self.gcn2 = GraphConv(store, "inter.st.gcn2", d, d)
        self.fuse = Linear(store, "inter.st.fuse", 2 * d, d)
        self.encoder = EncoderBlock(store, "inter.st.encoder", d)

    def __call__(self, F_v: Tensor, F_c: Tensor, adjacency: np.ndarray, mask: np.ndarray) -> Tensor:
        B, V, Tn, d = F_v.shape
        temporal = T.reshape(self.gru(T.reshape(F_v, (B * V, Tn, d))), (B, V, d))
        spatial = self.gcn2(self.gcn1(F_c.mean(axis=2), adjacency), adjacency)
        fused = self.fuse(T.concat([temporal, spatial], axis=-1))
        return self.encoder(fused, mask)


class InteractionStage:
    def __init__(self, store: ParamStore, cfg: Config, steps: int) -> None:
        m = cfg.model
        d = m.d_model
        self.cfg = cfg
        kd = d // m.fusion_heads
        self.fusion_cfg = FusionConfig(m.fusion_blocks, kd, kd, m.fusion_heads)
        self.temporal = TemporalEncoder(store, cfg, steps)
        self.embed = SpatialEmbedding(store, d)
        self.fusion = CrossModalAttention(store, d, self.fusion_cfg, m.score_hidden)
        self.head = MLP(store, "inter.regression", [d, d, d, d, d], activation="relu")
        self.st = SpatioTemporalEncoder(store, d)
        self.polyline = None
        if cfg.mode == "nuscenes":
            self.polyline = MLP(store, "inter.polyline", [2 * m.polyline_points, d, d], activation="gelu")

    def map_features(self, polylines: np.ndarray) -> Tensor:
        """(B, M, points*2) resampled polylines -> (B, M, 1, d)."""
        B, M, _ = polylines.shape
        feats = self.polyline(Tensor(polylines / self.cfg.model.pos_scale_m))
        return T.reshape(feats, (B, M, 1, -1))

    def __call__(
        self,
        seq: np.ndarray | Tensor,
        F_d: Tensor,
        vehicle_mask: np.ndarray,
        adjacency: np.ndarray,
        polylines: np.ndarray | None = None,
        polyline_mask: np.ndarray | None = None,
        return_parts: bool = False,
    ):
        F_v = self.temporal(seq)
        if self.polyline is not None and polylines is not None:
            F_h, mem_mask, mem_is_veh = self.map_features(polylines), polyline_mask, False
        else:
            # mapless: vehicle features stand in for map features
            F_h, mem_mask, mem_is_veh = F_v, vehicle_mask, True
        emb = self.embed(F_v, F_h, F_d)
        H_e = self.fusion(emb, vehicle_mask, mem_mask, mem_is_veh)
        F_c = self.head(H_e)
        F_i = self.st(F_v, F_c, adjacency, vehicle_mask)
        if return_parts:
            return F_i, {"F_v": F_v, "emb": emb, "H_e": H_e, "F_c": F_c}
        return F_i


def resample_polyline(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a polyline to ``n`` points evenly spaced by arc length."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 1:
        return np.repeat(pts, n, axis=0)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])], axis=1)

