"""The full predictor: batching, forward pass, objective and inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import Config
from .data_io import HorizonSpec, Scene
from .decoder_losses import Decoder, DecoderOutput, LossWeights, PredictionSet, label_scene, total_loss
from .dyn_stage import DynStage, dynamics_informed_loss, kl_loss
from .interaction import InteractionStage, resample_polyline, vehicle_adjacency
from .numkernel import tensor as T
from .numkernel.params import ParamStore

HEADING_PAIRS = 4


class ModeMismatch(ValueError):
    pass


@dataclass
class Batch:
    """Scene-frame arrays for B scenes and V vehicle slots (row 0 is the target).

    Each scene is expressed in the target's frame at the current step: the
    target sits at the origin and its recent heading points along +x.
    Body-frame velocities are unaffected by the rotation.
    """

    scene_ids: list[str]
    origin: np.ndarray  # (B, 2)
    rotation: np.ndarray  # (B,) heading removed from world coordinates
    history: np.ndarray  # (B, V, P, 4)
    mask: np.ndarray  # (B, V) present at the current frame
    phi_ref: np.ndarray  # (B, V)
    adjacency: np.ndarray  # (B, V, V)
    anchor: np.ndarray  # (B, F, 2)
    polylines: np.ndarray | None = None  # (B, M, 2 * points)
    polyline_mask: np.ndarray | None = None  # (B, M)
    future: np.ndarray | None = None  # (B, F, 2) target future positions
    teacher: np.ndarray | None = None  # (B, V, S, 4) observed short-term states
    teacher_mask: np.ndarray | None = None  # (B, V) rows with a complete short-term window
    maneuver: np.ndarray | None = None  # (B,)

    @property
    def size(self) -> int:
        return self.history.shape[0]


def heading_from_history(history: np.ndarray, pairs: int = HEADING_PAIRS) -> np.ndarray:
    """Rotation that maps body-frame velocity onto recent displacements, pooled over ``pairs``.

    history (..., P, 4) -> (...,).  Angles use atan2 of summed cross and dot products.
    """
    h = np.asarray(history, dtype=np.float64)
    pairs = min(pairs, h.shape[-2] - 1)
    dpos = h[..., -pairs:, :2] - h[..., -pairs - 1 : -1, :2]
    vel = h[..., -pairs - 1 : -1, 2:4]
    cross = (vel[..., 0] * dpos[..., 1] - vel[..., 1] * dpos[..., 0]).sum(axis=-1)
    dot = (vel[..., 0] * dpos[..., 0] + vel[..., 1] * dpos[..., 1]).sum(axis=-1)
    return np.arctan2(cross, dot)


def rotate_xy(xy: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Rotate ``(B, ..., 2)`` points by per-scene angles ``theta`` (B,)."""
    xy = np.asarray(xy, dtype=np.float64)
    shape = (len(theta),) + (1,) * (xy.ndim - 2)
    c, s = np.cos(theta).reshape(shape), np.sin(theta).reshape(shape)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def _rotate_states(states: np.ndarray, theta: np.ndarray) -> np.ndarray:
    out = np.array(states, dtype=np.float64)
    out[..., :2] = rotate_xy(out[..., :2], theta)
    return out


def build_batch(scenes: Sequence[Scene], cfg: Config, with_future: bool = True) -> Batch:
    hz = HorizonSpec.from_config(cfg.horizon)
    P, S, F = hz.p_steps, hz.s_steps, hz.f_steps
    # padded slots are masked everywhere, so only allocate as many as the batch needs
    V = 1 + min(cfg.data.n_max, max((sc.n_surround for sc in scenes), default=0))
    B = len(scenes)
    history = np.zeros((B, V, P, 4))
    history[..., 2] = 1.0  # padding rows: a slow straight-line placeholder
    mask = np.zeros((B, V), dtype=bool)
    teacher = np.zeros((B, V, S, 4))
    teacher[..., 2] = 1.0
    teacher_mask = np.zeros((B, V), dtype=bool)
    origin = np.zeros((B, 2))
    future = np.zeros((B, F, 2)) if with_future else None
    maneuver = np.zeros(B, dtype=int) if with_future else None
    M, pts = cfg.model.max_polylines, cfg.model.polyline_points
    use_map = cfg.mode == "nuscenes"
    polylines = np.zeros((B, M, 2 * pts)) if use_map else None
    poly_mask = np.zeros((B, M), dtype=bool) if use_map else None
    for b, sc in enumerate(scenes):
        if abs(sc.dt_s - hz.dt_s) > 1e-9 or sc.target_history.shape[0] != P:
            raise ModeMismatch(f"{sc.scene_id}: scene timing does not match the configured horizon")
        o = sc.target_history[-1, :2]
        origin[b] = o
        shift = np.array([o[0], o[1], 0.0, 0.0])
        history[b, 0] = sc.target_history - shift
        mask[b, 0] = True
        n = min(sc.n_surround, V - 1)
        if n:
            sur = sc.surroundings[:n] - shift
            history[b, 1 : n + 1] = sur[:, :P]
            mask[b, 1 : n + 1] = sc.present[:n, P - 1]
        if with_future:
            if sc.target_future is None:
                raise ValueError(f"{sc.scene_id}: training scene without a future")
            future[b] = sc.target_future[:, :2] - o
            teacher[b, 0] = sc.target_future[:S] - shift
            teacher_mask[b, 0] = True
            if n and sc.surroundings.shape[1] >= P + S:
                teacher[b, 1 : n + 1] = sc.surroundings[:n, P : P + S] - shift
                teacher_mask[b, 1 : n + 1] = sc.present[:n, P - 1 : P + S].all(axis=1)
            maneuver[b] = label_scene(sc, cfg).index
        if use_map and sc.map_polylines:
            lines = sorted(sc.map_polylines, key=lambda L: float(np.min(np.hypot(L[:, 0] - o[0], L[:, 1] - o[1]))))[:M]
            for j, line in enumerate(lines):
                polylines[b, j] = (resample_polyline(line, pts) - o).reshape(-1)
                poly_mask[b, j] = True
    # rotate into the target's frame; padded rows never reach the heading estimate
    theta = heading_from_history(history[:, 0])
    history = _rotate_states(history, -theta)
    teacher = _rotate_states(teacher, -theta)
    if with_future:
        future = rotate_xy(future, -theta)
    if use_map:
        polylines = rotate_xy(polylines.reshape(B, M, pts, 2), -theta).reshape(B, M, 2 * pts)
    # padded rows must never feed a near-zero speed to the dynamics
    history[~mask] = [0.0, 0.0, 1.0, 0.0]
    phi_ref = heading_from_history(history)
    adjacency = vehicle_adjacency(history[:, :, -1, :2], mask, cfg.model.graph_radius_m)
    last = history[:, 0, -1]
    c, s = np.cos(phi_ref[:, 0]), np.sin(phi_ref[:, 0])
    vel = np.stack([c * last[:, 2] - s * last[:, 3], s * last[:, 2] + c * last[:, 3]], axis=-1)
    anchor = hz.dt_s * np.arange(1, F + 1)[None, :, None] * vel[:, None, :]
    return Batch(
        [sc.scene_id for sc in scenes], origin, theta, history, mask, phi_ref, adjacency, anchor,
        polylines, poly_mask, future, teacher if with_future else None,
        teacher_mask if with_future else None, maneuver,
    )


@dataclass
class ForwardResult:
    decoded: DecoderOutput
    short_traj: T.Tensor  # (B, V, S, 4)
    stage_losses: dict


class DemoModel:
    def __init__(self, cfg: Config, seed: int | None = None) -> None:
        hz = HorizonSpec.from_config(cfg.horizon)
        self.cfg = cfg
        self.horizon = hz
        self.store = ParamStore(cfg.train.seed if seed is None else seed)
        self.dyn = DynStage(self.store, cfg, hz.p_steps, hz.s_steps)
        self.inter = InteractionStage(self.store, cfg, hz.p_steps + hz.s_steps)
        self.decoder = Decoder(self.store, cfg, hz.f_steps)
        self.weights = LossWeights.from_config(cfg)

    def fit_input_stats(self, scenes: Sequence[Scene], chunk: int = 64) -> None:
        """Fit the history normalizer on every observed vehicle in ``scenes``."""
        rows = []
        for i in range(0, len(scenes), chunk):
            b = build_batch(scenes[i : i + chunk], self.cfg, with_future=False)
            rows.append(b.history[b.mask])
        self.dyn.fit_normalizer(np.concatenate(rows, axis=0))

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> ForwardResult:
        """With ``rng`` and teacher states, also runs the posterior pass for L_KL and L_DI."""
        B, V, P, _ = batch.history.shape
        S = self.horizon.s_steps
        hist = batch.history.reshape(B * V, P, 4)
        phi = batch.phi_ref.reshape(-1)
        stage_losses = {}
        if rng is not None and batch.teacher is not None:
            teacher = batch.teacher.reshape(B * V, S, 4)
            noise = rng.standard_normal((S, B * V, self.cfg.model.z_dim))
            post = self.dyn.iterative_generate(hist, phi, mode="posterior", teacher=teacher, noise=noise)
            w = batch.teacher_mask.reshape(-1).astype(np.float64)
            stage_losses["kl"] = kl_loss(post.posteriors, post.priors, w)
            true_states = np.concatenate([hist[:, -1:], teacher], axis=1)
            stage_losses["di"] = dynamics_informed_loss(true_states, post.controls, self.dyn.attrs, self.dyn.dt, w)
        gen = self.dyn.iterative_generate(hist, phi, mode="prior")
        short = T.reshape(gen.short_traj, (B, V, S, 4))
        F_d = T.reshape(gen.dyn_features, (B, V, -1))
        seq = T.concat([batch.history, short], axis=2)
        F_i = self.inter(seq, F_d, batch.mask, batch.adjacency, batch.polylines, batch.polyline_mask)
        decoded = self.decoder(F_i[:, 0], F_d[:, 0], batch.anchor)
        return ForwardResult(decoded, short, stage_losses)

    def loss(self, batch: Batch, rng: np.random.Generator) -> tuple[T.Tensor, dict[str, float]]:
        res = self.forward(batch, rng)
        return total_loss(res.decoded, res.stage_losses, batch.future, batch.maneuver, self.weights,
                          self.cfg.mode, self.cfg.loss.ade_weight)

    def predict(self, scenes: Sequence[Scene]) -> list[PredictionSet]:
        """Deterministic prediction (prior mean) in world coordinates."""
        batch = build_batch(scenes, self.cfg, with_future=False)
        res = self.forward(batch)
        return res.decoded.prediction_sets(batch.origin, batch.rotation)
