"""Scenes, CSV/JSON ingestion, the synthetic scenario generator and splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import Config, HorizonConfig
from .dynamics import VehicleAttributes, rollout_arrays

CSV_COLUMNS = ("scene_id", "vehicle_id", "frame", "x", "y", "vx", "vy", "is_target")
SCENARIO_KINDS = ("straight", "lane_change_left", "lane_change_right", "turn", "brake")
LANE_WIDTH_M = 3.5


class DataError(ValueError):
    pass


class MalformedRow(DataError):
    def __init__(self, line: int, why: str) -> None:
        super().__init__(f"line {line}: {why}")
        self.line = line


class MissingTarget(DataError):
    pass


class IrregularTimestep(DataError):
    pass


class BadRatios(DataError):
    pass


@dataclass(frozen=True)
class HorizonSpec:
    t_p_s: float = 3.0
    t_f_s: float = 5.0
    t_s_s: float = 2.0
    dt_s: float = 0.2

    def __post_init__(self) -> None:
        if min(self.t_p_s, self.t_f_s, self.t_s_s, self.dt_s) <= 0:
            raise ValueError("horizons must be positive")
        if self.t_s_s > self.t_f_s:
            raise ValueError("short-term horizon exceeds the prediction horizon")
        for v in (self.t_p_s, self.t_f_s, self.t_s_s):
            r = v / self.dt_s
            if abs(r - round(r)) > 1e-9:
                raise ValueError(f"{v} s is not a multiple of dt={self.dt_s}")

    @classmethod
    def from_config(cls, h: HorizonConfig) -> "HorizonSpec":
        return cls(h.t_p_s, h.t_f_s, h.t_s_s, h.dt_s)

    @property
    def p_steps(self) -> int:
        return int(round(self.t_p_s / self.dt_s))

    @property
    def f_steps(self) -> int:
        return int(round(self.t_f_s / self.dt_s))

    @property
    def s_steps(self) -> int:
        return int(round(self.t_s_s / self.dt_s))


@dataclass(frozen=True)
class Scene:
    """One prediction problem.  State rows are ``[x, y, vx, vy]``.

    ``surroundings`` is ``(n, T, 4)`` with ``present`` ``(n, T)``, where T
    covers history plus (when known) future.  Absent frames hold the
    nearest present value.
    """

    scene_id: str
    dt_s: float
    target_history: np.ndarray
    target_future: np.ndarray | None
    surroundings: np.ndarray
    present: np.ndarray
    map_polylines: tuple[np.ndarray, ...] | None = None
    attrs: VehicleAttributes = field(default_factory=VehicleAttributes)

    def __post_init__(self) -> None:
        for name in ("target_history", "target_future", "surroundings", "present"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        if self.surroundings.shape[:2] != self.present.shape:
            raise DataError(f"{self.scene_id}: presence mask does not match stored rows")

    @property
    def n_surround(self) -> int:
        return self.surroundings.shape[0]

    def with_id(self, scene_id: str) -> "Scene":
        return Scene(scene_id, self.dt_s, self.target_history, self.target_future,
                     self.surroundings, self.present, self.map_polylines, self.attrs)


# ------------------------------------------------------------------------ JSON


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "dt_s": scene.dt_s,
        "target": {
            "history": scene.target_history.tolist(),
            "future": None if scene.target_future is None else scene.target_future.tolist(),
        },
        "surroundings": [
            {"states": s.tolist(), "present": [bool(p) for p in pr]}
            for s, pr in zip(scene.surroundings, scene.present)
        ],
        "map_polylines": None if scene.map_polylines is None else [p.tolist() for p in scene.map_polylines],
        "attrs": {
            "mass_kg": scene.attrs.mass_kg,
            "yaw_inertia_kg_m2": scene.attrs.yaw_inertia_kg_m2,
            "dist_cg_front_m": scene.attrs.dist_cg_front_m,
            "dist_cg_rear_m": scene.attrs.dist_cg_rear_m,
            "cornering_stiffness_front_N_per_rad": scene.attrs.kf,
            "cornering_stiffness_rear_N_per_rad": scene.attrs.kr,
        },
    }


def scene_from_dict(d: dict) -> Scene:
    hist = np.asarray(d["target"]["history"], dtype=np.float64).reshape(-1, 4)
    fut = d["target"].get("future")
    fut = None if fut is None else np.asarray(fut, dtype=np.float64).reshape(-1, 4)
    sur = d.get("surroundings") or []
    T = hist.shape[0] + (0 if fut is None else fut.shape[0])
    states = np.asarray([s["states"] for s in sur], dtype=np.float64).reshape(len(sur), T, 4)
    present = np.asarray([s["present"] for s in sur], dtype=bool).reshape(len(sur), T)
    polys = d.get("map_polylines")
    polys = None if polys is None else tuple(np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in polys)
    attrs = VehicleAttributes(**d["attrs"]) if d.get("attrs") else VehicleAttributes()
    return Scene(str(d["scene_id"]), float(d["dt_s"]), hist, fut, states, present, polys, attrs)


def write_scene_json(scenes: Sequence[Scene], path: str | Path) -> None:
    Path(path).write_text(json.dumps([scene_to_dict(s) for s in scenes]), encoding="utf-8")


def read_scene_json(path: str | Path) -> list[Scene]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = [raw]
    return [scene_from_dict(d) for d in raw]


# ------------------------------------------------------------------------- CSV


def _central_diff(pos: np.ndarray, dt: float) -> np.ndarray:
    if len(pos) < 2:
        return np.zeros_like(pos)
    return np.gradient(pos, dt, axis=0)


def _hold_fill(frames: np.ndarray, rows: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """States at ``frames``; gaps take the nearest present frame's value."""
    have = np.array(sorted(rows))
    out = np.zeros((len(frames), 4))
    present = np.zeros(len(frames), dtype=bool)
    for i, f in enumerate(frames):
        if f in rows:
            out[i] = rows[f]
            present[i] = True
        else:
            out[i] = rows[int(have[np.argmin(np.abs(have - f))])]
    return out, present


def load_trajectory_csv(
    path: str | Path,
    horizon: HorizonSpec,
    n_max: int = 8,
    stride: int = 5,
    require_future: bool = True,
    attrs: VehicleAttributes | None = None,
) -> list[Scene]:
    """Window an NGSIM-style table into scenes.

    For every scene_id the target's frames must be consecutive.  Windows of
    ``p_steps + f_steps`` frames start at the first frame and advance by
    ``stride``; emitted ids are ``"{scene_id}/{first_frame}"``.  With
    ``require_future=False`` a track too short for a full window yields one
    history-only scene from its last ``p_steps`` frames.
    """
    attrs = attrs or VehicleAttributes()
    tracks: dict[str, dict[str, dict[int, list]]] = {}
    targets: dict[str, set[str]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MalformedRow(1, f"missing columns {missing}")
        col = {c: header.index(c) for c in CSV_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                sid = row[col["scene_id"]].strip()
                vid = row[col["vehicle_id"]].strip()
                frame = int(row[col["frame"]])
                x, y = float(row[col["x"]]), float(row[col["y"]])
                vx = float(row[col["vx"]]) if row[col["vx"]].strip() else math.nan
                vy = float(row[col["vy"]]) if row[col["vy"]].strip() else math.nan
                is_t = int(row[col["is_target"]])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if is_t not in (0, 1) or not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedRow(lineno, "bad is_target flag or non-finite position")
            if sid not in tracks:
                tracks[sid] = {}
                targets[sid] = set()
                order.append(sid)
            veh = tracks[sid].setdefault(vid, {})
            if frame in veh:
                raise MalformedRow(lineno, f"duplicate frame {frame} for vehicle {vid}")
            veh[frame] = [x, y, vx, vy]
            if is_t:
                targets[sid].add(vid)

    dt = horizon.dt_s
    P, F = horizon.p_steps, horizon.f_steps
    scenes: list[Scene] = []
    for sid in order:
        if len(targets[sid]) != 1:
            raise MissingTarget(f"scene {sid!r} needs exactly one target vehicle, found {len(targets[sid])}")
        tid = next(iter(targets[sid]))
        vehicles = {}
        for vid, rows in tracks[sid].items():
            frames = np.array(sorted(rows))
            arr = np.array([rows[f] for f in frames], dtype=np.float64)
            # velocities missing in the source come from central differences
            if np.isnan(arr[:, 2:]).any():
                vel = _central_diff(arr[:, :2], dt)
                arr[:, 2:] = np.where(np.isnan(arr[:, 2:]), vel, arr[:, 2:])
            vehicles[vid] = {int(f): a for f, a in zip(frames, arr)}
        tframes = np.array(sorted(vehicles[tid]))
        if len(tframes) > 1 and np.any(np.diff(tframes) != 1):
            raise IrregularTimestep(f"scene {sid!r}: target frames are not consecutive")
        L = P + F
        starts: list[tuple[int, bool]] = [(i, True) for i in range(0, len(tframes) - L + 1, stride)]
        if not starts and not require_future and len(tframes) >= P:
            starts = [(len(tframes) - P, False)]
        for i, with_future in starts:
            win = tframes[i : i + (L if with_future else P)]
            tc = win[P - 1]
            tgt = np.array([vehicles[tid][f] for f in win])
            cands = []
            for vid, rows in vehicles.items():
                if vid == tid or tc not in rows:
                    continue
                if not any(f in rows for f in win):
                    continue
                d = math.hypot(rows[tc][0] - tgt[P - 1, 0], rows[tc][1] - tgt[P - 1, 1])
                cands.append((d, vid))
            cands.sort(key=lambda t: (t[0], t[1]))
            sur, pres = [], []
            for _, vid in cands[:n_max]:
                s, p = _hold_fill(win, vehicles[vid])
                sur.append(s)
                pres.append(p)
            T = len(win)
            sur_arr = np.array(sur).reshape(len(sur), T, 4)
            pres_arr = np.array(pres, dtype=bool).reshape(len(sur), T)
            scenes.append(
                Scene(f"{sid}/{int(win[0])}", dt, tgt[:P], tgt[P:] if with_future else None, sur_arr, pres_arr, None, attrs)
            )
    return scenes


def write_trajectory_csv(scenes: Sequence[Scene], path: str | Path) -> None:
    """Write scenes as CSV rows; frames count from 0 within each scene."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for sc in scenes:
            tgt = sc.target_history if sc.target_future is None else np.concatenate([sc.target_history, sc.target_future])
            for f, s in enumerate(tgt):
                w.writerow([sc.scene_id, "target", f, *(repr(float(v)) for v in s), 1])
            for j, (traj, pres) in enumerate(zip(sc.surroundings, sc.present)):
                for f, (s, p) in enumerate(zip(traj, pres)):
                    if p:
                        w.writerow([sc.scene_id, f"v{j}", f, *(repr(float(v)) for v in s), 0])


def load_scenes(path: str | Path, cfg: Config, require_future: bool = True) -> list[Scene]:
    """Load a ``.json`` scene file, a ``.csv`` table, or every such file in a directory."""
    path = Path(path)
    horizon = HorizonSpec.from_config(cfg.horizon)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".csv", ".json") and not p.name.endswith(".controls.json"))
        out: list[Scene] = []
        for p in files:
            out.extend(load_scenes(p, cfg, require_future))
        return out
    if path.suffix == ".json":
        return read_scene_json(path)
    return load_trajectory_csv(
        path, horizon, cfg.data.n_max, cfg.data.window_stride, require_future, cfg.dynamics.attrs()
    )


# ------------------------------------------------------------------- synthetic


def _lane_polylines(x0: float, x1: float, lanes: Iterable[float]) -> tuple[np.ndarray, ...]:
    xs = np.linspace(x0, x1, 20)
    return tuple(np.stack([xs, np.full_like(xs, y)], axis=1) for y in lanes)


def _target_controls(kind: str, rng: np.random.Generator, v0: float, n: int, dt: float, attrs: VehicleAttributes,
                     t_now: float) -> np.ndarray:
    """Control profile ``(n, 4)`` for one scenario kind.

    Maneuvers begin between 2.0 s and 0.5 s before ``t_now`` (the last observed
    frame), so every maneuver is already under way in the history.
    """
    t = np.arange(n) * dt
    total = n * dt
    onset = lambda: max(0.0, t_now - rng.uniform(0.5, 2.0))
    wheelbase = attrs.lf + attrs.lr
    phi = np.zeros(n)
    omega = np.zeros(n)
    accel = rng.uniform(-0.2, 0.2) * np.ones(n)
    if kind in ("lane_change_left", "lane_change_right"):
        sign = 1.0 if kind == "lane_change_left" else -1.0
        dur = rng.uniform(3.5, 5.5)
        t0 = min(onset(), max(0.0, total - dur - 0.2))
        disp = sign * rng.uniform(3.3, 3.7)
        s = np.clip((t - t0) / dur, 0.0, 1.0)
        inside = (t >= t0) & (t <= t0 + dur)
        amp = disp / (v0 * dur)
        phi = amp * (1.0 - np.cos(2 * np.pi * s))
        omega = np.where(inside, amp * 2 * np.pi / dur * np.sin(2 * np.pi * s), 0.0)
    elif kind == "turn":
        rate = rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.08)
        t0 = onset()
        omega = np.where(t >= t0, rate, 0.0)
        phi = np.concatenate([[0.0], np.cumsum(omega[:-1] * dt)])
    elif kind == "brake":
        t0 = onset()
        accel = np.where(t >= t0, -rng.uniform(2.0, 4.0), accel)
        v = v0 + np.concatenate([[0.0], np.cumsum(accel[:-1] * dt)])
        accel = np.where(v + accel * dt < 3.0, 0.0, accel)
    elif kind != "straight":
        raise ValueError(f"unknown scenario kind {kind!r}")
    v = v0 + np.concatenate([[0.0], np.cumsum(accel[:-1] * dt)])
    delta = wheelbase * omega / np.maximum(v, 1.0)
    return np.stack([phi, omega, delta, accel], axis=1)


def synth_scenario(
    kind: str,
    noise_std: float,
    seed: int,
    attrs: VehicleAttributes | None = None,
    horizon: HorizonSpec | None = None,
    n_surround: int | None = None,
    scene_id: str | None = None,
) -> tuple[Scene, np.ndarray]:
    """Generate a scene by rolling the discrete model under a control profile.

    Returns the scene and the target's exact ``(T-1, 4)`` control sequence.
    Gaussian noise is added to positions only.
    """
    attrs = attrs or VehicleAttributes()
    horizon = horizon or HorizonSpec()
    rng = np.random.default_rng(seed)
    P, F, dt = horizon.p_steps, horizon.f_steps, horizon.dt_s
    T = P + F
    speed_range = (10.0, 18.0) if kind == "turn" else (12.0, 28.0)
    v0 = rng.uniform(*speed_range)
    controls = _target_controls(kind, rng, v0, T - 1, dt, attrs, (P - 1) * dt)
    init = np.array([0.0, 0.0, v0, 0.0])
    target = np.concatenate([init[None], rollout_arrays(init, controls, attrs, dt)])

    if n_surround is None:
        n_surround = int(rng.integers(2, 6))
    sur = []
    lanes = (-LANE_WIDTH_M, 0.0, LANE_WIDTH_M)
    for _ in range(n_surround):
        lane = lanes[rng.integers(0, 3)]
        dx = rng.uniform(-45.0, 45.0)
        if lane == 0.0 and abs(dx) < 10.0:
            dx = math.copysign(10.0 + abs(dx), dx if dx != 0 else 1.0)
        v = rng.uniform(12.0, 28.0)
        c = np.zeros((T - 1, 4))
        c[:, 3] = rng.uniform(-0.3, 0.3)
        s0 = np.array([dx, lane, v, 0.0])
        sur.append(np.concatenate([s0[None], rollout_arrays(s0, c, attrs, dt)]))
    sur_arr = np.array(sur).reshape(n_surround, T, 4)
    if noise_std > 0:
        target[:, :2] += rng.normal(0.0, noise_std, size=(T, 2))
        sur_arr[..., :2] += rng.normal(0.0, noise_std, size=sur_arr[..., :2].shape)
    borders = (-1.5 * LANE_WIDTH_M, -0.5 * LANE_WIDTH_M, 0.5 * LANE_WIDTH_M, 1.5 * LANE_WIDTH_M)
    polys = _lane_polylines(-60.0, 260.0, lanes + borders)
    scene = Scene(
        scene_id or f"{kind}-{seed}",
        dt,
        target[:P],
        target[P:],
        sur_arr,
        np.ones((n_surround, T), dtype=bool),
        polys,
        attrs,
    )
    return scene, controls


def synth_dataset(count: int, noise_std: float, seed: int, attrs: VehicleAttributes | None = None,
                  horizon: HorizonSpec | None = None, kinds: Sequence[str] = SCENARIO_KINDS) -> list[Scene]:
    """``count`` scenes cycling through ``kinds`` with per-scene seeds drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [
        synth_scenario(kinds[i % len(kinds)], noise_std, int(s), attrs, horizon, scene_id=f"syn{i:05d}")[0]
        for i, s in enumerate(seeds)
    ]


# ----------------------------------------------------------------------- split


def split(scenes: Sequence, ratios: Sequence[float], seed: int) -> tuple[list, list, list]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(scenes)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    pick = lambda idx: [scenes[i] for i in idx]
    return pick(perm[:n_train]), pick(perm[n_train : n_train + n_val]), pick(perm[n_train + n_val :])
