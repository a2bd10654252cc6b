"""Command line entry point: ``demo {train,predict,evaluate,simulate,verify}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks
from .config import Config, ConfigError
from .data_io import (
    SCENARIO_KINDS,
    DataError,
    HorizonSpec,
    load_scenes,
    split,
    synth_dataset,
    synth_scenario,
    write_trajectory_csv,
)
from .decoder_losses import PredictionSet
from .dynamics import DynamicsError
from .eval_metrics import MetricReport, evaluate, format_table
from .model import DemoModel, ModeMismatch
from .numkernel.params import CheckpointError, load_checkpoint, save_checkpoint
from .numkernel.tensor import MissingGradient, NonFiniteError
from .training import LOSS_COLUMNS, evaluate_model, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckpointMismatch(DataError):
    pass


class IdMismatch(DataError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def worker_count() -> int:
    """Worker cap from ``DEMO_THREADS`` (default 1)."""
    raw = os.environ.get("DEMO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"DEMO_THREADS must be an integer, got {raw!r}") from None


@dataclass
class RunManifest:
    config: str
    seed: int
    input_hash: str
    checkpoint: str
    metrics: str
    timings_s: dict[str, float] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _content_hash(paths: Sequence[Path], extra: str = "") -> str:
    h = hashlib.sha256(extra.encode("utf-8"))
    for p in sorted(paths):
        h.update(p.name.encode("utf-8"))
        h.update(p.read_bytes())
    return h.hexdigest()


def _data_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix in (".csv", ".json") and not p.name.endswith(".controls.json"))
    return [path]


def _load(path: str, cfg: Config, require_future: bool = True):
    """Load scenes from a file or directory, files read in parallel and concatenated in name order."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such data path: {path}")
    files = _data_files(p)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        parts = list(pool.map(lambda f: load_scenes(f, cfg, require_future), files))
    return [sc for part in parts for sc in part]


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    mode = getattr(args, "mode", None)
    if mode and mode != cfg.mode:
        # carry over explicit settings, but take the horizon from the requested mode
        defaults = Config.for_mode(cfg.mode).to_flat()
        overrides = {k: v for k, v in cfg.to_flat().items()
                     if k != "mode" and not k.startswith("horizon.") and v != defaults[k]}
        cfg = Config.for_mode(mode)
        for k, v in overrides.items():
            cfg.set(k, str(v))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if args.data:
        scenes = _load(args.data, cfg)
        files = _data_files(Path(args.data))
    else:
        hz = HorizonSpec.from_config(cfg.horizon)
        kinds = tuple(k.strip() for k in cfg.synth.kinds.split(",") if k.strip())
        scenes = synth_dataset(cfg.synth.count, cfg.synth.noise_std, cfg.train.seed, cfg.dynamics.attrs(), hz, kinds)
        files = []
    if not scenes:
        raise DataError("no scenes to train on")
    ratios = [float(r) for r in cfg.train.split.split(",")]
    tr, va, te = split(scenes, ratios, cfg.train.seed)
    if not te:
        te = va or tr
    t_load = time.perf_counter() - t0
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    model = DemoModel(cfg)
    loss_path = out / "losses.csv"
    with loss_path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(LOSS_COLUMNS) + "\n")

        def on_epoch(log):
            fh.write(log.csv_row() + "\n")
            fh.flush()
            save_checkpoint(model.store, out / "checkpoints" / f"epoch_{log.epoch:03d}.ckpt")
            print(f"epoch {log.epoch:3d}  total {log.total:.4f}  ce {log.ce:.3f}  ac {log.ac:.3f}  ({log.seconds:.1f} s)")

        t1 = time.perf_counter()
        train(model, tr, on_epoch=on_epoch)
        t_train = time.perf_counter() - t1
    ckpt = out / "model.ckpt"
    save_checkpoint(model.store, ckpt)
    t2 = time.perf_counter()
    report, base = evaluate_model(model, te, ks=_ks(args, cfg))
    _write_reports(out, [report, base])
    t_eval = time.perf_counter() - t2
    manifest = RunManifest(
        cfg.to_text(), cfg.train.seed, _content_hash(files, cfg.to_text()), str(ckpt), str(out / "metrics.json"),
        {"load": t_load, "train": t_train, "evaluate": t_eval},
    )
    manifest.write(out)
    print(format_table([report, base]), end="")
    return EXIT_OK


def _ks(args, cfg: Config) -> tuple[int, ...]:
    k = getattr(args, "k", None)
    K = cfg.model.num_maneuvers
    if k is None:
        return (1, K)
    if k < 1 or k > K:
        raise UsageError(f"--k must be between 1 and {K}")
    return tuple(sorted({1, k}))


def _write_reports(out: Path, reports: Sequence[MetricReport]) -> None:
    payload = {r.label: r.to_dict() for r in reports}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "metrics.txt").write_text(format_table(reports), encoding="utf-8")


def _load_model(cfg: Config, checkpoint: str) -> DemoModel:
    model = DemoModel(cfg)
    try:
        load_checkpoint(model.store, checkpoint)
    except FileNotFoundError:
        raise DataError(f"no such checkpoint: {checkpoint}") from None
    except CheckpointError as exc:
        raise CheckpointMismatch(str(exc)) from None
    return model


def cmd_predict(args) -> int:
    cfg = _config(args)
    model = _load_model(cfg, args.checkpoint)
    scenes = _load(args.data, cfg, require_future=False)
    preds = predict(model, scenes)
    payload = {
        "dt_s": model.horizon.dt_s,
        "scenes": [{"scene_id": sc.scene_id, **p.to_dict()} for sc, p in zip(scenes, preds)],
    }
    text = json.dumps(payload, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _svg(scene, pred: PredictionSet) -> str:
    pts = [scene.target_history[:, :2], scene.target_future[:, :2], *pred.trajectories]
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0) - 2.0, allp.max(axis=0) + 2.0
    span = np.maximum(hi - lo, 1e-6)
    W, H = 800, max(200, int(800 * span[1] / span[0]))

    def path(xy, color, width, opacity=1.0):
        px = (xy[:, 0] - lo[0]) / span[0] * W
        py = H - (xy[:, 1] - lo[1]) / span[1] * H
        d = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py))
        return f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity:.3f}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             path(scene.target_history[:, :2], "#555555", 2), path(scene.target_future[:, :2], "#2a9d3a", 2)]
    for traj, p in zip(pred.trajectories, pred.maneuver_probs):
        parts.append(path(traj, "#1f5fbf", 1.5, 0.2 + 0.8 * float(p)))
    parts.append("</svg>\n")
    return "\n".join(parts)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    try:
        payload = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no such predictions file: {args.predictions}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"predictions are not valid JSON: {exc}") from None
    scenes = _load(args.data, cfg)
    by_id = {sc.scene_id: sc for sc in scenes}
    entries = payload.get("scenes", [])
    pred_ids = [e["scene_id"] for e in entries]
    missing = sorted(set(pred_ids) ^ set(by_id))
    if missing:
        raise IdMismatch(f"scene ids differ between predictions and ground truth: {missing[:5]}")
    preds = [PredictionSet.from_dict(e) for e in entries]
    gts = [by_id[i].target_future for i in pred_ids]
    dt = float(payload.get("dt_s", cfg.horizon.dt_s))
    bad = [i for i, p in zip(pred_ids, preds) if not np.isfinite(p.trajectories).all()]
    if bad:
        raise DataError(f"non-finite predictions for scenes {bad[:5]}")
    report = evaluate(preds, gts, dt, _ks(args, cfg), label="model")
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_reports(out, [report])
        if args.svg:
            svg_dir = out / "svg"
            svg_dir.mkdir(exist_ok=True)
            for sid, p in zip(pred_ids, preds):
                (svg_dir / f"{sid.replace('/', '_')}.svg").write_text(_svg(by_id[sid], p), encoding="utf-8")
    print(format_table([report]), end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = SCENARIO_KINDS if args.kind == "mixed" else (args.kind,)
    hz = HorizonSpec.from_config(cfg.horizon)
    rng = np.random.default_rng(cfg.train.seed)
    seeds = rng.integers(0, 2**31 - 1, size=args.count)
    for i, s in enumerate(seeds):
        kind = kinds[i % len(kinds)]
        sid = f"sim{i:05d}"
        scene, controls = synth_scenario(kind, cfg.synth.noise_std if args.noise is None else args.noise,
                                         int(s), cfg.dynamics.attrs(), hz, scene_id=sid)
        write_trajectory_csv([scene], out / f"{sid}.csv")
        meta = {"scene_id": sid, "kind": kind, "seed": int(s), "dt_s": hz.dt_s,
                "columns": ["phi", "omega", "delta", "accel"], "controls": controls.tolist()}
        (out / f"{sid}.controls.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = None
    if args.checkpoint:
        model = _load_model(_config(args), args.checkpoint)
    results = checks.run_all(model, quick=not args.full)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("highway", "nuscenes"))

    p = _Parser(prog="demo", description="Two-stage dynamics-informed trajectory prediction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a model and evaluate it on the test split")
    t.add_argument("--data", help="scene directory, .csv or .json (default: synthetic scenes from the config)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int, help="extra K for minADE/minFDE")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="predict futures for scenes")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", help="output JSON (default: stdout)")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    e.add_argument("--predictions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--k", type=int)
    e.add_argument("--svg", action="store_true", help="also write per-scene SVG overlays")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic scenes")
    s.add_argument("--kind", default="mixed", choices=("mixed",) + tuple(SCENARIO_KINDS))
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--noise", type=float, help="position noise std in metres")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--checkpoint")
    v.add_argument("--full", action="store_true", help="use full sample counts")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "count", 0) is not None and getattr(args, "count", 0) < 0:
            raise UsageError("--count must be nonnegative")
        if getattr(args, "epochs", None) is not None and args.epochs < 1:
            raise UsageError("--epochs must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    # DynamicsError derives from ValueError, so the numeric clause must come first
    except (DynamicsError, NonFiniteError, MissingGradient, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ModeMismatch, CheckpointError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
