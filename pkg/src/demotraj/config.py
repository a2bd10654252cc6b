"""Flat ``section.key=value`` configuration.

Every tunable default lives here; a config file only needs the keys it
overrides.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dynamics import STEER_LIMIT, V_MIN_FLOOR, VehicleAttributes


class ConfigError(ValueError):
    pass


@dataclass
class DynamicsConfig:
    mass_kg: float = 1500.0
    yaw_inertia_kg_m2: float = 2500.0
    dist_cg_front_m: float = 1.2
    dist_cg_rear_m: float = 1.6
    cornering_stiffness_front_N_per_rad: float = -1e5
    cornering_stiffness_rear_N_per_rad: float = -1e5
    v_min_floor: float = V_MIN_FLOOR
    steer_limit: float = STEER_LIMIT
    accel_limit: float = 8.0
    reg_lambda: float = 1e-6
    tol_rot: float = 0.05

    def attrs(self) -> VehicleAttributes:
        return VehicleAttributes(
            self.mass_kg,
            self.yaw_inertia_kg_m2,
            self.dist_cg_front_m,
            self.dist_cg_rear_m,
            self.cornering_stiffness_front_N_per_rad,
            self.cornering_stiffness_rear_N_per_rad,
        )


@dataclass
class HorizonConfig:
    t_p_s: float = 3.0
    t_f_s: float = 5.0
    t_s_s: float = 2.0
    dt_s: float = 0.2


NUSCENES_HORIZON = HorizonConfig(t_p_s=2.0, t_f_s=6.0, t_s_s=2.0, dt_s=0.5)


@dataclass
class ModelConfig:
    d_model: int = 64
    z_dim: int = 16
    ssm_state: int = 8
    fusion_blocks: int = 2
    fusion_heads: int = 2
    score_hidden: int = 8
    num_maneuvers: int = 6
    max_polylines: int = 8
    polyline_points: int = 10
    graph_radius_m: float = 50.0
    pos_scale_m: float = 10.0
    lat_scale_m: float = 2.0
    vel_scale_mps: float = 10.0
    logvar_min: float = -8.0
    logvar_max: float = 4.0
    heading_step_limit: float = 0.2


@dataclass
class LossConfig:
    w_kl: float = 0.5
    w_di: float = 1.0
    w_ce: float = 1.0
    w_ac: float = 1.0
    ade_weight: float = 0.5
    sigma_floor: float = 1e-3
    rho_limit: float = 0.99


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    epochs: int = 50
    batch_size: int = 16
    seed: int = 7
    grad_clip: float = 10.0
    split: str = "0.7,0.1,0.2"


@dataclass
class DataConfig:
    n_max: int = 8
    window_stride: int = 5
    lane_change_threshold_m: float = 1.75
    brake_threshold_mps2: float = -0.5


@dataclass
class SynthConfig:
    count: int = 200
    noise_std: float = 0.1
    kinds: str = "straight,lane_change_left,lane_change_right,turn,brake"


@dataclass
class Config:
    mode: str = "highway"
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    # -- flat key access ---------------------------------------------------

    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {"mode": self.mode}
        for f in fields(self):
            sect = getattr(self, f.name)
            if dataclasses.is_dataclass(sect):
                for g in fields(sect):
                    out[f"{f.name}.{g.name}"] = getattr(sect, g.name)
        return out

    def set(self, key: str, raw: str) -> None:
        if key == "mode":
            if raw not in ("highway", "nuscenes"):
                raise ConfigError(f"mode must be highway or nuscenes, got {raw!r}")
            self.mode = raw
            return
        sect_name, _, name = key.partition(".")
        sect = getattr(self, sect_name, None)
        if sect is None or not dataclasses.is_dataclass(sect) or not hasattr(sect, name):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(sect, name)
        try:
            value = type(current)(raw) if not isinstance(current, bool) else raw.lower() in ("1", "true", "yes")
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(sect, name, value)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    @classmethod
    def parse(cls, text: str) -> "Config":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            k, _, v = line.partition("=")
            pairs.append((k.strip(), v.strip()))
        mode = dict(pairs).get("mode", "highway")
        cfg = cls.for_mode(mode)
        for k, v in pairs:
            cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "Config":
        if path is None:
            return cls()
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def for_mode(cls, mode: str) -> "Config":
        cfg = cls()
        cfg.set("mode", mode)
        if mode == "nuscenes":
            cfg.horizon = dataclasses.replace(NUSCENES_HORIZON)
        return cfg

    def copy(self) -> "Config":
        return Config.parse(self.to_text())
