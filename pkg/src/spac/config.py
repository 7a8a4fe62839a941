"""Run configuration: one flat set of keys with defaults, read from key=value text."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .agent import TrainConfig
from .data import DatasetSpec

OUTPUT_ROOT_ENV = "SPAC_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # agent
    image_size: int = 28
    plan_dim: int = 64
    max_step_disp: float = 2.8
    horizon: int = 10
    gamma: float = 0.99
    tau: float = 0.005
    tv_weight: float = 1.0
    batch_size: int = 32
    reg_batch: int = 16
    capacity: int = 20_000
    grad_steps: int = 1
    lr_critic: float = 3e-4
    lr_planner: float = 1e-3
    lr_actor: float = 1e-3
    lr_alpha: float = 3e-4
    init_alpha: float = 0.1
    ncc_window: int = 9
    mode: str = "spac"
    seed: int = 0
    # data
    source: str = "synthetic"
    idx_path: str = ""
    train_count: int = 500
    eval_count: int = 50
    rotation_deg: float = 45.0
    scale_min: float = 0.7
    scale_max: float = 1.3
    elastic_sigma: float = 4.0
    elastic_amplitude: float = 6.0
    background: float = 0.12
    pairing: str = "self"
    data_seed: int = 0
    # run
    steps: int = 30_000
    run_id: str = "run"
    out_dir: str = ""
    checkpoint_every: int = 5_000
    eval_every: int = 0
    eval_horizon: int = 20
    deterministic: bool = True

    def train_config(self) -> TrainConfig:
        names = set(TrainConfig.field_names())
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            source=self.source,
            idx_path=self.idx_path,
            image_size=self.image_size,
            count=self.train_count,
            rotation_deg=self.rotation_deg,
            scale_min=self.scale_min,
            scale_max=self.scale_max,
            elastic_sigma=self.elastic_sigma,
            elastic_amplitude=self.elastic_amplitude,
            background=self.background,
            pairing=self.pairing,
            seed=self.data_seed,
        )

    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.run_id

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {raw!r}") from None
    return raw


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def build(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    merged = {}
    merged.update(file_values or {})
    merged.update(overrides or {})
    for key in merged:
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = RunConfig(**merged)
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    return build(parse_text(Path(path).read_text()), overrides)
