"""Declarative experiment configuration (YAML).

Every field defaults to the published experiment setting where one exists,
so an empty ``data``/``span`` pair is the only thing a run must supply.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path

import yaml

from mrgnn.graphs import MODES
from mrgnn.train.experiment import Architecture, canonical_modes
from mrgnn.train.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModeSource:
    nodes: str
    trips: str | None = None   # bike, ridehail
    counts: str | None = None  # subway
    schema: str = "cumulative"  # subway counters: cumulative | delta
    filter: bool = True


@dataclass
class ExperimentConfig:
    data: dict[str, ModeSource] = field(default_factory=dict)
    start: str | None = None
    end: str | None = None
    bin_hours: float = 4.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    T: int = 6
    eps: float = 0.1
    k: int = 5
    modes: tuple[str, ...] = MODES
    model: Architecture = field(default_factory=Architecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "out"
    base_dir: Path = field(default=Path("."), repr=False)

    @property
    def span(self) -> tuple[datetime, datetime]:
        return datetime.fromisoformat(self.start), datetime.fromisoformat(self.end)

    @property
    def bin_width(self) -> timedelta:
        return timedelta(hours=self.bin_hours)

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self, require_raw: bool = False) -> None:
        try:
            self.modes = canonical_modes(self.modes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = [m for m in self.modes if m not in MODES]
        if unknown:
            raise ConfigError(f"unknown modes {unknown}")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) <= 0:
            raise ConfigError(f"split must be three positive ratios summing to 1, got {list(self.split)}")
        if self.T < 1 or self.k < 1 or not 0 <= self.eps < 1 or self.bin_hours <= 0:
            raise ConfigError("T, k must be >= 1, eps in [0, 1), bin_hours > 0")
        try:
            self.model.model_config(self.modes, self.T, self.train.dropout)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        if not require_raw:
            return
        if self.start is None or self.end is None:
            raise ConfigError("start and end of the study span are required for ingestion")
        try:
            start, end = self.span
        except ValueError as exc:
            raise ConfigError(f"bad span timestamp: {exc}") from exc
        if end <= start:
            raise ConfigError("span end must be after start")
        if (end - start) % self.bin_width:
            raise ConfigError(f"bin width {self.bin_width} does not divide the span")
        for m in self.modes:
            src = self.data.get(m)
            if src is None:
                raise ConfigError(f"data.{m} is missing")
            kind = "counts" if m == "subway" else "trips"
            for key, p in (("nodes", src.nodes), (kind, getattr(src, kind))):
                if p is None:
                    raise ConfigError(f"data.{m}.{key} is missing")
                if not self.resolve(p).is_file():
                    raise ConfigError(f"data.{m}.{key}: file not found: {self.resolve(p)}")
            if src.schema not in ("cumulative", "delta"):
                raise ConfigError(f"data.{m}.schema must be cumulative or delta")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}
        d["data"] = {m: {k: v for k, v in asdict(s).items() if v is not None} for m, s in self.data.items()}
        d["split"], d["modes"] = list(self.split), list(self.modes)
        d["model"] = {**asdict(self.model), "channels": list(self.model.channels)}
        d["train"] = {**asdict(self.train), "seeds": list(self.train.seeds)}
        return d


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict, base_dir=".") -> ExperimentConfig:
    raw = dict(raw or {})
    names = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    data = raw.pop("data", None) or {}
    if not isinstance(data, dict):
        raise ConfigError("data must be a mapping of mode -> sources")
    model = _build(Architecture, raw.pop("model", None), "model")
    if isinstance(model.channels, list):
        model.channels = tuple(model.channels)
    train = _build(TrainConfig, raw.pop("train", None), "train")
    for key in ("start", "end"):
        if isinstance(raw.get(key), datetime):
            raw[key] = raw[key].isoformat()
    for key in ("split", "modes"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        cfg = ExperimentConfig(
            data={m: _build(ModeSource, s, f"data.{m}") for m, s in data.items()},
            model=model,
            train=train,
            base_dir=Path(base_dir),
            **raw,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {}, path.parent)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
