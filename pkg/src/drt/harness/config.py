"""Training configuration record and its JSON form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from ..dynamic import BasisLayout, ResidualMode
from ..errors import ConfigError
from ..losses import Alignment, LossConfig
from ..models import Architecture

# JSON keys that differ from attribute names
_RENAMED = {"lam": "lambda"}


@dataclass
class TrainConfig:
    """All hyperparameters of one training run.

    Defaults follow the long 300-epoch schedule; :func:`desk_preset` gives the
    60-epoch CPU-sized variant used by the acceptance suite.
    """

    mode: ResidualMode = ResidualMode.SUBSPACE_ROUTING
    K: int = 4
    lam: float = 50.0
    alignment: Alignment = Alignment.MCD
    mcd_inner_steps: int = 4
    lr0: float = 0.002
    decay_factor: float = 0.1
    decay_every: int = 100
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0
    st_threshold: float = 0.8
    source_paths: List[str] = field(default_factory=list)
    target_path: str = ""
    # evaluation sets; fall back to the (labelled) training files when empty
    target_eval_path: str = ""
    source_eval_paths: List[str] = field(default_factory=list)
    # architecture
    channels: List[int] = field(default_factory=lambda: [32, 64])
    hidden: int = 128
    reduction_ratio: int = 4
    basis_layout: BasisLayout = BasisLayout.FULL
    classes: Optional[int] = None
    # bookkeeping
    eval_every: int = 1
    record_wall_ms: bool = False

    def __post_init__(self):
        try:
            self.mode = ResidualMode(self.mode)
            self.alignment = Alignment(self.alignment)
            self.basis_layout = BasisLayout(self.basis_layout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.source_paths = [str(p) for p in self.source_paths]
        self.source_eval_paths = [str(p) for p in self.source_eval_paths]
        self.channels = [int(c) for c in self.channels]
        self.validate()

    def validate(self) -> None:
        if self.mode.routes and self.K < 1:
            raise ConfigError("K must be >= 1 for routing modes")
        LossConfig(self.lam, self.alignment, self.mcd_inner_steps)
        if self.lr0 <= 0 or self.decay_factor <= 0 or self.decay_every < 1:
            raise ConfigError("lr0, decay_factor must be > 0 and decay_every >= 1")
        if self.epochs < 1 or self.batch_size < 2 or self.eval_every < 1:
            raise ConfigError("epochs >= 1, batch_size >= 2 and eval_every >= 1 required")
        if not 0 <= self.st_threshold <= 1:
            raise ConfigError("st_threshold must lie in [0, 1]")
        if not self.channels or self.hidden < 1 or self.reduction_ratio < 1:
            raise ConfigError("invalid architecture settings")
        if self.source_eval_paths and len(self.source_eval_paths) != len(self.source_paths):
            raise ConfigError("source_eval_paths must pair one-to-one with source_paths")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.alignment, self.mcd_inner_steps)

    def architecture(self, classes: int) -> Architecture:
        return Architecture(mode=self.mode, K=self.K, channels=tuple(self.channels),
                            hidden=self.hidden, classes=classes, reduction=self.reduction_ratio,
                            layout=self.basis_layout)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if hasattr(value, "value"):
                value = value.value
            out[_RENAMED.get(f.name, f.name)] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        d = dict(d)
        preset = d.pop("preset", None)
        base = {"desk": desk_preset, "full": full_preset, None: cls}.get(preset)
        if base is None:
            raise ConfigError(f"unknown preset {preset!r}")
        inverse = {v: k for k, v in _RENAMED.items()}
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            name = inverse.get(key, key)
            if name not in names:
                raise ConfigError(f"unknown config field {key!r}")
            kwargs[name] = value
        try:
            return base().replace(**kwargs) if preset else cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps() + "\n", encoding="utf-8")
        return path


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = TrainConfig.from_dict(raw)
    base = Path(path).parent
    # relative data paths are resolved against the config file's directory
    def resolve(p):
        return str(p if Path(p).is_absolute() or not p else base / p)
    cfg.source_paths = [resolve(p) for p in cfg.source_paths]
    cfg.source_eval_paths = [resolve(p) for p in cfg.source_eval_paths]
    cfg.target_path = resolve(cfg.target_path)
    cfg.target_eval_path = resolve(cfg.target_eval_path)
    return cfg


def full_preset() -> TrainConfig:
    """The long schedule: 300 epochs at lr 0.002, decayed x0.1 every 100."""
    return TrainConfig()


def desk_preset() -> TrainConfig:
    """60-epoch schedule (decay every 20) sized for a single CPU core.

    A few hundred source images give only a handful of SGD steps per epoch,
    so the initial learning rate is raised to 0.2 and the network narrowed to
    8/16 channels with 64 hidden units.
    """
    return TrainConfig(epochs=60, decay_every=20, lr0=0.2, channels=[8, 16], hidden=64,
                       eval_every=10)
