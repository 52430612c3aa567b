"""Run configuration: one JSON document with every default written out."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import model as M
from .evalproto import EvalConfig
from .sigproc import BandLimits
from .synth import DatasetSpec, SceneParams
from .training import LossConfig, TrainConfig

SECTIONS = ("synth", "ingest", "model", "train", "loss", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 12
    split_seed: int = 0
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(n_val=4))

    def __post_init__(self):
        # materialize every scene parameter; unknown scene keys are rejected here
        try:
            scene = SceneParams.from_dict(self.dataset.scene).to_dict()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"config.synth.dataset.scene: {exc.args[0]}") from None
        object.__setattr__(self, "dataset", dataclasses.replace(self.dataset, scene=scene))


@dataclass(frozen=True)
class IngestConfig:
    window_stride: int | None = None  # None: disjoint windows of n_frames


def _build(cls, data, where: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        )
        if dataclasses.is_dataclass(default) and not isinstance(default, BandLimits):
            value = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, BandLimits):
            if not (isinstance(value, list) and len(value) == 2):
                raise ConfigError(f"{where}.{name}: band must be [lo, hi]")
            value = BandLimits(float(value[0]), float(value[1]))
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plain(obj):
    if isinstance(obj, BandLimits):
        return obj.as_list()
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    model: M.ModelConfig = field(default_factory=M.hr_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> RunConfig:
        """Apply one seed to every seeded stage."""
        return dataclasses.replace(
            self,
            synth=dataclasses.replace(self.synth, split_seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            eval=dataclasses.replace(self.eval, ica_seed=seed),
        )

    def train_config(self) -> TrainConfig:
        if self.ingest.window_stride is None:
            return self.train
        return dataclasses.replace(self.train, window_stride=self.ingest.window_stride)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.json"
        path.write_text(self.to_json())
        return path
