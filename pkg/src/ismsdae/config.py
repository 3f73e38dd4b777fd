"""Run configuration loaded from JSON, with defaults for every field."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ParameterError
from .nn import TrainConfig


@dataclass
class SynthConfig:
    duration_s: float = 5e-3
    captures_per_profile: int = 3
    eval_captures_per_profile: int = 1
    profiles: tuple = ("uniform_random", "repeating_pattern", "incrementing")


@dataclass
class DatasetConfig:
    burst_len: int = 128
    per_class: int = 2000
    eval_per_class: int = 500
    burst_mode: str = "random"
    channel_mode: str = "baseband"
    train_snr_db: float = 50.0
    valid_fraction: float = 0.2
    pre_buffer: int = 16


@dataclass
class PolicyConfig:
    freq_jitter_std_hz: float = 50e3
    time_jitter_max_samples: int = 32
    gain_db: float = 0.0


@dataclass
class SdaeConfig:
    bottlenecks: tuple = (196, 96, 20)
    dusting: tuple = (0.3, 0.2, 0.1)
    rho: float = 0.1
    lam: float = 1.0
    dae_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, batch_size=64, learning_rate=1e-3))
    grid_rhos: tuple = (0.05, 0.1, 0.2)
    grid_lams: tuple = (0.1, 1.0, 10.0)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sdae: SdaeConfig = field(default_factory=SdaeConfig)
    head: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=10, batch_size=64, learning_rate=3e-3))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=64, learning_rate=1e-3,
                                            dropout_rate=0.2))
    reference: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=64, learning_rate=1e-3,
                                            dropout_rate=0.2))
    snr_grid: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    track_snr: tuple = (0.0, 20.0)

    @property
    def root(self):
        return Path(self.out)

    @property
    def capture_dir(self):
        return self.root / "captures"

    @property
    def dataset_dir(self):
        return self.root / "datasets"

    @property
    def model_dir(self):
        return self.root / "models"

    @property
    def report_dir(self):
        return self.root / "reports"

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Hash of every result-affecting field; the output location is left out."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ParameterError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ParameterError(f"{where}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data):
    return _build(RunConfig, data, "config")


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
