"""Experiment configuration: sectioned INI file <-> typed dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ConfigError


@dataclass
class DataSpec:
    source: str = "gaussian"  # gaussian | csv
    num_classes: int = 10
    dim: int = 20
    n_per_class: int = 200
    test_n_per_class: int = 100
    spread: float = 1.0
    separation: float = 1.0
    offset: float = 0.0
    means_seed: int = 0
    seed: int = 1
    test_seed: int = 2
    train_csv: str = ""
    test_csv: str = ""


@dataclass
class PartitionSpec:
    num_clients: int = 10
    mode: str = "iid"  # iid | noniid
    class_fraction: float = 1.0
    seed: int = 0


@dataclass
class ModelSpec:
    kind: str = "linear"  # linear | mlp
    hidden: int = 32


@dataclass
class TrainingSpec:
    rounds: int = 50
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    participation: float = 1.0
    eval_every: int = 1
    workers: int = 1


@dataclass
class StrategySpec:
    base: str = "fedavg"  # fedavg | fedprox
    mu: float = 0.0
    fedprox_server_term: bool = False
    foundation: str = "none"  # none | fedbaf | weight_init
    psi: float = 1.0
    foundation_path: str = ""
    static_alpha: bool = False


@dataclass
class AttackSpec:
    zeta: float = 0.0
    lam: float = 1.0
    seed: int = 0


@dataclass
class PretrainSpec:
    """Centralized pre-training on a shifted copy of the task distribution."""

    mean_shift: float = 0.5
    shift_seed: int = 11
    n_per_class: int = 200
    test_n_per_class: int = 100
    seed: int = 21
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 32
    out: str = "foundation.fbaf"


@dataclass
class RunSpec:
    seed: int = 0
    out: str = "runs/default"
    trials: int = 1
    retain_client_models: bool = False
    retain_models: bool = False
    debug_alpha: bool = False
    checkpoint_every: int = 0
    chi_diagnostic: bool = False


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    strategy: StrategySpec = field(default_factory=StrategySpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def replace(self, **sections: dict[str, Any]) -> "ExperimentConfig":
        """Copy with per-section field overrides, e.g. ``replace(run={"seed": 3})``."""
        kwargs = {}
        for f in dataclasses.fields(self):
            current = getattr(self, f.name)
            kwargs[f.name] = dataclasses.replace(current, **sections.get(f.name, {}))
        unknown = set(sections) - set(kwargs)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return ExperimentConfig(**kwargs)

    def validate(self, check_files: bool = True) -> None:
        d, p, tr, st, at = self.data, self.partition, self.training, self.strategy, self.attack
        if d.source not in ("gaussian", "csv"):
            raise ConfigError(f"data.source must be gaussian or csv, got {d.source!r}")
        if d.num_classes < 1 or d.dim < 1 or d.n_per_class < 1 or d.test_n_per_class < 1:
            raise ConfigError("data sizes must be positive")
        if p.mode not in ("iid", "noniid"):
            raise ConfigError(f"partition.mode must be iid or noniid, got {p.mode!r}")
        if p.num_clients < 1:
            raise ConfigError("partition.num_clients must be >= 1")
        if p.mode == "noniid":
            s = math.ceil(p.class_fraction * d.num_classes - 1e-9)
            if s < 1 or s > d.num_classes:
                raise ConfigError("class_fraction * num_classes must be in [1, num_classes]")
            if s * p.num_clients < d.num_classes:
                raise ConfigError("non-IID class rotation cannot cover every class")
        if self.model.kind not in ("linear", "mlp"):
            raise ConfigError(f"model.kind must be linear or mlp, got {self.model.kind!r}")
        if tr.rounds < 0 or tr.epochs < 0 or tr.batch_size < 1 or tr.lr < 0:
            raise ConfigError("invalid training schedule")
        if not 0.0 < tr.participation <= 1.0:
            raise ConfigError("training.participation must lie in (0, 1]")
        if st.base not in ("fedavg", "fedprox"):
            raise ConfigError(f"strategy.base must be fedavg or fedprox, got {st.base!r}")
        if st.mu < 0:
            raise ConfigError("strategy.mu must be >= 0")
        if st.foundation not in ("none", "fedbaf", "weight_init"):
            raise ConfigError(f"strategy.foundation must be none, fedbaf or weight_init")
        if st.psi < 0:
            raise ConfigError("strategy.psi must be >= 0")
        if not 0.0 <= at.zeta <= 1.0 or at.lam < 1.0:
            raise ConfigError("attack.zeta must be in [0,1] and attack.lam >= 1")
        if check_files:
            needed = []
            if d.source == "csv":
                needed += [d.train_csv, d.test_csv]
            if st.foundation != "none" and st.foundation_path:
                needed.append(st.foundation_path)
            for path in needed:
                if not path or not Path(path).exists():
                    raise ConfigError(f"referenced file does not exist: {path!r}")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, kind: type, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def dumps(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in dataclasses.fields(config):
        spec = getattr(config, section.name)
        parser[section.name] = {f.name: _format(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(parser.sections()) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, f in sections.items():
        spec_cls = f.default_factory
        if not parser.has_section(name):
            kwargs[name] = spec_cls()
            continue
        fields = {g.name: g for g in dataclasses.fields(spec_cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in fields:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            values[key] = _parse(raw, _TYPES[fields[key].type], f"[{name}] {key}")
        kwargs[name] = spec_cls(**values)
    return ExperimentConfig(**kwargs)


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def save(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(config))
