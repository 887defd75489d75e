"""Run configuration: one JSON document merged with command-line overrides."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attack import EPSILON_GRID, AttackConfig
from .policy import ArchitectureConfig, ConfigError
from .ppo import AdvTraining, TrainConfig
from .recovery import RecoveryConfig

SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    epsilons: tuple = EPSILON_GRID
    regimes: tuple = ("clean", "attacked", "attacked+recovery")
    episodes: int = 10


@dataclass
class RunConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    env: dict = field(default_factory=dict)
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1

    def to_dict(self):
        train = asdict(self.training)
        return {
            "schema_version": SCHEMA_VERSION,
            "architecture": self.architecture.to_dict(),
            "attack": asdict(self.attack),
            "recovery": asdict(self.recovery),
            "training": train,
            "evaluation": {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(self.evaluation).items()},
            "env": dict(self.env),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "workers": self.workers,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, directory):
        path = Path(directory) / "run_config.json"
        path.write_text(self.dumps())
        return path


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(d):
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = RunConfig()
    if "architecture" in d:
        arch = dict(d["architecture"])
        if "convs" in arch:
            arch["convs"] = tuple(arch["convs"])
        cfg.architecture = _build(ArchitectureConfig, arch, "architecture")
        cfg.architecture.layer_shapes()
    if "attack" in d:
        cfg.attack = _build(AttackConfig, d["attack"], "attack")
    if "recovery" in d:
        cfg.recovery = _build(RecoveryConfig, d["recovery"], "recovery")
    if "training" in d:
        train = dict(d["training"])
        adv = train.get("adv_training")
        if adv is not None:
            adv = dict(adv)
            adv["attack"] = _build(AttackConfig, adv.get("attack", {}), "training.adv_training.attack")
            train["adv_training"] = _build(AdvTraining, adv, "training.adv_training")
        cfg.training = _build(TrainConfig, train, "training")
    if "evaluation" in d:
        ev = {k: tuple(v) if isinstance(v, list) else v for k, v in d["evaluation"].items()}
        cfg.evaluation = _build(EvalConfig, ev, "evaluation")
    for key in ("env", "output_dir", "seed", "workers"):
        if key in d:
            setattr(cfg, key, d[key])
    return cfg


def load(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(data)


def override(obj, **changes):
    """``dataclasses.replace`` that reports bad values as :class:`ConfigError`."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return obj
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
