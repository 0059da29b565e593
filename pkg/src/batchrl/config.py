"""YAML run configuration with typed sections and strict key checking.

An empty file gives the Case Study 1 pipeline defaults.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field

import yaml

from .exceptions import ConfigurationError
from .plants import APPROXIMATE_FOR, CS3_DU_WEIGHTS, PLANT_NAMES, MonodParameters


@dataclass
class PolicySection:
    hidden_layers: typing.Optional[int] = None
    neurons: int = 20
    activation: typing.Optional[str] = None
    split_networks: typing.Optional[bool] = None
    history: int = 1


@dataclass
class OfflineSection:
    epochs: int = 100
    max_epochs: int = 100
    episodes: int = 800
    learning_rate: float = 1e-2
    ocp_gap: typing.Optional[float] = None


@dataclass
class OnlineSection:
    epochs: int = 4
    episodes: int = 25
    learning_rate: float = 1e-3
    # offline checkpoint to start from (adapt-online)
    checkpoint: typing.Optional[str] = None
    trainable_layers: typing.Optional[typing.List[int]] = None


@dataclass
class AdamSection:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0


@dataclass
class EvaluateSection:
    episodes: int = 100
    checkpoint: typing.Optional[str] = None
    deterministic: bool = False


@dataclass
class NmpcSection:
    multistarts: int = 8
    max_iterations: int = 300
    tolerance: float = 1e-6
    model_substeps: int = 5
    episodes: int = 100


@dataclass
class Cs3Section:
    duration: float = 240.0
    du_weights: typing.List[float] = field(default_factory=lambda: list(CS3_DU_WEIGHTS))
    kinetics: typing.Dict[str, float] = field(default_factory=MonodParameters().as_dict)


@dataclass
class RunConfig:
    plant: str = "cs1"
    approx_plant: typing.Optional[str] = None
    seed: int = 0
    intervals: typing.Optional[int] = None
    substeps: int = 20
    threads: int = 1
    gamma: float = 1.0
    policy: PolicySection = field(default_factory=PolicySection)
    offline: OfflineSection = field(default_factory=OfflineSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    adam: AdamSection = field(default_factory=AdamSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    nmpc: NmpcSection = field(default_factory=NmpcSection)
    cs3: Cs3Section = field(default_factory=Cs3Section)

    def __post_init__(self):
        validate(self)

    def as_dict(self):
        return dataclasses.asdict(self)

    @property
    def approx_name(self):
        return self.approx_plant or APPROXIMATE_FOR[self.plant]

    def b2b(self):
        from .batch2batch import B2BConfig

        tl = self.online.trainable_layers
        return B2BConfig(
            offline_epochs=self.offline.epochs,
            max_offline_epochs=self.offline.max_epochs,
            offline_episodes=self.offline.episodes,
            offline_learning_rate=self.offline.learning_rate,
            online_epochs=self.online.epochs,
            online_episodes=self.online.episodes,
            online_learning_rate=self.online.learning_rate,
            lr_decay=self.adam.lr_decay,
            trainable_layers=None if tl is None else tuple(tl),
            gamma=self.gamma,
            beta1=self.adam.beta1,
            beta2=self.adam.beta2,
            eps=self.adam.eps,
            seed=self.seed,
            threads=self.threads,
            ocp_gap=self.offline.ocp_gap,
        )

    def make(self, name, substeps=None):
        """Build plant ``name`` with this configuration's overrides."""
        from .plants import make_plant

        opts = {}
        if name.startswith("cs3"):
            opts = dict(
                duration=self.cs3.duration,
                du_weights=tuple(self.cs3.du_weights),
                params=MonodParameters.from_dict(self.cs3.kinetics),
            )
        return make_plant(name, self.intervals, substeps or self.substeps, **opts)


def _check_type(value, tp, where):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], where)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp)
        return [_check_type(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a mapping, got {type(value).__name__}")
        _, inner = typing.get_args(tp)
        return {str(k): _check_type(v, inner, f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported type {tp}")


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'top level'}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, path)
        else:
            kwargs[key] = _check_type(value, tp, path)
    return kwargs if cls is RunConfig else cls(**kwargs)


def validate(cfg):
    if cfg.plant not in PLANT_NAMES:
        raise ConfigurationError(f"plant must be one of {PLANT_NAMES}, got {cfg.plant!r}")
    if cfg.approx_plant is not None and cfg.approx_plant not in PLANT_NAMES:
        raise ConfigurationError(f"approx_plant must be one of {PLANT_NAMES}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    if cfg.intervals is not None and cfg.intervals < 1:
        raise ConfigurationError("intervals must be >= 1")
    if cfg.substeps < 1 or cfg.nmpc.model_substeps < 1:
        raise ConfigurationError("substeps must be >= 1")
    if cfg.threads < 1:
        raise ConfigurationError("threads must be >= 1")
    if cfg.evaluate.episodes < 1 or cfg.nmpc.episodes < 1:
        raise ConfigurationError("evaluation episodes must be >= 1")
    if len(cfg.cs3.du_weights) != 2:
        raise ConfigurationError("cs3.du_weights needs two entries")
    MonodParameters.from_dict(cfg.cs3.kinetics)
    # the remaining checks live with the objects they configure
    cfg.b2b().train_config("offline")
    cfg.b2b().train_config("online")
    from .nmpc import NlpSettings

    NlpSettings(cfg.nmpc.multistarts, cfg.nmpc.max_iterations, cfg.nmpc.tolerance)


def from_dict(data):
    """Validated :class:`RunConfig` from a plain mapping."""
    return RunConfig(**_build(RunConfig, data, ""))


def parse_config(path):
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise ConfigurationError(f"configuration file not found: {path}")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{path}: invalid YAML: {err}") from None
    return from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.as_dict(), sort_keys=False, default_flow_style=None)


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def with_overrides(cfg, **kw):
    """Copy with top-level or ``section.key`` overrides; ``None`` values are ignored."""
    data = cfg.as_dict()
    for key, value in kw.items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        (data[section] if section else data)[name] = value
    return from_dict(data)
