"""Experiment configuration: typed sections loaded from YAML.

Unknown keys are rejected with the offending path, and every run echoes the
fully resolved config together with its hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

import yaml

METHODS = ("hifl", "hiflash", "fedavg", "fedasync", "hierfavg")
POLICIES = ("fixed", "random", "unbounded", "ddqn")
STRATEGIES = ("greedy", "brute", "latency_only", "random", "edge_iid", "edge_noniid", "file")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_samples: int = 4000
    num_test: int = 1000
    num_classes: int = 10
    feature_dim: int = 20
    class_separation: float = 8.0
    anisotropy: float = 10.0
    partition: str = "noniid2"
    n_clients: int = 40
    size_range: tuple = (20, 160)


@dataclass
class LearnerConfig:
    kind: str = "regularized-logistic"
    mu_reg: float = 1e-3
    hidden_width: int = 16
    init_scale: float = 0.1


@dataclass
class TrainingConfig:
    c: int = 3
    H_range: tuple = (1, 3)
    lr: float = 0.02
    lr_decay: float = 1.0
    lr_every: int = 100
    batch_size: int = None


@dataclass
class AssociationConfig:
    strategy: str = "latency_only"
    lam: float = 0.1
    classes_per_edge: int = 1
    file: str = None


@dataclass
class ResourceConfig:
    batch_size: int = 60
    bits_per_sample: int = 6272
    f_range: tuple = (1e9, 2e9)
    zeta: float = 20.0
    bw_range: tuple = (1e6, 10e6)
    range_prob: float = 1.0
    model_size: int = 21840
    snr_db: float = 17.0


@dataclass
class StalenessConfig:
    policy: str = "fixed"
    k: int = 2
    checkpoint: str = None
    tau_max: int = 16
    admission: str = "budget"
    backoff: int = 1
    arrival_prob: float = 1.0


@dataclass
class SlotConfigSection:
    slot_length: float = 0.01
    max_slots: int = 4000
    jitter: float = 0.2


@dataclass
class MixingConfig:
    alpha: float = 0.7
    upsilon: float = 0.99


@dataclass
class CostConfig:
    sigma1: float = 1.0
    sigma2: float = 1.0


@dataclass
class BaselineConfig:
    fedavg_clients: int = 10
    hierfavg_edges: int = 2
    hierfavg_clients_per_edge: int = 5
    max_rounds: int = 2000


@dataclass
class Seeds:
    data: int = 0
    sim: int = 0
    agent: int = 0


@dataclass
class SimConfig:
    method: str = "hifl"
    n_edges: int = 8
    target_accuracy: float = 0.7
    eval_every: int = 50
    data: DataConfig = field(default_factory=DataConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    resources: ResourceConfig = field(default_factory=ResourceConfig)
    staleness: StalenessConfig = field(default_factory=StalenessConfig)
    slots: SlotConfigSection = field(default_factory=SlotConfigSection)
    mixing: MixingConfig = field(default_factory=MixingConfig)
    costs: CostConfig = field(default_factory=CostConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.staleness.policy not in POLICIES:
            raise ConfigError(f"staleness.policy must be one of {POLICIES}")
        if self.association.strategy not in STRATEGIES:
            raise ConfigError(f"association.strategy must be one of {STRATEGIES}")
        if self.method == "hiflash" and self.staleness.policy != "ddqn":
            raise ConfigError("method 'hiflash' needs staleness.policy: ddqn")
        if self.staleness.policy == "ddqn" and not self.staleness.checkpoint:
            raise ConfigError("staleness.checkpoint is required for the ddqn policy")
        if self.association.strategy == "file" and not self.association.file:
            raise ConfigError("association.file is required for strategy 'file'")
        if self.staleness.policy == "fixed" and not 0 <= self.staleness.k <= self.staleness.tau_max:
            raise ConfigError(f"staleness.k must lie in [0, {self.staleness.tau_max}]")
        lo, hi = self.training.H_range
        if not 1 <= lo <= hi:
            raise ConfigError("training.H_range must satisfy 1 <= H_min <= H_max")
        if self.n_edges < 1 or self.data.n_clients < 1:
            raise ConfigError("n_edges and data.n_clients must be positive")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ConfigError("target_accuracy must lie in (0, 1]")
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``{"seeds.sim": 3}``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            keys = path.split(".")
            for key in keys[:-1]:
                node = node[key]
            if keys[-1] not in node:
                raise ConfigError(f"unknown key '{path}'")
            node[keys[-1]] = value
        return from_dict(d)


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{path or 'root'}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = f" in section '{path}'" if path else ""
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}'{where}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data):
    return _build(SimConfig, data, "").validate()


@dataclass
class ExperimentFile:
    """A base config plus optional sweep axes (cartesian product)."""

    base: SimConfig
    sweep: dict

    def expand(self):
        axes = [(k, v) for k, v in self.sweep.items() if v]
        runs = [self.base]
        for key, values in axes:
            runs = [r.replace(**_axis(key, v)) for r in runs for v in values]
        return runs


def _axis(key, value):
    # a seed sweep moves the data, simulation and agent streams together
    if key == "seeds":
        return {"seeds.data": value, "seeds.sim": value, "seeds.agent": value}
    return {key: value}


SWEEP_KEYS = {"seeds": "seeds", "methods": "method", "lams": "association.lam",
              "thresholds": "staleness.k", "policies": "staleness.policy",
              "strategies": "association.strategy"}


def load_experiment(path):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    sweep_doc = doc.pop("sweep", {}) or {}
    unknown = set(sweep_doc) - set(SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in section 'sweep'")
    base = from_dict(doc)
    return ExperimentFile(base, {SWEEP_KEYS[k]: list(v) for k, v in sweep_doc.items()})
