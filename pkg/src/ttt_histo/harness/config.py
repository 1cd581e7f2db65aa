"""Experiment configuration: one JSON document, strict keys, one global seed."""

import json
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path

from .._seeding import derive_seed
from ..adapt import AdaptConfig
from ..data import DataConfig
from ..model import TASKS, ModelConfig
from ..shifts import KINDS, ShiftSpec
from ..training import TrainingConfig

# subsystem seeds are never read from the document; they fan out from ``seed``
DERIVED = ("seed",)
LAMBDA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1)
STEP_SIZES = (0.0, 1e-4, 1e-3, 1e-2, 1e-1)


class ConfigError(ValueError):
    pass


@dataclass
class ShiftEntry:
    name: str
    kind: str = "identity"
    sigma: float = 0.0
    domain_seed: int = 1
    strength: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"shift kind must be one of {KINDS}, got {self.kind!r}")
        self.sigma = float(self.sigma)
        self.strength = float(self.strength)

    def to_spec(self):
        if self.kind == "identity":
            spec = ShiftSpec.identity()
        elif self.kind == "gaussian":
            spec = ShiftSpec.gaussian(self.sigma)
        else:
            spec = ShiftSpec.scanner(self.domain_seed, self.strength)
        spec.spec_id = self.name
        return spec


def default_shifts():
    return [
        ShiftEntry("none"),
        ShiftEntry("gaussian", kind="gaussian", sigma=0.1),
        ShiftEntry("scanner", kind="scanner", domain_seed=1),
    ]


@dataclass
class Experiment1Config:
    lambda_grid: list = field(default_factory=lambda: list(LAMBDA_GRID))
    task: str = "rsp"
    pretrain_steps: int = None  # None: same as training.steps
    finetune_steps: int = None

    def __post_init__(self):
        self.lambda_grid = [float(v) for v in self.lambda_grid]
        if not self.lambda_grid or any(not 0.0 <= v <= 1.0 for v in self.lambda_grid):
            raise ValueError("lambda_grid must be a non-empty list of values in [0, 1]")
        if len(set(self.lambda_grid)) != len(self.lambda_grid):
            raise ValueError("lambda_grid has duplicates")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


@dataclass
class Experiment2Config:
    step_sizes: list = field(default_factory=lambda: list(STEP_SIZES))
    lambda_s: float = 0.01
    task: str = "simclr"
    shifts: list = field(default_factory=lambda: ["none", "gaussian", "scanner"])
    split: str = "testA"

    def __post_init__(self):
        self.step_sizes = [float(v) for v in self.step_sizes]
        self.lambda_s = float(self.lambda_s)
        if not self.step_sizes or min(self.step_sizes) < 0:
            raise ValueError("step_sizes must be a non-empty list of non-negative values")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.split not in ("val", "testA", "testB"):
            raise ValueError(f"split must be val, testA or testB, got {self.split!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    shifts: list = field(default_factory=default_shifts)
    experiment1: Experiment1Config = field(default_factory=Experiment1Config)
    experiment2: Experiment2Config = field(default_factory=Experiment2Config)

    def __post_init__(self):
        self.seed = int(self.seed)
        names = [s.name for s in self.shifts]
        if len(set(names)) != len(names):
            raise ValueError(f"shift names must be unique, got {names}")
        missing = [s for s in self.experiment2.shifts if s not in names]
        if missing:
            raise ValueError(f"experiment2 refers to undefined shifts {missing}")
        self._apply_seeds()

    # -- seeds ---------------------------------------------------------------

    def seeds(self):
        g = self.seed
        return {
            "global": g,
            "data": derive_seed(g, "data"),
            "model": derive_seed(g, "model"),
            "training": derive_seed(g, "train"),
            "adapt": derive_seed(g, "adapt"),
            "shift": derive_seed(g, "shift"),
        }

    def _apply_seeds(self):
        s = self.seeds()
        self.data.seed = s["data"]
        self.model.seed = s["model"]
        self.training.seed = s["training"]
        self.adapt.seed = s["adapt"]

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)

    def shift(self, name):
        for s in self.shifts:
            if s.name == name:
                return s.to_spec()
        raise KeyError(f"no shift named {name!r}; known: {[s.name for s in self.shifts]}")

    # -- (de)serialization -----------------------------------------------------

    def to_dict(self):
        d = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": _plain(self.data),
            "model": _plain(self.model),
            "training": _plain(self.training),
            "adapt": _plain(self.adapt),
            "shifts": [_plain(s) for s in self.shifts],
            "experiment1": _plain(self.experiment1),
            "experiment2": _plain(self.experiment2),
        }
        for k in ("data", "model", "training", "adapt"):
            for name in DERIVED:
                d[k].pop(name, None)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown key(s) at top level: {unknown}")
        kw = {k: d[k] for k in ("seed", "output_dir") if k in d}
        for k, sub in (("data", DataConfig), ("model", ModelConfig), ("training", TrainingConfig),
                       ("adapt", AdaptConfig)):
            if k in d:
                kw[k] = _strict(sub, d[k], k, skip=DERIVED)
        for k, sub in (("experiment1", Experiment1Config), ("experiment2", Experiment2Config)):
            if k in d:
                kw[k] = _strict(sub, d[k], k)
        if "shifts" in d:
            if not isinstance(d["shifts"], list):
                raise ConfigError("shifts must be a list")
            kw["shifts"] = [_strict(ShiftEntry, s, f"shifts[{i}]") for i, s in enumerate(d["shifts"])]
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc)


def _plain(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _plain(v) if is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def _nested_type(f):
    if f.default_factory is not MISSING:
        probe = f.default_factory()
        if is_dataclass(probe):
            return type(probe)
    return None


def _strict(cls, d, where, skip=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        sub = _nested_type(f)
        kw[f.name] = _strict(sub, d[f.name], f"{where}.{f.name}") if sub else d[f.name]
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
