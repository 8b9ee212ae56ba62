"""Run configuration: JSON in, dataclasses out. Unknown keys are rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Literal

from ..analysis import OuParams
from ..core import Surrogate
from ..training import NetworkSpec, OptimizerConfig

if TYPE_CHECKING:
    from ..controller import ControllerConfig

REFERENCE_INIT_GAIN = 2.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: Literal["synthetic_rate", "synthetic_event", "file"] = "synthetic_rate"
    classes: int = 4
    samples_per_class: int = 500
    test_per_class: int = 100
    input_dims: int = 64
    noise_level: float = 0.6
    encode_T: int = 6
    seed: int = 0
    ood_mode: Literal["prototypes", "noise"] = "prototypes"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic_rate", "synthetic_event", "file"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("file datasets need a path")
        if self.ood_mode not in ("prototypes", "noise"):
            raise ConfigError(f"unknown ood_mode {self.ood_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 10
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: Literal["train", "sweep", "ablate", "ood", "analyze"] = "train"
    s_min: float = 0.10
    s_max: float = 2.00
    s_step: float = 0.05
    variant: Literal["full", "no_rt", "no_dh"] = "full"
    seeds: tuple = (0,)
    ou: OuParams = field(default_factory=OuParams)
    theta_grid: tuple = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
    gate_surrogate: Surrogate = field(default_factory=lambda: Surrogate("sigmoid", 50.0))
    n_samples: int = 10**6

    def __post_init__(self):
        if self.kind not in ("train", "sweep", "ablate", "ood", "analyze"):
            raise ConfigError(f"unknown experiment {self.kind!r}")
        if self.variant not in ("full", "no_rt", "no_dh"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))

    def sweep_grid(self) -> list[float]:
        n = int(round((self.s_max - self.s_min) / self.s_step))
        return [round(self.s_min + k * self.s_step, 10) for k in range(n + 1)]


@dataclass(frozen=True)
class RunConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: "ControllerConfig | None" = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    output_dir: str = "runs"
    init_layer_gains: tuple | None = None

    def to_dict(self) -> dict:
        exp = asdict(self.experiment)
        exp["gate_surrogate"] = self.experiment.gate_surrogate.to_dict()
        exp["seeds"] = list(self.experiment.seeds)
        exp["theta_grid"] = list(self.experiment.theta_grid)
        return {
            "network": self.network.to_dict(),
            "train": {**asdict(self.train), "optimizer": asdict(self.train.optimizer)},
            "controller": None if self.controller is None else self.controller.to_dict(),
            "dataset": asdict(self.dataset),
            "experiment": exp,
            "output_dir": self.output_dir,
            "init_layer_gains": None if self.init_layer_gains is None else list(self.init_layer_gains),
        }

    def replace(self, **kw) -> "RunConfig":
        from dataclasses import replace

        return replace(self, **kw)


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return d


def _make(cls, d, where):
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _surrogate(d, where):
    try:
        return Surrogate.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    d = dict(_strict(RunConfig, d, "config"))
    out = {}
    if "network" in d:
        net = dict(_strict(NetworkSpec, d["network"], "network"))
        if "surrogate" in net:
            net["surrogate"] = _surrogate(net["surrogate"], "network.surrogate")
        out["network"] = _make(NetworkSpec, net, "network")
    if "train" in d:
        tr = dict(_strict(TrainConfig, d["train"], "train"))
        if "optimizer" in tr:
            opt = _strict(OptimizerConfig, tr["optimizer"], "train.optimizer")
            tr["optimizer"] = _make(OptimizerConfig, opt, "train.optimizer")
        out["train"] = _make(TrainConfig, tr, "train")
    if d.get("controller") is not None:
        from ..controller import ControllerConfig

        c = _strict(ControllerConfig, d["controller"], "controller")
        out["controller"] = _make(ControllerConfig, c, "controller")
    if "dataset" in d:
        out["dataset"] = _make(DatasetSpec, _strict(DatasetSpec, d["dataset"], "dataset"), "dataset")
    if "experiment" in d:
        ex = dict(_strict(ExperimentSpec, d["experiment"], "experiment"))
        if "ou" in ex:
            ex["ou"] = _make(OuParams, _strict(OuParams, ex["ou"], "experiment.ou"), "experiment.ou")
        if "gate_surrogate" in ex:
            ex["gate_surrogate"] = _surrogate(ex["gate_surrogate"], "experiment.gate_surrogate")
        out["experiment"] = _make(ExperimentSpec, ex, "experiment")
    if "output_dir" in d:
        out["output_dir"] = str(d["output_dir"])
    if d.get("init_layer_gains") is not None:
        out["init_layer_gains"] = tuple(float(g) for g in d["init_layer_gains"])
    cfg = RunConfig(**out)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    net, ds = cfg.network, cfg.dataset
    if ds.kind != "file" and net.layer_sizes[0] != ds.input_dims:
        raise ConfigError("network input size must equal dataset.input_dims")
    if ds.kind != "file" and net.layer_sizes[-1] != ds.classes:
        raise ConfigError("network output size must equal dataset.classes")
    if net.mode == "step" and ds.encode_T != net.timesteps:
        raise ConfigError("dataset.encode_T must equal network.timesteps in step mode")
    if cfg.init_layer_gains is not None and len(cfg.init_layer_gains) != len(net.layer_sizes) - 1:
        raise ConfigError("init_layer_gains needs one entry per weight layer")


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def reference_config(**overrides) -> RunConfig:
    """The reference toy task: 4 classes, 64 inputs, three 48-unit LIF layers, T=6."""
    from ..controller import ControllerConfig

    cfg = RunConfig(
        network=NetworkSpec(
            layer_sizes=(64, 48, 48, 48, 4),
            surrogate=Surrogate("atan", 2.0),
            timesteps=6,
            mode="step",
            init_gain=REFERENCE_INIT_GAIN,
        ),
        train=TrainConfig(),
        controller=ControllerConfig(),
        dataset=DatasetSpec(),
    )
    return cfg.replace(**overrides) if overrides else cfg
