"""JSON run configuration: parsing, validation, defaults, and factories.

A run config is one JSON document with sections

    data      where the series and the graph come from
    model     architecture variant and dimensions
    train     optimization schedule
    inject    missing-data policy applied on top of the loaded mask
    output    artifact directory
    synth     synthetic-generator knobs (synth command only)
    benchmark complexity-report knobs (benchmark command only)

Everything except file paths and the subcommand lives in the config so a
run is reproducible from its resolved snapshot alone.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError

VARIANTS = ("spin", "spin-h")
POLICIES = ("point", "block", "sweep", "none")


def _require_keys(section, mapping, known):
    unknown = set(mapping) - set(known)
    if unknown:
        raise ValidationError(
            f"unknown key(s) in '{section}': {sorted(unknown)}; "
            f"expected a subset of {sorted(known)}")


def _typed(section, key, value, kinds, predicate=None, what=""):
    if not isinstance(value, kinds) or isinstance(value, bool) and bool not in (
            kinds if isinstance(kinds, tuple) else (kinds,)):
        raise ValidationError(f"'{section}.{key}' has wrong type: {value!r}")
    if predicate is not None and not predicate(value):
        raise ValidationError(f"'{section}.{key}' must be {what}, got {value!r}")
    return value


@dataclass
class DataConfig:
    values_csv: str
    mask_csv: str = None
    distances_csv: str = None
    edges_csv: str = None
    gamma: float = None
    delta: float = None
    width: int = 24
    stride: int = 24
    split: tuple = (0.7, 0.1, 0.2)

    @classmethod
    def from_dict(cls, d):
        _require_keys("data", d, {"values_csv", "mask_csv", "distances_csv",
                                  "edges_csv", "gamma", "delta", "W", "stride",
                                  "split"})
        if "values_csv" not in d:
            raise ValidationError("'data.values_csv' is required")
        has_dist = d.get("distances_csv") is not None
        has_edges = d.get("edges_csv") is not None
        if has_dist == has_edges:
            raise ValidationError(
                "exactly one of 'data.distances_csv' / 'data.edges_csv' is required")
        if has_dist:
            for k in ("gamma", "delta"):
                if d.get(k) is None:
                    raise ValidationError(
                        f"'data.{k}' is required with 'data.distances_csv'")
                _typed("data", k, d[k], (int, float), lambda v: v > 0, "positive")
        width = _typed("data", "W", d.get("W", 24), int, lambda v: v >= 1,
                       "a positive integer")
        stride = _typed("data", "stride", d.get("stride", width), int,
                        lambda v: v >= 1, "a positive integer")
        split = tuple(d.get("split", (0.7, 0.1, 0.2)))
        if len(split) != 3 or any(not isinstance(f, (int, float)) or f <= 0
                                  for f in split) or abs(sum(split) - 1.0) > 1e-9:
            raise ValidationError(
                f"'data.split' must be three positive fractions summing to 1, got {split}")
        return cls(values_csv=d["values_csv"], mask_csv=d.get("mask_csv"),
                   distances_csv=d.get("distances_csv"),
                   edges_csv=d.get("edges_csv"),
                   gamma=None if d.get("gamma") is None else float(d["gamma"]),
                   delta=None if d.get("delta") is None else float(d["delta"]),
                   width=width, stride=stride, split=split)

    def to_dict(self):
        d = asdict(self)
        d["W"] = d.pop("width")
        d["split"] = list(self.split)
        return d


@dataclass
class HubConfig:
    n_hubs: int = 4
    d_z: int = 128
    per_node_hubs: bool = False

    @classmethod
    def from_dict(cls, d):
        _require_keys("model.hubs", d, {"K", "d_z", "per_node_hubs"})
        return cls(
            n_hubs=_typed("model.hubs", "K", d.get("K", 4), int,
                          lambda v: v >= 1, "a positive integer"),
            d_z=_typed("model.hubs", "d_z", d.get("d_z", 128), int,
                       lambda v: v >= 1, "a positive integer"),
            per_node_hubs=_typed("model.hubs", "per_node_hubs",
                                 d.get("per_node_hubs", False), bool))

    def to_dict(self):
        return {"K": self.n_hubs, "d_z": self.d_z,
                "per_node_hubs": self.per_node_hubs}


@dataclass
class EncodingConfig:
    periods: tuple = (24.0,)
    d_v: int = 16
    d_q: int = 32

    @classmethod
    def from_dict(cls, d):
        _require_keys("model.encoding", d, {"periods", "d_v", "d_q"})
        periods = tuple(float(p) for p in d.get("periods", (24.0,)))
        if not periods or any(p <= 0 for p in periods):
            raise ValidationError(
                f"'model.encoding.periods' must be positive, got {periods}")
        return cls(periods=periods,
                   d_v=_typed("model.encoding", "d_v", d.get("d_v", 16), int,
                              lambda v: v >= 1, "a positive integer"),
                   d_q=_typed("model.encoding", "d_q", d.get("d_q", 32), int,
                              lambda v: v >= 1, "a positive integer"))

    def to_dict(self):
        return {"periods": list(self.periods), "d_v": self.d_v, "d_q": self.d_q}


@dataclass
class ModelConfig:
    variant: str = "spin"
    n_layers: int = None   # default depends on the variant
    n_masked: int = 3
    d_h: int = 32
    hidden: int = 32
    hubs: HubConfig = field(default_factory=HubConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    @classmethod
    def from_dict(cls, d):
        _require_keys("model", d, {"variant", "L", "eta", "d_h", "hidden",
                                   "hubs", "encoding"})
        variant = d.get("variant", "spin")
        if variant not in VARIANTS:
            raise ValidationError(
                f"'model.variant' must be one of {VARIANTS}, got {variant!r}")
        n_layers = d.get("L", 5 if variant == "spin-h" else 4)
        _typed("model", "L", n_layers, int, lambda v: v >= 1,
               "a positive integer")
        n_masked = _typed("model", "eta", d.get("eta", 3), int,
                          lambda v: v >= 0, "a non-negative integer")
        if n_masked > n_layers:
            raise ValidationError(
                f"'model.eta' ({n_masked}) cannot exceed 'model.L' ({n_layers})")
        return cls(variant=variant, n_layers=n_layers, n_masked=n_masked,
                   d_h=_typed("model", "d_h", d.get("d_h", 32), int,
                              lambda v: v >= 1, "a positive integer"),
                   hidden=_typed("model", "hidden", d.get("hidden", 32), int,
                                 lambda v: v >= 1, "a positive integer"),
                   hubs=HubConfig.from_dict(d.get("hubs", {})),
                   encoding=EncodingConfig.from_dict(d.get("encoding", {})))

    def to_dict(self):
        return {"variant": self.variant, "L": self.n_layers,
                "eta": self.n_masked, "d_h": self.d_h, "hidden": self.hidden,
                "hubs": self.hubs.to_dict(),
                "encoding": self.encoding.to_dict()}


@dataclass
class TrainSection:
    epochs_max: int = 300
    batches_per_epoch: int = 300
    batch_size: int = 8
    patience: int = 40
    lr: float = 0.0008
    warmup_steps: int = 12
    restart_period: int = 100
    seed: int = 0
    subsample: dict = None

    @classmethod
    def from_dict(cls, d):
        _require_keys("train", d, {"epochs_max", "batches_per_epoch",
                                   "batch_size", "patience", "lr",
                                   "warmup_steps", "restart_period", "seed",
                                   "subsample"})
        out = cls()
        for key in ("epochs_max", "batches_per_epoch", "batch_size",
                    "patience", "warmup_steps", "restart_period", "seed"):
            if key in d:
                setattr(out, key, _typed("train", key, d[key], int))
        if "lr" in d:
            out.lr = _typed("train", "lr", d["lr"], (int, float),
                            lambda v: v >= 0, ">= 0")
        if d.get("subsample") is not None:
            sub = d["subsample"]
            _require_keys("train.subsample", sub, {"n_seeds", "k_hops"})
            out.subsample = {"n_seeds": _typed("train.subsample", "n_seeds",
                                               sub.get("n_seeds"), int),
                             "k_hops": _typed("train.subsample", "k_hops",
                                              sub.get("k_hops"), int)}
        return out

    def to_dict(self):
        return asdict(self)


@dataclass
class InjectConfig:
    policy: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        _require_keys("inject", d, {"policy", "params", "seed"})
        policy = d.get("policy", "none")
        if policy not in POLICIES:
            raise ValidationError(
                f"'inject.policy' must be one of {POLICIES}, got {policy!r}")
        params = dict(d.get("params", {}))
        known = {"point": {"rate"}, "sweep": {"p"},
                 "block": {"point_rate", "failure_prob", "len_min", "len_max"},
                 "none": set()}[policy]
        _require_keys("inject.params", params, known)
        return cls(policy=policy, params=params,
                   seed=_typed("inject", "seed", d.get("seed", 0), int))

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthSection:
    n_nodes: int = 20
    n_steps: int = 2000
    seed: int = 0
    periods: tuple = (24.0, 12.0)
    noise_std: float = 0.05
    target_neighbors: int = 2

    @classmethod
    def from_dict(cls, d):
        _require_keys("synth", d, {"n_nodes", "n_steps", "seed", "periods",
                                   "noise_std", "target_neighbors"})
        out = cls()
        for key in ("n_nodes", "n_steps", "seed", "target_neighbors"):
            if key in d:
                setattr(out, key, _typed("synth", key, d[key], int))
        if "periods" in d:
            out.periods = tuple(float(p) for p in d["periods"])
        if "noise_std" in d:
            out.noise_std = _typed("synth", "noise_std", d["noise_std"],
                                   (int, float), lambda v: v >= 0, ">= 0")
        return out

    def to_dict(self):
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d


@dataclass
class BenchmarkSection:
    n_nodes: int = 24
    seed: int = 0
    repeats: int = 3

    @classmethod
    def from_dict(cls, d):
        _require_keys("benchmark", d, {"n_nodes", "seed", "repeats"})
        out = cls()
        for key in ("n_nodes", "seed", "repeats"):
            if key in d:
                setattr(out, key, _typed("benchmark", key, d[key], int,
                                         lambda v: v >= 1 or key == "seed",
                                         "positive"))
        return out

    def to_dict(self):
        return asdict(self)


@dataclass
class RunConfig:
    data: DataConfig = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    inject: InjectConfig = field(default_factory=InjectConfig)
    output_dir: str = "runs/out"
    synth: SynthSection = field(default_factory=SynthSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    @classmethod
    def from_dict(cls, doc):
        _require_keys("config", doc, {"data", "model", "train", "inject",
                                      "output", "synth", "benchmark"})
        out_section = doc.get("output", {})
        _require_keys("output", out_section, {"dir"})
        cfg = cls(
            data=DataConfig.from_dict(doc["data"]) if "data" in doc else None,
            model=ModelConfig.from_dict(doc.get("model", {})),
            train=TrainSection.from_dict(doc.get("train", {})),
            inject=InjectConfig.from_dict(doc.get("inject", {})),
            output_dir=out_section.get("dir", "runs/out"),
            synth=SynthSection.from_dict(doc.get("synth", {})),
            benchmark=BenchmarkSection.from_dict(doc.get("benchmark", {})))
        width = cfg.data.width if cfg.data is not None else None
        if (cfg.model.variant == "spin-h" and width is not None
                and cfg.model.hubs.n_hubs >= width):
            warnings.warn(
                f"hub count K={cfg.model.hubs.n_hubs} >= window width "
                f"W={width}; the hub bottleneck saves nothing at this size",
                stacklevel=2)
        return cfg

    def to_dict(self):
        doc = {"model": self.model.to_dict(), "train": self.train.to_dict(),
               "inject": self.inject.to_dict(),
               "output": {"dir": self.output_dir},
               "synth": self.synth.to_dict(),
               "benchmark": self.benchmark.to_dict()}
        if self.data is not None:
            doc["data"] = self.data.to_dict()
        return doc


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ValidationError(f"config root must be a JSON object: {path}")
    return RunConfig.from_dict(doc)


def build_params(model: ModelConfig, n_nodes: int, seed: int):
    """Construct the parameter object a config describes."""
    from .spin import SpinParameters
    from .spin_h import SpinHParameters

    rng = np.random.default_rng(seed)
    common = dict(n_nodes=n_nodes, d_h=model.d_h, n_layers=model.n_layers,
                  n_masked=model.n_masked, hidden=model.hidden,
                  periods=model.encoding.periods, d_v=model.encoding.d_v,
                  d_q=model.encoding.d_q, rng=rng)
    if model.variant == "spin":
        return SpinParameters(**common)
    return SpinHParameters(d_z=model.hubs.d_z, n_hubs=model.hubs.n_hubs,
                           per_node_hubs=model.hubs.per_node_hubs, **common)


def train_config_from(cfg: RunConfig):
    """Flatten the train + data sections into the trainer's config object."""
    from .train import TrainConfig

    if cfg.data is None:
        raise ValidationError("'data' section is required for training")
    t = cfg.train
    return TrainConfig(epochs_max=t.epochs_max,
                       batches_per_epoch=t.batches_per_epoch,
                       batch_size=t.batch_size, patience=t.patience, lr=t.lr,
                       warmup_steps=t.warmup_steps,
                       restart_period=t.restart_period, seed=t.seed,
                       width=cfg.data.width, stride=cfg.data.stride,
                       split=cfg.data.split, subsample=t.subsample)
