"""Experiment configuration: one strict JSON document.

Unknown keys are rejected with the offending field path, every default is
materialized into the resolved snapshot, and the snapshot plus the dataset
files and the seed fully determine a run (the CLI writes the snapshot next
to its outputs so any run can be reproduced bit-exactly).

Defaults mirror the reference experimental setup: ε=0.1, λ=1/3, center
rate 0.1, Adam at lr=0.001, batch size 64, 20 epochs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from advda.attacks import ATTACK_KINDS
from advda.models import ArchSpec, PRESETS
from advda.trainer import REGIME_KINDS


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _take(d: dict, path: str, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    _require(not unknown, path, f"unknown keys {sorted(unknown)}")


def _number(d, key, path, default=None, lo=None, hi=None, integer=False):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    kind = (int,) if integer else (int, float)
    _require(isinstance(v, kind) and not isinstance(v, bool), f"{path}.{key}",
             f"expected a {'n integer' if integer else ' number'}, got {v!r}")
    if lo is not None:
        _require(v >= lo, f"{path}.{key}", f"must be >= {lo}, got {v}")
    if hi is not None:
        _require(v <= hi, f"{path}.{key}", f"must be <= {hi}, got {v}")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # idx | csv | synth
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_path: str | None = None
    test_path: str | None = None
    num_classes: int = 10
    subset_train_per_class: int | None = None
    subset_test_per_class: int | None = None
    subset_seed: int = 0
    synth_n: int | None = None
    synth_test_n: int | None = None
    synth_k: int | None = None
    synth_d: int | None = None
    synth_seed: int | None = None
    synth_spread: float = 0.08

    @staticmethod
    def from_dict(d: dict, path: str = "dataset") -> "DatasetConfig":
        _require(isinstance(d, dict), path, "expected an object")
        kind = d.get("kind")
        _require(kind in ("idx", "csv", "synth"), f"{path}.kind",
                 f"must be 'idx', 'csv', or 'synth', got {kind!r}")
        common = {"kind", "num_classes", "subset_train_per_class",
                  "subset_test_per_class", "subset_seed"}
        if kind == "idx":
            allowed = common | {"train_images", "train_labels", "test_images", "test_labels"}
            _take(d, path, allowed)
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                _require(isinstance(d.get(key), str) and d[key], f"{path}.{key}",
                         "required path")
        elif kind == "csv":
            allowed = common | {"train_path", "test_path"}
            _take(d, path, allowed)
            for key in ("train_path", "test_path"):
                _require(isinstance(d.get(key), str) and d[key], f"{path}.{key}",
                         "required path")
        else:
            allowed = common | {"synth_n", "synth_test_n", "synth_k", "synth_d",
                                "synth_seed", "synth_spread"}
            _take(d, path, allowed)
            for key in ("synth_n", "synth_test_n", "synth_k", "synth_d"):
                _require(isinstance(d.get(key), int) and d[key] > 0, f"{path}.{key}",
                         "required positive integer")
            _number(d, "synth_spread", path, default=0.08, lo=0.0)
            _number(d, "synth_seed", path, default=None, lo=0, integer=True)
        _number(d, "num_classes", path, default=10, lo=2, integer=True)
        _number(d, "subset_train_per_class", path, default=None, lo=1, integer=True)
        _number(d, "subset_test_per_class", path, default=None, lo=1, integer=True)
        _number(d, "subset_seed", path, default=0, lo=0, integer=True)
        kwargs = dict(d)
        if kind == "synth":
            kwargs["num_classes"] = d["synth_k"]
        return DatasetConfig(**kwargs)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "num_classes": self.num_classes,
               "subset_train_per_class": self.subset_train_per_class,
               "subset_test_per_class": self.subset_test_per_class,
               "subset_seed": self.subset_seed}
        if self.kind == "idx":
            out.update(train_images=self.train_images, train_labels=self.train_labels,
                       test_images=self.test_images, test_labels=self.test_labels)
        elif self.kind == "csv":
            out.update(train_path=self.train_path, test_path=self.test_path)
        else:
            out.update(synth_n=self.synth_n, synth_test_n=self.synth_test_n,
                       synth_k=self.synth_k, synth_d=self.synth_d,
                       synth_seed=self.synth_seed, synth_spread=self.synth_spread)
        return out


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def from_dict(d: dict | None, path: str = "optimizer") -> "OptimizerConfig":
        if d is None:
            return OptimizerConfig()
        _require(isinstance(d, dict), path, "expected an object")
        _take(d, path, {"lr", "beta1", "beta2", "eps"})
        return OptimizerConfig(
            lr=_number(d, "lr", path, default=0.001, lo=0.0),
            beta1=_number(d, "beta1", path, default=0.9, lo=0.0, hi=1.0),
            beta2=_number(d, "beta2", path, default=0.999, lo=0.0, hi=1.0),
            eps=_number(d, "eps", path, default=1e-8, lo=0.0),
        )

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass(frozen=True)
class EarlyStopConfig:
    enabled: bool = False
    patience: int = 3
    val_fraction: float = 0.1

    @staticmethod
    def from_dict(d: dict | None, path: str = "early_stop") -> "EarlyStopConfig":
        if d is None:
            return EarlyStopConfig()
        _require(isinstance(d, dict), path, "expected an object")
        _take(d, path, {"enabled", "patience", "val_fraction"})
        enabled = d.get("enabled", False)
        _require(isinstance(enabled, bool), f"{path}.enabled", "expected true/false")
        return EarlyStopConfig(
            enabled=enabled,
            patience=_number(d, "patience", path, default=3, lo=1, integer=True),
            val_fraction=_number(d, "val_fraction", path, default=0.1, lo=0.0, hi=0.5),
        )

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "patience": self.patience,
                "val_fraction": self.val_fraction}


_TOP_KEYS = {
    "dataset", "arch", "regime", "epsilon", "lambda", "center_rate", "center_init",
    "coral_ddof", "optimizer", "epochs", "batch_size", "seed", "attack_overrides",
    "static_models", "sat_loss_blend", "early_stop", "checkpoint_every",
    "eval_batch_size", "output_dir", "backend", "threads",
}

_OVERRIDE_KEYS = {"steps", "alpha", "mu", "seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    arch: str | dict
    regime: str
    epsilon: float = 0.1
    lam: float = 1.0 / 3.0
    center_rate: float = 0.1
    center_init: str = "zeros"
    coral_ddof: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    attack_overrides: dict = field(default_factory=dict)
    static_models: tuple[str, str] | None = None
    sat_loss_blend: float | None = None
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    checkpoint_every: int = 0
    eval_batch_size: int = 512
    output_dir: str = "out"
    backend: str | None = None
    threads: int | None = None

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        _require(isinstance(d, dict), "config", "expected a JSON object")
        _take(d, "config", _TOP_KEYS)
        _require("dataset" in d, "dataset", "required")
        dataset = DatasetConfig.from_dict(d["dataset"])

        arch = d.get("arch")
        if isinstance(arch, str):
            _require(arch in PRESETS, "arch", f"unknown preset {arch!r}")
        elif isinstance(arch, dict):
            try:
                ArchSpec.from_dict(arch).infer_shapes()
            except Exception as e:
                raise ConfigError(f"arch: {e}") from e
        else:
            raise ConfigError(f"arch: expected a preset name or an arch object, got {arch!r}")

        regime = d.get("regime")
        _require(regime in REGIME_KINDS, "regime",
                 f"must be one of {REGIME_KINDS}, got {regime!r}")

        overrides = d.get("attack_overrides") or {}
        _require(isinstance(overrides, dict), "attack_overrides", "expected an object")
        for kind, ov in overrides.items():
            _require(kind in ATTACK_KINDS, f"attack_overrides.{kind}",
                     f"unknown attack kind; choose from {ATTACK_KINDS}")
            _require(isinstance(ov, dict), f"attack_overrides.{kind}", "expected an object")
            _take(ov, f"attack_overrides.{kind}", _OVERRIDE_KEYS)

        static = d.get("static_models")
        if static is not None:
            _require(isinstance(static, (list, tuple)) and len(static) == 2
                     and all(isinstance(s, str) for s in static),
                     "static_models", "expected exactly two checkpoint paths")
            static = tuple(static)
        if regime == "eat":
            _require(static is not None, "static_models",
                     "eat requires exactly two static pre-trained checkpoints")

        center_init = d.get("center_init", "zeros")
        _require(center_init in ("zeros", "normal"), "center_init",
                 f"must be 'zeros' or 'normal', got {center_init!r}")
        coral_ddof = _number(d, "coral_ddof", "config", default=1, lo=0, hi=1, integer=True)

        blend = d.get("sat_loss_blend")
        if blend is not None:
            blend = _number(d, "sat_loss_blend", "config", default=None, lo=0.0, hi=1.0)

        backend = d.get("backend")
        if backend is not None:
            _require(backend in ("numba", "numpy"), "backend",
                     f"must be 'numba' or 'numpy', got {backend!r}")
        threads = d.get("threads")
        if threads is not None:
            threads = _number(d, "threads", "config", default=None, lo=1, integer=True)
        output_dir = d.get("output_dir", "out")
        _require(isinstance(output_dir, str) and output_dir, "output_dir",
                 "expected a nonempty string")

        return ExperimentConfig(
            dataset=dataset,
            arch=arch,
            regime=regime,
            epsilon=_number(d, "epsilon", "config", default=0.1, lo=0.0, hi=1.0),
            lam=_number(d, "lambda", "config", default=1.0 / 3.0, lo=0.0),
            center_rate=_number(d, "center_rate", "config", default=0.1, lo=0.0, hi=1.0),
            center_init=center_init,
            coral_ddof=coral_ddof,
            optimizer=OptimizerConfig.from_dict(d.get("optimizer")),
            epochs=_number(d, "epochs", "config", default=20, lo=1, integer=True),
            batch_size=_number(d, "batch_size", "config", default=64, lo=2, integer=True),
            seed=_number(d, "seed", "config", default=0, lo=0, integer=True),
            attack_overrides=overrides,
            static_models=static,
            sat_loss_blend=blend,
            early_stop=EarlyStopConfig.from_dict(d.get("early_stop")),
            checkpoint_every=_number(d, "checkpoint_every", "config", default=0, lo=0,
                                     integer=True),
            eval_batch_size=_number(d, "eval_batch_size", "config", default=512, lo=1,
                                    integer=True),
            output_dir=output_dir,
            backend=backend,
            threads=threads,
        )

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return ExperimentConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "arch": self.arch,
            "regime": self.regime,
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "center_rate": self.center_rate,
            "center_init": self.center_init,
            "coral_ddof": self.coral_ddof,
            "optimizer": self.optimizer.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "attack_overrides": self.attack_overrides,
            "static_models": list(self.static_models) if self.static_models else None,
            "sat_loss_blend": self.sat_loss_blend,
            "early_stop": self.early_stop.to_dict(),
            "checkpoint_every": self.checkpoint_every,
            "eval_batch_size": self.eval_batch_size,
            "output_dir": self.output_dir,
            "backend": self.backend,
            "threads": self.threads,
        }

    def fingerprint(self) -> str:
        """Experiment identity: hash of the resolved config minus execution
        details that do not define the experiment (output location, kernel
        backend, thread cap)."""
        d = self.to_dict()
        for key in ("output_dir", "backend", "threads"):
            d.pop(key)
        return hashlib.sha256(
            json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


def load_datasets(cfg: ExperimentConfig, subset_override: int | None = None):
    """Materialize (train, test) datasets described by the config.

    ``subset_override`` replaces the stratified train subset size (total
    examples, split evenly across classes).
    """
    from advda import data

    ds = cfg.dataset
    if ds.kind == "idx":
        train = data.load_idx(ds.train_images, ds.train_labels,
                              num_classes=ds.num_classes, split="train")
        test = data.load_idx(ds.test_images, ds.test_labels,
                             num_classes=ds.num_classes, split="test")
    elif ds.kind == "csv":
        train = data.read_csv_dataset(ds.train_path)
        test = data.read_csv_dataset(ds.test_path)
    else:
        seed = cfg.seed if ds.synth_seed is None else ds.synth_seed
        train = data.synth_dataset(seed, ds.synth_n, ds.synth_k, ds.synth_d,
                                   split="train", spread=ds.synth_spread)
        test = data.synth_dataset(seed, ds.synth_test_n, ds.synth_k, ds.synth_d,
                                  split="test", spread=ds.synth_spread)
    train_per_class = ds.subset_train_per_class
    if subset_override is not None:
        train_per_class = subset_override // train.num_classes
    if train_per_class:
        train = data.stratified_subset(train, train_per_class, ds.subset_seed)
    if ds.subset_test_per_class:
        test = data.stratified_subset(test, ds.subset_test_per_class, ds.subset_seed)
    return train, test
