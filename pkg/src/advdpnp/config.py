"""Experiment configuration: one JSON document, unknown keys rejected.

Top-level sections::

    {
      "seed": 0,
      "output_dir": "runs/toy",
      "dataset": {"kind": "blobs", "train": {...BlobSpec}, "test": {...BlobSpec}}
               | {"kind": "idx", "train_images": ..., "train_labels": ...,
                  "test_images": ..., "test_labels": ..., "train_limit": null, "test_limit": null},
      "architecture": {...ArchitectureConfig},
      "train": {...TrainConfig minus seed, "checkpoint_every": 0},
      "evaluation": {"attacks": [...AttackConfig], "geometry_attack": {...}, "batch_size": 256},
      "sweep": {"eps_grid": [...], "iteration_grid": [...], "restart_grid": [...],
                "attack": {...AttackConfig}, "restart_iterations": 40, "objectives": true},
      "gradcheck": {"seeds": 20, "step": 1e-5, "tolerance": 1e-4}
    }

Relative paths in the dataset section resolve against the config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from advdpnp.attacks import AttackConfig
from advdpnp.data import BlobSpec, Dataset, gen_blobs, load_idx
from advdpnp.losses import LossWeights
from advdpnp.model import ArchitectureConfig
from advdpnp.trainer import Schedule, TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


def _build(cls, section: str, d: dict, **overrides):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(section, d, names)
    try:
        return cls(**{**d, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _attack(section: str, d: dict) -> AttackConfig:
    return _build(AttackConfig, section, d)


def _echo(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _echo(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_echo(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _echo(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    train: BlobSpec | None = None
    test: BlobSpec | None = None
    train_images: Path | None = None
    train_labels: Path | None = None
    test_images: Path | None = None
    test_labels: Path | None = None
    train_limit: int | None = None
    test_limit: int | None = None

    def load(self, split: str) -> Dataset:
        if self.kind == "blobs":
            return gen_blobs(self.train if split == "train" else self.test)
        images = self.train_images if split == "train" else self.test_images
        labels = self.train_labels if split == "train" else self.test_labels
        limit = self.train_limit if split == "train" else self.test_limit
        ds = load_idx(images, labels, split)
        return ds.subset(slice(0, limit)) if limit else ds

    def to_json(self) -> dict:
        d = _echo(self)
        if self.kind == "blobs":
            return {"kind": "blobs", "train": d["train"], "test": d["test"]}
        return {k: v for k, v in d.items() if k not in ("train", "test")}


@dataclass(frozen=True)
class EvaluationConfig:
    attacks: tuple[AttackConfig, ...] = ()
    geometry_attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        name="geometry-pgd20", eps=8 / 255, step=1 / 255, iterations=20))
    batch_size: int = 256


@dataclass(frozen=True)
class SweepConfig:
    eps_grid: tuple[float, ...] = ()
    iteration_grid: tuple[int, ...] = ()
    restart_grid: tuple[int, ...] = ()
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        name="sweep-pgd", eps=8 / 255, step=1 / 255, iterations=20))
    restart_iterations: int = 40
    objectives: bool = True

    def any_requested(self) -> bool:
        return bool(self.eps_grid or self.iteration_grid or self.restart_grid or self.objectives)


@dataclass(frozen=True)
class GradcheckConfig:
    seeds: int = 20
    step: float = 1e-5
    tolerance: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    architecture: ArchitectureConfig
    train: TrainConfig
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    output_dir: Path = Path("runs/default")
    seed: int = 0
    checkpoint_every: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))

    def with_output_dir(self, out: Path) -> "ExperimentConfig":
        return dataclasses.replace(self, output_dir=Path(out))

    def to_json(self) -> dict:
        train = _echo(self.train)
        train.pop("seed")
        train["checkpoint_every"] = self.checkpoint_every
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "dataset": self.dataset.to_json(),
            "architecture": _echo(self.architecture),
            "train": train,
            "evaluation": _echo(self.evaluation),
            "sweep": _echo(self.sweep),
            "gradcheck": _echo(self.gradcheck),
        }


TOP_KEYS = ("seed", "output_dir", "dataset", "architecture", "train", "evaluation", "sweep", "gradcheck")


def _dataset(d: dict, base: Path) -> DatasetConfig:
    _check_keys("dataset", d, [f.name for f in dataclasses.fields(DatasetConfig)])
    kind = d.get("kind", "blobs")
    if kind == "blobs":
        _check_keys("dataset", d, ("kind", "train", "test"))
        if "train" not in d or "test" not in d:
            raise ConfigError("dataset: blobs need 'train' and 'test' specs")
        return DatasetConfig("blobs", _build(BlobSpec, "dataset.train", d["train"], split="train"),
                             _build(BlobSpec, "dataset.test", d["test"], split="test"))
    if kind != "idx":
        raise ConfigError(f"dataset: unknown kind {kind!r}")
    _check_keys("dataset", d, ("kind", "train_images", "train_labels", "test_images", "test_labels",
                               "train_limit", "test_limit"))
    paths = {}
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key not in d:
            raise ConfigError(f"dataset: missing {key}")
        p = Path(d[key])
        paths[key] = p if p.is_absolute() else base / p
    return DatasetConfig("idx", **paths, train_limit=d.get("train_limit"), test_limit=d.get("test_limit"))


def _train(d: dict) -> tuple[TrainConfig, int]:
    d = dict(d)
    checkpoint_every = int(d.pop("checkpoint_every", 0))
    if "seed" in d:
        raise ConfigError("train: set the seed at the top level")
    kw = {}
    if "schedule" in d:
        kw["schedule"] = _build(Schedule, "train.schedule", d.pop("schedule"))
    if "weights" in d:
        kw["weights"] = _build(LossWeights, "train.weights", d.pop("weights"))
    if "attack" in d:
        kw["attack"] = _attack("train.attack", d.pop("attack"))
    return _build(TrainConfig, "train", d, **kw), checkpoint_every


def parse_config(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    _check_keys("config", raw, TOP_KEYS)
    for key in ("dataset", "architecture", "train"):
        if key not in raw:
            raise ConfigError(f"config: missing section {key!r}")
    seed = int(raw.get("seed", 0))
    dataset = _dataset(raw["dataset"], base)
    arch = _build(ArchitectureConfig, "architecture", raw["architecture"])
    train, every = _train(raw["train"])
    train = dataclasses.replace(train, seed=seed)

    ev = dict(raw.get("evaluation", {}))
    _check_keys("evaluation", ev, ("attacks", "geometry_attack", "batch_size"))
    attacks = tuple(_attack(f"evaluation.attacks[{i}]", a) for i, a in enumerate(ev.get("attacks", [])))
    if len({a.name for a in attacks}) != len(attacks):
        raise ConfigError("evaluation: attack names must be unique")
    evaluation = EvaluationConfig(
        attacks,
        _attack("evaluation.geometry_attack", ev["geometry_attack"]) if "geometry_attack" in ev
        else EvaluationConfig().geometry_attack,
        int(ev.get("batch_size", 256)),
    )

    sw = dict(raw.get("sweep", {}))
    if "attack" in sw:
        sw["attack"] = _attack("sweep.attack", sw["attack"])
    for key in ("eps_grid", "iteration_grid", "restart_grid"):
        if key in sw:
            sw[key] = tuple(sw[key])
    sweep = _build(SweepConfig, "sweep", sw)

    gradcheck = _build(GradcheckConfig, "gradcheck", raw.get("gradcheck", {}))
    out = Path(raw.get("output_dir", "runs/default"))
    return ExperimentConfig(dataset, arch, train, evaluation, sweep, gradcheck, out, seed, every)


def validate(cfg: ExperimentConfig) -> None:
    """Checks that need the filesystem; run before any work starts."""
    if cfg.dataset.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(cfg.dataset, key)
            if not Path(path).is_file():
                raise ConfigError(f"dataset: {key} file not found: {path}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent)
