"""Dual-branch adversarial training of the prototype classifier.

Each step attacks the current model, then takes one SGD step on the
composite loss. The adversarial branch sees the prototypes through a
gradient barrier, so one backward pass yields the full extractor gradient
and a prototype gradient built from clean-branch terms only. Prototypes
are put back on the radius-``alpha`` sphere at the start of every epoch
and once more after the last one.

Modes:
  adv-dpnp      composite loss as configured
  trades-like   composite loss with lam_dpp = lam_dnp = 0
  at-baseline   cross-entropy on adversarial inputs, prototypes unlocked
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from advdpnp import tensor as T
from advdpnp.attacks import AttackConfig, run_attack
from advdpnp.data import Dataset, augment, batches
from advdpnp.losses import LossBreakdown, LossWeights, ce_rows, composite_graph
from advdpnp.model import (
    ArchitectureConfig,
    ModelParams,
    features_graph,
    init_model,
    logits_graph,
    predict_labels,
    renormalize_prototypes,
)

logger = logging.getLogger(__name__)

MODES = ("adv-dpnp", "at-baseline", "trades-like")
HISTORY_COLUMNS = (
    "epoch", "lr", "ce_clean", "ce_adv", "pull_clean", "pull_adv", "dnp", "dfa", "total", "clean_acc", "adv_acc",
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate: ``values[k]`` from ``milestones[k-1]`` on."""

    values: tuple[float, ...] = (0.1, 0.01, 0.001)
    milestones: tuple[int, ...] = (100, 105)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if len(self.values) != len(self.milestones) + 1:
            raise ValueError("schedule needs exactly one more value than milestones")
        if any(not v > 0 for v in self.values):
            raise ValueError("learning rates must be positive")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be non-decreasing")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    k = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.values[k]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 110
    batch_size: int = 128
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        name="train-pgd", eps=8 / 255, step=2 / 255, iterations=10, random_start=True))
    mode: str = "adv-dpnp"
    seed: int = 0
    augment: bool = False
    # ablation knobs
    mask_clean_dpp: bool = False
    dfa_full_proto_grad: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def effective_weights(self) -> LossWeights:
        if self.mode == "trades-like":
            return replace(self.weights, dpp=0.0, dnp=0.0)
        return self.weights


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: LossBreakdown
    clean_acc: float
    adv_acc: float

    def row(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, **self.losses.as_dict(),
                "clean_acc": self.clean_acc, "adv_acc": self.adv_acc}


@dataclass
class TrainState:
    params: ModelParams
    buffers: dict[str, np.ndarray]
    epoch: int = 0
    streams: dict[str, np.random.Generator] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batching", "attack", "augmentation")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def init_state(config: TrainConfig, arch: ArchitectureConfig, num_classes: int) -> TrainState:
    streams = make_streams(config.seed)
    params = init_model(arch, num_classes, config.weights.radius, streams["init"])
    buffers = {k: np.zeros_like(v) for k, v in params.extractor.items()}
    buffers["prototypes"] = np.zeros_like(params.bank.prototypes)
    return TrainState(params, buffers, 0, streams)


def sgd_update(param, grad, buffer, lr: float, momentum: float, weight_decay: float):
    """Heavy-ball SGD with L2 decay folded into the gradient.

    Returns the new parameter and momentum buffer.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient in SGD update")
    buffer = momentum * buffer + grad + weight_decay * param
    return param - lr * buffer, buffer


def expected_total(losses: LossBreakdown, config: TrainConfig) -> float:
    """Objective value the step minimized, rebuilt from its recorded parts."""
    if config.mode == "at-baseline":
        return losses.ce_adv
    return losses.recompute(config.effective_weights(), config.mask_clean_dpp)


@dataclass
class StepResult:
    losses: LossBreakdown
    clean_correct: int
    adv_correct: int


def _loss_graph(config: TrainConfig, params: ModelParams, ext, protos, x, x_adv, y):
    if config.mode == "at-baseline":
        la = logits_graph(features_graph(params.arch, ext, x_adv), protos, params.bank.radius)
        ce_adv = T.mean(ce_rows(la, y))
        lc = logits_graph(features_graph(params.arch, ext, x), T.stop_gradient(protos), params.bank.radius)
        ce_clean = float(T.mean(ce_rows(lc, y)).data)
        return ce_adv, LossBreakdown(ce_clean, float(ce_adv.data), 0.0, 0.0, 0.0, 0.0, float(ce_adv.data))
    terms = composite_graph(
        params.arch, ext, protos, x, x_adv, y, config.effective_weights(),
        lock_adversarial=True,
        mask_clean_dpp=config.mask_clean_dpp,
        dfa_full_proto_grad=config.dfa_full_proto_grad,
    )
    return terms.total, terms.breakdown()


def _hits(params: ModelParams, x, y) -> int:
    return int(np.sum(predict_labels(params, x) == y))


def train_step(state: TrainState, x, y, config: TrainConfig, lr: float | None = None) -> tuple[TrainState, StepResult]:
    """One attack + update on a batch. Returns the new state and diagnostics."""
    params = state.params
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    lr = lr_at(config.schedule, state.epoch) if lr is None else lr

    attack_seed = int(state.streams["attack"].integers(2**63)) if "attack" in state.streams else 0
    x_adv = run_attack(params, x, y, config.attack, attack_seed, config.effective_weights())

    names = list(params.extractor)
    ext = {k: T.Tensor(params.extractor[k], requires_grad=True, name=k) for k in names}
    protos = T.Tensor(params.bank.prototypes, requires_grad=True, name="prototypes")
    total, parts = _loss_graph(config, params, ext, protos, x, x_adv, y)
    grads = T.gradients(total, [ext[k] for k in names] + [protos])

    new_ext, buffers = {}, dict(state.buffers)
    for k, g in zip(names, grads):
        new_ext[k], buffers[k] = sgd_update(params.extractor[k], g, buffers[k], lr, config.momentum,
                                            config.weight_decay)
    new_protos, buffers["prototypes"] = sgd_update(params.bank.prototypes, grads[-1], buffers["prototypes"], lr,
                                                   config.momentum, 0.0)
    new_params = params.with_(extractor=new_ext, bank=replace(params.bank, prototypes=new_protos))

    result = StepResult(parts, _hits(params, x, y), _hits(params, x_adv, y))
    new_state = replace(state, params=new_params, buffers=buffers)
    return new_state, result


def _weighted_mean(parts: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(w for _, w in parts)
    fields = LossBreakdown.__dataclass_fields__
    return LossBreakdown(**{k: sum(getattr(p, k) * w for p, w in parts) / n for k in fields})


def renormalize_state(state: TrainState) -> TrainState:
    try:
        bank = renormalize_prototypes(state.params.bank)
    except ValueError as exc:
        raise TrainingError(f"epoch {state.epoch}: prototype collapse ({exc})") from exc
    return replace(state, params=state.params.with_(bank=bank))


Callback = Callable[[TrainState], None]


def train(
    config: TrainConfig,
    dataset: Dataset,
    arch: ArchitectureConfig,
    num_classes: int | None = None,
    on_epoch_start: Callback | None = None,
    on_epoch_end: Callback | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Run ``config.epochs`` epochs over ``dataset``.

    History accuracies are running training accuracies measured on each
    batch before its update; loss parts are batch-size weighted means.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    num_classes = num_classes or dataset.num_classes
    state = init_state(config, arch, num_classes)
    image_aug = config.augment and dataset.image
    for epoch in range(config.epochs):
        state = renormalize_state(replace(state, epoch=epoch))
        if on_epoch_start:
            on_epoch_start(state)
        lr = lr_at(config.schedule, epoch)
        parts, clean_hits, adv_hits = [], 0, 0
        for idx in batches(len(dataset), config.batch_size, state.streams["batching"]):
            x = dataset.inputs[idx]
            if image_aug:
                x = augment(x, state.streams["augmentation"])
            state, res = train_step(state, x, dataset.labels[idx], config, lr)
            parts.append((res.losses, len(idx)))
            clean_hits += res.clean_correct
            adv_hits += res.adv_correct
        losses = _weighted_mean(parts)
        state.history.append(EpochRecord(epoch, lr, losses, clean_hits / len(dataset), adv_hits / len(dataset)))
        state = replace(state, epoch=epoch + 1)
        logger.info("epoch %d lr %.4g total %.4f clean %.3f adv %.3f", epoch, lr, losses.total,
                    clean_hits / len(dataset), adv_hits / len(dataset))
        if on_epoch_end:
            on_epoch_end(state)
    # close the last epoch like every other boundary so saved banks sit on the sphere
    state = renormalize_state(state)
    return state.params, state.history


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in history:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.row().items()})
    return buf.getvalue()
