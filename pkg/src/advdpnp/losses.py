"""Loss terms for prototype-based adversarial training.

Per-sample terms:
  ce    = -log p_y,                  p = softmax(C f / alpha)
  dpp   = ce + (lam_dpp / 2) * ||f - c_y||^2
  dfa   = KL(p(x) || p(x_adv))
Per-batch term:
  dnp   = -(1/M) * sum_j sum_i sqrt(|c_j,i - c_neg(j),i|)
where neg(j) is the closest other prototype in Euclidean distance.

The batch objective is

  total = lam_dnp * dnp + mean_i [dpp(x_i) + dpp(x_adv_i) + lam_dfa * dfa_i] / 2

The graph builders here take tensors so the trainer and the adaptive attack
can differentiate through them; the row-level helpers take plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from advdpnp import tensor as T
from advdpnp.model import ModelParams, PrototypeBank, features_graph, logits_graph


@dataclass(frozen=True)
class LossWeights:
    dpp: float = 0.1
    dnp: float = 0.1
    dfa: float = 2.0
    radius: float = 40.0

    def __post_init__(self):
        for name in ("dpp", "dnp", "dfa"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean parts of the composite loss.

    ``pull_*`` already carry the lam_dpp / 2 factor; ``dnp`` and ``dfa`` are
    unweighted, so ``recompute(weights)`` rebuilds ``total``.
    """

    ce_clean: float
    ce_adv: float
    pull_clean: float
    pull_adv: float
    dnp: float
    dfa: float
    total: float

    def recompute(self, weights: LossWeights, mask_clean_dpp: bool = False) -> float:
        clean = 0.0 if mask_clean_dpp else self.ce_clean + self.pull_clean
        return weights.dnp * self.dnp + (clean + self.ce_adv + self.pull_adv + weights.dfa * self.dfa) / 2

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ------------------------------------------------------------ graph builders


def nearest_negatives(bank: PrototypeBank | np.ndarray) -> np.ndarray:
    """Index of the closest other prototype for every class; ties go low."""
    c = bank.prototypes if isinstance(bank, PrototypeBank) else np.asarray(bank, dtype=np.float64)
    if c.shape[0] < 2:
        raise ValueError("need at least two prototypes")
    sq = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(sq, np.inf)
    return np.argmin(sq, axis=1)


def dnp_graph(prototypes: T.Tensor) -> T.Tensor:
    neg = nearest_negatives(prototypes.data)
    diff = prototypes - T.take_rows(prototypes, neg)
    m = prototypes.shape[0]
    return T.sum(T.sqrt_abs(diff)) * (-1.0 / m)


def ce_rows(logits: T.Tensor, labels) -> T.Tensor:
    return -T.pick(T.log_softmax(logits), labels)


def pull_rows(features: T.Tensor, prototypes: T.Tensor, labels, lam_dpp: float) -> T.Tensor:
    return T.sum(T.square(features - T.take_rows(prototypes, labels)), axis=1) * (lam_dpp / 2)


def kl_rows(logits_p: T.Tensor, logits_q: T.Tensor) -> T.Tensor:
    logp = T.log_softmax(logits_p)
    return T.sum(T.exp(logp) * (logp - T.log_softmax(logits_q)), axis=1)


@dataclass
class CompositeTerms:
    """Tensor-valued parts of one composite evaluation (batch means)."""

    ce_clean: T.Tensor
    ce_adv: T.Tensor
    pull_clean: T.Tensor
    pull_adv: T.Tensor
    dnp: T.Tensor
    dfa: T.Tensor
    total: T.Tensor

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(**{k: float(getattr(self, k).data) for k in LossBreakdown.__dataclass_fields__})


def composite_graph(
    arch,
    extractor: Mapping[str, T.Tensor],
    prototypes: T.Tensor,
    x_clean,
    x_adv,
    labels,
    weights: LossWeights,
    *,
    lock_adversarial: bool = True,
    mask_clean_dpp: bool = False,
    dfa_full_proto_grad: bool = False,
) -> CompositeTerms:
    """Build the composite loss.

    With ``lock_adversarial`` the adversarial branch sees the prototypes
    through a gradient barrier, so prototype gradients come only from the
    clean DPP term, DNP, and the clean side of DFA. ``dfa_full_proto_grad``
    lets DFA's adversarial side reach the prototypes as well.
    """
    labels = np.asarray(labels, dtype=np.int64)
    radius = weights.radius
    adv_protos = T.stop_gradient(prototypes) if lock_adversarial else prototypes

    f_clean = features_graph(arch, extractor, x_clean)
    f_adv = features_graph(arch, extractor, x_adv)
    logits_clean = logits_graph(f_clean, prototypes, radius)
    logits_adv = logits_graph(f_adv, adv_protos, radius)

    ce_clean = T.mean(ce_rows(logits_clean, labels))
    ce_adv = T.mean(ce_rows(logits_adv, labels))
    pull_clean = T.mean(pull_rows(f_clean, prototypes, labels, weights.dpp))
    pull_adv = T.mean(pull_rows(f_adv, adv_protos, labels, weights.dpp))
    dnp = dnp_graph(prototypes)
    logits_adv_dfa = logits_graph(f_adv, prototypes, radius) if dfa_full_proto_grad else logits_adv
    dfa = T.mean(kl_rows(logits_clean, logits_adv_dfa))

    branch = ce_adv + pull_adv + dfa * weights.dfa
    if not mask_clean_dpp:
        branch = ce_clean + pull_clean + branch
    total = dnp * weights.dnp + branch * 0.5
    return CompositeTerms(ce_clean, ce_adv, pull_clean, pull_adv, dnp, dfa, total)


def composite_rows(arch, extractor, prototypes: T.Tensor, x_clean, x_adv, labels, weights: LossWeights) -> T.Tensor:
    """Per-sample composite objective, used as an attack target.

    Each row is ``[dpp(x) + dpp(x_adv) + lam_dfa * dfa] / 2 + lam_dnp * dnp``;
    the mean over rows equals ``composite_graph(...).total``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    f_clean = features_graph(arch, extractor, x_clean)
    f_adv = features_graph(arch, extractor, x_adv)
    lc = logits_graph(f_clean, prototypes, weights.radius)
    la = logits_graph(f_adv, prototypes, weights.radius)
    rows = (
        ce_rows(lc, labels)
        + pull_rows(f_clean, prototypes, labels, weights.dpp)
        + ce_rows(la, labels)
        + pull_rows(f_adv, prototypes, labels, weights.dpp)
        + kl_rows(lc, la) * weights.dfa
    ) * 0.5
    return rows + dnp_graph(prototypes) * weights.dnp


def _tensors(params: ModelParams):
    return {k: T.Tensor(v) for k, v in params.extractor.items()}, T.Tensor(params.bank.prototypes)


def composite_loss(x_clean, x_adv, labels, params: ModelParams, weights: LossWeights, **kwargs) -> LossBreakdown:
    ext, protos = _tensors(params)
    return composite_graph(params.arch, ext, protos, x_clean, x_adv, labels, weights, **kwargs).breakdown()


# ------------------------------------------------------------ row helpers


def ce_loss(probs, label: int) -> float:
    p = float(np.asarray(probs, dtype=np.float64)[label])
    if p <= 0:
        raise ValueError("true-class probability is zero")
    return -math.log(p)


def dpp_loss(features, label: int, bank: PrototypeBank, lam_dpp: float) -> float:
    f = T.Tensor(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    c = T.Tensor(bank.prototypes)
    labels = np.array([label])
    ce = ce_rows(logits_graph(f, c, bank.radius), labels)
    return float((ce + pull_rows(f, c, labels, lam_dpp)).data[0])


def dnp_loss(bank: PrototypeBank) -> float:
    return float(dnp_graph(T.Tensor(bank.prototypes)).data)


def dfa_loss(p_clean, p_adv) -> float:
    p = np.asarray(p_clean, dtype=np.float64)
    q = np.asarray(p_adv, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("adversarial distribution has a zero entry")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
