"""White-box attacks: FGSM and multi-restart PGD under l1, l2 and l-inf."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from advdpnp import tensor as T
from advdpnp.losses import LossWeights, ce_rows, composite_rows
from advdpnp.model import ModelParams, class_logits, extract_features, features_graph, logits_graph, predict

NORMS = ("l1", "l2", "linf")
METHODS = ("fgsm", "pgd")
OBJECTIVES = ("ce", "composite")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """One attack. ``random_start`` randomizes the first restart too;
    otherwise restart 0 begins at the clean input and later restarts are
    drawn uniformly from the ball."""

    name: str = "pgd"
    method: str = "pgd"
    norm: str = "linf"
    eps: float = 8 / 255
    step: float = 2 / 255
    iterations: int = 10
    restarts: int = 1
    objective: str = "ce"
    random_start: bool = False
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.method == "fgsm" and self.norm != "linf":
            raise ValueError("fgsm is defined for the l-inf ball only")
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.iterations > 0 and not self.step > 0:
            raise ValueError("step must be positive when iterations > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not self.box[0] < self.box[1]:
            raise ValueError("box must satisfy low < high")

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


# ------------------------------------------------------------ geometry


def _rows(v: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return v[None, :], v.shape
    return v.reshape(v.shape[0], -1), v.shape


def _project_l1(v: np.ndarray, eps: float) -> np.ndarray:
    out = v.copy()
    a = np.abs(v)
    outside = a.sum(axis=1) > eps
    if not np.any(outside):
        return out
    if eps == 0:
        out[outside] = 0.0
        return out
    u = -np.sort(-a[outside], axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, u.shape[1] + 1)
    cond = u - (css - eps) / j > 0
    cond[:, 0] = True  # holds exactly for eps > 0; rounding can lose it when eps is tiny
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(rho)), rho] - eps) / (rho + 1)
    out[outside] = np.sign(v[outside]) * np.maximum(a[outside] - theta[:, None], 0.0)
    return out


def project(delta, norm: str, eps: float) -> np.ndarray:
    """Euclidean projection onto the ``norm`` ball of radius ``eps``.

    A 1-D input is one vector; otherwise the leading axis indexes
    independent perturbations.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    v, shape = _rows(delta)
    if norm == "linf":
        out = np.clip(v, -eps, eps)
    elif norm == "l2":
        n = np.linalg.norm(v, axis=1, keepdims=True)
        scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
        out = v * scale
    elif norm == "l1":
        out = _project_l1(v, eps)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out.reshape(shape)


def norm_of(delta, norm: str) -> np.ndarray:
    v, _ = _rows(delta)
    order = {"l1": 1, "l2": 2, "linf": np.inf}[norm]
    return np.linalg.norm(v, ord=order, axis=1)


def ascent_step(grad, norm: str, step: float) -> np.ndarray:
    """Steepest-ascent displacement of length ``step`` in the given norm."""
    if not step > 0:
        raise ValueError("step must be positive")
    g, shape = _rows(grad)
    if norm == "linf":
        out = step * np.sign(g)
    elif norm == "l2":
        n = np.linalg.norm(g, axis=1, keepdims=True)
        out = np.where(n > 0, step * g / np.where(n > 0, n, 1.0), 0.0)
    elif norm == "l1":
        out = np.zeros_like(g)
        k = np.argmax(np.abs(g), axis=1)
        rows = np.arange(g.shape[0])
        out[rows, k] = step * np.sign(g[rows, k])
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out.reshape(shape)


def random_init(rng: np.random.Generator, shape: tuple[int, ...], norm: str, eps: float) -> np.ndarray:
    """Uniform sample from the ``norm`` ball, one per leading-axis row."""
    b = shape[0]
    n = int(np.prod(shape[1:]))
    if norm == "linf":
        out = rng.uniform(-eps, eps, size=(b, n))
    else:
        if norm == "l2":
            d = rng.standard_normal((b, n))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
        else:
            d = rng.laplace(size=(b, n))
            d /= np.abs(d).sum(axis=1, keepdims=True)
        radius = eps * rng.uniform(size=(b, 1)) ** (1.0 / n)
        out = d * radius
    return project(out, norm, eps).reshape(shape)


def restart_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ------------------------------------------------------------ attacks

Objective = Callable[[T.Tensor], T.Tensor]


def maximize(objective: Objective, x, cfg: AttackConfig, seed: int = 0, key: tuple[int, ...] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Projected ascent of a per-row objective around ``x``.

    Returns the adversarial batch and the per-row objective value of the
    chosen restart (highest value wins, earliest restart on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = cfg.box
    best_x = x.copy()
    best_val = np.full(x.shape[0], -np.inf)
    for r in range(cfg.restarts):
        if r == 0 and not cfg.random_start:
            delta = np.zeros_like(x)
        else:
            delta = random_init(restart_rng(seed, *key, r), x.shape, cfg.norm, cfg.eps)
        x_adv = np.clip(x + delta, lo, hi)
        for it in range(cfg.iterations):
            xt = T.Tensor(x_adv, requires_grad=True)
            try:
                (g,) = T.gradients(T.sum(objective(xt)), [xt])
            except T.NonFiniteError as exc:
                raise AttackError(f"restart {r}, iteration {it}: {exc}") from exc
            x_adv = x_adv + ascent_step(g, cfg.norm, cfg.step)
            x_adv = np.clip(x + project(x_adv - x, cfg.norm, cfg.eps), lo, hi)
        try:
            val = objective(T.Tensor(x_adv)).data
        except T.NonFiniteError as exc:
            raise AttackError(f"restart {r}, final evaluation: {exc}") from exc
        better = val > best_val
        best_x[better] = x_adv[better]
        best_val[better] = val[better]
    return best_x, best_val


def _frozen(params: ModelParams):
    return {k: T.Tensor(v) for k, v in params.extractor.items()}, T.Tensor(params.bank.prototypes)


def ce_objective(params: ModelParams, y) -> Objective:
    ext, protos = _frozen(params)
    y = np.asarray(y, dtype=np.int64)

    def objective(xt: T.Tensor) -> T.Tensor:
        return ce_rows(logits_graph(features_graph(params.arch, ext, xt), protos, params.bank.radius), y)

    return objective


def composite_objective(params: ModelParams, x_clean, y, weights: LossWeights) -> Objective:
    ext, protos = _frozen(params)
    y = np.asarray(y, dtype=np.int64)
    x_clean = np.asarray(x_clean, dtype=np.float64)

    def objective(xt: T.Tensor) -> T.Tensor:
        return composite_rows(params.arch, ext, protos, x_clean, xt, y, weights)

    return objective


def make_objective(params, x, y, objective: str, weights: LossWeights | None) -> Objective:
    if objective == "ce":
        return ce_objective(params, y)
    if weights is None:
        raise ValueError("composite objective needs loss weights")
    return composite_objective(params, x, y, weights)


def fgsm(params: ModelParams, x, y, eps: float, box=(0.0, 1.0)) -> np.ndarray:
    """One signed-gradient step of size ``eps`` on the cross-entropy."""
    if not eps >= 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    xt = T.Tensor(x, requires_grad=True)
    try:
        (g,) = T.gradients(T.sum(ce_objective(params, y)(xt)), [xt])
    except T.NonFiniteError as exc:
        raise AttackError(f"fgsm gradient: {exc}") from exc
    return np.clip(x + eps * np.sign(g), box[0], box[1])


def pgd(params: ModelParams, x, y, cfg: AttackConfig, seed: int = 0, weights: LossWeights | None = None,
        key: tuple[int, ...] = ()) -> np.ndarray:
    objective = make_objective(params, x, y, cfg.objective, weights)
    return maximize(objective, x, cfg, seed, key)[0]


def run_attack(params: ModelParams, x, y, cfg: AttackConfig, seed: int = 0, weights: LossWeights | None = None,
               key: tuple[int, ...] = ()) -> np.ndarray:
    if cfg.method == "fgsm":
        return fgsm(params, x, y, cfg.eps, cfg.box)
    return pgd(params, x, y, cfg, seed, weights, key)


def _chunks(n: int, size: int):
    for i, start in enumerate(range(0, n, size)):
        yield i, slice(start, min(start + size, n))


def attack_dataset(params, x, y, cfg: AttackConfig, seed: int = 0, weights=None, batch_size: int = 256) -> np.ndarray:
    """Attack ``x`` in fixed chunks; randomness is keyed by chunk index."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i, sl in _chunks(len(x), batch_size):
        out[sl] = run_attack(params, x[sl], y[sl], cfg, seed, weights, key=(i,))
    return out


def survivors(params, x, y, attacks: list[AttackConfig], seed: int = 0, weights=None, batch_size: int = 256) -> np.ndarray:
    """Boolean (len(attacks), N): prediction on each attack's output is correct."""
    y = np.asarray(y, dtype=np.int64)
    out = np.empty((len(attacks), len(y)), dtype=bool)
    for a, cfg in enumerate(attacks):
        x_adv = attack_dataset(params, x, y, cfg, seed, weights, batch_size)
        out[a] = predict(class_logits(extract_features(params, x_adv), params.bank)) == y
    return out


def ensemble_accuracy(params, dataset, attacks: list[AttackConfig], seed: int = 0, weights=None) -> float:
    """Fraction of samples classified correctly under every listed attack."""
    if not attacks:
        raise ValueError("attack list is empty")
    return float(survivors(params, dataset.inputs, dataset.labels, attacks, seed, weights).all(axis=0).mean())


def robust_accuracy(params, dataset, cfg: AttackConfig, seed: int = 0, weights=None) -> float:
    return ensemble_accuracy(params, dataset, [cfg], seed, weights)
