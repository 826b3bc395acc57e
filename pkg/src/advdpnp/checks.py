"""Finite-difference verification of every loss component's gradient."""

from __future__ import annotations

from typing import Callable

import numpy as np

from advdpnp import tensor as T
from advdpnp.losses import LossWeights, ce_rows, composite_graph, dnp_graph, kl_rows, nearest_negatives, pull_rows
from advdpnp.model import ArchitectureConfig, features_graph, init_model, logits_graph

COMPONENTS = ("ce", "dpp", "dnp", "dfa", "composite")

_ARCH = ArchitectureConfig(input_shape=(3,), hidden=(5,), feature_dim=3)
_WEIGHTS = LossWeights(dpp=0.1, dnp=0.1, dfa=2.0, radius=3.0)


def _separated_prototypes(rng: np.random.Generator, m: int, d: int, radius: float, gap: float = 1e-3) -> np.ndarray:
    """Random bank whose nearest-negative pairs differ by >= gap in every coordinate."""
    while True:
        c = rng.standard_normal((m, d))
        c *= radius / np.linalg.norm(c, axis=1, keepdims=True)
        neg = nearest_negatives(c)
        if np.all(np.abs(c - c[neg]) >= gap):
            dist = np.linalg.norm(c[:, None] - c[None], axis=-1)
            np.fill_diagonal(dist, np.inf)
            second = np.sort(dist, axis=1)[:, 1]
            if np.all(second - dist.min(axis=1) >= gap):
                return c


def component_fns(seed: int, batch: int = 4, num_classes: int = 3):
    """Random toy problem; returns the point and one scalar graph per component."""
    rng = np.random.default_rng(seed)
    params = init_model(_ARCH, num_classes, _WEIGHTS.radius, rng)
    point = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.extractor.items()}
    point["prototypes"] = _separated_prototypes(rng, num_classes, _ARCH.feature_dim, _WEIGHTS.radius)
    x = rng.uniform(size=(batch,) + _ARCH.input_shape)
    x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
    y = rng.integers(0, num_classes, size=batch)
    r = _WEIGHTS.radius

    def split(inp):
        c = inp["prototypes"]
        return {k: v for k, v in inp.items() if k != "prototypes"}, c

    def ce(inp):
        ext, c = split(inp)
        return T.mean(ce_rows(logits_graph(features_graph(_ARCH, ext, x), c, r), y))

    def dpp(inp):
        ext, c = split(inp)
        f = features_graph(_ARCH, ext, x)
        return T.mean(ce_rows(logits_graph(f, c, r), y) + pull_rows(f, c, y, _WEIGHTS.dpp))

    def dnp(inp):
        return dnp_graph(inp["prototypes"])

    def dfa(inp):
        ext, c = split(inp)
        lc = logits_graph(features_graph(_ARCH, ext, x), c, r)
        la = logits_graph(features_graph(_ARCH, ext, x_adv), c, r)
        return T.mean(kl_rows(lc, la))

    def composite(inp):
        # no barrier: a barrier hides a real dependence from the analytic side only
        ext, c = split(inp)
        return composite_graph(_ARCH, ext, c, x, x_adv, y, _WEIGHTS, lock_adversarial=False).total

    fns: dict[str, Callable] = {"ce": ce, "dpp": dpp, "dnp": dnp, "dfa": dfa, "composite": composite}
    points = {name: point for name in COMPONENTS}
    points["dnp"] = {"prototypes": point["prototypes"]}
    return fns, points


def gradcheck_suite(seeds: int = 20, step: float = 1e-5, start: int = 0) -> dict[str, float]:
    """Worst relative gradient error per component over ``seeds`` random problems."""
    worst = {name: 0.0 for name in COMPONENTS}
    for seed in range(start, start + seeds):
        fns, points = component_fns(seed)
        for name in COMPONENTS:
            worst[name] = max(worst[name], T.grad_check(fns[name], points[name], step))
    return worst
