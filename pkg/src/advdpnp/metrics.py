"""Feature-space geometry metrics and the evaluation report.

FDR and AFS are anchored on empirical class means; SCR and the angular
separations use the supplied class centers (the prototype bank for this
model, classifier weights for anything else).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from advdpnp.attacks import AttackConfig, attack_dataset, survivors
from advdpnp.data import Dataset
from advdpnp.losses import LossWeights
from advdpnp.model import ModelParams, extract_features, predict_labels


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    centers: np.ndarray  # (M, d)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        c = np.asarray(self.centers, dtype=np.float64)
        if f.ndim != 2 or c.ndim != 2 or f.shape[1] != c.shape[1] or y.shape != (f.shape[0],):
            raise MetricError(f"features {f.shape}, labels {y.shape}, centers {c.shape} do not conform")
        if f.shape[1] < 2:
            raise MetricError("feature dimension must be at least 2")
        if y.size and (y.min() < 0 or y.max() >= c.shape[0]):
            raise MetricError("label outside [0, M)")
        counts = np.bincount(y, minlength=c.shape[0])
        if np.any(counts == 0):
            raise MetricError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "centers", c)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def class_means(self) -> np.ndarray:
        sums = np.zeros_like(self.centers)
        np.add.at(sums, self.labels, self.features)
        return sums / np.bincount(self.labels, minlength=self.num_classes)[:, None]


def fdr(fs: FeatureSet) -> float:
    """Sum over classes of within-class scatter over between-class scatter."""
    mu_j = fs.class_means()
    mu = fs.features.mean(axis=0)
    counts = np.bincount(fs.labels, minlength=fs.num_classes)
    within = np.zeros(fs.num_classes)
    np.add.at(within, fs.labels, np.sum((fs.features - mu_j[fs.labels]) ** 2, axis=1))
    between = counts * np.sum((mu_j - mu) ** 2, axis=1)
    if np.any(between == 0):
        raise MetricError("a class mean coincides with the global mean")
    return float(np.sum(within / between))


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise MetricError(f"zero-norm {what}")
    return v / n


def afs(fs: FeatureSet) -> float:
    """Angular within-class scatter over angular between-class scatter."""
    mu_j = fs.class_means()
    mu = fs.features.mean(axis=0)
    f_hat = _unit(fs.features, "feature")
    m_hat = _unit(mu_j, "class mean")
    g_hat = _unit(mu, "global mean")
    num = np.sum(1.0 - np.sum(f_hat * m_hat[fs.labels], axis=1))
    counts = np.bincount(fs.labels, minlength=fs.num_classes)
    den = np.sum(counts * (1.0 - m_hat @ g_hat))
    if den == 0:
        raise MetricError("angular between-class scatter is zero")
    return float(num / den)


def scr(fs: FeatureSet) -> float:
    """Mean over classes of nearest-rival center distance over mean distance-to-center."""
    c = fs.centers
    d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    rival = d.min(axis=1)
    spread = np.zeros(fs.num_classes)
    np.add.at(spread, fs.labels, np.linalg.norm(fs.features - c[fs.labels], axis=1))
    spread /= np.bincount(fs.labels, minlength=fs.num_classes)
    if np.any(spread == 0):
        raise MetricError("a class has every feature exactly at its center")
    return float(np.mean(rival / spread))


def angular_separation(centers) -> tuple[float, float]:
    """(MeanSep, MinSep) in degrees between unit-normalized centers."""
    c = _unit(np.asarray(centers, dtype=np.float64), "center")
    if c.shape[0] < 2:
        raise MetricError("need at least two centers")
    ang = np.degrees(np.arccos(np.clip(c @ c.T, -1.0, 1.0)))
    np.fill_diagonal(ang, np.inf)
    nearest = ang.min(axis=1)
    return float(nearest.mean()), float(nearest.min())


# ------------------------------------------------------------ reporting


@dataclass
class MetricsReport:
    fdr_clean: float
    fdr_adv: float
    afs_clean: float
    afs_adv: float
    scr_clean: float
    scr_adv: float
    mean_sep_deg: float
    min_sep_deg: float
    clean_acc: float
    robust_acc: dict[str, float] = field(default_factory=dict)
    ensemble_acc: float | None = None

    def flat(self) -> dict[str, float]:
        d = asdict(self)
        robust = d.pop("robust_acc")
        d.update({f"robust_acc.{k}": v for k, v in robust.items()})
        return d

    def to_json(self, **extra) -> str:
        return json.dumps({**self.flat(), **extra}, indent=2, sort_keys=True) + "\n"


def geometry(features: np.ndarray, labels, centers) -> tuple[float, float, float]:
    fs = FeatureSet(features, labels, centers)
    return fdr(fs), afs(fs), scr(fs)


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    attacks: list[AttackConfig],
    geometry_attack: AttackConfig,
    seed: int = 0,
    weights: LossWeights | None = None,
    batch_size: int = 256,
) -> tuple[MetricsReport, np.ndarray, np.ndarray]:
    """Accuracies under each attack plus clean/adversarial geometry.

    Returns the report and the clean and adversarial feature matrices.
    """
    x, y = dataset.inputs, dataset.labels
    clean_acc = float(np.mean(predict_labels(params, x) == y))
    robust, ensemble = {}, None
    if attacks:
        alive = survivors(params, x, y, attacks, seed, weights, batch_size)
        robust = {cfg.name: float(alive[i].mean()) for i, cfg in enumerate(attacks)}
        ensemble = float(alive.all(axis=0).mean())
    f_clean = extract_features(params, x)
    x_adv = attack_dataset(params, x, y, geometry_attack, seed, weights, batch_size)
    f_adv = extract_features(params, x_adv)
    centers = params.bank.prototypes
    fdr_c, afs_c, scr_c = geometry(f_clean, y, centers)
    fdr_a, afs_a, scr_a = geometry(f_adv, y, centers)
    mean_sep, min_sep = angular_separation(centers)
    report = MetricsReport(fdr_c, fdr_a, afs_c, afs_a, scr_c, scr_a, mean_sep, min_sep, clean_acc, robust, ensemble)
    return report, f_clean, f_adv


def features_csv(labels, splits: dict[str, np.ndarray]) -> str:
    """CSV with header ``index,label,split,f0..f{d-1}``; one block per split."""
    labels = np.asarray(labels)
    d = next(iter(splits.values())).shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label", "split"] + [f"f{i}" for i in range(d)])
    for split, feats in splits.items():
        for i, (lab, row) in enumerate(zip(labels, feats)):
            writer.writerow([i, int(lab), split] + [repr(float(v)) for v in row])
    return buf.getvalue()
