"""Evaluation metrics: alignment dispersion, matched accuracy, NMI, elbow.

All partition metrics relabel inputs internally, so cluster ids may be any
integers.  The dispersion metric compares within-class spread of aligned
curves to the separation of class means; lower is better.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from math import comb

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import ttest_rel

from . import trainer
from .data import Dataset
from .errors import (ConfigError, DegenerateMetricError, EmptyClusterError,
                     StructuralError, WarpclustError)


def _class_stats(aligned: np.ndarray, labels: np.ndarray,
                 clusters: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean curves ``[C,d,T]`` and total variations ``[C]``.

    A class's total variation is the grid-mean of the pointwise variance of
    its members, summed over curve dimensions.
    """
    means = np.empty((clusters,) + aligned.shape[1:])
    tvs = np.empty(clusters)
    for c in range(clusters):
        members = aligned[labels == c]
        if members.shape[0] == 0:
            raise EmptyClusterError(f"class {c} has no members")
        means[c] = members.mean(axis=0)
        tvs[c] = members.var(axis=0).sum(axis=0).mean()
    return means, tvs


def atv(aligned: np.ndarray, labels: np.ndarray, clusters: int) -> float:
    """Mean over class pairs of (TV_u + TV_v) / distance of class means.

    The distance is the grid-mean discretized L2 norm between the two class
    mean curves; coincident means make the ratio undefined.
    """
    aligned = np.asarray(aligned, dtype=np.float64)
    labels = np.asarray(labels)
    if clusters < 2:
        raise ConfigError(f"dispersion ratio needs >= 2 classes, "
                          f"got {clusters}")
    means, tvs = _class_stats(aligned, labels, clusters)
    total = 0.0
    for u in range(clusters):
        for v in range(u + 1, clusters):
            diff = means[u] - means[v]
            dist = float(np.sqrt((diff * diff).sum(axis=0).mean()))
            if dist < 1e-12:
                raise DegenerateMetricError(
                    f"classes {u} and {v} have coincident mean curves")
            total += (tvs[u] + tvs[v]) / dist
    return total / comb(clusters, 2)


def within_cluster_tv(aligned: np.ndarray, labels: np.ndarray) -> float:
    """Size-weighted pooled within-cluster total variation (no truth used)."""
    aligned = np.asarray(aligned, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        members = aligned[labels == c]
        total += members.shape[0] * members.var(axis=0).sum(axis=0).mean()
    return total / labels.size


# ---------------------------------------------------------------------------
# partition metrics
# ---------------------------------------------------------------------------

def _validate_pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.ndim != 1 or pred.shape != true.shape or pred.size == 0:
        raise StructuralError(
            f"label vectors must be equal-length and nonempty, "
            f"got {pred.shape} vs {true.shape}")
    _, pred = np.unique(pred, return_inverse=True)
    _, true = np.unique(true, return_inverse=True)
    return pred, true


def confusion_matrix(pred, true) -> np.ndarray:
    """Counts ``m[i,j]`` of points with predicted id i and true id j."""
    pred, true = _validate_pair(pred, true)
    m = np.zeros((pred.max() + 1, true.max() + 1), dtype=np.int64)
    np.add.at(m, (pred, true), 1)
    return m


def clustering_accuracy(pred, true) -> float:
    """Best label-matched agreement via the assignment problem on counts."""
    m = confusion_matrix(pred, true)
    rows, cols = linear_sum_assignment(-m)
    return float(m[rows, cols].sum()) / np.asarray(pred).size


def nmi(pred, true) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Natural logarithms.  Two trivial one-cluster partitions agree perfectly
    (1.0); if exactly one partition is trivial the information is zero.
    """
    m = confusion_matrix(pred, true).astype(np.float64)
    pxy = m / m.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    hx = float(-(px[px > 0] * np.log(px[px > 0])).sum())
    hy = float(-(py[py > 0] * np.log(py[py > 0])).sum())
    if hx == 0.0 and hy == 0.0:
        return 1.0
    if hx == 0.0 or hy == 0.0:
        return 0.0
    nz = pxy > 0
    outer = np.outer(px, py)
    mi = float((pxy[nz] * np.log(pxy[nz] / outer[nz])).sum())
    return float(np.clip(mi / (0.5 * (hx + hy)), 0.0, 1.0))


# ---------------------------------------------------------------------------
# cluster-count elbow
# ---------------------------------------------------------------------------

@dataclass
class ElbowResult:
    """Suggested count, the TV curve over candidates, and failed ones."""

    suggested: int
    tv: dict[int, float]
    failed: list[int]


def _pick_elbow(tv: dict[int, float]) -> int:
    """Largest second difference of TV over candidate counts.

    Ties break toward the smaller count.  With two surviving candidates the
    smaller one wins if its TV is within 5% of the best, else the minimum.
    """
    cs = sorted(tv)
    if len(cs) == 1:
        return cs[0]
    if len(cs) == 2:
        best = min(tv[cs[0]], tv[cs[1]])
        if tv[cs[0]] <= best * 1.05:
            return cs[0]
        return cs[1]
    curve = np.array([tv[c] for c in cs])
    second = curve[:-2] - 2.0 * curve[1:-1] + curve[2:]
    return cs[1 + int(np.argmax(second))]


def tv_elbow(dataset: Dataset, c_range: list[int],
             config: trainer.TrainConfig) -> ElbowResult:
    """Train per candidate count and pick the bend of the TV-vs-C curve."""
    c_range = sorted(set(int(c) for c in c_range))
    if not c_range:
        raise ConfigError("candidate range is empty")
    if c_range[0] < 1:
        raise ConfigError(f"cluster counts must be >= 1, got {c_range[0]}")
    tv: dict[int, float] = {}
    failed: list[int] = []
    for c in c_range:
        try:
            report = trainer.train(dataset, replace(config, clusters=c))
        except WarpclustError:
            failed.append(c)
            continue
        tv[c] = within_cluster_tv(report.aligned, report.labels)
    if not tv:
        raise ConfigError("every candidate cluster count failed to train")
    return ElbowResult(suggested=_pick_elbow(tv), tv=tv, failed=failed)


# ---------------------------------------------------------------------------
# reporting utilities
# ---------------------------------------------------------------------------

def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t statistic and p-value for matched samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise StructuralError("need two equal-length vectors of >= 2 values")
    stat, pvalue = ttest_rel(a, b)
    return float(stat), float(pvalue)


def append_metric(path: str, name: str, value: float, dataset: str = "",
                  seed: int | None = None) -> None:
    """Append one machine-parseable metric record to a results log."""
    record = {"name": name, "value": float(value), "dataset": dataset,
              "seed": seed}
    with open(path, "a", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
