"""Improved precision and recall between real and synthetic feature sets.

Each point set is modelled as the union of closed balls centred on its points,
with radius equal to the distance to the k-th nearest other point. Precision
is the share of synthetic points inside the real model, recall the share of
real points inside the synthetic model.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from diagen.core import FeatureTable, atomic_write_text

DEFAULT_K = 5
_CHUNK = 1024


class MetricsError(ValueError):
    pass


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and rows of ``b``.

    Uses the difference form rather than the Gram expansion so identical
    points come out at exactly 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], _CHUNK):
        block = a[start : start + _CHUNK]
        diff = block[:, None, :] - b[None, :, :]
        out[start : start + _CHUNK] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


@dataclass(frozen=True, eq=False)
class ManifoldModel:
    points: np.ndarray
    radii: np.ndarray
    k: int


def _check_points(points: np.ndarray, name: str = "points") -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] < 1:
        raise MetricsError(f"{name} must be a P x D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise MetricsError(f"{name} contain non-finite coordinates")
    return x


def build_manifold(points: np.ndarray, k: int = DEFAULT_K) -> ManifoldModel:
    x = _check_points(points)
    if k < 1:
        raise MetricsError(f"k must be positive, got {k}")
    if x.shape[0] <= k:
        raise MetricsError(f"need more than k={k} points to build a manifold, got {x.shape[0]}")
    d = pairwise_distances(x, x)
    np.fill_diagonal(d, np.inf)
    radii = np.partition(d, k - 1, axis=1)[:, k - 1]
    return ManifoldModel(points=x, radii=radii, k=k)


def membership(queries: np.ndarray, model: ManifoldModel) -> np.ndarray:
    """Boolean mask: query i lies in at least one closed ball of ``model``."""
    q = _check_points(queries, "queries")
    if q.shape[1] != model.points.shape[1]:
        raise MetricsError(f"dimension mismatch: {q.shape[1]} vs {model.points.shape[1]}")
    inside = np.zeros(q.shape[0], dtype=bool)
    for start in range(0, q.shape[0], _CHUNK):
        d = pairwise_distances(q[start : start + _CHUNK], model.points)
        inside[start : start + _CHUNK] = (d <= model.radii[None, :]).any(axis=1)
    return inside


def in_manifold(point: np.ndarray, model: ManifoldModel) -> bool:
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if p.shape[0] != model.points.shape[1]:
        raise MetricsError(f"dimension mismatch: {p.shape[0]} vs {model.points.shape[1]}")
    return bool(membership(p[None, :], model)[0])


def precision_fraction(real_features: np.ndarray, syn_features: np.ndarray, k: int = DEFAULT_K) -> Fraction:
    syn = _check_points(syn_features, "synthetic features")
    if syn.shape[0] == 0:
        raise MetricsError("precision needs at least one synthetic point")
    hits = int(membership(syn, build_manifold(real_features, k)).sum())
    return Fraction(hits, syn.shape[0])


def recall_fraction(real_features: np.ndarray, syn_features: np.ndarray, k: int = DEFAULT_K) -> Fraction:
    real = _check_points(real_features, "real features")
    if real.shape[0] == 0:
        raise MetricsError("recall needs at least one real point")
    hits = int(membership(real, build_manifold(syn_features, k)).sum())
    return Fraction(hits, real.shape[0])


def precision(real_features: np.ndarray, syn_features: np.ndarray, k: int = DEFAULT_K) -> float:
    """Share of synthetic points inside the manifold of the real points."""
    return float(precision_fraction(real_features, syn_features, k))


def recall(real_features: np.ndarray, syn_features: np.ndarray, k: int = DEFAULT_K) -> float:
    """Share of real points inside the manifold of the synthetic points."""
    return float(recall_fraction(real_features, syn_features, k))


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    available: bool
    reason: str | None = None


@dataclass
class MetricsReport:
    k: int
    n_real: int
    n_syn: int
    precision: float | None
    recall: float | None
    per_class: dict[str, ClassMetrics] | None = None
    mean_precision: float | None = None
    mean_recall: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d: dict = {
            "k": self.k,
            "n_real": self.n_real,
            "n_syn": self.n_syn,
            "precision": self.precision,
            "recall": self.recall,
        }
        if self.per_class is not None:
            d["per_class"] = {
                label: {"precision": m.precision, "recall": m.recall, "available": m.available}
                | ({"reason": m.reason} if m.reason else {})
                for label, m in self.per_class.items()
            }
            d["mean_precision"] = self.mean_precision
            d["mean_recall"] = self.mean_recall
        if self.notes:
            d["notes"] = list(self.notes)
        return d


def evaluate_pair(
    real_table: FeatureTable,
    syn_table: FeatureTable,
    k: int = DEFAULT_K,
    per_class: bool = False,
) -> MetricsReport:
    """Overall precision/recall and, optionally, per-class values with their unweighted mean.

    A class with k or fewer points on either side is marked unavailable; the
    other classes are still evaluated.
    """
    if len(real_table) == 0 or len(syn_table) == 0:
        raise MetricsError("both feature tables must be nonempty")
    if real_table.dim != syn_table.dim:
        raise MetricsError(f"feature dimension mismatch: {real_table.dim} vs {syn_table.dim}")
    report = MetricsReport(k=k, n_real=len(real_table), n_syn=len(syn_table), precision=None, recall=None)
    if len(real_table) > k and len(syn_table) > k:
        report.precision = precision(real_table.matrix, syn_table.matrix, k)
        report.recall = recall(real_table.matrix, syn_table.matrix, k)
    else:
        report.notes.append(f"overall metrics unavailable: need more than k={k} points per side")
    if per_class:
        report.per_class = {}
        labels = list(dict.fromkeys(real_table.labels + syn_table.labels))
        for label in labels:
            r = real_table.rows_for_label(label)
            s = syn_table.rows_for_label(label)
            if len(r) <= k or len(s) <= k:
                report.per_class[label] = ClassMetrics(
                    None, None, False, f"needs more than k={k} points per side (real={len(r)}, syn={len(s)})"
                )
                continue
            report.per_class[label] = ClassMetrics(precision(r, s, k), recall(r, s, k), True)
        ok = [m for m in report.per_class.values() if m.available]
        if ok:
            report.mean_precision = float(np.mean([m.precision for m in ok]))
            report.mean_recall = float(np.mean([m.recall for m in ok]))
    return report


def save_report(report: MetricsReport, path: str | os.PathLike[str]) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2) + "\n")


def format_percent(report: MetricsReport) -> str:
    def pct(v: float | None) -> str:
        return "n/a" if v is None else f"{100 * v:.2f}"

    return f"precision {pct(report.precision)} recall {pct(report.recall)}"
