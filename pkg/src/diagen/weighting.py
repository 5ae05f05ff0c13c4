"""Confidence weighting of synthetic images.

A linear probe trained on real-image features scores each synthetic image;
temperature scaling calibrates those scores, and the calibrated confidences
set how often each synthetic is drawn relative to its siblings from the same
guiding image.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from diagen.core import DatasetManifest, FeatureTable, atomic_write_text, stable_seed


class WeightingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinearProbe:
    weight: np.ndarray  # C x D
    bias: np.ndarray  # C
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[0] != b.shape[0] or w.shape[0] != len(self.classes):
            raise WeightingError(
                f"inconsistent probe shapes: weight {w.shape}, bias {b.shape}, {len(self.classes)} classes"
            )
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "classes", tuple(self.classes))

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise WeightingError(f"class {label!r} not known to the probe") from None


@dataclass(frozen=True)
class Temperature:
    value: float

    def __post_init__(self) -> None:
        if not (self.value > 0 and math.isfinite(self.value)):
            raise WeightingError(f"temperature must be positive and finite, got {self.value!r}")


# ---------------------------------------------------------------------------
# probe


def _probe_objective(params: np.ndarray, X: np.ndarray, y: np.ndarray, C: int, l2: float):
    """Mean cross-entropy plus 0.5*l2*||W||^2 and its gradient (bias unpenalised)."""
    n, d = X.shape
    W = params[: C * d].reshape(C, d)
    b = params[C * d :]
    Z = X @ W.T + b
    lse = logsumexp(Z, axis=1)
    loss = float(np.mean(lse - Z[np.arange(n), y])) + 0.5 * l2 * float(np.sum(W * W))
    P = np.exp(Z - lse[:, None])
    P[np.arange(n), y] -= 1.0
    P /= n
    gW = P.T @ X + l2 * W
    gb = P.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def probe_loss(probe: LinearProbe, X: np.ndarray, labels: Sequence[str], l2: float = 1e-3) -> float:
    y = np.array([probe.class_index(lab) for lab in labels])
    params = np.concatenate([probe.weight.ravel(), probe.bias])
    return _probe_objective(params, np.asarray(X, dtype=np.float64), y, len(probe.classes), l2)[0]


def train_probe(
    features: np.ndarray | FeatureTable,
    labels: Sequence[str] | None = None,
    classes: Sequence[str] | None = None,
    *,
    l2: float = 1e-3,
    gtol: float = 1e-6,
    max_iter: int = 10_000,
) -> LinearProbe:
    """Fit L2-regularised multinomial logistic regression, starting from zeros.

    L-BFGS runs until the gradient norm drops below ``gtol`` or ``max_iter``
    iterations pass. Each class in ``classes`` needs at least one example.
    """
    if isinstance(features, FeatureTable):
        labels = features.labels if labels is None else labels
        X = features.matrix
    else:
        X = np.asarray(features, dtype=np.float64)
    if labels is None:
        raise WeightingError("labels are required")
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise WeightingError(f"feature matrix shape {X.shape} does not match {len(labels)} labels")
    if not np.all(np.isfinite(X)):
        raise WeightingError("features contain non-finite values")
    classes = tuple(classes) if classes is not None else tuple(dict.fromkeys(labels))
    counts = {c: 0 for c in classes}
    for lab in labels:
        if lab not in counts:
            raise WeightingError(f"label {lab!r} not in class order")
        counts[lab] += 1
    missing = [c for c, n in counts.items() if n == 0]
    if missing:
        raise WeightingError(f"classes without training examples: {missing}")
    C, d = len(classes), X.shape[1]
    y = np.array([classes.index(lab) for lab in labels])
    res = minimize(
        _probe_objective,
        np.zeros(C * d + C),
        args=(X, y, C, l2),
        jac=True,
        method="L-BFGS-B",
        # scipy's gtol bounds the max-abs gradient entry; scale it so the 2-norm meets gtol.
        options={"maxiter": max_iter, "gtol": gtol / math.sqrt(C * d + C), "ftol": 0.0, "maxcor": 20},
    )
    params = res.x
    return LinearProbe(params[: C * d].reshape(C, d), params[C * d :], classes)


def logits(probe: LinearProbe, feature: np.ndarray) -> np.ndarray:
    """``W @ x + b``; accepts a single vector or a batch of rows."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape[-1] != probe.weight.shape[1]:
        raise WeightingError(f"feature dimension {x.shape[-1]} != probe dimension {probe.weight.shape[1]}")
    return x @ probe.weight.T + probe.bias


# ---------------------------------------------------------------------------
# temperature scaling

T_MIN, T_MAX = 0.05, 20.0
_INV_PHI = (math.sqrt(5) - 1) / 2


def nll(val_logits: np.ndarray, val_labels: Sequence[int] | np.ndarray, T: float) -> float:
    """Mean negative log-likelihood of the labels under softmax(z / T)."""
    Z = np.asarray(val_logits, dtype=np.float64) / T
    y = np.asarray(val_labels)
    return float(np.mean(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]))


def calibrate_temperature(
    val_logits: np.ndarray | Sequence[Sequence[float]],
    val_labels: Sequence[int] | np.ndarray,
    *,
    bounds: tuple[float, float] = (T_MIN, T_MAX),
    tol: float = 1e-4,
) -> Temperature:
    """Golden-section search for the NLL-minimising temperature on log T.

    Stops once the bracket is narrower than ``tol`` in log T. Falls back to
    T = 1 when that beats the search result (multimodal NLL), so the returned
    temperature never scores worse than leaving the logits untouched.
    """
    Z = np.asarray(val_logits, dtype=np.float64)
    y = np.asarray(val_labels, dtype=int)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise WeightingError("calibration needs at least one validation example")
    if y.shape != (Z.shape[0],):
        raise WeightingError("one label per validation example is required")
    if y.min() < 0 or y.max() >= Z.shape[1]:
        raise WeightingError("validation label outside the class range")
    if not np.all(np.isfinite(Z)):
        raise WeightingError("validation logits contain non-finite values")

    def f(log_t: float) -> float:
        return nll(Z, y, math.exp(log_t))

    a, b = math.log(bounds[0]), math.log(bounds[1])
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    log_t = (a + b) / 2
    if f(log_t) > f(0.0) and bounds[0] <= 1.0 <= bounds[1]:
        log_t = 0.0
    return Temperature(math.exp(log_t))


def confidence(z: np.ndarray, T: Temperature | float, class_index: int) -> float:
    """Softmax probability of ``class_index`` under temperature ``T``."""
    z = np.asarray(z, dtype=np.float64)
    t = T.value if isinstance(T, Temperature) else float(T)
    if not np.all(np.isfinite(z)):
        raise WeightingError("logits contain non-finite values")
    if not 0 <= class_index < z.shape[-1]:
        raise WeightingError(f"class index {class_index} out of range for {z.shape[-1]} logits")
    s = z / t
    s = s - s.max()
    e = np.exp(s)
    return float(e[class_index] / e.sum())


def validation_split(
    labels: Sequence[str], fraction: float = 0.25, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Stratified split of row indices into (train, validation).

    Each class puts ``round(fraction * n)`` rows (at least one) into validation
    and keeps at least one for training. A class with a single row appears in
    both parts.
    """
    if not 0 < fraction < 1:
        raise WeightingError(f"validation fraction must lie in (0, 1), got {fraction}")
    train: list[int] = []
    val: list[int] = []
    for label in dict.fromkeys(labels):
        rows = [i for i, lab in enumerate(labels) if lab == label]
        rng = np.random.Generator(np.random.PCG64(stable_seed("split", seed, label)))
        rows = [rows[i] for i in rng.permutation(len(rows))]
        if len(rows) == 1:
            train += rows
            val += rows
            continue
        n_val = min(max(1, round(fraction * len(rows))), len(rows) - 1)
        val += rows[:n_val]
        train += rows[n_val:]
    return sorted(train), sorted(val)


def score_synthetics(
    manifest: DatasetManifest,
    synthetic_features: FeatureTable,
    probe: LinearProbe,
    T: Temperature,
) -> dict[str, float]:
    """Calibrated confidence of each synthetic for the class of its guiding image."""
    scores: dict[str, float] = {}
    for s in manifest.synthetics:
        z = logits(probe, synthetic_features.feature(s.id))
        scores[s.id] = confidence(z, T, probe.class_index(s.class_label))
    return scores


# ---------------------------------------------------------------------------
# sampling distribution

Kind = Literal["real", "synthetic"]


@dataclass(frozen=True)
class SamplingEntry:
    image_id: str
    kind: Kind
    probability: float


@dataclass(frozen=True)
class SamplingDistribution:
    entries: tuple[SamplingEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise WeightingError("image ids must appear once in a distribution")
        if any(not (e.probability >= 0) for e in self.entries):
            raise WeightingError("probabilities must be nonnegative")
        total = math.fsum(e.probability for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise WeightingError(f"probabilities sum to {total!r}, not 1")

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([e.probability for e in self.entries])

    def as_dict(self) -> dict[str, float]:
        return {e.image_id: e.probability for e in self.entries}

    def mass(self, kind: Kind) -> float:
        return math.fsum(e.probability for e in self.entries if e.kind == kind)


def build_distribution(
    manifest: DatasetManifest,
    scores: Mapping[str, float],
    alpha: float,
) -> SamplingDistribution:
    """Training-sampler probabilities over every real and synthetic image.

    Each of the N real images gets (1 - alpha) / N; its synthetics share
    alpha / N in proportion to their scores. A real image without synthetics
    keeps its whole 1 / N share, and an image whose scores sum to zero
    splits alpha / N evenly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise WeightingError(f"alpha must lie in [0, 1], got {alpha!r}")
    N = len(manifest.reals)
    if N == 0:
        raise WeightingError("distribution needs at least one real image")
    groups = manifest.synthetics_by_parent()
    entries: list[SamplingEntry] = []
    for real in manifest.reals:
        children = groups.get(real.id, [])
        if not children:
            entries.append(SamplingEntry(real.id, "real", 1.0 / N))
            continue
        entries.append(SamplingEntry(real.id, "real", (1.0 - alpha) / N))
        missing = [s.id for s in children if s.id not in scores]
        if missing:
            raise WeightingError(f"missing confidence scores for {missing[:5]}")
        q = [float(scores[s.id]) for s in children]
        if any(not (v >= 0 and math.isfinite(v)) for v in q):
            raise WeightingError(f"scores for {real.id} must be finite and nonnegative")
        total = math.fsum(q)
        if total > 0:
            probs = [alpha * v / total / N for v in q]
        else:
            probs = [alpha / len(q) / N] * len(q)
        entries += [SamplingEntry(s.id, "synthetic", p) for s, p in zip(children, probs)]
    return SamplingDistribution(tuple(entries))


def sample_stream(dist: SamplingDistribution, seed: int, count: int) -> list[str]:
    """``count`` i.i.d. image ids drawn from ``dist`` by inverse-CDF sampling."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    cdf = np.cumsum(dist.probabilities)
    cdf /= cdf[-1]
    u = np.random.Generator(np.random.PCG64(seed)).random(count)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    ids = dist.ids
    return [ids[i] for i in idx]


# ---------------------------------------------------------------------------
# files


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def save_scores(scores: Mapping[str, float], path: str | os.PathLike[str]) -> None:
    atomic_write_text(path, _csv_text(["synthetic_id", "q"], ((k, repr(float(v))) for k, v in scores.items())))


def load_scores(path: str | os.PathLike[str]) -> dict[str, float]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["synthetic_id", "q"]:
            raise WeightingError(f"{path}: header must be synthetic_id,q")
        out = {}
        for row in reader:
            q = float(row["q"])
            if not 0.0 <= q <= 1.0:
                raise WeightingError(f"{path}: score {q} for {row['synthetic_id']} outside [0, 1]")
            out[row["synthetic_id"]] = q
    return out


def save_distribution(dist: SamplingDistribution, path: str | os.PathLike[str]) -> None:
    rows = ((e.image_id, e.kind, repr(e.probability)) for e in dist.entries)
    atomic_write_text(path, _csv_text(["image_id", "kind", "probability"], rows))


def load_distribution(path: str | os.PathLike[str]) -> SamplingDistribution:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["image_id", "kind", "probability"]:
            raise WeightingError(f"{path}: header must be image_id,kind,probability")
        entries = []
        for row in reader:
            if row["kind"] not in ("real", "synthetic"):
                raise WeightingError(f"{path}: unknown kind {row['kind']!r}")
            entries.append(SamplingEntry(row["image_id"], row["kind"], float(row["probability"])))
    return SamplingDistribution(tuple(entries))
