"""Dataset manifest, feature tables and pipeline configuration.

Every other module exchanges data through the types defined here. Manifests
persist as a single JSON document, feature tables as CSV.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class ManifestError(ValueError):
    pass


class FeatureTableError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TransportError(RuntimeError):
    """An external service was unreachable or answered with unusable data."""


@dataclass(frozen=True)
class RealImageRecord:
    id: str
    class_label: str
    image_ref: str
    feature_row: int | None = None


@dataclass(frozen=True)
class SyntheticImageRecord:
    id: str
    parent_real_id: str
    class_label: str
    prompt_id: str
    noise_variance: float
    noise_seed: int
    generation_seed: int
    confidence: float | None = None
    # Locator of the stored image; None for feature-space (mock) generations.
    image_ref: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    reals: tuple[RealImageRecord, ...] = ()
    synthetics: tuple[SyntheticImageRecord, ...] = ()
    config_fingerprint: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "reals", tuple(self.reals))
        object.__setattr__(self, "synthetics", tuple(self.synthetics))

    def real_by_id(self) -> dict[str, RealImageRecord]:
        return {r.id: r for r in self.reals}

    def synthetics_by_parent(self) -> dict[str, list[SyntheticImageRecord]]:
        """Group synthetics under their guiding image, preserving manifest order."""
        groups: dict[str, list[SyntheticImageRecord]] = {r.id: [] for r in self.reals}
        for s in self.synthetics:
            groups.setdefault(s.parent_real_id, []).append(s)
        return groups

    def with_synthetics(self, synthetics: Iterable[SyntheticImageRecord]) -> DatasetManifest:
        return replace(self, synthetics=tuple(synthetics))


@dataclass(frozen=True)
class PipelineConfig:
    examples_per_class: int = 8
    synthetics_per_real: int = 10
    prompts_per_class: int = 10
    noise_variances: tuple[float, ...] = (0.005, 0.01, 0.025)
    strength: float = 0.7
    guidance_scale: float = 15.0
    synthetic_probability: float = 0.7
    knn_k: int = 5
    master_seed: int = 0
    # Optional per-class replacement for noise_variances.
    class_noise_variances: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "noise_variances", tuple(float(v) for v in self.noise_variances))
        object.__setattr__(
            self,
            "class_noise_variances",
            {str(k): tuple(float(x) for x in v) for k, v in self.class_noise_variances.items()},
        )
        for name in ("examples_per_class", "synthetics_per_real", "prompts_per_class", "knn_k"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("strength", "synthetic_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")
        if not self.guidance_scale > 0:
            raise ConfigError(f"guidance_scale must be positive, got {self.guidance_scale!r}")
        all_variances = list(self.noise_variances)
        for v in self.class_noise_variances.values():
            all_variances.extend(v)
        if any(not (v >= 0 and math.isfinite(v)) for v in all_variances):
            raise ConfigError("noise variances must be finite and nonnegative")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["noise_variances"] = list(self.noise_variances)
        d["class_noise_variances"] = {k: list(v) for k, v in sorted(self.class_noise_variances.items())}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def stable_seed(*parts: Any) -> int:
    """Derive a 63-bit seed from arbitrary JSON-serialisable parts.

    The mapping is independent of process, platform and call order, so seeds
    for distinct (image, index) pairs can be derived in parallel.
    """
    digest = hashlib.sha256(canonical_json(list(parts))).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def atomic_write_text(path: str | os.PathLike[str], text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# manifest


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return one message per broken invariant; an empty list means valid.

    Each message starts with the offending record id and a rule name.
    """
    violations: list[str] = []
    classes = set(manifest.classes)
    if len(classes) != len(manifest.classes):
        violations.append("<classes>: duplicate-class: class list contains duplicates")
    seen: set[str] = set()
    reals = {}
    for r in manifest.reals:
        if r.id in seen:
            violations.append(f"{r.id}: duplicate-id: id appears more than once")
        seen.add(r.id)
        reals[r.id] = r
        if r.class_label not in classes:
            violations.append(f"{r.id}: unknown-class: {r.class_label!r} not in class list")
    for s in manifest.synthetics:
        if s.id in seen:
            violations.append(f"{s.id}: duplicate-id: id appears more than once")
        seen.add(s.id)
        parent = reals.get(s.parent_real_id)
        if parent is None:
            violations.append(f"{s.id}: missing-parent: parent {s.parent_real_id!r} not in reals")
        elif parent.class_label != s.class_label:
            violations.append(
                f"{s.id}: label-mismatch: {s.class_label!r} differs from parent label {parent.class_label!r}"
            )
        if s.class_label not in classes:
            violations.append(f"{s.id}: unknown-class: {s.class_label!r} not in class list")
        if not (s.noise_variance >= 0 and math.isfinite(s.noise_variance)):
            violations.append(f"{s.id}: variance-range: noise_variance {s.noise_variance!r} must be >= 0")
        if s.confidence is not None and not 0.0 <= s.confidence <= 1.0:
            violations.append(f"{s.id}: confidence-range: confidence {s.confidence!r} outside [0, 1]")
    return violations


def manifest_to_dict(manifest: DatasetManifest) -> dict[str, Any]:
    return {
        "classes": list(manifest.classes),
        "reals": [asdict(r) for r in manifest.reals],
        "synthetics": [asdict(s) for s in manifest.synthetics],
        "config_fingerprint": manifest.config_fingerprint,
    }


def manifest_from_dict(data: dict[str, Any]) -> DatasetManifest:
    try:
        return DatasetManifest(
            classes=tuple(data["classes"]),
            reals=tuple(RealImageRecord(**r) for r in data["reals"]),
            synthetics=tuple(SyntheticImageRecord(**s) for s in data["synthetics"]),
            config_fingerprint=data.get("config_fingerprint", ""),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest document: {exc}") from exc


def manifest_fingerprint(manifest: DatasetManifest) -> str:
    return sha256_hex(canonical_json(manifest_to_dict(manifest)))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike[str]) -> None:
    violations = validate_manifest(manifest)
    if violations:
        raise ManifestError("refusing to save invalid manifest:\n  " + "\n  ".join(violations))
    text = json.dumps(manifest_to_dict(manifest), indent=2, allow_nan=False)
    atomic_write_text(path, text + "\n")


def load_manifest(path: str | os.PathLike[str]) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    manifest = manifest_from_dict(data)
    violations = validate_manifest(manifest)
    if violations:
        raise ManifestError(f"{path}: invalid manifest:\n  " + "\n  ".join(violations))
    return manifest


# ---------------------------------------------------------------------------
# feature tables


@dataclass(frozen=True, eq=False)
class FeatureTable:
    ids: tuple[str, ...]
    labels: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim == 1 and matrix.size == 0:
            matrix = matrix.reshape(0, 1)
        if matrix.ndim != 2 or matrix.shape[1] < 1:
            raise FeatureTableError(f"feature matrix must be P x D with D >= 1, got shape {matrix.shape}")
        ids = tuple(self.ids)
        labels = tuple(self.labels)
        if not len(ids) == len(labels) == matrix.shape[0]:
            raise FeatureTableError(
                f"row count mismatch: {len(ids)} ids, {len(labels)} labels, {matrix.shape[0]} rows"
            )
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FeatureTableError(f"duplicate ids: {dupes}")
        matrix.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "_index", {i: n for n, i in enumerate(ids)})

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._index  # type: ignore[attr-defined]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.labels == other.labels
            and np.array_equal(self.matrix, other.matrix)
        )

    def row_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"no feature row for id {image_id!r}") from None

    def feature(self, image_id: str) -> np.ndarray:
        return self.matrix[self.row_of(image_id)]

    def select(self, ids: Sequence[str]) -> FeatureTable:
        rows = [self.row_of(i) for i in ids]
        return FeatureTable(
            tuple(ids), tuple(self.labels[r] for r in rows), self.matrix[rows] if rows else np.empty((0, self.dim))
        )

    def rows_for_label(self, label: str) -> np.ndarray:
        mask = np.array([lab == label for lab in self.labels], dtype=bool)
        return self.matrix[mask] if len(mask) else np.empty((0, self.dim))

    @classmethod
    def concat(cls, tables: Sequence[FeatureTable]) -> FeatureTable:
        if not tables:
            raise FeatureTableError("nothing to concatenate")
        return cls(
            tuple(i for t in tables for i in t.ids),
            tuple(lab for t in tables for lab in t.labels),
            np.vstack([t.matrix for t in tables]),
        )


def load_feature_table(path: str | os.PathLike[str]) -> FeatureTable:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureTableError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "id" or header[1] != "label":
            raise FeatureTableError(f"{path}: header must be id,label,f0,...; got {header[:3]}")
        dim = len(header) - 2
        ids: list[str] = []
        labels: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 2 != dim:
                raise FeatureTableError(
                    f"{path}:{lineno}: ragged row: expected {dim} features, got {len(row) - 2}"
                )
            try:
                values = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise FeatureTableError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            ids.append(row[0])
            labels.append(row[1])
            rows.append(values)
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureTable(tuple(ids), tuple(labels), matrix)


def save_feature_table(table: FeatureTable, path: str | os.PathLike[str]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label"] + [f"f{j}" for j in range(table.dim)])
    for image_id, label, row in zip(table.ids, table.labels, table.matrix):
        # repr() round-trips float64 exactly.
        writer.writerow([image_id, label] + [repr(float(x)) for x in row])
    atomic_write_text(path, buf.getvalue())
