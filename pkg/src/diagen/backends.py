"""Text-to-image clients and the augmentation loop.

Two backends implement the same ``generate`` call: :class:`HttpImageClient`
talks to an external img2img service, :class:`MockBackend` works directly in
feature space so the whole pipeline can run without any diffusion model.
"""
from __future__ import annotations

import base64
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence
from urllib.parse import parse_qsl

import numpy as np

from diagen import core
from diagen.core import (
    DatasetManifest,
    FeatureTable,
    PipelineConfig,
    RealImageRecord,
    SyntheticImageRecord,
    stable_seed,
)
from diagen.embeddings import ClassEmbedding, perturb, variance_for
from diagen.prompts import ClassPrompt, prompts_by_class

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransportError(BackendError, core.TransportError):
    """The image service was unreachable or returned an unusable reply."""


class GenerationFailed(BackendError):
    """The service answered but reported that generation failed."""


class OrchestrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    prompt_text: str
    embedding_token: str
    embedding_vector: np.ndarray
    guiding_image: str | bytes
    strength: float
    guidance_scale: float
    seed: int
    # Not sent over the wire; lets the mock backend pick a prompt direction.
    prompt_id: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")
        if not self.guidance_scale > 0:
            raise ValueError(f"guidance_scale must be positive, got {self.guidance_scale}")
        n = self.prompt_text.count(self.embedding_token) if self.embedding_token else 0
        if n != 1:
            raise ValueError(f"prompt must contain the embedding token exactly once, found {n}")
        object.__setattr__(self, "embedding_vector", np.asarray(self.embedding_vector, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class GenerationResult:
    seed_used: int
    image: bytes | None = None
    feature: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.image is None) == (self.feature is None):
            raise ValueError("exactly one of image / feature must be set")


class ImageClient(Protocol):
    def generate(self, req: GenerationRequest) -> GenerationResult: ...


def generate_image(client: ImageClient, req: GenerationRequest) -> GenerationResult:
    return client.generate(req)


# ---------------------------------------------------------------------------
# HTTP client


def _guiding_bytes(guiding: str | bytes, root: str | os.PathLike[str] | None = None) -> bytes:
    if isinstance(guiding, bytes):
        return guiding
    path = Path(guiding)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return path.read_bytes()


@dataclass
class HttpImageClient:
    """Client for ``POST {endpoint}/v1/img2img``.

    Relative guiding-image paths are read from ``image_root`` when it is set.
    """

    endpoint: str
    timeout: float = 120.0
    retries: int = 3
    session: object | None = None
    image_root: str | os.PathLike[str] | None = None

    def request_body(self, req: GenerationRequest) -> dict:
        return {
            "prompt": req.prompt_text,
            "embedding_token": req.embedding_token,
            "embedding": [float(x) for x in req.embedding_vector],
            "guiding_image_b64": base64.b64encode(_guiding_bytes(req.guiding_image, self.image_root)).decode("ascii"),
            "strength": float(req.strength),
            "guidance_scale": float(req.guidance_scale),
            "seed": int(req.seed),
        }

    def generate(self, req: GenerationRequest) -> GenerationResult:
        import requests

        http = self.session or requests
        url = self.endpoint.rstrip("/") + "/v1/img2img"
        body = self.request_body(req)
        last: Exception | None = None
        for _ in range(max(1, self.retries)):
            try:
                resp = http.post(url, json=body, timeout=self.timeout)
                payload = resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                continue
            if isinstance(payload, dict) and "error" in payload:
                raise GenerationFailed(str(payload["error"]))
            try:
                image = base64.b64decode(payload["image_b64"], validate=True)
                seed_used = int(payload["seed_used"])
            except (KeyError, TypeError, ValueError) as exc:
                last = exc
                continue
            return GenerationResult(seed_used=seed_used, image=image)
        raise TransportError(f"{url}: {last}")


# ---------------------------------------------------------------------------
# feature-space mock


def unit_direction(key: str, dim: int) -> np.ndarray:
    """A fixed pseudo-random unit vector derived from ``key``."""
    v = np.random.Generator(np.random.PCG64(stable_seed("direction", key))).standard_normal(dim)
    return v / np.linalg.norm(v)


def projection_matrix(feature_dim: int, embedding_dim: int, seed: int = 0) -> np.ndarray:
    """Fixed linear map from embedding space to feature space, entries N(0, 1/embedding_dim)."""
    rng = np.random.Generator(np.random.PCG64(stable_seed("projection", seed, feature_dim, embedding_dim)))
    return rng.standard_normal((feature_dim, embedding_dim)) / math.sqrt(embedding_dim)


def mock_generate(
    req: GenerationRequest,
    guiding_feature: np.ndarray,
    class_directions: Mapping[str, np.ndarray],
    *,
    displacement: float = 2.0,
    noise_scale: float = 0.5,
    projection: np.ndarray | None = None,
    base_embedding: np.ndarray | None = None,
) -> np.ndarray:
    """Feature-space stand-in for img2img.

    Returns ``x + t0 * (displacement * dir(prompt) + noise_scale * g(seed) + P @ delta)``
    where ``x`` is the guiding feature, ``g`` is standard Gaussian noise seeded by
    ``req.seed`` and ``delta`` the embedding perturbation (the embedding itself
    when no base is given). Every displacement scales with the strength, so
    strength 0 returns the guiding feature unchanged.
    """
    x = np.asarray(guiding_feature, dtype=np.float64)
    dim = x.shape[0]
    if req.prompt_id is None or req.prompt_id not in class_directions:
        raise KeyError(f"no mock direction for prompt {req.prompt_id!r}")
    direction = np.asarray(class_directions[req.prompt_id], dtype=np.float64)
    if direction.shape != (dim,):
        raise ValueError(f"direction dimension {direction.shape} does not match feature dimension {dim}")
    t0 = req.strength
    if t0 == 0:
        return x.copy()
    g = np.random.Generator(np.random.PCG64(req.seed)).standard_normal(dim)
    shift = displacement * direction + noise_scale * g
    if projection is not None:
        delta = req.embedding_vector if base_embedding is None else req.embedding_vector - base_embedding
        if projection.shape != (dim, delta.shape[0]):
            raise ValueError(f"projection shape {projection.shape} incompatible with ({dim}, {delta.shape[0]})")
        shift = shift + projection @ delta
    return x + t0 * shift


@dataclass
class MockBackend:
    """Deterministic feature-space backend.

    ``guiding_features`` maps a guiding-image locator to its feature vector.
    Prompt directions come from ``directions`` when given there, otherwise
    they are derived from the prompt text, so identical texts share a
    direction. Requests whose prompt id (or its ``/``-suffix, e.g. ``p3``)
    is in ``fail_prompts`` report a generation failure.
    """

    guiding_features: Mapping[str, np.ndarray]
    base_embeddings: Mapping[str, np.ndarray] = field(default_factory=dict)
    displacement: float = 2.0
    noise_scale: float = 0.5
    projection_scale: float = 1.0
    directions: dict[str, np.ndarray] = field(default_factory=dict)
    fail_prompts: frozenset[str] = frozenset()

    @classmethod
    def from_tables(
        cls,
        manifest: DatasetManifest,
        real_features: FeatureTable,
        embeddings: Mapping[str, ClassEmbedding] | None = None,
        **kwargs,
    ) -> MockBackend:
        guiding = {r.image_ref: real_features.feature(r.id) for r in manifest.reals}
        bases = {e.token: e.vector for e in (embeddings or {}).values()}
        return cls(guiding_features=guiding, base_embeddings=bases, **kwargs)

    @classmethod
    def from_endpoint(cls, endpoint: str, guiding_features, base_embeddings=None) -> MockBackend:
        """Build from ``mock:`` or ``mock:lambda=2&noise=0.5&fail=p3`` style endpoints."""
        if not endpoint.startswith("mock:"):
            raise ValueError(f"not a mock endpoint: {endpoint!r}")
        params: dict = {}
        fail: set[str] = set()
        for key, value in parse_qsl(endpoint[5:].lstrip("/?")):
            if key in ("lambda", "displacement"):
                params["displacement"] = float(value)
            elif key in ("noise", "noise_scale"):
                params["noise_scale"] = float(value)
            elif key in ("projection", "projection_scale"):
                params["projection_scale"] = float(value)
            elif key == "fail":
                fail.update(v for v in value.split(",") if v)
            else:
                raise ValueError(f"unknown mock parameter {key!r}")
        return cls(
            guiding_features=guiding_features,
            base_embeddings=base_embeddings or {},
            fail_prompts=frozenset(fail),
            **params,
        )

    def direction_for(self, prompt_id: str, prompt_text: str, dim: int) -> np.ndarray:
        if prompt_id in self.directions:
            return np.asarray(self.directions[prompt_id], dtype=np.float64)
        return unit_direction(prompt_text, dim)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        if req.prompt_id is not None and (
            req.prompt_id in self.fail_prompts or req.prompt_id.rsplit("/", 1)[-1] in self.fail_prompts
        ):
            raise GenerationFailed(f"injected failure for prompt {req.prompt_id}")
        key = req.guiding_image if isinstance(req.guiding_image, str) else None
        if key is None or key not in self.guiding_features:
            raise GenerationFailed(f"mock backend has no feature for guiding image {key!r}")
        x = np.asarray(self.guiding_features[key], dtype=np.float64)
        pid = req.prompt_id or req.prompt_text
        directions = {pid: self.direction_for(pid, req.prompt_text, x.shape[0])}
        base = self.base_embeddings.get(req.embedding_token)
        projection = None
        if self.projection_scale:
            projection = self.projection_scale * projection_matrix(x.shape[0], req.embedding_vector.shape[0])
        feature = mock_generate(
            replace(req, prompt_id=pid),
            x,
            directions,
            displacement=self.displacement,
            noise_scale=self.noise_scale,
            projection=projection,
            base_embedding=None if base is None else np.asarray(base, dtype=np.float64),
        )
        feature.setflags(write=False)
        return GenerationResult(seed_used=req.seed, feature=feature)


def client_from_endpoint(
    endpoint: str,
    *,
    guiding_features: Mapping[str, np.ndarray] | None = None,
    base_embeddings: Mapping[str, np.ndarray] | None = None,
    timeout: float = 120.0,
    retries: int = 3,
    image_root: str | os.PathLike[str] | None = None,
) -> ImageClient:
    if endpoint.startswith("mock:"):
        return MockBackend.from_endpoint(endpoint, guiding_features or {}, base_embeddings)
    return HttpImageClient(endpoint, timeout=timeout, retries=retries, image_root=image_root)


# ---------------------------------------------------------------------------
# orchestration


def synthetic_id(real_id: str, m: int) -> str:
    return f"{real_id}/syn{m:02d}"


def noise_seed_for(master_seed: int, real_id: str, m: int) -> int:
    return stable_seed(master_seed, real_id, m, "noise")


def generation_seed_for(master_seed: int, real_id: str, m: int) -> int:
    return stable_seed(master_seed, real_id, m, "generation")


@dataclass
class AugmentationRun:
    manifest: DatasetManifest
    # Synthetic features in manifest order; None unless the backend returns features.
    features: FeatureTable | None
    failures: list[tuple[str, str]]
    images: dict[str, bytes] = field(default_factory=dict)


def build_request(
    real: RealImageRecord,
    m: int,
    prompt: ClassPrompt,
    embedding: ClassEmbedding,
    config: PipelineConfig,
) -> tuple[GenerationRequest, SyntheticImageRecord]:
    """Request and provenance record for synthetic ``m`` of guiding image ``real``."""
    variance = variance_for(m, config, real.class_label)
    nseed = noise_seed_for(config.master_seed, real.id, m)
    gseed = generation_seed_for(config.master_seed, real.id, m)
    noisy = perturb(embedding, variance, nseed)
    req = GenerationRequest(
        prompt_text=prompt.text,
        embedding_token=embedding.token,
        embedding_vector=noisy.vector,
        guiding_image=real.image_ref,
        strength=config.strength,
        guidance_scale=config.guidance_scale,
        seed=gseed,
        prompt_id=prompt.id,
    )
    record = SyntheticImageRecord(
        id=synthetic_id(real.id, m),
        parent_real_id=real.id,
        class_label=real.class_label,
        prompt_id=prompt.id,
        noise_variance=variance,
        noise_seed=nseed,
        generation_seed=gseed,
    )
    return req, record


def augment(
    manifest: DatasetManifest,
    embeddings: Mapping[str, ClassEmbedding],
    prompts: Sequence[ClassPrompt] | Mapping[str, Sequence[ClassPrompt]],
    client: ImageClient,
    config: PipelineConfig,
    *,
    max_in_flight: int = 4,
) -> AugmentationRun:
    """Generate ``config.synthetics_per_real`` synthetics for every real image.

    Synthetic ``m`` of each guiding image uses the class's ``m``-th prompt.
    Failed generations are logged and skipped; results are merged in
    (real, m) order regardless of completion order.
    """
    by_class = dict(prompts) if isinstance(prompts, Mapping) else prompts_by_class(prompts)
    M = config.synthetics_per_real
    for label in sorted({r.class_label for r in manifest.reals}):
        if label not in embeddings:
            raise OrchestrationError(f"no embedding for class {label!r}")
        if len(by_class.get(label, ())) < M:
            raise OrchestrationError(
                f"class {label!r} has {len(by_class.get(label, ()))} prompts, needs {M}"
            )

    jobs = []
    for real in manifest.reals:
        for m in range(M):
            jobs.append(build_request(real, m, by_class[real.class_label][m], embeddings[real.class_label], config))

    def run(job):
        req, record = job
        try:
            return record, generate_image(client, req), None
        except BackendError as exc:
            return record, None, exc

    if max_in_flight > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(j) for j in jobs]

    synthetics: list[SyntheticImageRecord] = []
    feats: list[np.ndarray] = []
    images: dict[str, bytes] = {}
    failures: list[tuple[str, str]] = []
    transport_errors = 0
    for record, result, err in outcomes:
        if err is not None:
            log.warning("generation failed for %s (prompt %s): %s", record.id, record.prompt_id, err)
            failures.append((record.id, str(err)))
            transport_errors += isinstance(err, TransportError)
            continue
        synthetics.append(record)
        if result.feature is not None:
            feats.append(result.feature)
        else:
            images[record.id] = result.image

    if jobs and not synthetics and transport_errors:
        raise TransportError(f"all {len(jobs)} generations failed; last error: {failures[-1][1]}")

    per_class = {label: 0 for label in {r.class_label for r in manifest.reals}}
    for s in synthetics:
        per_class[s.class_label] += 1
    empty = sorted(label for label, n in per_class.items() if n == 0)
    if empty:
        log.warning("no successful generations for classes: %s", ", ".join(empty))

    out = replace(
        manifest,
        synthetics=tuple(manifest.synthetics) + tuple(synthetics),
        config_fingerprint=config.fingerprint(),
    )
    table = None
    if feats and len(feats) == len(synthetics):
        table = FeatureTable(
            tuple(s.id for s in synthetics), tuple(s.class_label for s in synthetics), np.vstack(feats)
        )
    return AugmentationRun(out, table, failures, images)


def orchestrate_augmentation(
    manifest: DatasetManifest,
    embeddings: Mapping[str, ClassEmbedding],
    prompts: Sequence[ClassPrompt] | Mapping[str, Sequence[ClassPrompt]],
    client: ImageClient,
    config: PipelineConfig,
    **kwargs,
) -> DatasetManifest:
    return augment(manifest, embeddings, prompts, client, config, **kwargs).manifest


def regenerate(
    record: SyntheticImageRecord,
    manifest: DatasetManifest,
    embeddings: Mapping[str, ClassEmbedding],
    prompts: Sequence[ClassPrompt],
    client: ImageClient,
    config: PipelineConfig,
) -> GenerationResult:
    """Re-issue the request recorded in a synthetic's provenance."""
    real = manifest.real_by_id()[record.parent_real_id]
    prompt = next(p for p in prompts if p.id == record.prompt_id)
    embedding = embeddings[record.class_label]
    noisy = perturb(embedding, record.noise_variance, record.noise_seed)
    req = GenerationRequest(
        prompt_text=prompt.text,
        embedding_token=embedding.token,
        embedding_vector=noisy.vector,
        guiding_image=real.image_ref,
        strength=config.strength,
        guidance_scale=config.guidance_scale,
        seed=record.generation_seed,
        prompt_id=prompt.id,
    )
    return generate_image(client, req)


def image_client_from_env(**kwargs) -> ImageClient | None:
    endpoint = os.environ.get("DIAGEN_T2I_ENDPOINT")
    return client_from_endpoint(endpoint, **kwargs) if endpoint else None
