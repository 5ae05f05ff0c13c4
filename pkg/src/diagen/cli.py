"""Command-line front end.

Every subcommand reads one YAML (or JSON) config file. Values resolve in the
order: command-line flag, environment variable, config file, built-in default.

Exit codes: 0 success, 2 configuration or input error, 3 backend transport
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from diagen.backends import BackendError, MockBackend, OrchestrationError, augment, client_from_endpoint
from diagen.core import (
    ConfigError,
    DatasetManifest,
    FeatureTableError,
    ManifestError,
    PipelineConfig,
    TransportError,
    atomic_write_text,
    load_feature_table,
    load_manifest,
    save_feature_table,
    save_manifest,
)
from diagen.embeddings import EmbeddingError, default_token, load_embeddings
from diagen.metrics import MetricsError, evaluate_pair, format_percent, save_report
from diagen.prompts import HttpTextClient, PromptError, load_prompts, request_prompts, save_prompts
from diagen.weighting import (
    T_MAX,
    T_MIN,
    WeightingError,
    build_distribution,
    calibrate_temperature,
    load_distribution,
    logits,
    nll,
    sample_stream,
    save_distribution,
    save_scores,
    score_synthetics,
    train_probe,
    validation_split,
)

log = logging.getLogger("diagen")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 2, 3
INPUT_ERRORS = (
    ConfigError,
    ManifestError,
    FeatureTableError,
    EmbeddingError,
    PromptError,
    MetricsError,
    WeightingError,
    OrchestrationError,
    FileNotFoundError,
    KeyError,
)


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    base_dir: Path
    out_dir: Path
    classes: list[str] | None = None
    paths: dict[str, str] = field(default_factory=dict)
    t2i_endpoint: str | None = None
    llm_endpoint: str | None = None
    fallback: bool = True
    retries: int = 3
    timeout: float = 120.0
    max_in_flight: int = 4
    validation_fraction: float = 0.25
    l2: float = 1e-3
    sample_count: int = 10_000
    per_class: bool = True

    def path(self, key: str, default_name: str | None = None) -> Path:
        """Resolve a configured input path; falls back to ``out_dir/default_name``."""
        value = self.paths.get(key)
        if value is None:
            if default_name is None:
                raise ConfigError(f"paths.{key} is not configured")
            return self.out_dir / default_name
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def output(self, name: str) -> Path:
        return self.out_dir / name


def load_run_config(path: str | None, *, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = p.resolve().parent

    pipeline_raw = dict(raw.get("pipeline") or {})
    if "DIAGEN_SEED" in os.environ:
        try:
            pipeline_raw["master_seed"] = int(os.environ["DIAGEN_SEED"])
        except ValueError:
            raise ConfigError("DIAGEN_SEED must be an integer") from None
    if seed is not None:
        pipeline_raw["master_seed"] = seed
    try:
        pipeline = PipelineConfig.from_dict(pipeline_raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    paths = {k: str(v) for k, v in (raw.get("paths") or {}).items()}
    out_dir = Path(out) if out else Path(paths.get("out_dir", "."))
    if not out_dir.is_absolute():
        out_dir = (Path.cwd() if out else base) / out_dir
    backends = raw.get("backends") or {}
    weigh = raw.get("weigh") or {}
    sample = raw.get("sample") or {}
    evaluate = raw.get("evaluate") or {}
    return RunConfig(
        pipeline=pipeline,
        base_dir=base,
        out_dir=out_dir,
        classes=raw.get("classes"),
        paths=paths,
        t2i_endpoint=os.environ.get("DIAGEN_T2I_ENDPOINT", backends.get("t2i_endpoint")),
        llm_endpoint=os.environ.get("DIAGEN_LLM_ENDPOINT", backends.get("llm_endpoint")),
        fallback=bool(backends.get("fallback", True)),
        retries=int(backends.get("retries", 3)),
        timeout=float(backends.get("timeout", 120.0)),
        max_in_flight=int(backends.get("max_in_flight", 4)),
        validation_fraction=float(weigh.get("validation_fraction", 0.25)),
        l2=float(weigh.get("l2", 1e-3)),
        sample_count=int(sample.get("count", 10_000)),
        per_class=bool(evaluate.get("per_class", True)),
    )


# ---------------------------------------------------------------------------
# helpers


def _input_manifest(cfg: RunConfig) -> DatasetManifest:
    return load_manifest(cfg.path("manifest"))


def _augmented_manifest(cfg: RunConfig) -> DatasetManifest:
    return load_manifest(cfg.path("augmented_manifest", "manifest.json"))


def _class_list(cfg: RunConfig) -> list[str]:
    if cfg.classes:
        return [str(c) for c in cfg.classes]
    if "manifest" in cfg.paths:
        return list(_input_manifest(cfg).classes)
    if "embeddings" in cfg.paths:
        return list(load_embeddings(cfg.path("embeddings")))
    raise ConfigError("no class list: set `classes`, paths.manifest or paths.embeddings")


def _write_json(path: Path, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train_and_calibrate(cfg: RunConfig, manifest: DatasetManifest):
    real_table = load_feature_table(cfg.path("real_features"))
    ids = [r.id for r in manifest.reals]
    missing = [i for i in ids if i not in real_table]
    if missing:
        raise WeightingError(f"no real features for {missing[:5]}")
    table = real_table.select(ids)
    empty = [c for c in manifest.classes if c not in table.labels]
    if empty:
        raise WeightingError(f"classes without real features: {empty}")
    train_rows, val_rows = validation_split(table.labels, cfg.validation_fraction, cfg.pipeline.master_seed)
    X = table.matrix
    labels = list(table.labels)
    probe = train_probe(X[train_rows], [labels[i] for i in train_rows], manifest.classes, l2=cfg.l2)
    z_val = logits(probe, X[val_rows])
    y_val = np.array([probe.class_index(labels[i]) for i in val_rows])
    T = calibrate_temperature(z_val, y_val)
    if min(abs(np.log(T.value / T_MIN)), abs(np.log(T.value / T_MAX))) < 1e-3:
        log.warning("temperature %.4g sits on the search bound; the validation split is likely separable", T.value)
    info = {
        "temperature": T.value,
        "nll_at_1": nll(z_val, y_val, 1.0),
        "nll_at_T": nll(z_val, y_val, T.value),
        "n_train": len(train_rows),
        "n_val": len(val_rows),
    }
    return probe, T, info


# ---------------------------------------------------------------------------
# commands


def cmd_prompts(cfg: RunConfig) -> int:
    classes = _class_list(cfg)
    tokens = {}
    if "embeddings" in cfg.paths:
        tokens = {label: e.token for label, e in load_embeddings(cfg.path("embeddings")).items()}
    client = HttpTextClient(cfg.llm_endpoint, timeout=cfg.timeout) if cfg.llm_endpoint else None
    n = cfg.pipeline.prompts_per_class
    prompts = []
    for i, label in enumerate(classes):
        token = tokens.get(label, default_token(label))
        seed = cfg.pipeline.master_seed + 1000 * i
        prompts += request_prompts(
            client, label, token, n, seed, retries=cfg.retries, fallback=cfg.fallback
        )
    out = cfg.output("prompts.json")
    save_prompts(prompts, out)
    n_llm = sum(p.origin == "llm" for p in prompts)
    print(f"prompts={len(prompts)} llm={n_llm} fallback={len(prompts) - n_llm} -> {out}")
    return EXIT_OK


def cmd_augment(cfg: RunConfig) -> int:
    manifest = _input_manifest(cfg)
    embeddings = load_embeddings(cfg.path("embeddings"))
    prompts = load_prompts(cfg.path("prompts", "prompts.json"))
    endpoint = cfg.t2i_endpoint
    if not endpoint:
        raise ConfigError("no text-to-image endpoint (backends.t2i_endpoint or DIAGEN_T2I_ENDPOINT)")
    if endpoint.startswith("mock:"):
        real_table = load_feature_table(cfg.path("real_features"))
        guiding = {r.image_ref: real_table.feature(r.id) for r in manifest.reals}
        bases = {e.token: e.vector for e in embeddings.values()}
        client = MockBackend.from_endpoint(endpoint, guiding, bases)
    else:
        client = client_from_endpoint(
            endpoint, timeout=cfg.timeout, retries=cfg.retries, image_root=cfg.path("manifest").parent
        )
    run = augment(manifest, embeddings, prompts, client, cfg.pipeline, max_in_flight=cfg.max_in_flight)
    result = run.manifest
    if run.images:
        image_dir = cfg.output("images")
        image_dir.mkdir(parents=True, exist_ok=True)
        stored = []
        for s in result.synthetics:
            if s.id in run.images:
                target = image_dir / (s.id.replace("/", "__") + ".png")
                target.write_bytes(run.images[s.id])
                s = replace(s, image_ref=str(target))
            stored.append(s)
        result = result.with_synthetics(stored)
    save_manifest(result, cfg.output("manifest.json"))
    if run.features is not None:
        save_feature_table(run.features, cfg.output("synthetic_features.csv"))
    if run.failures:
        log.warning("%d generations failed", len(run.failures))
    print(f"reals={len(result.reals)} synthetics={len(result.synthetics)} failures={len(run.failures)}")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    manifest = _augmented_manifest(cfg)
    _, T, info = _train_and_calibrate(cfg, manifest)
    _write_json(cfg.output("calibration.json"), info)
    print(f"T={T.value:.6f}")
    return EXIT_OK


def cmd_weigh(cfg: RunConfig) -> int:
    manifest = _augmented_manifest(cfg)
    syn_path = cfg.path("synthetic_features", "synthetic_features.csv")
    if not syn_path.exists():
        raise FeatureTableError(f"synthetic features not found: {syn_path}")
    syn_table = load_feature_table(syn_path)
    probe, T, info = _train_and_calibrate(cfg, manifest)
    missing = [s.id for s in manifest.synthetics if s.id not in syn_table]
    if missing:
        raise FeatureTableError(f"no synthetic features for {missing[:5]}")
    scores = score_synthetics(manifest, syn_table, probe, T)
    dist = build_distribution(manifest, scores, cfg.pipeline.synthetic_probability)
    save_scores(scores, cfg.output("scores.csv"))
    save_distribution(dist, cfg.output("distribution.csv"))
    _write_json(cfg.output("calibration.json"), info)
    weighted = manifest.with_synthetics(replace(s, confidence=scores[s.id]) for s in manifest.synthetics)
    save_manifest(weighted, cfg.output("manifest.weighted.json"))
    print(f"T={T.value:.6f} real_mass={dist.mass('real'):.6f} synthetic_mass={dist.mass('synthetic'):.6f}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    dist = load_distribution(cfg.path("distribution", "distribution.csv"))
    ids = sample_stream(dist, cfg.pipeline.master_seed, cfg.sample_count)
    atomic_write_text(cfg.output("stream.txt"), "".join(i + "\n" for i in ids))
    print(f"samples={len(ids)}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    real = load_feature_table(cfg.path("real_features"))
    syn = load_feature_table(cfg.path("synthetic_features", "synthetic_features.csv"))
    k = cfg.pipeline.knn_k
    if k >= len(real) or k >= len(syn):
        raise MetricsError(f"k={k} must be smaller than both set sizes ({len(real)}, {len(syn)})")
    report = evaluate_pair(real, syn, k, per_class=cfg.per_class)
    save_report(report, cfg.output("metrics.json"))
    print(format_percent(report))
    return EXIT_OK


HELP = {
    "prompts": "write prompts_per_class prompts for every class",
    "augment": "generate synthetics for every real image",
    "calibrate": "train the probe and fit the temperature only",
    "weigh": "score synthetics and write the sampling distribution",
    "sample": "draw a training stream of image ids",
    "evaluate": "improved precision/recall of real vs synthetic features",
}

COMMANDS = {
    "prompts": cmd_prompts,
    "augment": cmd_augment,
    "calibrate": cmd_calibrate,
    "weigh": cmd_weigh,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diagen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="override pipeline.master_seed")
        p.add_argument("--out", help="output directory (default: paths.out_dir)")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _configure_logging(verbose: int) -> None:
    # A handler on the package logger (not the root) so warnings reach stderr
    # even when the host process already configured logging.
    for h in list(log.handlers):
        if getattr(h, "_diagen_cli", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._diagen_cli = True  # type: ignore[attr-defined]
    log.addHandler(handler)
    log.setLevel(logging.WARNING - 10 * min(verbose, 2))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except TransportError as exc:
        print(f"error: backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
