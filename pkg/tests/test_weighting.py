from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import calibrated_logit_set, eq2_oracle, grid_search_temperature, nll_grid

from diagen.core import DatasetManifest, RealImageRecord, SyntheticImageRecord
from diagen.weighting import (
    LinearProbe,
    Temperature,
    WeightingError,
    build_distribution,
    calibrate_temperature,
    confidence,
    load_distribution,
    load_scores,
    logits,
    nll,
    probe_loss,
    sample_stream,
    save_distribution,
    save_scores,
    train_probe,
    validation_split,
)

# Objective reached by 200k steps of full-batch gradient descent (tests/oracles.py,
# gd_probe_loss) on the three-blob problem below; frozen to keep the suite fast.
GD_ORACLE_LOSS = 0.22535898179072142


def _blobs():
    rng = np.random.default_rng(3)
    centers = np.array([[0, 0], [3, 0], [0, 3]], float)
    X = np.concatenate([rng.normal(c, 1.0, (8, 2)) for c in centers])
    return X, [c for c in "abc" for _ in range(8)]


# --- probe ------------------------------------------------------------------------


def test_probe_matches_gradient_descent_oracle():
    X, labels = _blobs()
    probe = train_probe(X, labels)
    assert abs(probe_loss(probe, X, labels) - GD_ORACLE_LOSS) < 1e-3
    assert probe.classes == ("a", "b", "c")


def test_probe_separable_training_accuracy():
    X = np.array([[-2.0, 0], [-3, 1], [-2.5, -1], [2, 0], [3, 1], [2.5, -1]])
    labels = ["neg"] * 3 + ["pos"] * 3
    probe = train_probe(X, labels)
    pred = np.argmax(logits(probe, X), axis=1)
    assert [probe.classes[i] for i in pred] == labels


def test_probe_single_example_per_class():
    probe = train_probe(np.array([[0.0, 1.0], [1.0, 0.0]]), ["x", "y"])
    z = logits(probe, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.argmax(z[0]) == 0 and np.argmax(z[1]) == 1


def test_probe_input_errors():
    with pytest.raises(WeightingError, match="without training"):
        train_probe(np.zeros((2, 2)), ["a", "a"], classes=["a", "b"])
    with pytest.raises(WeightingError, match="non-finite"):
        train_probe(np.array([[np.nan, 0.0]]), ["a"])
    with pytest.raises(WeightingError):
        logits(train_probe(np.eye(2), ["a", "b"]), np.zeros(3))


def test_logits_formula():
    probe = LinearProbe(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.5, -0.5]), ("a", "b"))
    np.testing.assert_array_equal(logits(probe, [1.0, 1.0]), [1.5, 1.5])
    np.testing.assert_array_equal(logits(probe, [[2.0, 0.0]]), [[2.5, -0.5]])


# --- confidence and temperature ---------------------------------------------------


def test_confidence_examples():
    assert confidence(np.array([2.0, 2.0]), Temperature(1.0), 0) == pytest.approx(0.5, abs=1e-12)
    z = np.array([math.log(4.0), 0.0])
    assert confidence(z, 1.0, 0) == pytest.approx(0.8, abs=1e-12)
    assert confidence(np.array([5.0, 1.0, -3.0]), 1e6, 2) == pytest.approx(1 / 3, abs=1e-5)
    # large logits do not overflow
    assert confidence(np.array([1000.0, 0.0]), 1.0, 0) == 1.0


def test_confidence_errors():
    with pytest.raises(WeightingError):
        confidence(np.array([1.0, np.inf]), 1.0, 0)
    with pytest.raises(WeightingError):
        confidence(np.array([1.0, 2.0]), 1.0, 2)
    with pytest.raises(ValueError):
        Temperature(0.0)


def test_calibration_recovers_unit_temperature():
    Z, y = calibrated_logit_set()
    T = calibrate_temperature(Z, y)
    assert abs(T.value - 1.0) <= 0.01
    t_grid, nll_best = grid_search_temperature(Z, y)
    assert t_grid == pytest.approx(1.0, abs=2e-3)
    assert nll(Z, y, T.value) <= nll_best + 1e-3


def test_calibration_recovers_scaled_temperature():
    Z, y = calibrated_logit_set()
    T = calibrate_temperature(3 * Z, y)
    assert abs(T.value - 3.0) <= 0.03
    _, nll_best = grid_search_temperature(3 * Z, y)
    assert nll(3 * Z, y, T.value) <= nll_best + 1e-3


def test_calibration_never_worse_than_identity():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(40, 4)) * 4
    y = rng.integers(0, 4, 40)
    T = calibrate_temperature(Z, y)
    assert nll(Z, y, T.value) <= nll(Z, y, 1.0) + 1e-12
    grid = nll_grid(Z, y, np.arange(0.05, 20.0, 1e-3))
    assert nll(Z, y, T.value) <= grid.min() + 1e-3


def test_temperature_preserves_argmax():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(30, 5))
    y = rng.integers(0, 5, 30)
    T = calibrate_temperature(Z, y)
    scaled = np.array([[confidence(z, T, c) for c in range(5)] for z in Z])
    np.testing.assert_array_equal(scaled.argmax(axis=1), Z.argmax(axis=1))


def test_calibration_input_errors():
    with pytest.raises(WeightingError):
        calibrate_temperature(np.zeros((0, 3)), [])
    with pytest.raises(WeightingError):
        calibrate_temperature(np.zeros((2, 3)), [0, 3])


def test_validation_split_stratified():
    labels = ["a"] * 8 + ["b"] * 4 + ["c"]
    train, val = validation_split(labels, 0.25, seed=0)
    assert sorted({labels[i] for i in val}) == ["a", "b", "c"]
    assert sorted({labels[i] for i in train}) == ["a", "b", "c"]
    assert sum(labels[i] == "a" for i in val) == 2
    assert set(train) & set(val) == {12}  # singleton class shared
    assert validation_split(labels, 0.25, seed=0) == (train, val)


# --- sampling distribution ---------------------------------------------------------


def _manifest(scores_per_real):
    reals, syns = [], []
    for n, qs in enumerate(scores_per_real):
        reals.append(RealImageRecord(f"r{n}", "c", f"r{n}.png"))
        for m, _ in enumerate(qs):
            syns.append(SyntheticImageRecord(f"r{n}/syn{m:02d}", f"r{n}", "c", f"c/p{m}", 0.01, 0, 1))
    scores = {f"r{n}/syn{m:02d}": q for n, qs in enumerate(scores_per_real) for m, q in enumerate(qs)}
    return DatasetManifest(("c",), reals, syns), scores


def test_distribution_uniform_scores():
    manifest, scores = _manifest([[0.5, 0.5], [0.5, 0.5]])
    dist = build_distribution(manifest, scores, 0.7).as_dict()
    assert dist["r0"] == pytest.approx(0.15, abs=1e-12)
    assert dist["r1"] == pytest.approx(0.15, abs=1e-12)
    for k, v in dist.items():
        if "syn" in k:
            assert v == pytest.approx(0.175, abs=1e-12)


def test_distribution_weighted_scores():
    manifest, scores = _manifest([[0.8, 0.2], [0.5, 0.5]])
    dist = build_distribution(manifest, scores, 0.7).as_dict()
    expected = {"r0": 0.15, "r0/syn00": 0.28, "r0/syn01": 0.07, "r1": 0.15, "r1/syn00": 0.175, "r1/syn01": 0.175}
    for k, v in expected.items():
        assert dist[k] == pytest.approx(v, abs=1e-12)


def test_distribution_real_without_synthetics():
    manifest, scores = _manifest([[0.9, 0.1], []])
    d = build_distribution(manifest, scores, 0.7)
    assert d.as_dict()["r1"] == pytest.approx(0.5, abs=1e-12)
    assert math.fsum(d.probabilities) == pytest.approx(1.0, abs=1e-9)


def test_distribution_zero_scores_split_evenly():
    manifest, scores = _manifest([[0.0, 0.0, 0.0]])
    d = build_distribution(manifest, scores, 0.6).as_dict()
    assert d["r0"] == pytest.approx(0.4)
    assert d["r0/syn01"] == pytest.approx(0.2)


def test_distribution_alpha_extremes():
    manifest, scores = _manifest([[0.4, 0.6], [0.1, 0.3]])
    d0 = build_distribution(manifest, scores, 0.0)
    assert d0.mass("synthetic") == 0.0 and d0.mass("real") == pytest.approx(1.0)
    d1 = build_distribution(manifest, scores, 1.0)
    assert d1.mass("real") == 0.0
    with pytest.raises(WeightingError):
        build_distribution(manifest, scores, 1.5)


def test_distribution_missing_score():
    manifest, scores = _manifest([[0.4, 0.6]])
    del scores["r0/syn01"]
    with pytest.raises(WeightingError, match="missing"):
        build_distribution(manifest, scores, 0.7)


score_lists = st.lists(
    st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6),
    min_size=1,
    max_size=6,
)


@settings(max_examples=80, deadline=None)
@given(per_real=score_lists, alpha=st.floats(0.0, 1.0), scale=st.floats(0.05, 0.99))
def test_distribution_properties(per_real, alpha, scale):
    manifest, scores = _manifest(per_real)
    d = build_distribution(manifest, scores, alpha)
    probs = d.as_dict()
    assert abs(math.fsum(probs.values()) - 1.0) <= 1e-9
    assert d.mass("real") == pytest.approx(1 - alpha, abs=1e-9)
    oracle = eq2_oracle(per_real, alpha)
    for n, (real_p, syn_ps) in enumerate(oracle):
        assert probs[f"r{n}"] == pytest.approx(float(real_p), abs=1e-12)
        for m, p in enumerate(syn_ps):
            assert probs[f"r{n}/syn{m:02d}"] == pytest.approx(float(p), abs=1e-12)
    # scaling all scores of one guiding image leaves the distribution unchanged
    scaled = dict(scores)
    for m in range(len(per_real[0])):
        scaled[f"r0/syn{m:02d}"] *= scale
    d2 = build_distribution(manifest, scaled, alpha).as_dict()
    for k in probs:
        assert d2[k] == pytest.approx(probs[k], abs=1e-12)


# --- sampler and files --------------------------------------------------------------


def test_sampler_frequencies_within_binomial_bounds():
    manifest, scores = _manifest([[0.8, 0.2], [0.5, 0.5]])
    d = build_distribution(manifest, scores, 0.7)
    n = 100_000
    draws = sample_stream(d, seed=123, count=n)
    for e in d.entries:
        freq = draws.count(e.image_id) / n
        sd = math.sqrt(e.probability * (1 - e.probability) / n)
        assert abs(freq - e.probability) <= 4 * sd


def test_sampler_deterministic():
    manifest, scores = _manifest([[0.8, 0.2]])
    d = build_distribution(manifest, scores, 0.7)
    assert sample_stream(d, 5, 50) == sample_stream(d, 5, 50)
    assert sample_stream(d, 5, 50) != sample_stream(d, 6, 50)
    zero = build_distribution(manifest, scores, 0.0)
    assert set(sample_stream(zero, 1, 200)) == {"r0"}


def test_scores_and_distribution_round_trip(tmp_path):
    manifest, scores = _manifest([[0.123456789012345, 0.2], [1.0 / 3.0]])
    save_scores(scores, tmp_path / "s.csv")
    assert load_scores(tmp_path / "s.csv") == scores
    d = build_distribution(manifest, scores, 0.7)
    save_distribution(d, tmp_path / "d.csv")
    assert load_distribution(tmp_path / "d.csv") == d
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "image_id,kind,probability"
