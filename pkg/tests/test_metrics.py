import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaclab.data import Pair
from gaclab.metrics import (
    best_threshold_accuracy, biasness, correlation_histogram, fairness_report, kl_divergence,
    ratio_distribution, relative_entropy, verification_accuracy,
)


def brute_force_accuracy(scores, genuine):
    """Try every threshold below, between and above the distinct scores."""
    s = np.asarray(scores, float)
    y = np.asarray(genuine, bool)
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1], (u[:-1] + u[1:]) / 2, [u[-1] + 1]])
    return max(np.mean((s > t) == y) for t in cands)


def test_threshold_examples():
    assert best_threshold_accuracy([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0])[0] == 1.0
    assert best_threshold_accuracy([0.3] * 4, [1, 1, 0, 0])[0] == 0.5
    assert best_threshold_accuracy([0.8, 0.6, 0.7, 0.1], [1, 1, 0, 0])[0] == 0.75


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=1, max_size=30))
def test_threshold_sweep_matches_brute_force(rows):
    scores = [r[0] / 5 for r in rows]
    genuine = [r[1] for r in rows]
    acc, thr = best_threshold_accuracy(scores, genuine)
    assert acc == pytest.approx(brute_force_accuracy(scores, genuine))
    assert np.mean((np.asarray(scores) > thr) == np.asarray(genuine)) == pytest.approx(acc)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_verification_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(-1, 1, size=40)
    genuine = rng.random(40) < 0.5
    a = best_threshold_accuracy(scores, genuine)[0]
    for f in (np.exp, lambda x: x ** 3, lambda x: 2 * x + 7, np.arctan):
        assert best_threshold_accuracy(f(scores), genuine)[0] == a


def test_verification_accuracy_per_group():
    emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.05]])
    pairs = [Pair(0, 1, True, 0), Pair(0, 2, False, 0), Pair(3, 5, True, 1), Pair(3, 4, False, 1)]
    assert verification_accuracy(pairs, emb) == {0: 1.0, 1: 1.0}


# biasness ---------------------------------------------------------------------------

@pytest.mark.parametrize("accs,std,avg", [
    ((96.20, 94.77, 94.87, 94.98), 0.58, 95.205),
    ((96.27, 95.00, 94.82, 94.68), 0.63, None),
    ((95.95, 93.67, 94.33, 94.78), 0.83, None),
])
def test_biasness_published_rows(accs, std, avg):
    s, a = biasness(accs)
    assert abs(s - std) <= 0.005
    if avg is not None:
        assert a == pytest.approx(avg, abs=1e-9)


def test_biasness_examples():
    assert biasness([2.0, 2.0, 2.0])[0] == 0
    assert biasness([1, 3]) == (1.0, 2.0)
    with pytest.raises(ValueError):
        biasness([1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=8), st.floats(-50, 50), st.floats(0.01, 10))
def test_biasness_shift_and_scale(accs, shift, scale):
    s, _ = biasness(accs)
    assert biasness([a + shift for a in accs])[0] == pytest.approx(s, abs=1e-9)
    assert biasness([a * scale for a in accs])[0] == pytest.approx(s * scale, rel=1e-9, abs=1e-9)


# ratios --------------------------------------------------------------------------------

def test_ratio_example():
    emb = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.0, 1.0]])
    r = ratio_distribution(emb, [0, 0, 1, 1], [0, 0, 0, 0])
    # subject 1 has identical images and is dropped
    assert r[0] == [pytest.approx(np.sqrt(0.8) / np.sqrt(0.4))]
    assert r[0][0] == pytest.approx(1.414, abs=1e-3)


def test_ratio_duplication_invariance():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(12, 4))
    ids = np.repeat(np.arange(4), 3)
    groups = np.repeat([0, 0, 1, 1], 3)
    a = ratio_distribution(emb, ids, groups)
    b = ratio_distribution(np.vstack([emb, emb]), np.concatenate([ids, ids]), np.concatenate([groups, groups]))
    assert a == b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ratio_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(15, 5))
    ids = np.repeat(np.arange(5), 3)
    groups = np.array([0] * 9 + [1] * 6)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a, b = ratio_distribution(emb, ids, groups), ratio_distribution(emb @ q, ids, groups)
    for g in a:
        np.testing.assert_allclose(a[g], b[g], rtol=1e-10)


# relative entropy ------------------------------------------------------------------------

def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.1438, abs=1e-3)
    r = relative_entropy({0: [0.1, 0.5, 0.9], 1: [0.2, 0.3]}, reference_group=0)
    assert r[0] == 0.0 and r[1] > 0


def test_kl_self_is_zero_for_any_group():
    sets = {0: [1.0, 2.0], 1: [1.0, 2.0]}
    assert relative_entropy(sets, 0)[1] == pytest.approx(0.0, abs=1e-12)


def test_kl_non_negative_over_1000_seeds():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        sets = {g: rng.gamma(2.0, 1.0 + g, size=rng.integers(1, 30)) for g in range(3)}
        kl = relative_entropy(sets, reference_group=int(rng.integers(3)), bins=int(rng.integers(2, 65)))
        assert min(kl.values()) >= -1e-12


# correlation ------------------------------------------------------------------------------

def test_correlation_identical_embeddings():
    emb = np.tile([1.0, 2.0, 4.0], (4, 1))
    counts, edges = correlation_histogram(emb, [0, 1, 2, 3], bins=10)
    assert counts[-1] == 6 and counts.sum() == 6


def test_correlation_opposite_pair():
    counts, edges = correlation_histogram(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1], bins=4)
    assert counts[0] == 1 and counts.sum() == 1


def test_correlation_mass_and_first_image():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(10, 6))
    ids = np.repeat(np.arange(5), 2)
    counts, _ = correlation_histogram(emb, ids, bins=20)
    assert counts.sum() == len(list(itertools.combinations(range(5), 2)))
    counts, _ = correlation_histogram(emb, ids, bins=20, max_subjects=3)
    assert counts.sum() == 3
    with pytest.raises(ValueError):
        correlation_histogram(emb[:2], [0, 0])


# report -------------------------------------------------------------------------------------

def test_fairness_report_schema(tmp_path):
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(16, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    ids = np.repeat(np.arange(8), 2)
    groups = np.repeat([0, 1], 8)
    pairs = [Pair(0, 1, True, 0), Pair(0, 2, False, 0), Pair(8, 9, True, 1), Pair(8, 10, False, 1)]
    rep = fairness_report(pairs, emb, ids, groups, reference_group=0, metadata={"tau": -0.2})
    doc = json.loads(rep.to_json())
    assert set(doc) >= {"group_accuracy", "average_accuracy", "biasness", "ratio_stats", "relative_entropy",
                        "reference_group", "metadata"}
    assert doc["average_accuracy"] == pytest.approx(np.mean(list(rep.group_accuracy.values())))
    assert doc["relative_entropy"]["0"] == 0.0 and doc["biasness"] >= 0
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "group,accuracy,ratio_mean,ratio_stad,relative_entropy" and len(lines) == 3
