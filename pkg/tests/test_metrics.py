import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agfas.metrics import ScoredSet, auc, error_rates, frame_sample, hter


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_hter(scores, labels):
    """Scan every midpoint threshold (plus both ends); keep the lowest of the |FAR-FRR| minimisers."""
    u = sorted(set(scores))
    cands = [u[0] - 1.0] + [(a + b) / 2 for a, b in zip(u[:-1], u[1:])] + [u[-1] + 1.0]
    fakes = [s for s, l in zip(scores, labels) if l == 1]
    reals = [s for s, l in zip(scores, labels) if l == 0]
    best = None
    for thr in cands:
        far = sum(s < thr for s in fakes) / len(fakes)
        frr = sum(s >= thr for s in reals) / len(reals)
        key = abs(far - frr)
        if best is None or key < best[0]:
            best = (key, (far + frr) / 2, thr)
    return best[1], best[2]


def random_set(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse scores force plenty of ties
    scores = np.round(rng.random(n) * rng.choice([5, 20, 1000]), 0) / 1000 + 0.3 * labels * rng.random()
    return scores, labels


def test_auc_and_hter_match_brute_force_on_50_sets():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        scores, labels = random_set(rng)
        ss = ScoredSet(scores, labels)
        assert auc(ss) == brute_auc(scores.tolist(), labels.tolist())
        h, thr = hter(ss)
        bh, bthr = brute_hter(scores.tolist(), labels.tolist())
        assert h == bh and thr == bthr


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1)), min_size=2, max_size=60))
def test_metric_oracles_property(pairs):
    scores = np.array([p[0] / 9 for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    ss = ScoredSet(scores, labels)
    assert auc(ss) == brute_auc(scores.tolist(), labels.tolist())
    assert hter(ss) == brute_hter(scores.tolist(), labels.tolist())
    assert 0.0 <= hter(ss)[0] <= 1.0


def test_auc_examples():
    assert auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert auc(ScoredSet([0.5] * 6, [0, 1, 0, 1, 0, 1])) == 0.5
    with pytest.raises(ValueError):
        auc(ScoredSet([0.1, 0.2], [1, 1]))


def test_random_scores_give_chance_metrics():
    rng = np.random.default_rng(0)
    ss = ScoredSet(rng.random(10_000), rng.integers(0, 2, 10_000))
    assert abs(auc(ss) - 0.5) < 0.02
    assert abs(hter(ss)[0] - 0.5) < 0.02


def test_hter_examples():
    # 10 fakes, 10 reals: one fake below the threshold, two reals above it
    fakes = [0.9] * 9 + [0.1]
    reals = [0.2] * 8 + [0.8, 0.85]
    ss = ScoredSet(fakes + reals, [1] * 10 + [0] * 10)
    assert error_rates(ss, 0.5) == (0.1, 0.2)
    assert hter(ss, threshold=0.5)[0] == pytest.approx(0.15)
    assert hter(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))[0] == 0.0
    with pytest.raises(ValueError):
        hter(ScoredSet([0.3, 0.4], [0, 0]))


def test_string_labels_and_validation():
    ss = ScoredSet([0.2, 0.7], ["real", "fake"])
    assert ss.labels.tolist() == [0, 1]
    with pytest.raises(ValueError):
        ScoredSet([], [])
    with pytest.raises(ValueError):
        ScoredSet([0.1, 0.2], [0, 2])
    with pytest.raises(ValueError):
        ScoredSet([0.1], [0, 1])


def test_frame_sample_examples():
    assert frame_sample(list(range(10))) == list(range(10))
    assert frame_sample(list(range(19))) == [0, 2, 4, 6, 8, 10, 12, 14, 16, 18]
    assert frame_sample(list(range(3))) == [0, 1, 2]
    assert frame_sample(["a"]) == ["a"]
    with pytest.raises(ValueError):
        frame_sample([])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(1, 30))
def test_frame_sample_properties(n_frames, n):
    out = frame_sample(list(range(n_frames)), n)
    assert out[0] == 0
    assert out[-1] == (n_frames - 1 if n > 1 else 0)
    assert out == sorted(set(out))
    # a stride of at least one frame never collides; a shorter one covers every frame
    assert len(out) == min(n, n_frames)
