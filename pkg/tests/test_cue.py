import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from agfas.cue import (
    AnomalousCue, CacheMismatchError, CueConfig, CueStore, UntrainedGeneratorError, cache_cues, compute_cue,
    compute_cues, dump_cue_grid, mask_background,
)
from agfas.diffusion import DFGConfig, build_dfg, images_to_tensor, make_schedule, noise_oracle
from agfas.metrics import ScoredSet, auc
from agfas.synthdata import build_corpus, default_domains
from agfas.theory import reconstruction_error_curve

DOMS = default_domains()


@pytest.fixture(scope="module")
def small_corpus():
    return build_corpus(2, DOMS, 2, 3)


class OracleDFG:
    """Stand-in generator that predicts the true noise of whatever batch it is asked to encode."""

    trained = True

    def __init__(self):
        self.schedule = make_schedule(100, 1e-4, 0.05)
        self._z0 = None

    def identity_tokens(self, images):
        self._z0 = images
        return None

    def predict(self, z, t, tokens):
        return noise_oracle(self._z0, self.schedule)(z, t)


def test_perfect_generator_gives_zero_residual(small_corpus):
    res = compute_cues(small_corpus[:6], OracleDFG(), 80, 10, list(range(6)))
    assert res.shape == (6, 32, 32, 3)
    assert np.abs(res).max() < 1e-5


def test_untrained_generator_refused(small_corpus):
    dfg = build_dfg(DFGConfig(base_channels=8, emb_dim=16))
    with pytest.raises(UntrainedGeneratorError):
        compute_cue(small_corpus[0], dfg, 10, 2, 0)


def test_cue_shape_determinism_and_range(tiny_dfg, small_corpus):
    s = small_corpus[1]
    a = compute_cue(s, tiny_dfg, 40, 5, 7)
    b = compute_cue(s, tiny_dfg, 40, 5, 7)
    assert isinstance(a, AnomalousCue)
    assert a.residual.shape == s.image.shape and np.isfinite(a.residual).all()
    assert np.array_equal(a.residual, b.residual)
    assert a.source_id == s.source_id and a.t_hat_used == 40
    assert not np.array_equal(a.residual, compute_cue(s, tiny_dfg, 40, 5, 8).residual)
    for bad in (0, 101):
        with pytest.raises(ValueError):
            compute_cue(s, tiny_dfg, bad, 1, 0)
    with pytest.raises(ValueError):
        AnomalousCue(np.full((2, 2, 3), np.nan), "x", 1)


def test_mask_background_examples():
    rng = np.random.default_rng(0)
    cue = AnomalousCue(rng.normal(size=(8, 8, 3)), "s", 10)
    assert np.array_equal(mask_background(cue, np.zeros((8, 8), bool)).residual, cue.residual)
    assert not mask_background(cue, np.ones((8, 8), bool)).residual.any()
    with pytest.raises(ValueError):
        mask_background(cue, np.zeros((4, 8), bool))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mask_background_never_raises_energy(seed):
    rng = np.random.default_rng(seed)
    cue = AnomalousCue(rng.normal(size=(6, 6, 3)), "s", 10)
    mask = rng.random((6, 6)) < rng.random()
    out = mask_background(cue, mask)
    assert out.energy <= cue.energy
    assert not out.residual[mask].any()
    assert np.array_equal(out.residual[~mask], cue.residual[~mask])


def test_cache_bijection_and_persistence(tiny_dfg, small_corpus, tmp_path):
    cfg = CueConfig(t_hat=30, n_steps=3)
    store = cache_cues(small_corpus, tiny_dfg, cfg, CueStore(tmp_path), dfg_hash="h")
    assert len(store) == len(small_corpus)
    again = CueStore(tmp_path)
    assert len(again) == len(small_corpus) and again.config_hash == store.config_hash
    for s in small_corpus:
        e = again.entries[s.source_id]
        assert {"source_id", "seed", "t_hat", "n_steps", "config_hash"} <= set(e)
        assert again.get(s.source_id).dtype == np.float32
        assert np.array_equal(again.get(s.source_id), store.get(s.source_id))
    one = compute_cue(small_corpus[4], tiny_dfg, 30, 3, again.entries[small_corpus[4].source_id]["seed"])
    np.testing.assert_allclose(again.get(small_corpus[4].source_id), one.residual, rtol=0, atol=1e-6)


def _mtimes(path):
    return {p.name: p.stat().st_mtime_ns for p in path.iterdir()}


def test_cache_idempotent_and_rebuilds_on_t_hat_change(tiny_dfg, small_corpus, tmp_path):
    cfg = CueConfig(t_hat=30, n_steps=3)
    cache_cues(small_corpus, tiny_dfg, cfg, CueStore(tmp_path))
    before = _mtimes(tmp_path)
    cache_cues(small_corpus, tiny_dfg, cfg, CueStore(tmp_path))
    assert _mtimes(tmp_path) == before
    store = cache_cues(small_corpus, tiny_dfg, CueConfig(t_hat=50, n_steps=3), CueStore(tmp_path))
    assert {e["t_hat"] for e in store.entries.values()} == {50}
    after = _mtimes(tmp_path)
    assert all(after[k] != before[k] for k in before if k.endswith(".bin"))


def test_partial_cache_with_other_hash_is_refused(tiny_dfg, small_corpus, tmp_path):
    cache_cues(small_corpus[:5], tiny_dfg, CueConfig(t_hat=30, n_steps=3), CueStore(tmp_path))
    with pytest.raises(CacheMismatchError):
        cache_cues(small_corpus, tiny_dfg, CueConfig(t_hat=40, n_steps=3), CueStore(tmp_path))
    store = cache_cues(small_corpus, tiny_dfg, CueConfig(t_hat=40, n_steps=3), CueStore(tmp_path), rebuild=True)
    assert len(store) == len(small_corpus)
    assert {e["t_hat"] for e in store.entries.values()} == {40}


def test_cache_masking_and_duplicate_ids(tiny_dfg, small_corpus):
    store = cache_cues(small_corpus[:4], tiny_dfg, CueConfig(t_hat=20, n_steps=2, mask_background=True))
    for s in small_corpus[:4]:
        assert not store.get(s.source_id)[s.bg_mask].any()
    with pytest.raises(ValueError):
        cache_cues([small_corpus[0], small_corpus[0]], tiny_dfg, CueConfig(t_hat=20, n_steps=2))


def test_dump_cue_grid(tmp_path):
    rng = np.random.default_rng(1)
    res = [rng.normal(size=(8, 8, 3)) for _ in range(5)] + [np.zeros((8, 8, 3))]
    path = dump_cue_grid(res, tmp_path / "grid.png", ncols=4, scale=2)
    img = Image.open(path)
    assert img.size == (4 * 8 * 2, 2 * 8 * 2)
    arr = np.asarray(img)
    assert arr[:16, :16].min() == 0 and arr[:16, :16].max() == 255


# --------------------------------------------------------------------------
# behaviour with the default generator

@pytest.fixture(scope="module")
def held_in():
    return build_corpus(12, DOMS, 2, 77)


@pytest.mark.slow
def test_cue_energy_separates_real_from_fake(default_dfg, held_in):
    store = cache_cues(held_in, default_dfg, CueConfig())
    energy = [float(np.mean(store.get(s.source_id).astype(np.float64) ** 2)) for s in held_in]
    score = auc(ScoredSet(energy, [s.is_fake for s in held_in]))
    print(f"cue energy AUC {score:.3f}")
    assert score >= 0.85


@pytest.mark.slow
def test_real_cue_energy_grows_with_t_hat(default_dfg, held_in):
    reals = [s for s in held_in if not s.is_fake]
    energies = []
    for t in (20, 40, 60, 80, 100):
        store = cache_cues(reals, default_dfg, CueConfig(t_hat=t))
        energies.append(np.mean([np.mean(store.get(s.source_id).astype(np.float64) ** 2) for s in reals]))
    print("real cue energy by t_hat", np.round(energies, 5))
    assert all(b >= a for a, b in zip(energies, energies[1:]))


@pytest.mark.slow
def test_real_cues_below_measured_bound(default_dfg, held_in):
    reals = [s for s in held_in if not s.is_fake]
    x = images_to_tensor(reals)
    t_hat = CueConfig().t_hat
    curve = reconstruction_error_curve(default_dfg.predict, x, default_dfg.identity_tokens(x),
                                       default_dfg.schedule, [t_hat], n_steps=10)
    store = cache_cues(reals, default_dfg, CueConfig())
    energy = np.mean([np.mean(store.get(s.source_id).astype(np.float64) ** 2) for s in reals])
    assert energy <= curve.bound[0]
