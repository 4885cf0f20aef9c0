import numpy as np
import pytest
from hypothesis import given, strategies as st

from condshape import experiments as ex
from condshape.infer import InferenceConfig
from condshape.losses import TooFewViews
from condshape.model import Generator, ModelConfig, ShapeAutoencoder
from condshape.synthdata import Dataset, generate_dataset

CFG = ModelConfig()
FAST = InferenceConfig(opt_steps=3, groups=2)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(10, seed=0)


@pytest.fixture(scope="module")
def gen():
    return Generator(CFG, ShapeAutoencoder(CFG, seed=0).decoder, seed=1)


@pytest.fixture(scope="module")
def det():
    return Generator(CFG, ShapeAutoencoder(CFG, seed=0).decoder, seed=1, conditional=False)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_choose_views(total, n, seed):
    v = ex.choose_views(total, n, np.random.default_rng(seed))
    assert len(v) == min(total, n) and len(set(v.tolist())) == len(v)
    assert np.all(np.diff(v) > 0) and v.min() >= 0 and v.max() < total


def test_pearson():
    assert np.isnan(ex.pearson([1, 1, 1], [1, 2, 3]))
    assert np.isnan(ex.pearson([1], [2]))
    assert ex.pearson([1, 2, 3], [2, 4, 7]) > 0.98
    assert ex.pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_diversity_score(gen, det, ds):
    img = ds.images(ds.records[0])[0]
    assert ex.diversity_score(det, img, 5) == 0.0
    assert ex.diversity_score(gen, img, 5, np.random.default_rng(0)) > 0
    with pytest.raises(TooFewViews):
        ex.diversity_score(gen, img, 1)
    a = ex.diversity_score(gen, img, 5, np.random.default_rng(3))
    assert a == ex.diversity_score(gen, img, 5, np.random.default_rng(3))


def test_episode_is_reproducible(gen, ds):
    a = ex.evaluate(gen, ds, FAST, seed=2)
    b = ex.evaluate(gen, ds, FAST, seed=2)
    assert [e.report.cd for e in a] == [e.report.cd for e in b]
    assert len(a) == len(ds.test) and all(len(e.views) == 8 for e in a)


def test_inference_modes_share_first_group(gen, ds):
    table = ex.inference_table(gen, ds, FAST, seed=0)
    assert set(table) == set(ex.INFERENCE_MODES)
    rand, heur, opt = (table[k]["episodes"] for k in ex.INFERENCE_MODES)
    for r, h, o in zip(rand, heur, opt):
        assert r.views == h.views == o.views
        assert h.trace.init_consis <= r.trace.init_consis
        assert o.consis <= h.consis + 1e-12


def test_views_sweep_counts(gen, ds):
    sweep = ex.views_sweep(gen, ds, (1, 2), FAST)
    assert list(sweep) == [1, 2] and all(np.isfinite(v) for v in sweep.values())


def test_correlate(gen, ds):
    eps, r = ex.correlate(gen, ds, 6, 4, FAST)
    assert len(eps) == 6 and np.isfinite(r)
    assert [e.shape_id for e in eps[:len(ds.test)]] == [rec.shape_id for rec in ds.test]


def test_degenerate_correlation_is_nan(det, ds):
    # a deterministic model on one shape with all views gives constant pairs
    one = Dataset([ds.test[0]], ds.ring, ds.sample_resolution)
    one.records[0].split = "test"
    _, r = ex.correlate(det, one, 3, 8, FAST)
    assert np.isnan(r)


def test_empty_test_split(gen, ds):
    empty = Dataset([r for r in ds.records if r.split == "train"], ds.ring, ds.sample_resolution)
    assert ex.evaluate(gen, empty, FAST) == []
    assert np.isnan(ex.mean_cd([]))
    eps, r = ex.correlate(gen, empty, 5)
    assert eps == [] and np.isnan(r)
    assert ex.corpus_diversity(gen, empty) == []
