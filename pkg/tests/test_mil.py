import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promptmil.errors import ContractError, DimensionError
from promptmil.layers import ParamSet, ce_loss
from promptmil.mil import attention_logits, attention_scores, bag_pool, classify_bag, mil_init
from promptmil.numerics import Rng, Tensor, grad_check


def unit_params():
    ps = ParamSet()
    ps.add("mil.V1", np.ones((1, 1)), True)
    ps.add("mil.V2", np.ones((1, 1)), True)
    ps.add("mil.w", np.ones(1), True)
    ps.add("mil.head_w", np.zeros((2, 1)), True)
    ps.add("mil.head_b", np.zeros(2), True)
    return ps


def scalar_attention_oracle(features):
    """Plain-math gated attention for L = M = 1 with unit weights."""
    raw = [math.tanh(h) * (1 / (1 + math.exp(-h))) for h in features]
    z = sum(math.exp(r) for r in raw)
    return [math.exp(r) / z for r in raw]


def test_scalar_oracle():
    expected = scalar_attention_oracle([0.0, 1.0])
    got = attention_scores(np.array([[0.0], [1.0]]), unit_params()).data
    assert expected == pytest.approx([0.3643, 0.6357], abs=1e-3)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_singleton_bag():
    ps = mil_init(4, Rng(0, "mil"), hidden=8)
    assert attention_scores(np.ones((1, 4), np.float32), ps).data.tolist() == [1.0]


def test_identical_features_uniform():
    ps = mil_init(4, Rng(0, "mil"), hidden=8)
    a = attention_scores(np.tile(np.arange(4, dtype=np.float32), (5, 1)), ps).data
    np.testing.assert_allclose(a, 0.2, rtol=1e-6)


def test_empty_bag():
    with pytest.raises(ContractError):
        attention_scores([], mil_init(4, Rng(0, "mil"), hidden=8))


def test_bag_pool_examples():
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert bag_pool(h, Tensor(np.array([0.5, 0.5]))).data.tolist() == [0.5, 0.5]
    assert bag_pool(h, Tensor(np.array([0.0, 1.0]))).data.tolist() == [0.0, 1.0]
    v = np.array([[0.3, -2.0]] * 3)
    np.testing.assert_allclose(bag_pool(v, Tensor(np.array([0.2, 0.5, 0.3]))).data, [0.3, -2.0], rtol=1e-12)
    with pytest.raises(DimensionError):
        bag_pool(h, Tensor(np.array([1.0])))


def test_null_head():
    ps = mil_init(3, Rng(0, "mil"), hidden=4)
    assert not ps["mil.head_w"].any() and not ps["mil.head_b"].any()
    res = classify_bag(np.random.default_rng(0).normal(size=(6, 3)).astype(np.float32), ps)
    assert res.logits.data.tolist() == [0.0, 0.0]
    assert res.probability == 0.5


def test_single_patch_bag_feature():
    ps = mil_init(3, Rng(0, "mil"), hidden=4)
    h = np.array([[0.25, -1.5, 2.0]], np.float32)
    assert classify_bag(h, ps).bag_feature.data.tolist() == h[0].tolist()


bags = st.integers(1, 12).flatmap(
    lambda n: st.lists(st.lists(st.floats(-5, 5), min_size=4, max_size=4), min_size=n, max_size=n))


@settings(max_examples=100, deadline=None)
@given(feats=bags, seed=st.integers(0, 1000), perm_seed=st.integers(0, 1000))
def test_permutation_invariance(feats, seed, perm_seed):
    h = np.asarray(feats, dtype=np.float64)
    ps = mil_init(4, Rng(seed, "mil"), hidden=6).astype(np.float64)
    ps.entries["mil.head_w"] = Tensor(np.random.default_rng(seed).normal(size=(2, 4)))
    perm = np.random.default_rng(perm_seed).permutation(len(h))
    a, b = classify_bag(h, ps), classify_bag(h[perm], ps)
    np.testing.assert_allclose(b.logits.data, a.logits.data, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(b.bag_feature.data, a.bag_feature.data, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(b.alphas.data, a.alphas.data[perm], rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(feats=bags, seed=st.integers(0, 1000))
def test_normalization_and_convex_hull(feats, seed):
    h = np.asarray(feats, dtype=np.float64)
    res = classify_bag(h, mil_init(4, Rng(seed, "mil"), hidden=6).astype(np.float64))
    a = res.alphas.data
    assert np.all((a >= 0) & (a <= 1))
    assert abs(a.sum() - 1) <= 1e-6
    F = res.bag_feature.data
    assert np.all(F >= h.min(axis=0) - 1e-12) and np.all(F <= h.max(axis=0) + 1e-12)
    np.testing.assert_allclose(F, (a[:, None] * h).sum(axis=0), rtol=1e-5)


@settings(max_examples=100, deadline=None)
@given(feats=bags.filter(lambda b: len(b) >= 2), seed=st.integers(0, 1000))
def test_duplicating_top_patch_increases_its_mass(feats, seed):
    h = np.asarray(feats, dtype=np.float64)
    ps = mil_init(4, Rng(seed, "mil"), hidden=6).astype(np.float64)
    raw = attention_logits(h, ps).data
    k = int(np.argmax(raw))
    before = attention_scores(h, ps).data[k]
    h2 = np.vstack([h, h[k:k + 1]])
    raw2 = attention_logits(h2, ps).data
    assert raw2[:-1].tobytes() == raw.tobytes() and raw2[-1] == raw[k]
    after = attention_scores(h2, ps).data
    assert after[k] + after[-1] > before


@pytest.mark.parametrize("seed", range(5))
def test_mil_gradients(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(int(rng.integers(1, 5)), 4))
    ps = mil_init(4, Rng(seed, "mil"), hidden=3)
    ps.entries["mil.head_w"] = Tensor(rng.normal(size=(2, 4)).astype(np.float32))
    err = grad_check(lambda t: ce_loss(classify_bag(h, t).logits, seed % 2), ps, eps=1e-4, max_coords=32)
    assert err < 1e-4
