import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promptmil.errors import ContractError, FormatError
from promptmil.mil import attention_scores, mil_init
from promptmil.numerics import Rng
from promptmil.rps import (Selection, materialize_selected_bag, read_manifest, select_representatives, top_k,
                           write_manifest)
from promptmil.synthdata import FeatureBag, PatchBag


def raw_bag(n=5, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, 3, 4, 4)).astype(np.float32)
    return PatchBag("b0", 1, x, [0] * (n - 1) + [1])


def test_top_k_examples():
    assert top_k([0.1, 0.6, 0.3], 2) == [1, 2]
    assert top_k([0.1, 0.6, 0.3], 3) == [0, 1, 2]
    assert top_k([0.1, 0.6, 0.3], 10) == [0, 1, 2]
    assert top_k([0.25] * 4, 2) == [0, 1]


@pytest.mark.parametrize("scores,k", [([0.5], 0), ([], 1)])
def test_top_k_rejects(scores, k):
    with pytest.raises(ContractError):
        top_k(scores, k)


def check_selection(scores, K):
    kept = top_k(scores, K)
    n = len(scores)
    assert len(kept) == min(K, n)
    assert all(a < b for a, b in zip(kept, kept[1:]))
    dropped = [scores[i] for i in range(n) if i not in set(kept)]
    if dropped:
        assert min(scores[i] for i in kept) >= max(dropped)
    if K < n:
        assert set(kept) <= set(top_k(scores, K + 1))
    return kept


def test_rps_properties_on_random_vectors():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n = int(rng.integers(1, 80))
        scores = rng.random(n)
        if trial % 3 == 0:
            # coarse quantization forces many ties
            scores = np.round(scores * 4) / 4
        K = int(rng.integers(1, 100))
        kept = check_selection(list(scores), K)
        assert kept == top_k(list(scores), K)


@settings(max_examples=200, deadline=None)
@given(scores=st.lists(st.sampled_from([0.0, 0.1, 0.5, 0.9]) | st.floats(0, 1), min_size=1, max_size=40),
       K=st.integers(1, 50))
def test_rps_properties_hypothesis(scores, K):
    check_selection(scores, K)


def test_select_representatives_uses_attention():
    mil = mil_init(4, Rng(0, "mil"), hidden=6)
    feats = np.random.default_rng(1).normal(size=(10, 4)).astype(np.float32)
    sel = select_representatives(FeatureBag("b", 1, feats, "fp"), mil, 3)
    alphas = attention_scores(feats, mil).data
    assert sel.kept_indices == sorted(np.argsort(-alphas, kind="stable")[:3].tolist())
    assert sel.label == 1 and sel.K_requested == 3
    np.testing.assert_allclose(sel.scores, alphas)


def test_materialize_full_and_singleton():
    bag = raw_bag()
    full = materialize_selected_bag(Selection("b0", 1, 5, [0, 1, 2, 3, 4], [0.2] * 5), bag)
    assert full.patches.tobytes() == bag.patches.tobytes()
    assert full.label == 1 and full.source_bag == "b0" and full.source_indices == [0, 1, 2, 3, 4]
    one = materialize_selected_bag(Selection("b0", 1, 1, [3], [0.2] * 5), bag)
    assert len(one) == 1 and one.label == 1
    assert one.patches[0].tobytes() == bag.patches[3].tobytes()


@pytest.mark.parametrize("idx", [[], [5], [-1, 2]])
def test_materialize_rejects_bad_indices(idx):
    with pytest.raises(ContractError):
        materialize_selected_bag(Selection("b0", 1, 2, idx, []), raw_bag())


def test_manifest_round_trip(tmp_path):
    sels = {"train": [Selection("a", 0, 2, [1, 3], [0.1, 0.4, 0.1, 0.4])],
            "test": [Selection("b", 1, 2, [0], [1.0])]}
    path = str(tmp_path / "sel.json")
    write_manifest(sels, path, meta={"checkpoint": "best-val"})
    back, meta = read_manifest(path)
    assert meta == {"checkpoint": "best-val"}
    assert [s.to_record() for s in back["train"]] == [s.to_record() for s in sels["train"]]
    assert back["test"][0].kept_indices == [0]


def test_manifest_rejects_garbage(tmp_path):
    path = tmp_path / "sel.json"
    path.write_text("not json")
    with pytest.raises(FormatError):
        read_manifest(str(path))
    path.write_text('{"format_version": 99, "splits": {}}')
    with pytest.raises(FormatError):
        read_manifest(str(path))
