import os

import numpy as np
import pytest

from promptmil.errors import ContractError, FormatError
from promptmil.synthdata import (BAG_MAGIC, CorpusSpec, FeatureBag, PatchBag, gen_source_patches, gen_target_bags,
                                 generate_corpus, motif_mask, read_bags, read_features, read_source, read_spec,
                                 read_truth, write_bags, write_features)

SMALL = dict(num_train=6, num_val=4, num_test=4, patches_per_bag=16, num_source=32)


def test_positives_per_bag():
    spec = CorpusSpec(seed=3)
    assert spec.positives_per_bag == 5
    for bag in gen_target_bags(spec)["train"]:
        assert sum(bag.instance_truth) == (5 if bag.label else 0)


def test_mil_axiom_and_balance():
    bags = gen_target_bags(CorpusSpec(seed=1, **SMALL))
    for split, items in bags.items():
        assert sum(b.label for b in items) * 2 == len(items)
        for b in items:
            assert b.label == int(any(b.instance_truth))
            assert b.patches.shape == (16, 3, 8, 8) and b.patches.dtype == np.float32


def test_split_disjointness():
    bags = gen_target_bags(CorpusSpec(seed=1, **SMALL))
    ids = [b.bag_id for items in bags.values() for b in items]
    assert len(ids) == len(set(ids))


def test_invalid_rho():
    for rho in (0.0, 0.01, 1.5):
        with pytest.raises(ContractError):
            gen_target_bags(CorpusSpec(rho=rho, **SMALL))


def test_odd_source_rejected():
    with pytest.raises(ContractError):
        gen_source_patches(CorpusSpec(), 7)


def test_determinism():
    a = gen_target_bags(CorpusSpec(seed=9, **SMALL))
    b = gen_target_bags(CorpusSpec(seed=9, **SMALL))
    c = gen_target_bags(CorpusSpec(seed=10, **SMALL))
    flat = lambda d: b"".join(x.patches.tobytes() for items in d.values() for x in items)
    assert flat(a) == flat(b) != flat(c)
    xs, ys = gen_source_patches(CorpusSpec(seed=9), 64)
    xs2, ys2 = gen_source_patches(CorpusSpec(seed=9), 64)
    assert xs.tobytes() == xs2.tobytes() and ys.tobytes() == ys2.tobytes()


def test_source_halves():
    x, y = gen_source_patches(CorpusSpec(seed=0), 100)
    assert x.shape == (100, 3, 8, 8) and int(y.sum()) == 50


def test_noiseless_source_separable_by_motif():
    x, y = gen_source_patches(CorpusSpec(seed=0, sigma=0.0, delta=3.0), 40)
    m = motif_mask(3, 8, 8)
    assert np.all(x[y == 0] == 0)
    assert np.all(x[y == 1][:, m] == 3.0) and np.all(x[y == 1][:, ~m] == 0)


def test_motif_mask_layout():
    m = motif_mask(3, 8, 8)
    assert m.sum(axis=(1, 2)).tolist() == [4, 4, 4]
    for c in range(3):
        rows, cols = np.nonzero(m[c])
        assert rows.max() - rows.min() == 1 and cols.max() - cols.min() == 1


def _probe_accuracy(spec):
    # least-squares linear probe on raw pixels, scored on a held-out half
    x, y = gen_source_patches(spec, 512)
    x = x.reshape(len(x), -1).astype(np.float64)
    design = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(design[:256], 2.0 * y[:256] - 1, rcond=None)
    return float(((design[256:] @ w > 0) == (y[256:] == 1)).mean())


@pytest.mark.parametrize("seed", range(5))
def test_zero_separation_probe_at_chance(seed):
    assert 0.4 <= _probe_accuracy(CorpusSpec(seed=seed, delta=0.0)) <= 0.6


def test_probe_sees_separation():
    assert _probe_accuracy(CorpusSpec(seed=0, delta=3.0)) > 0.9


def test_identity_shift_matches_source_style():
    spec = CorpusSpec(seed=4, gain=(1, 1, 1), offset=(0, 0, 0), **SMALL)
    shifted = CorpusSpec(seed=4, **SMALL)
    a, b = gen_target_bags(spec), gen_target_bags(shifted)
    g = np.array([1.4, 0.7, 1.0])[:, None, None]
    o = np.array([0.3, -0.3, 0.0])[:, None, None]
    for x, y in zip(a["train"], b["train"]):
        np.testing.assert_allclose(y.patches, g * x.patches + o, rtol=1e-6, atol=1e-6)


def test_negative_target_matches_source_class_a_statistics():
    spec = CorpusSpec(seed=2, gain=(1, 1, 1), offset=(0, 0, 0), num_train=40, num_val=2, num_test=2)
    neg = np.concatenate([b.patches for b in gen_target_bags(spec)["train"] if b.label == 0])
    x, y = gen_source_patches(spec, 2048)
    src = x[y == 0]
    assert abs(neg.mean() - src.mean()) < 0.02
    assert abs(neg.std() - src.std()) < 0.02


def test_round_trip(tmp_path):
    spec = CorpusSpec(seed=5, **SMALL)
    bags, source = generate_corpus(spec, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["bags", "manifest.json", "source_labels.json", "truth"]
    back = read_bags(str(tmp_path))
    for split in bags:
        for a, b in zip(bags[split], back[split]):
            assert (a.bag_id, a.label) == (b.bag_id, b.label)
            assert a.patches.tobytes() == b.patches.tobytes()
            assert b.instance_truth is None
            assert read_truth(str(tmp_path), a.bag_id) == a.instance_truth
    with_truth = read_bags(str(tmp_path), splits=["val"], with_truth=True)
    assert list(with_truth) == ["val"] and with_truth["val"][0].instance_truth == bags["val"][0].instance_truth
    xs, ys = read_source(str(tmp_path))
    assert xs.tobytes() == source[0].tobytes() and ys.tolist() == source[1].tolist()
    assert read_spec(str(tmp_path)) == spec


def test_blob_layout(tmp_path):
    bag = PatchBag("x", 0, np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2), [0, 0])
    write_bags({"train": [bag]}, str(tmp_path))
    raw = (tmp_path / "bags" / "x.bin").read_bytes()
    assert raw[:8] == BAG_MAGIC == b"PMILBAG1"
    assert np.frombuffer(raw[8:24], "<u4").tolist() == [2, 3, 2, 2]
    assert np.frombuffer(raw[24:], "<f4").tolist() == list(range(24))


def test_corrupt_magic_names_file(tmp_path):
    generate_corpus(CorpusSpec(seed=0, **SMALL), str(tmp_path))
    blob = tmp_path / "bags" / "train-0000.bin"
    blob.write_bytes(b"XXXXXXXX" + blob.read_bytes()[8:])
    with pytest.raises(FormatError, match="train-0000.bin"):
        read_bags(str(tmp_path))


def test_truncated_blob(tmp_path):
    generate_corpus(CorpusSpec(seed=0, **SMALL), str(tmp_path))
    blob = tmp_path / "bags" / "val-0001.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_bags(str(tmp_path), splits=["val"])


def test_bad_manifest_version(tmp_path):
    generate_corpus(CorpusSpec(seed=0, **SMALL), str(tmp_path))
    (tmp_path / "manifest.json").write_text('{"format_version": 7, "splits": {}}')
    with pytest.raises(FormatError):
        read_bags(str(tmp_path))


def test_empty_split(tmp_path):
    bags = gen_target_bags(CorpusSpec(seed=0, num_train=2, num_val=0, num_test=2, patches_per_bag=16))
    assert bags["val"] == []
    write_bags(bags, str(tmp_path))
    assert read_bags(str(tmp_path))["val"] == []


def test_feature_store_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats = {"train": [FeatureBag("a", 1, rng.normal(size=(4, 5)).astype(np.float32), "fp1")],
             "val": []}
    write_features(feats, str(tmp_path), "fp1")
    back, fp = read_features(str(tmp_path))
    assert fp == "fp1" and back["val"] == []
    assert back["train"][0].features.tobytes() == feats["train"][0].features.tobytes()
    assert back["train"][0].extractor_fingerprint == "fp1"
    with pytest.raises(ContractError):
        write_features(feats, str(tmp_path), "other")
