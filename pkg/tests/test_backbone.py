import math

import numpy as np
import pytest

from promptmil.backbone import (BackboneConfig, backbone_forward, backbone_init, extract_features, pretrain_backbone,
                                prompt_vector)
from promptmil.errors import ConfigError, ContractError
from promptmil.layers import AdamState, adam_step, ce_loss, linear
from promptmil.numerics import Rng, Tape, Tensor, backward, tsum
from promptmil.synthdata import CorpusSpec, gen_source_patches

CFG = BackboneConfig(channels=8, height=4, width=4, num_blocks=3, prompt_sites=(2, 3), reduction=4)


def patch(seed=0, cfg=CFG, n=None):
    shape = (cfg.in_channels, cfg.height, cfg.width) if n is None else (n, cfg.in_channels, cfg.height, cfg.width)
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


def randomize_prompts(params, seed=1):
    rng = np.random.default_rng(seed)
    for n in params.names("prompt."):
        params.entries[n] = Tensor(rng.normal(scale=0.5, size=params[n].shape).astype(np.float32))
    return params


def test_presets():
    r18 = BackboneConfig.preset("resnet18-like")
    r50 = BackboneConfig.preset("resnet50-like")
    assert (r18.num_blocks, r18.prompt_sites) == (4, (3, 4))
    assert (r50.num_blocks, r50.prompt_sites) == (6, (1, 2, 3, 4, 5, 6))
    assert r18.channels == 32 and r18.reduction == 4
    with pytest.raises(ConfigError):
        BackboneConfig.preset("vgg")


@pytest.mark.parametrize("kw", [dict(prompt_sites=(0,)), dict(prompt_sites=(5,), num_blocks=4),
                                dict(channels=30, reduction=4)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_init_is_deterministic():
    a = backbone_init(CFG, Rng(5, "init"))
    b = backbone_init(CFG, Rng(5, "init"))
    assert a.names() == b.names() and a.equal(b)


def test_init_flags_and_prompt_value():
    ps = backbone_init(CFG, Rng(0, "init"))
    assert all(not ps.trainable[n] for n in ps.names("backbone."))
    assert all(ps.trainable[n] for n in ps.names("prompt."))
    f = Tensor(np.random.default_rng(0).normal(size=(CFG.channels, 4, 4)).astype(np.float32))
    p = prompt_vector(f, Tensor(ps["prompt.site2.w1"]), Tensor(ps["prompt.site2.w2"]))
    assert np.all(p.data == 0.5)


def test_kaiming_sigma():
    cfg = BackboneConfig.preset("resnet18-like")
    w = backbone_init(cfg, Rng(0, "init"))["backbone.stem.w"]
    # fan_in = 3 * 3 * 3 = 27
    assert w.std() == pytest.approx(math.sqrt(2 / 27), rel=0.1)
    assert np.all(backbone_init(cfg, Rng(0, "init"))["backbone.stem.b"] == 0)


def test_prompt_identity_equivalence():
    ps = randomize_prompts(backbone_init(CFG, Rng(0, "init")))
    x = patch(3, n=5)
    plain = backbone_forward(x, ps, CFG, prompts=False).data
    ones = backbone_forward(x, ps, CFG, prompts=True, prompt_override=1.0).data
    assert plain.tobytes() == ones.tobytes()
    assert not np.array_equal(plain, backbone_forward(x, ps, CFG).data)


def test_zero_prompt_halves_last_block():
    cfg = BackboneConfig(channels=8, height=4, width=4, num_blocks=3, prompt_sites=(3,), reduction=4)
    ps = backbone_init(cfg, Rng(0, "init"))
    ps.entries["prompt.site3.w1"] = Tensor(np.zeros_like(ps["prompt.site3.w1"]))
    x = patch(4, cfg)
    plain = backbone_forward(x, ps, cfg, prompts=False).data
    half = backbone_forward(x, ps, cfg).data
    assert np.array_equal(half, 0.5 * plain)


def test_zero_input_gives_zero_feature():
    ps = backbone_init(CFG, Rng(0, "init"))
    out = backbone_forward(np.zeros((3, 4, 4), np.float32), ps, CFG)
    assert out.shape == (CFG.channels,) and np.all(out.data == 0)


def test_feature_width_independent_of_prompts():
    for sites in [(), (1,), (1, 2, 3)]:
        cfg = CFG.with_sites(sites)
        ps = backbone_init(cfg, Rng(0, "init"))
        assert backbone_forward(patch(), ps, cfg).shape == (cfg.channels,)


def test_missing_prompt_params():
    ps = backbone_init(CFG, Rng(0, "init"), with_prompts=False)
    with pytest.raises(ConfigError):
        backbone_forward(patch(), ps, CFG)


def test_batch_matches_single():
    ps = randomize_prompts(backbone_init(CFG, Rng(0, "init")))
    x = patch(7, n=3)
    batch = backbone_forward(x, ps, CFG).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], backbone_forward(x[i], ps, CFG).data, rtol=1e-5, atol=1e-6)


def _prompt_grads(ps, cfg, x):
    tape = Tape()
    t = ps.tensors(tape)
    backward(tape, tsum(backbone_forward(x, t, cfg)))
    return {n: t[n].grad for n in ps.names("prompt.")}


def test_gradient_reaches_every_site_through_frozen_blocks():
    cfg = BackboneConfig(channels=8, height=4, width=4, num_blocks=4, prompt_sites=(1, 2, 3, 4), reduction=4)
    ps = backbone_init(cfg, Rng(0, "init"))
    grads = _prompt_grads(ps, cfg, patch(1, cfg, n=2))
    for site in cfg.prompt_sites:
        norm = sum(float(np.abs(grads[f"prompt.site{site}.{k}"]).sum()) for k in ("w1", "w2"))
        assert norm > 0, f"site {site} received no gradient"


def test_freeze_contract_under_adam():
    ps = backbone_init(CFG, Rng(0, "init"))
    before = ps.copy()
    state = AdamState.for_params(ps, lr=1e-2)
    for step in range(5):
        tape = Tape()
        t = ps.tensors(tape)
        loss = tsum(backbone_forward(patch(step, n=2), t, CFG))
        backward(tape, loss)
        adam_step(ps, {n: t[n].grad for n in ps.trainable_names()}, state)
    assert ps.equal(before, before.names("backbone."))
    assert not ps.equal(before, before.names("prompt."))


# --- pretraining ---


def test_pretrain_zero_epochs_is_init():
    x, y = gen_source_patches(CorpusSpec(seed=1, height=4, width=4), 16)
    out, _ = pretrain_backbone(x, y, CFG, rng_seed=3, epochs=0)
    ref = backbone_init(CFG, Rng(3, "init"), with_prompts=False)
    assert out.names() == ref.names() and out.equal(ref)
    assert not any(out.trainable.values())


def test_pretrain_is_deterministic():
    x, y = gen_source_patches(CorpusSpec(seed=1, height=4, width=4), 32)
    a, _ = pretrain_backbone(x, y, CFG, rng_seed=2, epochs=2)
    b, _ = pretrain_backbone(x, y, CFG, rng_seed=2, epochs=2)
    assert a.equal(b)


def test_pretrain_rejects_empty():
    with pytest.raises(ContractError):
        pretrain_backbone(np.zeros((0, 3, 4, 4), np.float32), np.zeros(0), CFG, rng_seed=0)


def test_pretrain_separable_source():
    # separation delta = 3 sigma, 50 epochs; gate fixed after measuring 1.0 val accuracy
    cfg = BackboneConfig.preset("resnet18-like")
    x, y = gen_source_patches(CorpusSpec(seed=1, delta=3.0, sigma=1.0), 512)
    _, info = pretrain_backbone(x, y, cfg, rng_seed=1, epochs=50)
    assert info["val_acc"] > 0.95


def test_pretrain_sets_source_statistics():
    cfg = BackboneConfig(channels=8, height=8, width=8, num_blocks=2, prompt_sites=(), reduction=4)
    x, y = gen_source_patches(CorpusSpec(seed=1), 64)
    ps, info = pretrain_backbone(x, y, cfg, rng_seed=1, epochs=3)
    n_tr = 64 - int(round(64 * 0.2))
    feats = extract_features(x[:n_tr], ps, cfg)
    np.testing.assert_allclose(feats.mean(axis=0), 0, atol=1e-4)
    np.testing.assert_allclose(feats.std(axis=0), 1, atol=1e-3)
