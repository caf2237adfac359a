import numpy as np
import pytest

from promptmil.backbone import BackboneConfig, backbone_init
from promptmil.checkpoint import MAGIC, Checkpoint, file_fingerprint
from promptmil.config import fingerprint, format_kv, parse_kv, read_kv, write_kv
from promptmil.errors import ConfigError, FormatError
from promptmil.layers import ParamSet
from promptmil.mil import mil_init
from promptmil.numerics import Rng


def sample_ckpt():
    ps = backbone_init(BackboneConfig(channels=8, num_blocks=2, prompt_sites=(2,)), Rng(0, "init"))
    ps = ps.merged(mil_init(8, Rng(0, "mil"), hidden=4))
    ps.add("scalar", np.float32(1.5), False)
    return Checkpoint(ps, stage="stage3", epoch=7, metrics={"val_auc": 0.75}, config_fingerprint="abc",
                      extra={"method": "rps_pt"})


def test_round_trip_bit_exact(tmp_path):
    ck = sample_ckpt()
    path = str(tmp_path / "sub" / "c.ckpt")
    digest = ck.save(path)
    assert digest == file_fingerprint(path) == ck.fingerprint()
    back = Checkpoint.load(path)
    assert back.params.names() == ck.params.names()
    assert back.params.equal(ck.params)
    assert back.params.trainable == ck.params.trainable
    assert (back.stage, back.epoch, back.metrics, back.config_fingerprint, back.extra) == \
           ("stage3", 7, {"val_auc": 0.75}, "abc", {"method": "rps_pt"})
    assert back.to_bytes() == ck.to_bytes()


def test_header_layout():
    raw = sample_ckpt().to_bytes()
    assert raw.startswith(MAGIC)
    lines = raw.split(b"\n")
    assert lines[1].startswith(b"meta {")
    assert lines[2].startswith(b"tensors ")


def test_bytes_are_deterministic():
    assert sample_ckpt().to_bytes() == sample_ckpt().to_bytes()


@pytest.mark.parametrize("mutate", [
    lambda raw: b"NOTACKPT\n" + raw[len(MAGIC):],
    lambda raw: raw[:-4],
    lambda raw: raw[:30],
    lambda raw: raw.replace(b"tensors ", b"tensorz ", 1),
])
def test_corrupt_checkpoints(mutate):
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(mutate(sample_ckpt().to_bytes()))


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        Checkpoint.load(str(tmp_path / "nope.ckpt"))


def test_kv_config(tmp_path):
    assert parse_kv("# c\nlr = 1e-3  # trailing\nprompt-sites=3,4\n") == {"lr": "1e-3", "prompt_sites": "3,4"}
    with pytest.raises(ConfigError):
        parse_kv("novalue")
    with pytest.raises(ConfigError):
        read_kv(str(tmp_path / "missing.cfg"))
    vals = {"b": 2, "a": (1, 2)}
    assert format_kv(vals) == "a = 1,2\nb = 2\n"
    write_kv(str(tmp_path / "x.cfg"), vals)
    assert read_kv(str(tmp_path / "x.cfg")) == {"a": "1,2", "b": "2"}
    assert fingerprint(vals) == fingerprint({"a": (1, 2), "b": 2}) != fingerprint({"a": 1, "b": 2})
