import numpy as np
import pytest

from mae_search import checkpoint


def _arrays():
    rng = np.random.default_rng(0)
    return {"w": rng.standard_normal((3, 4)), "b": np.zeros(4), "s": np.array(2.5)}


def test_round_trip_and_determinism(tmp_path):
    meta = {"kind": "test", "epoch": 3}
    d1 = checkpoint.save(tmp_path / "a.ckpt", meta, _arrays())
    d2 = checkpoint.save(tmp_path / "b.ckpt", meta, _arrays())
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    m, arrs = checkpoint.load(tmp_path / "a.ckpt")
    assert m == meta
    for k, v in _arrays().items():
        np.testing.assert_array_equal(arrs[k], v)
        assert arrs[k].shape == v.shape


def test_rejects_bad_magic_and_trailer():
    blob = checkpoint.dumps({}, _arrays())
    with pytest.raises(checkpoint.CheckpointError, match="not a checkpoint"):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    damaged = bytearray(blob)
    damaged[40] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError, match="checksum"):
        checkpoint.loads(bytes(damaged))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:10])


def test_missing_file(tmp_path):
    with pytest.raises(checkpoint.CheckpointError, match="not found"):
        checkpoint.load(tmp_path / "none.ckpt")
