import struct

import numpy as np
import pytest

from grcsf import io
from grcsf.errors import ValidationError


def test_raw_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    data = io.encode_raw(arr)
    assert data[:4] == b"GRCF"
    assert struct.unpack("<III", data[4:16]) == (1, 2, 3)
    assert len(data) == 16 + 6 * 4
    np.testing.assert_array_equal(io.decode_raw(data), arr)


def test_raw_rejects_bad_magic_and_length():
    with pytest.raises(ValidationError):
        io.decode_raw(b"XXXX" + bytes(12))
    data = io.encode_raw(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        io.decode_raw(data[:-4])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(2.5) * np.ones(())}
    io.save_checkpoint(tmp_path / "c.ckpt", tensors, {"kind": "test"})
    loaded, meta = io.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"kind": "test"}
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_png16_round_trip(tmp_path):
    arr = np.random.default_rng(1).random((16, 16))
    io.save_png16(tmp_path / "x.png", arr)
    back = io.load_png16(tmp_path / "x.png") / io.PNG_LEVELS
    np.testing.assert_allclose(back, arr, atol=0.5 / io.PNG_LEVELS + 1e-12)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.json"
    with pytest.raises(RuntimeError):
        with io.atomic_path(target) as tmp:
            tmp.write_text("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
