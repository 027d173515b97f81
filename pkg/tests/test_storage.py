import struct

import numpy as np
import pytest
import torch

from deformhead import storage
from deformhead.field import init_field
from deformhead.refiner import Refiner


def _field_arrays(n_face=10, n_mouth=2, seed=0, dtype=torch.float32):
    f = init_field(n_face, n_mouth, [[-1, -1, -1], [1, 1, 1]], seed, dtype=dtype)
    return f, storage.module_arrays("field", f)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    f, arrays = _field_arrays(dtype=dtype)
    ref = Refiner(3).to(dtype)
    arrays.update(storage.module_arrays("refiner", ref))
    path = tmp_path / "a.ckpt"
    storage.write_checkpoint(path, arrays, {"kind": "test"})
    ck = storage.read_checkpoint(path)
    assert ck.meta == {"kind": "test"}
    for name, value in arrays.items():
        assert np.array_equal(ck.arrays[name], value.detach().numpy()), name
    g, _ = _field_arrays(seed=1, dtype=dtype)
    storage.load_module(g, ck, "field")
    for x, y in zip(f.raw(), g.raw()):
        assert torch.equal(x, y)


def _write(tmp_path):
    _, arrays = _field_arrays()
    path = tmp_path / "a.ckpt"
    storage.write_checkpoint(path, arrays)
    return path, path.read_bytes()


def test_bad_magic(tmp_path):
    path, data = _write(tmp_path)
    path.write_bytes(b"X" + data[1:])
    with pytest.raises(storage.BadMagicError):
        storage.read_checkpoint(path)


def test_version_mismatch(tmp_path):
    path, data = _write(tmp_path)
    path.write_bytes(data[:12] + struct.pack("<I", 99) + data[16:])
    with pytest.raises(storage.VersionMismatchError):
        storage.read_checkpoint(path)


def test_truncated(tmp_path):
    path, data = _write(tmp_path)
    path.write_bytes(data[:-40])
    with pytest.raises(storage.TruncatedCheckpointError):
        storage.read_checkpoint(path)


def test_checksum(tmp_path):
    path, data = _write(tmp_path)
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(storage.ChecksumError):
        storage.read_checkpoint(path)


def test_errors_are_distinct():
    kinds = {storage.BadMagicError, storage.VersionMismatchError, storage.TruncatedCheckpointError,
             storage.ChecksumError, storage.ShapeMismatchError}
    assert len(kinds) == 5 and all(issubclass(k, storage.CheckpointError) for k in kinds)


def test_shape_mismatch(tmp_path):
    _, arrays = _field_arrays(n_face=10)
    path = tmp_path / "a.ckpt"
    storage.write_checkpoint(path, arrays)
    other, _ = _field_arrays(n_face=12)
    with pytest.raises(storage.ShapeMismatchError):
        storage.load_module(other, storage.read_checkpoint(path), "field")


def test_tensor_container(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    storage.write_tensor(tmp_path / "t.bin", a)
    b = storage.read_tensor(tmp_path / "t.bin")
    assert b.dtype == np.float32 and np.array_equal(a, b)
    (tmp_path / "bad.bin").write_bytes(b"nope" * 8)
    with pytest.raises(storage.TensorFormatError):
        storage.read_tensor(tmp_path / "bad.bin")
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-4])
    with pytest.raises(storage.TensorFormatError):
        storage.read_tensor(tmp_path / "short.bin")
