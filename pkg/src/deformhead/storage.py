"""Binary formats: checkpoints and raw tensor containers.

Checkpoint layout (all integers little-endian)::

    magic    12 bytes  b"DEFORMHEADCK"
    version  u32
    hlen     u32       byte length of the text header
    header   utf-8     first line "#meta <json>", then one "name dtype d0,d1,..." line per array
    payload  arrays in header order, little-endian (<f4 / <f8 / <i8)
    crc32    u32       over every preceding byte

Tensor container (signals, depth maps)::

    magic b"D3TENSOR" | dtype 4 ascii bytes ("<f4 ") | ndim u32 | shape u32 * ndim | payload
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"DEFORMHEADCK"
CKPT_VERSION = 1
TENSOR_MAGIC = b"D3TENSOR"
DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}

PathLike = Union[str, Path]


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TensorFormatError(ValueError):
    pass


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.float64:
        return "f8"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        return "i8"
    return "f4"


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def write_checkpoint(path: PathLike, arrays: Mapping[str, object], meta: Mapping | None = None) -> None:
    lines = ["#meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    payloads = []
    for name, value in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        a = _to_numpy(value)
        code = _dtype_code(a)
        lines.append(f"{name} {code} {','.join(str(d) for d in a.shape)}")
        payloads.append(np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + b"".join(payloads)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.arrays)


def read_checkpoint(path: PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20:
        if not data.startswith(CKPT_MAGIC[: len(data)]):
            raise BadMagicError("not a checkpoint file (bad magic)")
        raise TruncatedCheckpointError("checkpoint shorter than its fixed preamble")
    if data[:12] != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 12)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    if len(data) < 20 + hlen:
        raise TruncatedCheckpointError("checkpoint header is truncated")
    try:
        lines = data[20:20 + hlen].decode("utf-8").splitlines()
        meta = json.loads(lines[0][len("#meta "):])
        specs = []
        for line in lines[1:]:
            name, code, shape = line.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            specs.append((name, DTYPES[code], dims))
    except (UnicodeDecodeError, ValueError, KeyError, IndexError) as exc:
        # a damaged header is reported through the checksum when one exists
        if len(data) >= 24 and zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
            raise ChecksumError("checkpoint checksum mismatch") from exc
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    expected = 20 + hlen + sum(int(np.prod(d)) * dt.itemsize for _, dt, d in specs) + 4
    if len(data) < expected:
        raise TruncatedCheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise ChecksumError(f"checkpoint has {len(data) - expected} trailing bytes")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    arrays = {}
    off = 20 + hlen
    for name, dt, dims in specs:
        n = int(np.prod(dims)) * dt.itemsize
        arrays[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(dims)), offset=off).reshape(dims).copy()
        off += n
    return Checkpoint(arrays, meta)


def module_arrays(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: nn.Module, ckpt: Checkpoint, prefix: str) -> nn.Module:
    """Copy ``prefix.*`` arrays into ``module``; shapes and key sets must match."""
    state = ckpt.tensors(prefix)
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ShapeMismatchError(f"{prefix}: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise ShapeMismatchError(f"{prefix}.{k}: checkpoint shape {tuple(state[k].shape)} != model shape {tuple(v.shape)}")
        state[k] = state[k].to(v.dtype)
    module.load_state_dict(state)
    return module


def write_tensor(path: PathLike, array) -> None:
    a = _to_numpy(array)
    code = _dtype_code(a)
    a = np.ascontiguousarray(a, dtype=DTYPES[code])
    head = TENSOR_MAGIC + f"<{code} ".encode("ascii") + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.tobytes())


def read_tensor(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: not a tensor container")
    code = data[9:11].decode("ascii")
    if code not in DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype {code!r}")
    (ndim,) = struct.unpack_from("<I", data, 12)
    shape = struct.unpack_from(f"<{ndim}I", data, 16)
    off = 16 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) != off + count * DTYPES[code].itemsize:
        raise TensorFormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype=DTYPES[code], count=count, offset=off).reshape(shape).copy()
