"""Binary checkpoint codec.

Layout (all integers little-endian):

    magic   4 bytes  b"DTSE"
    u32     format version (currently 1)
    u32     config blob length, then that many bytes of config JSON
    u32     tensor count
    per tensor:
        u16   name length, then the UTF-8 name
        u8    dtype code (0 = float32)
        u8    trainable flag
        u8    ndim
        u32 x ndim   dims
        payload      little-endian float32, C order

Round trips are bit-exact. Loading validates the tensor set against the
embedded config and names the first missing or malformed tensor.
"""

import struct

import numpy as np

from ..architecture import Checkpoint, ModelConfig, parameter_spec
from ..numerics import Tensor

MAGIC = b"DTSE"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def ckpt_save(path, ckpt: Checkpoint):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = ckpt.config.to_json().encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(ckpt.entries)))
    for name, t in ckpt.entries.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<BBB", DTYPE_F32, 1 if t.trainable else 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    return path


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated file while reading {what} "
                f"(needed {n} bytes at offset {self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def ckpt_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    blob_len = r.u32("config length")
    blob = r.take(blob_len, "config blob")
    try:
        config = ModelConfig.from_json(blob.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: invalid config blob: {e}") from None
    count = r.u32("tensor count")
    entries = {}
    for i in range(count):
        nlen = r.u16(f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode("utf-8", errors="replace")
        dtype = r.u8(f"tensor {name!r} dtype")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        trainable = r.u8(f"tensor {name!r} trainable flag")
        ndim = r.u8(f"tensor {name!r} ndim")
        if ndim > 3:
            raise CheckpointError(f"{path}: tensor {name!r} has rank {ndim} > 3")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor {name!r} dims"))
        n_el = 1
        for d in dims:
            n_el *= d
        payload = r.take(4 * n_el, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, "<f4").reshape(dims).copy()
        if name in entries:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        entries[name] = Tensor(arr, name=name, trainable=bool(trainable))
    if r.pos != len(data):
        raise CheckpointError(
            f"{path}: {len(data) - r.pos} trailing bytes after the last tensor"
        )
    expected = dict(parameter_spec(config))
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"{path}: checkpoint is missing tensor {name!r}")
        if entries[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {entries[name].shape}, expected {shape}"
            )
    extra = sorted(set(entries) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {extra}")
    return Checkpoint(config, entries)
