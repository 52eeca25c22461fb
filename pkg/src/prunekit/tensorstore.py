"""Named f32 tensor container and its little-endian binary file format.

Layout (all integers little-endian, no padding)::

    b"PRWT" | version u32 = 1 | tensor_count u32 | reserved u32 = 0
    per tensor:
        name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u32 * rank
        payload: prod(dims) f32 values, row-major

Conv kernels are stored output-major, ``[o, i, k, k]``, so removing an output
channel is a slice along axis 0. Tensor names follow ``<node-id>.kernel`` and
``<node-id>.bias``.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .nir import NetworkGraph

MAGIC = b"PRWT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIII")
_LE_F32 = np.dtype("<f4")


class TensorStoreError(ValueError):
    pass


class BadMagicError(TensorStoreError):
    pass


class UnsupportedVersionError(TensorStoreError):
    pass


class TruncatedError(TensorStoreError):
    pass


class DimsMismatchError(TensorStoreError):
    pass


class MissingTensorError(KeyError):
    pass


class WeightStore(dict):
    """Ordered mapping of tensor name to float32 ndarray."""

    def kernel(self, node_id: str) -> np.ndarray:
        try:
            return self[f"{node_id}.kernel"]
        except KeyError:
            raise MissingTensorError(f"no kernel tensor for node {node_id!r}") from None

    def bias(self, node_id: str) -> np.ndarray | None:
        return self.get(f"{node_id}.bias")

    def copy(self) -> "WeightStore":
        return WeightStore((k, v.copy()) for k, v in self.items())

    def to_bytes(self) -> bytes:
        return dumps(self)

    def checksum(self) -> str:
        return hashlib.sha256(dumps(self)).hexdigest()

    def check_against(self, graph: NetworkGraph) -> list[str]:
        """List inconsistencies between conv nodes and stored kernels/biases."""
        problems = []
        for nid in graph.conv_ids():
            a = graph.nodes[nid].attrs
            expect = (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])
            k = self.get(f"{nid}.kernel")
            if k is None:
                problems.append(f"{nid}: missing kernel")
            elif k.shape != expect:
                problems.append(f"{nid}: kernel shape {k.shape} != {expect}")
            b = self.get(f"{nid}.bias")
            if a.get("bias", True) and b is not None and b.shape != (a["out_channels"],):
                problems.append(f"{nid}: bias shape {b.shape} != ({a['out_channels']},)")
        return problems


def dumps(store: dict) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(store), 0)]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack(f"<H{len(raw)}sBB", len(raw), raw, DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return b"".join(parts)


def loads(data: bytes) -> WeightStore:
    if len(data) < _HEADER.size:
        raise TruncatedError(f"file is {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, count, _reserved = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    pos = _HEADER.size
    store = WeightStore()

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"truncated payload at byte {pos} (need {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != DTYPE_F32:
            raise UnsupportedVersionError(f"tensor {name!r}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype=_LE_F32).astype(np.float32).reshape(dims)
        store[name] = arr
    if pos != len(data):
        raise DimsMismatchError(
            f"{len(data) - pos} bytes of payload beyond what the declared dims account for")
    return store


def save(store: dict, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps(store))


def load(path) -> WeightStore:
    with open(path, "rb") as f:
        return loads(f.read())


def max_abs_per_output_channel(store: WeightStore, node_id: str) -> np.ndarray:
    """Largest |w| over each output channel's kernel (bias excluded)."""
    k = store.kernel(node_id)
    return np.abs(k).reshape(k.shape[0], -1).max(axis=1, initial=0.0)


def init_weights(graph: NetworkGraph, seed: int) -> WeightStore:
    """He-normal kernels (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for nid in graph.conv_ids():
        a = graph.nodes[nid].attrs
        o, i, k = a["out_channels"], a["in_channels"], a["kernel"]
        std = np.sqrt(2.0 / max(i * k * k, 1))
        store[f"{nid}.kernel"] = (rng.standard_normal((o, i, k, k)) * std).astype(np.float32)
        if a.get("bias", True):
            store[f"{nid}.bias"] = np.zeros(o, dtype=np.float32)
    return store
