"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SUBNETENS\\0"            10 bytes
    version                    u32
    payload length             u64
    sha256(version|length|payload)  32 bytes
    payload:
        metadata length        u32
        metadata               UTF-8 JSON, sorted keys
        tensor bytes           '<f4' (or '<f8' for 64-bit stores), in metadata order
        mask bitsets           per layer: u64 popcount, then np.packbits bytes

A file may hold several members (a deep ensemble); ``load_checkpoint``
returns the single bundle, ``load_members`` the full list.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .masks import Mask, MaskSet
from .nn import Architecture, WeightStore
from .trainer import ModelBundle, TrainConfig

MAGIC = b"SUBNETENS\0"
VERSION = 1
_HEADER = struct.Struct("<IQ")
_PREFIX = len(MAGIC) + _HEADER.size + 32


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _dtype_code(dtype: np.dtype) -> str:
    return {"float32": "<f4", "float64": "<f8"}[np.dtype(dtype).name]


def _encode_mask(mask: Mask, blob: bytearray) -> dict:
    start = len(blob)
    for layer, count in zip(mask.layers, mask.popcounts):
        blob += struct.pack("<Q", count)
        blob += np.packbits(layer.ravel()).tobytes()
    return {"offset": start, "nbytes": len(blob) - start, "popcounts": list(mask.popcounts)}


def _decode_mask(entry: dict, blob: memoryview, shapes) -> Mask:
    pos = entry["offset"]
    end = pos + entry["nbytes"]
    layers = []
    for shape, want in zip(shapes, entry["popcounts"]):
        n = int(np.prod(shape))
        if pos + 8 > end:
            raise CheckpointError("mask record overruns its region")
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        nb = (n + 7) // 8
        bits = np.unpackbits(np.frombuffer(blob, np.uint8, nb, pos), count=n).astype(bool)
        pos += nb
        if count != want or int(bits.sum()) != count:
            raise CheckpointError("mask popcount header does not match its bits")
        layers.append(bits.reshape(shape))
    return Mask(layers)


def _member_meta(bundle: ModelBundle, blob: bytearray) -> dict:
    store = bundle.store
    code = _dtype_code(store.dtype)
    tensors = []
    for kind, table in (("param", store.params), ("buffer", store.buffers)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype=code)
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": len(blob)})
            blob += arr.tobytes()
    meta = {
        "method": bundle.method,
        "config": bundle.config.to_dict(),
        "arch": store.arch.to_dict(),
        "variants": store.variants,
        "heads": store.heads,
        "dtype": code,
        "frozen": sorted(store.frozen),
        "tensors": tensors,
        "logs": bundle.logs,
        "masks": None,
    }
    ms = bundle.masks
    if ms is not None:
        meta["masks"] = {
            "k": ms.k,
            "shapes": [list(s) for s in ms.shapes],
            "entries": [None if m is None else _encode_mask(m, blob) for m in ms.masks],
            "claimed": _encode_mask(ms.claimed, blob),
        }
    return meta


def dumps(bundles: ModelBundle | Sequence[ModelBundle]) -> bytes:
    if isinstance(bundles, ModelBundle):
        bundles = [bundles]
    blob = bytearray()
    members = [_member_meta(b, blob) for b in bundles]
    meta = json.dumps({"members": members}, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack("<I", len(meta)) + meta + bytes(blob)
    header = _HEADER.pack(VERSION, len(payload))
    digest = hashlib.sha256(header + payload).digest()
    return MAGIC + header + digest + payload


def _member_from_meta(m: dict, blob: memoryview) -> ModelBundle:
    arch = Architecture.from_dict(m["arch"])
    dtype = np.dtype(m["dtype"]).newbyteorder("=")
    store = WeightStore(arch, variants=m["variants"], heads=m["heads"], dtype=dtype)
    for t in m["tensors"]:
        table = store.params if t["kind"] == "param" else store.buffers
        if t["name"] not in table:
            raise CheckpointError(f"unexpected tensor {t['name']}")
        shape = tuple(t["shape"])
        if shape != table[t["name"]].shape:
            raise CheckpointError(f"tensor {t['name']} has shape {shape}, expected {table[t['name']].shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=m["dtype"], count=n, offset=t["offset"])
        table[t["name"]] = arr.astype(dtype).reshape(shape)
    store.frozen = set(m["frozen"])
    masks = None
    if m["masks"] is not None:
        mm = m["masks"]
        shapes = tuple(tuple(s) for s in mm["shapes"])
        entries = tuple(None if e is None else _decode_mask(e, blob, shapes) for e in mm["entries"])
        masks = MaskSet(mm["k"], shapes, entries, _decode_mask(mm["claimed"], blob, shapes))
    return ModelBundle(m["method"], TrainConfig.from_dict(m["config"]), store, masks, m["logs"])


def loads(data: bytes) -> list[ModelBundle]:
    """Parse checkpoint bytes; the checksum is validated before any field is used."""
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(bytes(data)):
            raise TruncatedCheckpointError("file ends inside the magic string")
        raise CheckpointMagicError("not a checkpoint (bad magic)")
    if len(data) < _PREFIX:
        raise TruncatedCheckpointError(f"file has {len(data)} bytes, header needs {_PREFIX}")
    header = data[len(MAGIC) : len(MAGIC) + _HEADER.size]
    version, length = _HEADER.unpack(header)
    digest = data[len(MAGIC) + _HEADER.size : _PREFIX]
    payload = data[_PREFIX:]
    if len(payload) < length:
        raise TruncatedCheckpointError(f"payload has {len(payload)} bytes, header promises {length}")
    if len(payload) > length:
        raise ChecksumError(f"{len(payload) - length} unexpected trailing bytes")
    if hashlib.sha256(header + payload).digest() != digest:
        raise ChecksumError("checksum mismatch")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (meta_len,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + meta_len].decode())
    blob = memoryview(payload)[4 + meta_len :]
    return [_member_from_meta(m, blob) for m in meta["members"]]


def save_checkpoint(bundles: ModelBundle | Sequence[ModelBundle], path) -> None:
    """Write atomically: a temporary file in the target directory, then rename."""
    data = dumps(bundles)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_members(path) -> list[ModelBundle]:
    return loads(Path(path).read_bytes())


def load_checkpoint(path) -> ModelBundle:
    members = load_members(path)
    if len(members) != 1:
        raise CheckpointError(f"checkpoint holds {len(members)} members; use load_members")
    return members[0]
