"""Binary tensor and checkpoint formats.

Tensor wire format (magic "ADT1"): u8 dtype code, u32 rank, u64 extents,
then the little-endian C-order payload. Checkpoints are a JSON header plus
the named weights, each in tensor format, sorted by name. Fingerprints are
64-bit FNV-1a over the canonicalized bytes.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

TENSOR_MAGIC = b"ADT1"
CHECKPOINT_MAGIC = b"ADCK"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(Exception):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    head = TENSOR_MAGIC + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")


def tensor_from_stream(buf) -> np.ndarray:
    magic = buf.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BI", buf.read(5))
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank)) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = 1
    for s in shape:
        count *= s
    payload = buf.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return tensor_from_stream(io.BytesIO(data))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_stream(f)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_weight_bytes(header: dict, weights: dict) -> bytes:
    """Deterministic byte stream for fingerprinting: sorted-key JSON header
    followed by each weight (sorted by name) in tensor format."""
    out = [json.dumps(header, sort_keys=True, separators=(",", ":")).encode()]
    for name in sorted(weights):
        out.append(name.encode())
        out.append(tensor_to_bytes(np.asarray(weights[name])))
    return b"".join(out)


def fingerprint(header: dict, weights: dict) -> str:
    return f"{fnv1a64(canonical_weight_bytes(header, weights)):016x}"


def save_checkpoint(path, header: dict, weights: dict) -> None:
    hdr = dict(header)
    hdr["weight_names"] = sorted(weights)
    blob = json.dumps(hdr, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in sorted(weights):
            f.write(tensor_to_bytes(np.asarray(weights[name])))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        weights = {}
        for name in header.pop("weight_names"):
            weights[name] = tensor_from_stream(f)
    return header, weights
