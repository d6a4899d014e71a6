"""Portable named-tensor container, used for checkpoints and data samples.

Layout: magic ``VVIT``, u32 version, u32 tensor count, then per tensor
u32 name length, name bytes, u32 rank, u32 dims..., float32
little-endian payload. Payloads are always float32 regardless of the
compute precision, so files are portable across builds.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, \
    CheckpointVersionError
from .tensor import Tensor

MAGIC = b"VVIT"
VERSION = 1
FINGERPRINT_KEY = "meta/config_fingerprint"


def save_tensors(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b"")
        chunks.append(data.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"file ends at byte {len(self.blob)}, needed {self.off + n}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    count = r.u32()
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes")
    return out


def save_checkpoint(named_params, path, fingerprint: str = "") -> None:
    """Write model parameters plus the config fingerprint (hex sha256)."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    if fingerprint:
        fp = np.frombuffer(bytes.fromhex(fingerprint), dtype=np.uint8)
        tensors[FINGERPRINT_KEY] = fp.astype(np.float32)
    for name, p in named_params:
        tensors[name] = p.data if isinstance(p, Tensor) else np.asarray(p)
    save_tensors(path, tensors)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", str]:
    """Read a checkpoint; returns (parameters, hex fingerprint or '')."""
    tensors = load_tensors(path)
    fingerprint = ""
    fp = tensors.pop(FINGERPRINT_KEY, None)
    if fp is not None:
        fingerprint = bytes(fp.astype(np.uint8)).hex()
    return tensors, fingerprint


def load_into(named_params, path, dtype=None) -> str:
    """Load a checkpoint into live parameters, atomically.

    All names and shapes are validated before anything is written, so a
    mismatch leaves the model untouched. Returns the stored fingerprint.
    """
    params = list(named_params)
    stored, fingerprint = load_checkpoint(path)
    live = {name: p for name, p in params}
    for name, p in live.items():
        if name not in stored:
            raise CheckpointShapeError(f"{path}: missing tensor {name!r}")
        if stored[name].shape != p.data.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {stored[name].shape}, "
                f"model expects {p.data.shape}")
    extra = [n for n in stored if n not in live]
    if extra:
        raise CheckpointShapeError(f"{path}: unexpected tensor {extra[0]!r}")
    for name, p in live.items():
        p.data = stored[name].astype(dtype or p.data.dtype)
    return fingerprint


def params_digest(named_params) -> str:
    """Hash of the float32 serialization of every parameter (freeze checks)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in named_params:
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
