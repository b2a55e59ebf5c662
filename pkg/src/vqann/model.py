"""Trained quantizer model and its binary containers.

Model file (``VQM1``), little-endian throughout::

    magic      4s   b"VQM1"
    variant    u8   index into VARIANTS
    flags      u8   bit 0: rotation present, bit 1: sparse codebook block
    reserved   u16  0
    M, K, D    3 x u32
    epsilon    f64
    nnz        u64  nonzero codebook entries
    codebook   dense: M*K*D f64, row-major (m, k, d)
               sparse: nnz u32 flat indices (ascending), then nnz f64 values
    rotation   D*D f64, row-major (only with flag bit 0)
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
               (train_log, mu, diagnostics)

Codes file (``VQC1``)::

    magic 4s b"VQC1", N u32, M u32, K u32, flags u8 (bit 0: deltas), 3 pad bytes
    packed codes (see core.pack_codes), then N f32 deltas when flagged
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import Rotation
from .core import CodebookSet, code_bytes_per_vector, pack_codes, unpack_codes

VARIANTS = ("PQ", "CKM", "CQ", "OCQ", "NOCQ", "SNOCQ")

_MODEL_HEADER = struct.Struct("<4sBBHIIIdQ")
_CODES_HEADER = struct.Struct("<4sIIIB3x")
_FLAG_ROTATION = 1
_FLAG_SPARSE = 2


class ModelFormatError(ValueError):
    pass


@dataclass
class QuantizerModel:
    variant: str
    codebooks: CodebookSet
    epsilon: float = 0.0
    rotation: Rotation | None = None
    train_log: list[float] = field(default_factory=list)
    mu: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    # training-set codes; kept in memory only, never written to the model file
    codes: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")

    @property
    def m(self) -> int:
        return self.codebooks.m

    @property
    def k(self) -> int:
        return self.codebooks.k

    @property
    def d(self) -> int:
        return self.codebooks.d

    @property
    def bits(self) -> int:
        return int(round(self.m * np.log2(self.k)))

    @property
    def encode_mu(self) -> float:
        """Penalty weight used when encoding new vectors."""
        return self.mu if self.variant in ("NOCQ", "SNOCQ") else 0.0


def model_to_bytes(model: QuantizerModel, sparse: bool | None = None) -> bytes:
    e = model.codebooks.elements
    m, k, d = e.shape
    flat = e.ravel()
    nz = np.flatnonzero(flat)
    if sparse is None:
        sparse = nz.size * 12 < flat.size * 8
    flags = (_FLAG_ROTATION if model.rotation is not None else 0) | (_FLAG_SPARSE if sparse else 0)
    parts = [_MODEL_HEADER.pack(b"VQM1", VARIANTS.index(model.variant), flags, 0, m, k, d,
                                float(model.epsilon), nz.size)]
    if sparse:
        parts.append(nz.astype("<u4").tobytes())
        parts.append(flat[nz].astype("<f8").tobytes())
    else:
        parts.append(flat.astype("<f8").tobytes())
    if model.rotation is not None:
        parts.append(np.ascontiguousarray(model.rotation.r).astype("<f8").tobytes())
    meta = json.dumps({"train_log": [float(v) for v in model.train_log], "mu": float(model.mu),
                       "diagnostics": model.diagnostics}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> QuantizerModel:
    if len(buf) < _MODEL_HEADER.size:
        raise ModelFormatError("model file too short")
    magic, vtag, flags, _, m, k, d, eps, nnz = _MODEL_HEADER.unpack_from(buf, 0)
    if magic != b"VQM1":
        raise ModelFormatError(f"bad magic {magic!r}")
    if vtag >= len(VARIANTS):
        raise ModelFormatError(f"bad variant tag {vtag}")
    off = _MODEL_HEADER.size
    size = m * k * d

    def take(count, dtype):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(buf):
            raise ModelFormatError("model file truncated")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    if flags & _FLAG_SPARSE:
        idx = take(nnz, "<u4").astype(np.int64)
        vals = take(nnz, "<f8")
        flat = np.zeros(size)
        flat[idx] = vals
    else:
        flat = take(size, "<f8").astype(np.float64)
    rotation = None
    if flags & _FLAG_ROTATION:
        rotation = Rotation(take(d * d, "<f8").reshape(d, d).copy())
    meta = {}
    if off + 4 <= len(buf):
        (mlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = json.loads(buf[off:off + mlen].decode())
    return QuantizerModel(VARIANTS[vtag], CodebookSet(flat.reshape(m, k, d)), float(eps), rotation,
                          list(meta.get("train_log", [])), float(meta.get("mu", 0.0)),
                          dict(meta.get("diagnostics", {})))


def save_model(model: QuantizerModel, path, sparse: bool | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, sparse))


def load_model(path) -> QuantizerModel:
    return model_from_bytes(Path(path).read_bytes())


def codes_to_bytes(codes, k: int, deltas=None) -> bytes:
    c = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    n, m = c.shape
    flags = 1 if deltas is not None else 0
    out = [_CODES_HEADER.pack(b"VQC1", n, m, k, flags), pack_codes(c, k)]
    if deltas is not None:
        out.append(np.asarray(deltas, dtype="<f4").tobytes())
    return b"".join(out)


def codes_from_bytes(buf: bytes) -> tuple[np.ndarray, int, np.ndarray | None]:
    """Return (codes, K, deltas or None)."""
    if len(buf) < _CODES_HEADER.size:
        raise ModelFormatError("codes file too short")
    magic, n, m, k, flags = _CODES_HEADER.unpack_from(buf, 0)
    if magic != b"VQC1":
        raise ModelFormatError(f"bad magic {magic!r}")
    off = _CODES_HEADER.size
    per = code_bytes_per_vector(m, k)
    if len(buf) < off + n * per + (4 * n if flags & 1 else 0):
        raise ModelFormatError("codes file truncated")
    codes = unpack_codes(buf[off:off + n * per], n, m, k)
    off += n * per
    deltas = None
    if flags & 1:
        deltas = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
    return codes, k, deltas


def save_codes(codes, k: int, path, deltas=None) -> None:
    Path(path).write_bytes(codes_to_bytes(codes, k, deltas))


def load_codes(path):
    return codes_from_bytes(Path(path).read_bytes())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
