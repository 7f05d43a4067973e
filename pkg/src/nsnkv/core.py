"""Dense tensor container, seeded random generation, and scalar helpers.

A "tensor" throughout this package is a C-contiguous float32 numpy array of
shape (tokens, channels). All pipeline arithmetic stays in 32-bit floats;
diagnostics may accumulate in float64 where noted.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, ShapeMismatch

DTYPE = np.float32

TENSOR_MAGIC = b"NSNT"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator. Identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor2d(x, cols: int | None = None) -> np.ndarray:
    """Validate and convert to a C-contiguous float32 2-D array.

    Rejects non-2-D input, NaN/Inf entries, and (optionally) a wrong
    channel count.
    """
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected 2-D tensor, got ndim={a.ndim}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeMismatch(f"expected {cols} channels, got {a.shape[1]}")
    if a.size and not np.isfinite(a).all():
        raise ValueError("tensor contains NaN or Inf")
    return a


def sample_standard_normal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """i.i.d. N(0,1) float32 tensor of shape (rows, cols)."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols), dtype=DTYPE)


def row_norms(t: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row (float32)."""
    t = np.asarray(t, dtype=DTYPE)
    return np.sqrt(np.einsum("ij,ij->i", t, t))


def col_means(t: np.ndarray) -> np.ndarray:
    """Arithmetic mean of each column (float32).

    Accumulates in float64 so that subtracting the mean cancels exactly on
    constant columns; identical-token chunks rely on this to degenerate
    cleanly in the transform.
    """
    t = np.asarray(t, dtype=DTYPE)
    if t.shape[0] < 1:
        raise ShapeMismatch("need at least one row")
    return t.mean(axis=0, dtype=np.float64).astype(DTYPE)


def save_tensor(path, t: np.ndarray) -> None:
    """Write the binary dump format: magic, u32 rows, u32 cols, f32 data (LE)."""
    t = as_tensor2d(t)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", t.shape[0], t.shape[1]))
        f.write(t.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return tensor_from_bytes(data)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = as_tensor2d(t)
    head = TENSOR_MAGIC + struct.pack("<II", t.shape[0], t.shape[1])
    return head + t.astype("<f4", copy=False).tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor dump: missing magic header")
    rows, cols = struct.unpack("<II", data[4:12])
    expected = 12 + rows * cols * 4
    if len(data) != expected:
        raise FormatError(f"bad tensor dump: expected {expected} bytes, got {len(data)}")
    a = np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols)
    # astype copies (detaching from the read-only buffer); validation re-checks
    # shape and rejects NaN/Inf so no transform ever sees them
    return as_tensor2d(a.astype(DTYPE))


def pack_nibbles(values: np.ndarray) -> np.ndarray:
    """Pack 4-bit values (uint8 in [0,15]) two per byte, low nibble first."""
    v = np.asarray(values, dtype=np.uint8).ravel()
    if v.size % 2:
        v = np.concatenate([v, np.zeros(1, dtype=np.uint8)])
    return (v[0::2] | (v[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, n_values: int) -> np.ndarray:
    """Inverse of pack_nibbles; returns n_values uint8 levels."""
    p = np.asarray(packed, dtype=np.uint8)
    out = np.empty(p.size * 2, dtype=np.uint8)
    out[0::2] = p & 0x0F
    out[1::2] = p >> 4
    return out[:n_values]


def tensor_to_json(t: np.ndarray) -> str:
    """JSON form for small test fixtures."""
    t = as_tensor2d(t)
    return json.dumps(
        {"rows": t.shape[0], "cols": t.shape[1], "data": [float(x) for x in t.ravel()]}
    )


def tensor_from_json(s: str) -> np.ndarray:
    try:
        obj = json.loads(s)
        rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"bad tensor JSON: {e}") from e
    if len(data) != rows * cols:
        raise FormatError("bad tensor JSON: data length mismatch")
    return np.asarray(data, dtype=DTYPE).reshape(rows, cols)
