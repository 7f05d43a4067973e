"""Residual-buffer cache policy.

Recent tokens stay in a full-precision residual buffer; whenever it fills, the
buffered tokens are flushed through the quantization pipeline as one chunk and
appended to the quantized part. Chunk boundaries therefore depend only on the
token stream, never on how appends were batched, which makes prefill and
decode produce bit-identical caches.

Key chunks run transform -> per-position rotation -> Hadamard -> quantize (the
shift vector o stays unrotated and is rotated at score time); value chunks
arrive already Hadamard-transformed (the fused-projection convention) and run
transform -> quantize.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import BitMode, Codebook
from .core import DTYPE, as_tensor2d, tensor_to_bytes
from .errors import ShapeMismatch
from .hadamard import apply_rows
from .nsn import nsn_forward
from .rope import RopeParams, rope_rows
from .vq import QuantizedChunk, ScaleStrategy, quantize_chunk, serialize_chunk

SNAPSHOT_MAGIC = b"NSNS"


@dataclass(frozen=True)
class CacheConfig:
    d: int
    bit_mode: BitMode
    residual_size: int = 64
    strategy: ScaleStrategy = ScaleStrategy.PARALLEL
    rope_base: float = 10000.0
    dq_enabled: bool = True
    bypass_vq: bool = False  # validation only: store exact rows, no codebook

    def __post_init__(self):
        if self.residual_size < 1:
            raise ValueError("residual_size must be >= 1")


class ResidualBuffer:
    """Up-to-capacity full-precision rows awaiting quantization."""

    def __init__(self, capacity: int, d: int):
        self.capacity = capacity
        self._buf = np.zeros((capacity, d), dtype=DTYPE)
        self.count = 0

    @property
    def tokens(self) -> np.ndarray:
        return self._buf[: self.count]

    @property
    def is_full(self) -> bool:
        return self.count == self.capacity

    def push(self, rows: np.ndarray) -> None:
        k = rows.shape[0]
        if self.count + k > self.capacity:
            raise ShapeMismatch("residual buffer overflow")
        self._buf[self.count : self.count + k] = rows
        self.count += k

    def drain(self) -> np.ndarray:
        out = self._buf[: self.count].copy()
        self.count = 0
        return out


@dataclass
class KvCacheState:
    config: CacheConfig
    key_chunks: list[QuantizedChunk] = field(default_factory=list)
    value_chunks: list[QuantizedChunk] = field(default_factory=list)
    key_residual: ResidualBuffer | None = None
    value_residual: ResidualBuffer | None = None
    total_tokens: int = 0  # tokens appended to this cache
    base_position: int = 0  # absolute position of the first cached token
    clamp_count: int = 0
    zero_vector_count: int = 0
    s3_fallback_count: int = 0

    def __post_init__(self):
        if self.key_residual is None:
            self.key_residual = ResidualBuffer(self.config.residual_size, self.config.d)
        if self.value_residual is None:
            self.value_residual = ResidualBuffer(self.config.residual_size, self.config.d)

    @property
    def n_quantized(self) -> int:
        return len(self.key_chunks) * self.config.residual_size

    @property
    def residual_positions(self) -> np.ndarray:
        return self.base_position + np.arange(self.n_quantized, self.total_tokens)

    @property
    def key_shift_vectors(self) -> list[np.ndarray]:
        """Per-chunk pre-rotation shift vectors (same storage as the chunks)."""
        return [c.o_values() for c in self.key_chunks]


def new_cache(config: CacheConfig, base_position: int = 0) -> KvCacheState:
    return KvCacheState(config=config, base_position=base_position)


def flush_chunk_keys(
    chunk: np.ndarray, start_position: int, cb: Codebook, config: CacheConfig
) -> QuantizedChunk:
    """Quantize one chunk of pre-rotation key rows starting at start_position."""
    rows = as_tensor2d(chunk, cols=config.d)
    if rows.shape[0] < 1:
        raise ShapeMismatch("cannot flush an empty chunk")
    out = nsn_forward(rows)
    positions = start_position + np.arange(rows.shape[0])
    rotated = rope_rows(out.v_nsn, positions, RopeParams(d=config.d, base=config.rope_base))
    transformed = apply_rows(rotated)
    qc = quantize_chunk(
        transformed,
        out.byproducts,
        cb,
        config.strategy,
        dq_enabled=config.dq_enabled,
        residual_size=config.residual_size,
        bypass_vq=config.bypass_vq,
    )
    qc.nsn_clamped = out.n_clamped
    return qc


def flush_chunk_values(chunk: np.ndarray, cb: Codebook, config: CacheConfig) -> QuantizedChunk:
    """Quantize one chunk of (already Hadamard-transformed) value rows."""
    rows = as_tensor2d(chunk, cols=config.d)
    if rows.shape[0] < 1:
        raise ShapeMismatch("cannot flush an empty chunk")
    out = nsn_forward(rows)
    qc = quantize_chunk(
        out.v_nsn,
        out.byproducts,
        cb,
        config.strategy,
        dq_enabled=config.dq_enabled,
        residual_size=config.residual_size,
        bypass_vq=config.bypass_vq,
    )
    qc.nsn_clamped = out.n_clamped
    return qc


def append(
    state: KvCacheState,
    new_keys: np.ndarray,
    new_values: np.ndarray,
    cb_k: Codebook,
    cb_v: Codebook,
) -> KvCacheState:
    """Add tokens to the cache, flushing full residual-size chunks as they form.

    Keys are pre-rotation projections; values are post-Hadamard projections.
    The resulting state depends only on the concatenated token stream.
    """
    keys = as_tensor2d(new_keys, cols=state.config.d)
    values = as_tensor2d(new_values, cols=state.config.d)
    if keys.shape != values.shape:
        raise ShapeMismatch("key and value batches must have the same shape")
    if keys.shape[0] < 1:
        raise ShapeMismatch("append needs at least one token")

    offset = 0
    n = keys.shape[0]
    r = state.config.residual_size
    while offset < n:
        take = min(r - state.key_residual.count, n - offset)
        state.key_residual.push(keys[offset : offset + take])
        state.value_residual.push(values[offset : offset + take])
        offset += take
        state.total_tokens += take
        if state.key_residual.is_full:
            start = state.base_position + len(state.key_chunks) * r
            kq = flush_chunk_keys(state.key_residual.drain(), start, cb_k, state.config)
            vq_ = flush_chunk_values(state.value_residual.drain(), cb_v, state.config)
            state.key_chunks.append(kq)
            state.value_chunks.append(vq_)
            for qc in (kq, vq_):
                state.clamp_count += qc.nsn_clamped
                state.zero_vector_count += qc.zero_vector_count
                state.s3_fallback_count += qc.s3_fallback_count
    return state


def snapshot(state: KvCacheState) -> bytes:
    """Byte image of the cache for equivalence tests: chunk wire blocks in
    token order followed by the residual tensors."""
    out = bytearray()
    out += SNAPSHOT_MAGIC
    out += struct.pack("<IQQ", len(state.key_chunks), state.total_tokens, state.base_position)
    for qc in state.key_chunks:
        blob = serialize_chunk(qc)
        out += struct.pack("<I", len(blob)) + blob
    for qc in state.value_chunks:
        blob = serialize_chunk(qc)
        out += struct.pack("<I", len(blob)) + blob
    for buf in (state.key_residual, state.value_residual):
        blob = tensor_to_bytes(buf.tokens)
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)
