"""Chunk-level vector quantization with scale adjustment and double quantization.

A chunk of unit-norm (sqrt(d)) rows is split into consecutive 8-dim
sub-vectors, each matched against the codebook. The per-token scale s2 is
then adjusted over the full d-dim token so the reconstruction error is
orthogonal to the token (strategy 3, the default). The transform byproducts
are double-quantized: s1 and the shift vector o with 4-bit round-to-nearest
(group sizes: residual size and 32 channels), s2 kept at 16 bits per token.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .codebook import BitMode, Codebook, lookup_block, match_block
from .core import DTYPE, as_tensor2d, pack_nibbles, unpack_nibbles
from .errors import DegenerateProjection, FormatError, ShapeMismatch, ZeroVector
from .nsn import NsnByproducts

SUB_DIM = 8
O_GROUP = 32  # channels per shift-vector quantization group

CHUNK_VERSION_HEADER = struct.Struct("<HHBB")  # n_tokens, d, bit_mode, strategy


class ScaleStrategy(enum.IntEnum):
    """How the reconstructed token is rescaled relative to the original."""

    NONE = 0
    MIN_L2 = 1       # least-squares along v_Q: (v.v_Q) / ||v_Q||^2
    NORM_MATCH = 2   # match magnitudes: ||v|| / ||v_Q||
    PARALLEL = 3     # preserve the component along v: ||v||^2 / (v.v_Q)

    @staticmethod
    def parse(s) -> "ScaleStrategy":
        if isinstance(s, ScaleStrategy):
            return s
        return {
            "none": ScaleStrategy.NONE,
            "s1": ScaleStrategy.MIN_L2,
            "s2": ScaleStrategy.NORM_MATCH,
            "s3": ScaleStrategy.PARALLEL,
        }[str(s).lower()]


def adjust_scale(v: np.ndarray, v_q: np.ndarray, strategy: ScaleStrategy) -> float:
    """Scalar factor applied to v_q (equivalently folded into s2)."""
    strategy = ScaleStrategy.parse(strategy)
    a = np.asarray(v, dtype=np.float64).ravel()
    b = np.asarray(v_q, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch("v and v_q must have the same length")
    if strategy is ScaleStrategy.NONE:
        return 1.0
    v2 = float(a @ a)
    q2 = float(b @ b)
    if q2 == 0.0:
        raise ZeroVector("quantized vector is zero")
    dot = float(a @ b)
    if strategy is ScaleStrategy.MIN_L2:
        return dot / q2
    if strategy is ScaleStrategy.NORM_MATCH:
        return math.sqrt(v2 / q2)
    if abs(dot) <= 1e-10 * math.sqrt(v2 * q2):
        raise DegenerateProjection("v and v_q are (near-)orthogonal")
    return v2 / dot


def _adjust_factors(
    v: np.ndarray, recon: np.ndarray, strategy: ScaleStrategy
) -> tuple[np.ndarray, int]:
    """Vectorized per-token factors; strategy-3 degenerates fall back to
    norm matching instead of raising (streaming caches must not crash)."""
    a = v.astype(np.float64)
    b = recon.astype(np.float64)
    v2 = (a * a).sum(axis=1)
    q2 = (b * b).sum(axis=1)
    dot = (a * b).sum(axis=1)
    if strategy is ScaleStrategy.NONE:
        return np.ones(v.shape[0]), 0
    if strategy is ScaleStrategy.MIN_L2:
        return dot / q2, 0
    norm_match = np.sqrt(v2 / q2)
    if strategy is ScaleStrategy.NORM_MATCH:
        return norm_match, 0
    bad = np.abs(dot) <= 1e-10 * np.sqrt(v2 * q2)
    factors = np.where(bad, norm_match, v2 / np.where(bad, 1.0, dot))
    return factors, int(bad.sum())


# ---------------------------------------------------------------------------
# 4-bit round-to-nearest with per-group scale/zero


def _rtn4_params(values: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray, int]:
    v = np.asarray(values, dtype=DTYPE).ravel()
    n_groups = (v.size + group_size - 1) // group_size
    scales = np.empty(n_groups, dtype=DTYPE)
    zeros = np.empty(n_groups, dtype=DTYPE)
    for g in range(n_groups):
        chunk = v[g * group_size : (g + 1) * group_size]
        lo, hi = chunk.min(), chunk.max()
        zeros[g] = lo
        scales[g] = DTYPE(1.0) if hi == lo else (hi - lo) / DTYPE(15.0)
    return scales, zeros, n_groups


def _rtn4_levels(values, scales, zeros, group_size) -> np.ndarray:
    v = np.asarray(values, dtype=DTYPE).ravel()
    g = np.arange(v.size) // group_size
    lv = np.rint((v - zeros[g].astype(DTYPE)) / scales[g].astype(DTYPE))
    return np.clip(lv, 0, 15).astype(np.uint8)


def rtn4_group(values: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """4-bit RTN: per group, zero = min and scale = (max-min)/15 (1 if flat).

    Returns (packed nibbles, scales, zeros); reconstruction error is at most
    half a step everywhere and zero for constant groups.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    scales, zeros, _ = _rtn4_params(values, group_size)
    levels = _rtn4_levels(values, scales, zeros, group_size)
    return pack_nibbles(levels), scales, zeros


def rtn4_dequant(packed, n_values, group_size, scales, zeros) -> np.ndarray:
    levels = unpack_nibbles(packed, n_values).astype(DTYPE)
    g = np.arange(n_values) // group_size
    return zeros.astype(DTYPE)[g] + levels * scales.astype(DTYPE)[g]


@dataclass
class Rtn4Data:
    """Storage form of a double-quantized array.

    Scale/zero pairs are held at 16-bit (the rated storage width); levels are
    encoded against those rounded parameters, so the 4-bit layer itself adds
    no error on constant groups.
    """

    packed: np.ndarray  # uint8 nibbles
    n_values: int
    group_size: int
    scales: np.ndarray  # float16 (n_groups,)
    zeros: np.ndarray   # float16 (n_groups,)

    @staticmethod
    def quantize(values: np.ndarray, group_size: int) -> "Rtn4Data":
        scales, zeros, _ = _rtn4_params(values, group_size)
        scales16 = scales.astype(np.float16)
        zeros16 = zeros.astype(np.float16)
        levels = _rtn4_levels(values, scales16.astype(DTYPE), zeros16.astype(DTYPE), group_size)
        return Rtn4Data(
            packed=pack_nibbles(levels),
            n_values=int(np.asarray(values).size),
            group_size=group_size,
            scales=scales16,
            zeros=zeros16,
        )

    def dequant(self) -> np.ndarray:
        return rtn4_dequant(self.packed, self.n_values, self.group_size, self.scales, self.zeros)


# ---------------------------------------------------------------------------
# quantized chunks


@dataclass
class QuantizedChunk:
    n_tokens: int
    d: int
    bit_mode: BitMode
    strategy: ScaleStrategy
    dq_enabled: bool
    indices: np.ndarray | None        # (n, d/8) uint8
    signs: np.ndarray | None          # (n, d/8) uint8, two-bit mode only
    s1_q: "Rtn4Data | np.ndarray"     # float32 array when DQ is disabled
    o_q: "Rtn4Data | np.ndarray"
    s2: np.ndarray                    # float16 (DQ on) or float32 per token
    exact_payload: np.ndarray | None = None  # validation-only VQ bypass
    zero_vector_count: int = 0
    s3_fallback_count: int = 0
    nsn_clamped: int = 0

    def s1_values(self) -> np.ndarray:
        return self.s1_q.dequant() if isinstance(self.s1_q, Rtn4Data) else self.s1_q

    def o_values(self) -> np.ndarray:
        return self.o_q.dequant() if isinstance(self.o_q, Rtn4Data) else self.o_q

    def s2_values(self) -> np.ndarray:
        return self.s2.astype(DTYPE)

    def payload(self, cb: Codebook) -> np.ndarray:
        """Reconstructed unit-sphere rows (before byproduct restoration)."""
        if self.exact_payload is not None:
            return self.exact_payload
        flat = lookup_block(cb, self.indices.ravel(),
                            self.signs.ravel() if self.signs is not None else None)
        return flat.reshape(self.n_tokens, self.d)


def quantize_chunk(
    v_nsn: np.ndarray,
    b: NsnByproducts,
    cb: Codebook,
    strategy: ScaleStrategy = ScaleStrategy.PARALLEL,
    *,
    dq_enabled: bool = True,
    residual_size: int | None = None,
    bypass_vq: bool = False,
) -> QuantizedChunk:
    """Quantize one chunk of transform output rows (norm sqrt(d) each).

    Each row is split into d/8 consecutive sub-vectors and matched; s2 is
    adjusted over the full token against the assembled reconstruction. Zero
    sub-vectors encode as entry 0 with positive signs and are counted rather
    than raised. bypass_vq stores the exact rows (validation only).
    """
    strategy = ScaleStrategy.parse(strategy)
    v = as_tensor2d(v_nsn)
    n, d = v.shape
    if d % SUB_DIM != 0:
        raise ShapeMismatch(f"d={d} not divisible by {SUB_DIM}")
    if b.s1.shape != (n,) or b.s2.shape != (n,) or b.o.shape != (d,):
        raise ShapeMismatch("byproducts do not match chunk shape")
    group = n if residual_size is None else int(residual_size)
    if group < n:
        raise ValueError(f"residual_size {group} smaller than chunk ({n} tokens)")

    if bypass_vq:
        indices = signs = None
        recon = v
        zero_count = 0
        factors = np.ones(n)
        fallbacks = 0
    else:
        subs = v.reshape(n * (d // SUB_DIM), SUB_DIM)
        idx, sgn, zero_mask = match_block(cb, subs)
        zero_count = int(zero_mask.sum())
        recon = lookup_block(cb, idx, sgn).reshape(n, d)
        indices = idx.reshape(n, d // SUB_DIM)
        signs = sgn.reshape(n, d // SUB_DIM) if sgn is not None else None
        factors, fallbacks = _adjust_factors(v, recon, strategy)

    s2_adj = (b.s2.astype(np.float64) * factors).astype(DTYPE)

    if dq_enabled:
        s1_q = Rtn4Data.quantize(b.s1, group)
        o_q = Rtn4Data.quantize(b.o, O_GROUP)
        s2_store = s2_adj.astype(np.float16)
    else:
        s1_q = b.s1.astype(DTYPE).copy()
        o_q = b.o.astype(DTYPE).copy()
        s2_store = s2_adj

    return QuantizedChunk(
        n_tokens=n,
        d=d,
        bit_mode=cb.bit_mode,
        strategy=strategy,
        dq_enabled=dq_enabled,
        indices=indices,
        signs=signs,
        s1_q=s1_q,
        o_q=o_q,
        s2=s2_store,
        exact_payload=v.copy() if bypass_vq else None,
        zero_vector_count=zero_count,
        s3_fallback_count=fallbacks,
    )


def dequantize_chunk(qc: QuantizedChunk, cb: Codebook) -> np.ndarray:
    """Restore the chunk: s1 * (s2 * v_Q + o), still in the transform domain
    it was quantized in (keys stay rotated+transformed; values stay transformed)."""
    if qc.exact_payload is None and qc.bit_mode != cb.bit_mode:
        raise ShapeMismatch("codebook bit mode does not match chunk")
    p = qc.payload(cb)
    if p.shape != (qc.n_tokens, qc.d):
        raise ShapeMismatch("payload shape mismatch")
    s1 = qc.s1_values()
    s2 = qc.s2_values()
    o = qc.o_values()
    return s1[:, None] * (s2[:, None] * p + o[None, :])


# ---------------------------------------------------------------------------
# bit accounting


@dataclass
class BitLedger:
    payload_bits: int
    sign_bits: int
    s1_bits: int
    s2_bits: int
    o_bits: int
    dq_param_bits: int
    avg_bits_per_value: float

    @property
    def total_bits(self) -> int:
        return (self.payload_bits + self.sign_bits + self.s1_bits
                + self.s2_bits + self.o_bits + self.dq_param_bits)

    def to_dict(self) -> dict:
        return {
            "payload_bits": self.payload_bits,
            "sign_bits": self.sign_bits,
            "s1_bits": self.s1_bits,
            "s2_bits": self.s2_bits,
            "o_bits": self.o_bits,
            "dq_param_bits": self.dq_param_bits,
            "total_bits": self.total_bits,
            "avg_bits_per_value": self.avg_bits_per_value,
        }


def bit_ledger(qc: QuantizedChunk, residual_size: int) -> BitLedger:
    """Average stored bits per cached value for one chunk.

    Payload indices and (two-bit) signs cost 8 bits per 8-dim sub-vector
    each; s2 is 16-bit per token; with DQ on, s1 and o are 4-bit values plus
    a 16-bit scale and zero per group; with DQ off, byproducts rate 16-bit.
    """
    n, d = qc.n_tokens, qc.d
    payload = n * (d // SUB_DIM) * 8
    sign_bits = payload if qc.bit_mode is BitMode.TWO_BIT else 0
    s2_bits = n * 16
    if qc.dq_enabled:
        s1_bits = n * 4
        o_bits = d * 4
        dq_param_bits = 32 * math.ceil(n / residual_size) + 32 * math.ceil(d / O_GROUP)
    else:
        s1_bits = n * 16
        o_bits = d * 16
        dq_param_bits = 0
    total = payload + sign_bits + s1_bits + s2_bits + o_bits + dq_param_bits
    return BitLedger(
        payload_bits=payload,
        sign_bits=sign_bits,
        s1_bits=s1_bits,
        s2_bits=s2_bits,
        o_bits=o_bits,
        dq_param_bits=dq_param_bits,
        avg_bits_per_value=total / (n * d),
    )


# ---------------------------------------------------------------------------
# wire format (little-endian; nibbles packed low-first)


def serialize_chunk(qc: QuantizedChunk) -> bytes:
    """Wire form: header (u16 n_tokens, u16 d, u8 bit_mode, u8 strategy),
    then indices, signs (2-bit mode), s1 group (f16 scale, f16 zero, nibbles),
    o groups (f16 scale/zero pairs, nibbles), and f16 s2 per token."""
    if not qc.dq_enabled or qc.exact_payload is not None:
        raise FormatError("only double-quantized, non-bypass chunks have a wire form")
    out = bytearray()
    out += CHUNK_VERSION_HEADER.pack(qc.n_tokens, qc.d, int(qc.bit_mode), int(qc.strategy))
    out += qc.indices.astype(np.uint8).tobytes()
    if qc.bit_mode is BitMode.TWO_BIT:
        out += qc.signs.astype(np.uint8).tobytes()
    for block in (qc.s1_q, qc.o_q):
        for g in range(block.scales.size):
            out += block.scales[g : g + 1].astype("<f2").tobytes()
            out += block.zeros[g : g + 1].astype("<f2").tobytes()
        out += block.packed.tobytes()
    out += qc.s2.astype("<f2", copy=False).tobytes()
    return bytes(out)


def deserialize_chunk(data: bytes) -> QuantizedChunk:
    if len(data) < CHUNK_VERSION_HEADER.size:
        raise FormatError("truncated chunk header")
    n, d, bit_mode_raw, strategy_raw = CHUNK_VERSION_HEADER.unpack_from(data, 0)
    off = CHUNK_VERSION_HEADER.size
    try:
        bit_mode = BitMode(bit_mode_raw)
        strategy = ScaleStrategy(strategy_raw)
    except ValueError as e:
        raise FormatError(str(e)) from e
    if d % SUB_DIM != 0 or n < 1:
        raise FormatError(f"bad chunk dims {n}x{d}")

    def take(count: int) -> np.ndarray:
        nonlocal off
        if off + count > len(data):
            raise FormatError("truncated chunk body")
        out = np.frombuffer(data, dtype=np.uint8, count=count, offset=off)
        off += count
        return out

    indices = take(n * (d // SUB_DIM)).reshape(n, d // SUB_DIM).copy()
    signs = None
    if bit_mode is BitMode.TWO_BIT:
        signs = take(n * (d // SUB_DIM)).reshape(n, d // SUB_DIM).copy()

    def take_rtn4(n_values: int, group_size: int) -> Rtn4Data:
        n_groups = (n_values + group_size - 1) // group_size
        scales = np.empty(n_groups, dtype=np.float16)
        zeros = np.empty(n_groups, dtype=np.float16)
        for g in range(n_groups):
            scales[g] = np.frombuffer(take(2).tobytes(), dtype="<f2")[0]
            zeros[g] = np.frombuffer(take(2).tobytes(), dtype="<f2")[0]
        packed = take((n_values + 1) // 2).copy()
        return Rtn4Data(packed=packed, n_values=n_values, group_size=group_size,
                        scales=scales, zeros=zeros)

    s1_q = take_rtn4(n, n)  # one group: flushed chunks never exceed the residual size
    o_q = take_rtn4(d, O_GROUP)
    s2 = np.frombuffer(take(2 * n).tobytes(), dtype="<f2").astype(np.float16)
    if off != len(data):
        raise FormatError("trailing bytes in chunk")
    return QuantizedChunk(
        n_tokens=n, d=d, bit_mode=bit_mode, strategy=strategy, dq_enabled=True,
        indices=indices, signs=signs, s1_q=s1_q, o_q=o_q, s2=s2,
    )
