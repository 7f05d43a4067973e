"""Global 256-entry / 8-dim codebook: build, tune, match, and serialize.

One codebook serves every chunk; it is built purely from seeded synthetic
standard-normal data, never from cached tensors. Two-bit mode stores signs
separately, so its entries live in the nonnegative orthant and matching folds
the input to |v| first. Matching is angular (cosine): the downstream scale
adjustment leaves only angular error, so radial placement of entries is
irrelevant at match time. Scores accumulate in float64 so independent
implementations of the argmax agree exactly.
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import DTYPE, make_rng, pack_nibbles, unpack_nibbles
from .errors import FormatError, IndexOutOfRange, ZeroVector

N_ENTRIES = 256
ENTRY_DIM = 8

CODEBOOK_MAGIC = b"NSNC"
CODEBOOK_VERSION = 1


class BitMode(enum.IntEnum):
    ONE_BIT = 1
    TWO_BIT = 2

    @property
    def folded(self) -> bool:
        return self is BitMode.TWO_BIT

    @staticmethod
    def parse(s) -> "BitMode":
        if isinstance(s, BitMode):
            return s
        return {"1b": BitMode.ONE_BIT, "2b": BitMode.TWO_BIT, "1": BitMode.ONE_BIT,
                "2": BitMode.TWO_BIT}[str(s).lower()]


# sign byte -> per-component factors; bit k set means component k is negated
_SIGN_LUT = (1.0 - 2.0 * ((np.arange(256)[:, None] >> np.arange(ENTRY_DIM)[None, :]) & 1)).astype(DTYPE)


def sign_factors(signs: np.ndarray) -> np.ndarray:
    """Map sign bytes (uint8 array) to (+1/-1) component factors."""
    return _SIGN_LUT[np.asarray(signs, dtype=np.uint8)]


@dataclass
class Packed4:
    """4-bit levels plus one scale for the whole codebook."""

    levels: np.ndarray  # (256, 8) uint8 in [0, 15]
    scale: float

    def dequantized(self, bit_mode: BitMode) -> np.ndarray:
        lv = self.levels.astype(DTYPE)
        if bit_mode is BitMode.TWO_BIT:
            return lv * DTYPE(self.scale)
        return (lv - DTYPE(7.5)) * DTYPE(self.scale)


@dataclass
class Codebook:
    entries: np.ndarray  # (256, 8) float32
    bit_mode: BitMode
    seed: int
    tuned: bool = False
    packed4: Packed4 | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=DTYPE)
        if e.shape != (N_ENTRIES, ENTRY_DIM):
            raise ValueError(f"codebook must be {N_ENTRIES}x{ENTRY_DIM}, got {e.shape}")
        if self.bit_mode is BitMode.TWO_BIT and np.any(e < 0):
            raise ValueError("two-bit codebook entries must be nonnegative")
        norms = np.linalg.norm(e.astype(np.float64), axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("codebook contains a zero entry")
        self.entries = e

    @property
    def active_entries(self) -> np.ndarray:
        """Entries used by match/lookup: dequantized when packed4 is present."""
        if self.packed4 is None:
            return self.entries
        key = "packed_entries"
        if key not in self._cache:
            self._cache[key] = self.packed4.dequantized(self.bit_mode)
        return self._cache[key]

    @property
    def inv_norms(self) -> np.ndarray:
        key = ("inv_norms", self.packed4 is not None)
        if key not in self._cache:
            self._cache[key] = kernels.entry_inv_norms(self.active_entries)
        return self._cache[key]


def match_block(cb: Codebook, vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Batch cosine match. Returns (indices, sign bytes or None, zero-row mask).

    Zero rows (norm < 1e-12) map to index 0 with all-positive signs; the mask
    lets callers count the substitutions.
    """
    v = np.ascontiguousarray(vecs, dtype=DTYPE)
    if v.ndim != 2 or v.shape[1] != ENTRY_DIM:
        raise ValueError(f"expected (m, {ENTRY_DIM}) sub-vectors, got {v.shape}")
    v64 = v.astype(np.float64)
    norms_sq = (v64 * v64).sum(axis=1)
    zero_mask = norms_sq < 1e-24
    idx, signs = kernels.match_block(v, cb.active_entries, cb.inv_norms, cb.bit_mode.folded)
    if zero_mask.any():
        idx = idx.copy()
        idx[zero_mask] = 0
        if signs is not None:
            signs = signs.copy()
            signs[zero_mask] = 0
    return idx, signs, zero_mask


def match(cb: Codebook, v: np.ndarray) -> tuple[int, int | None]:
    """Closest-entry index for one 8-dim vector (plus sign byte in 2-bit mode).

    Raises ZeroVector when ||v|| < 1e-12; batch callers substitute index 0
    with all-positive signs instead and flag the event.
    """
    v = np.ascontiguousarray(v, dtype=DTYPE).reshape(ENTRY_DIM)
    idx, signs, zero_mask = match_block(cb, v[None, :])
    if zero_mask[0]:
        raise ZeroVector("cannot match a zero vector")
    return int(idx[0]), (int(signs[0]) if signs is not None else None)


def lookup(cb: Codebook, index: int, signs: int | None = None) -> np.ndarray:
    """Reconstruct one sub-vector from its code (sign byte applies in 2-bit mode)."""
    if not 0 <= index < N_ENTRIES:
        raise IndexOutOfRange(f"index {index} outside [0, {N_ENTRIES})")
    entry = cb.active_entries[index]
    if cb.bit_mode is BitMode.TWO_BIT:
        byte = 0 if signs is None else int(signs)
        if not 0 <= byte < 256:
            raise IndexOutOfRange(f"sign byte {byte} outside [0, 256)")
        return entry * _SIGN_LUT[byte]
    return entry.copy()


def lookup_block(cb: Codebook, indices: np.ndarray, signs: np.ndarray | None = None) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= N_ENTRIES):
        raise IndexOutOfRange("codebook index outside [0, 256)")
    out = cb.active_entries[idx]
    if cb.bit_mode is BitMode.TWO_BIT and signs is not None:
        out = out * sign_factors(signs)
    return out


# ---------------------------------------------------------------------------
# construction


def _training_view(samples: np.ndarray, bit_mode: BitMode) -> np.ndarray:
    return np.abs(samples) if bit_mode.folded else samples


def kmeans_init(
    rng: np.random.Generator,
    bit_mode: BitMode,
    n_samples: int = 1 << 17,
    n_iters: int = 50,
    seed: int = 0,
) -> Codebook:
    """Lloyd's algorithm over synthetic standard-normal 8-dim vectors.

    Two-bit mode clusters the folded |v| samples. Empty clusters are reseeded
    from the points farthest from their assigned centroid. `seed` is recorded
    as provenance only; the sample stream comes from `rng`.
    """
    if n_samples < N_ENTRIES:
        raise ValueError(f"need at least {N_ENTRIES} samples")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    data = _training_view(rng.standard_normal((n_samples, ENTRY_DIM), dtype=DTYPE), bit_mode)
    x_sq = (data.astype(np.float64) ** 2).sum(axis=1)

    init_idx = rng.choice(n_samples, size=N_ENTRIES, replace=False)
    centroids = data[np.sort(init_idx)].astype(np.float64)

    for _ in range(n_iters):
        gram = data @ centroids.astype(DTYPE).T  # (n, 256)
        c_sq = (centroids**2).sum(axis=1)
        assign = np.argmax(gram - DTYPE(0.5) * c_sq.astype(DTYPE)[None, :], axis=1)

        counts = np.bincount(assign, minlength=N_ENTRIES)
        sums = np.zeros((N_ENTRIES, ENTRY_DIM), dtype=np.float64)
        np.add.at(sums, assign, data.astype(np.float64))
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # squared distance of every point to its assigned centroid
            d2 = x_sq - 2.0 * gram[np.arange(n_samples), assign].astype(np.float64) + c_sq[assign]
            far = np.argsort(-d2, kind="stable")[: empty.size]
            centroids[empty] = data[far].astype(np.float64)

    entries = centroids.astype(DTYPE)
    if bit_mode.folded:
        entries = np.maximum(entries, 0.0)
    # a zero centroid cannot participate in cosine matching; reseed it
    bad = np.linalg.norm(entries.astype(np.float64), axis=1) < 1e-12
    if bad.any():
        entries[bad] = data[np.argsort(-x_sq, kind="stable")[: int(bad.sum())]]
    return Codebook(entries=entries, bit_mode=bit_mode, seed=seed, tuned=False)


@dataclass
class TuneReport:
    iters: int
    initial_mean_cossim: float
    final_mean_cossim: float
    wall_time: float
    batch_cosdist_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iters": self.iters,
            "initial_mean_cossim": self.initial_mean_cossim,
            "final_mean_cossim": self.final_mean_cossim,
            "wall_time": self.wall_time,
        }


def mean_cossim(cb: Codebook, vecs: np.ndarray) -> float:
    """Mean cosine similarity between vectors and their reconstructions."""
    idx, signs, zero_mask = match_block(cb, vecs)
    recon = lookup_block(cb, idx, signs).astype(np.float64)
    v = np.asarray(vecs, dtype=np.float64)
    num = (v * recon).sum(axis=1)
    den = np.linalg.norm(v, axis=1) * np.linalg.norm(recon, axis=1)
    ok = ~zero_mask
    return float((num[ok] / den[ok]).mean())


def heldout_cossim(cb: Codebook, seed: int = 424242, n_samples: int = 1 << 14) -> float:
    """Fixed held-out evaluation set shared by reports and regression tests."""
    vecs = make_rng(seed).standard_normal((n_samples, ENTRY_DIM), dtype=DTYPE)
    return mean_cossim(cb, vecs)


def finetune(
    cb: Codebook,
    rng: np.random.Generator,
    n_samples: int = 8192,
    n_steps: int = 2000,
    lr: float = 0.2,
) -> tuple[Codebook, TuneReport]:
    """Gradient-tune entries to minimize mean cosine distance on synthetic data.

    Each step draws a fresh standard-normal batch, assigns it with the
    inference-time match rule (the lookup is not differentiated), then moves
    each matched entry along the gradient of its assigned samples' mean
    cosine distance (per-entry mean, so the step size is independent of how
    popular an entry is). Two-bit entries are projected back onto the
    nonnegative orthant after every step.
    """
    if n_steps < 0 or n_samples < 1:
        raise ValueError("n_steps must be >= 0 and n_samples >= 1")
    t0 = time.perf_counter()
    eval_vecs = rng.standard_normal((1 << 14, ENTRY_DIM), dtype=DTYPE)
    initial = mean_cossim(cb, eval_vecs)

    entries = cb.entries.astype(np.float64)
    history: list[float] = []

    for _ in range(n_steps):
        # the training view is already folded in 2-bit mode, so plain cosine
        # matching against the (nonnegative) entries is the inference rule
        batch = _training_view(rng.standard_normal((n_samples, ENTRY_DIM), dtype=DTYPE), cb.bit_mode)
        f32 = entries.astype(DTYPE)
        idx, _ = kernels.match_block(batch, f32, kernels.entry_inv_norms(f32), False)
        idx = idx.astype(np.int64)

        u = batch.astype(np.float64)
        u_norm = np.linalg.norm(u, axis=1)
        live = u_norm > 1e-12
        unit = np.zeros_like(u)
        unit[live] = u[live] / u_norm[live, None]

        e_norm = np.linalg.norm(entries, axis=1)
        matched = entries[idx]
        cos = (unit * matched).sum(axis=1) / e_norm[idx]
        history.append(float(1.0 - cos[live].mean()))

        sum_unit = np.zeros((N_ENTRIES, ENTRY_DIM), dtype=np.float64)
        np.add.at(sum_unit, idx[live], unit[live])
        sum_cos = np.zeros(N_ENTRIES, dtype=np.float64)
        np.add.at(sum_cos, idx[live], cos[live])
        counts = np.bincount(idx[live], minlength=N_ENTRIES).astype(np.float64)

        # descent on each entry's mean(1 - cos(v, e)) with assignments fixed
        hit = counts > 0
        step = np.zeros_like(entries)
        step[hit] = (
            sum_unit[hit] / e_norm[hit, None]
            - sum_cos[hit, None] * entries[hit] / (e_norm[hit] ** 2)[:, None]
        ) / counts[hit, None]
        new_entries = entries + lr * step
        if cb.bit_mode.folded:
            new_entries = np.maximum(new_entries, 0.0)
        # keep any entry the projection would annihilate
        dead = np.linalg.norm(new_entries, axis=1) < 1e-9
        if dead.any():
            new_entries[dead] = entries[dead]
        entries = new_entries

    tuned = Codebook(
        entries=entries.astype(DTYPE),
        bit_mode=cb.bit_mode,
        seed=cb.seed,
        tuned=n_steps > 0 or cb.tuned,
    )
    final = mean_cossim(tuned, eval_vecs)
    report = TuneReport(
        iters=n_steps,
        initial_mean_cossim=initial,
        final_mean_cossim=final,
        wall_time=time.perf_counter() - t0,
        batch_cosdist_history=history,
    )
    return tuned, report


# ---------------------------------------------------------------------------
# 4-bit entry compression and the file format


def pack4(cb: Codebook) -> Codebook:
    """Round entries to 4-bit levels under a single per-codebook scale.

    Two-bit codebooks (nonnegative entries) use levels 0..15 = level * scale;
    one-bit codebooks center the grid, (level - 7.5) * scale. Either way the
    reconstruction error is at most half a step.
    """
    e = cb.entries.astype(np.float64)
    if cb.bit_mode is BitMode.TWO_BIT:
        scale = float(e.max()) / 15.0
        levels = np.clip(np.rint(e / scale), 0, 15).astype(np.uint8)
    else:
        scale = float(np.abs(e).max()) / 7.5
        levels = np.clip(np.rint(e / scale + 7.5), 0, 15).astype(np.uint8)
    return Codebook(
        entries=cb.entries,
        bit_mode=cb.bit_mode,
        seed=cb.seed,
        tuned=cb.tuned,
        packed4=Packed4(levels=levels, scale=np.float32(scale)),
    )


def serialize(cb: Codebook) -> bytes:
    out = bytearray()
    out += CODEBOOK_MAGIC
    out += struct.pack("<HBQB", CODEBOOK_VERSION, int(cb.bit_mode), cb.seed, int(cb.tuned))
    out += cb.entries.astype("<f4", copy=False).tobytes()
    if cb.packed4 is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack("<f", float(cb.packed4.scale))
        out += pack_nibbles(cb.packed4.levels).tobytes()
    return bytes(out)


def deserialize(data: bytes) -> Codebook:
    if len(data) < 4 or data[:4] != CODEBOOK_MAGIC:
        raise FormatError("bad codebook file: missing magic")
    off = 4
    try:
        version, bit_mode_raw, seed, tuned = struct.unpack_from("<HBQB", data, off)
    except struct.error as e:
        raise FormatError(f"bad codebook file: truncated header ({e})") from e
    off += 12
    if version != CODEBOOK_VERSION:
        raise FormatError(f"unsupported codebook version {version}")
    try:
        bit_mode = BitMode(bit_mode_raw)
    except ValueError as e:
        raise FormatError(f"bad bit mode {bit_mode_raw}") from e
    n_entry_bytes = N_ENTRIES * ENTRY_DIM * 4
    if len(data) < off + n_entry_bytes + 1:
        raise FormatError("bad codebook file: truncated entries")
    entries = np.frombuffer(data, dtype="<f4", count=N_ENTRIES * ENTRY_DIM, offset=off)
    entries = entries.reshape(N_ENTRIES, ENTRY_DIM).astype(DTYPE)  # writable copy
    off += n_entry_bytes
    (flag,) = struct.unpack_from("<B", data, off)
    off += 1
    if flag not in (0, 1):
        raise FormatError(f"bad packed4 flag {flag}")
    packed = None
    if flag:
        n_nibble_bytes = (N_ENTRIES * ENTRY_DIM) // 2
        if len(data) < off + 4 + n_nibble_bytes:
            raise FormatError("bad codebook file: truncated packed block")
        (scale,) = struct.unpack_from("<f", data, off)
        off += 4
        raw = np.frombuffer(data, dtype=np.uint8, count=n_nibble_bytes, offset=off)
        off += n_nibble_bytes
        levels = unpack_nibbles(raw, N_ENTRIES * ENTRY_DIM).reshape(N_ENTRIES, ENTRY_DIM)
        packed = Packed4(levels=levels, scale=np.float32(scale))
    if off != len(data):
        raise FormatError("bad codebook file: trailing bytes")
    return Codebook(entries=entries, bit_mode=bit_mode, seed=seed, tuned=bool(tuned), packed4=packed)


def save_codebook(path, cb: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(serialize(cb))


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        return deserialize(f.read())
