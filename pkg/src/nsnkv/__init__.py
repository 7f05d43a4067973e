"""nsnkv: calibration-free KV-cache vector quantization.

Token chunks pass through a normalize-shift-normalize transform and a
Hadamard rotation that together align every channel with the standard normal
distribution, so one synthetic-data codebook quantizes any cache. The package
covers the full pipeline: transform + restoration byproducts, codebook
build/tune/serialize, chunk quantization with scale adjustment and double
quantization, the residual-buffer cache policy, byproduct-aware attention,
and the statistical validators that certify the alignment.
"""

from .attention import (
    AttentionResult,
    attend_quantized,
    output_quantized,
    reference_attention,
    scores_quantized,
)
from .codebook import (
    BitMode,
    Codebook,
    TuneReport,
    finetune,
    kmeans_init,
    load_codebook,
    lookup,
    match,
    pack4,
    save_codebook,
)
from .config import RunConfig
from .core import (
    col_means,
    load_tensor,
    make_rng,
    row_norms,
    sample_standard_normal,
    save_tensor,
)
from .errors import (
    DegenerateProjection,
    FormatError,
    IndexOutOfRange,
    NonPowerOfTwoDim,
    NsnKvError,
    ShapeMismatch,
    ZeroVector,
)
from .hadamard import SignVector, apply_rows, fwht, rht, sign_vector
from .kvcache import CacheConfig, KvCacheState, ResidualBuffer, append, new_cache
from .nsn import NsnByproducts, NsnOutput, nsn_forward, nsn_restore, weiszfeld_shift
from .rope import RopeParams, rope
from .stats import channel_kl, lemma_band_check, mean_abs_correlation, offdiag_frobenius
from .vq import (
    BitLedger,
    QuantizedChunk,
    ScaleStrategy,
    adjust_scale,
    bit_ledger,
    dequantize_chunk,
    quantize_chunk,
    rtn4_group,
)

__version__ = "0.1.0"
