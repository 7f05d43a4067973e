"""Run configuration with CLI > config file > defaults precedence."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .codebook import BitMode
from .hadamard import is_power_of_two
from .kvcache import CacheConfig
from .vq import ScaleStrategy

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    bit_mode: BitMode = BitMode.TWO_BIT
    residual_size: int = 64
    strategy: ScaleStrategy = ScaleStrategy.PARALLEL
    d: int = 128
    rope_base: float = 10000.0
    seed: int = 0
    dq_enabled: bool = True
    finetune: bool = True
    prefill_fp: bool = False  # keep the whole prefill in full precision
    kmeans_samples: int = 1 << 17
    kmeans_iters: int = 50
    tune_steps: int = 2000
    tune_batch: int = 8192
    tune_lr: float = 0.2

    def __post_init__(self):
        self.bit_mode = BitMode.parse(self.bit_mode)
        self.strategy = ScaleStrategy.parse(self.strategy)
        if self.residual_size < 1:
            raise ValueError("residual_size must be >= 1")
        if not is_power_of_two(self.d) or self.d % 8:
            raise ValueError("d must be a power of two divisible by 8")

    def cache_config(self, bypass_vq: bool = False) -> CacheConfig:
        return CacheConfig(
            d=self.d,
            bit_mode=self.bit_mode,
            residual_size=self.residual_size,
            strategy=self.strategy,
            rope_base=self.rope_base,
            dq_enabled=self.dq_enabled,
            bypass_vq=bypass_vq,
        )

    def to_dict(self) -> dict:
        return {
            "bit_mode": "2b" if self.bit_mode is BitMode.TWO_BIT else "1b",
            "residual_size": self.residual_size,
            "strategy": self.strategy.name.lower(),
            "d": self.d,
            "rope_base": self.rope_base,
            "seed": self.seed,
            "dq_enabled": self.dq_enabled,
            "finetune": self.finetune,
            "prefill_fp": self.prefill_fp,
            "kmeans_samples": self.kmeans_samples,
            "kmeans_iters": self.kmeans_iters,
            "tune_steps": self.tune_steps,
            "tune_batch": self.tune_batch,
            "tune_lr": self.tune_lr,
        }


_PARSERS = {
    "bit_mode": BitMode.parse,
    "residual_size": int,
    "strategy": ScaleStrategy.parse,
    "d": int,
    "rope_base": float,
    "seed": int,
    "dq_enabled": _parse_bool,
    "finetune": _parse_bool,
    "prefill_fp": _parse_bool,
    "kmeans_samples": int,
    "kmeans_iters": int,
    "tune_steps": int,
    "tune_batch": int,
    "tune_lr": float,
}


def parse_config_file(path) -> dict:
    """Flat `key = value` text format; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in _PARSERS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _PARSERS[key](val)
    return values


def build_config(file_values: dict | None = None, cli_values: dict | None = None) -> RunConfig:
    """Merge with precedence: CLI flags > config file > defaults."""
    merged = {}
    for source in (file_values or {}, cli_values or {}):
        for key, val in source.items():
            if val is None:
                continue
            if key not in _PARSERS:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _PARSERS[key](val)
    valid = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in merged.items() if k in valid})
