"""Distribution-alignment diagnostics.

channel_kl measures how far each channel's empirical distribution sits from
standard normal (binned KL against the normal CDF). The variance-band check
is the empirical counterpart of the randomized-transform variance bound: it
estimates the mean-offset and covariance terms from data and verifies that
per-channel variances after randomized transforms land inside the predicted
band. The concentration constant in that bound is not derivable here, so the
band uses a constant calibrated once on exact Gaussian data and frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .core import col_means
from .errors import ShapeMismatch
from .hadamard import apply_rows, sign_vector

KL_RANGE = 5.0  # interior bins span [-5, 5]; two tail bins catch the rest

# Stand-in for the unknown concentration constant; calibrated so that band
# coverage on exact N(0,1) data (d=128, 4096 rows, alpha=0.05) stays >= 1-alpha
# with margin, then frozen.
DEFAULT_HW_CONSTANT = 0.3


@dataclass
class KlReport:
    per_channel_kl: np.ndarray
    mean_kl: float
    n_bins: int
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "mean_kl": self.mean_kl,
            "n_bins": self.n_bins,
            "n_samples": self.n_samples,
            "bin_range": [-KL_RANGE, KL_RANGE],
            "tail_bins": 2,
            "smoothing": "additive 1/(2n) on empty bins",
            "per_channel_kl": [float(x) for x in self.per_channel_kl],
        }


def channel_kl(t: np.ndarray, n_bins: int = 64) -> KlReport:
    """Per-channel KL(empirical || standard normal) over binned mass.

    n_bins equal-width bins cover [-5, 5]; two open tail bins complete the
    partition. Reference masses come from the normal CDF; empty empirical
    bins get 1/(2n) mass before renormalization so the divergence stays
    finite on degenerate inputs.
    """
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch("expected a 2-D tensor")
    n, d = a.shape
    if n < 100:
        raise ValueError("need at least 100 rows per channel")
    if n_bins < 10:
        raise ValueError("need at least 10 bins")

    edges = np.linspace(-KL_RANGE, KL_RANGE, n_bins + 1)
    cdf = np.concatenate([[0.0], ndtr(edges), [1.0]])
    ref = np.diff(cdf)  # n_bins + 2 masses, all positive

    kl = np.empty(d)
    smooth = 1.0 / (2.0 * n)
    for j in range(d):
        counts = np.bincount(
            np.searchsorted(edges, a[:, j], side="right"), minlength=n_bins + 2
        ).astype(np.float64)
        p = counts / n
        p[p == 0.0] = smooth
        p /= p.sum()
        kl[j] = float((p * np.log(p / ref)).sum())
    return KlReport(per_channel_kl=kl, mean_kl=float(kl.mean()), n_bins=n_bins, n_samples=n)


def offdiag_frobenius(t: np.ndarray) -> float:
    """Frobenius norm of the off-diagonal part of the sample covariance."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ShapeMismatch("need a 2-D tensor with at least 2 rows")
    cov = np.cov(a, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    return float(np.linalg.norm(off))


def mean_abs_correlation(t: np.ndarray, group: int = 8) -> float:
    """Mean |corr| over channel pairs that share an 8-dim quantization group."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ShapeMismatch("need a 2-D tensor with at least 2 rows")
    d = a.shape[1]
    if d % group:
        raise ShapeMismatch(f"group {group} does not divide {d} channels")
    centered = a - a.mean(axis=0)
    cov = centered.T @ centered / (a.shape[0] - 1)
    std = np.sqrt(np.diag(cov))
    denom = np.outer(std, std)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    total = 0.0
    count = 0
    for g in range(d // group):
        block = corr[g * group : (g + 1) * group, g * group : (g + 1) * group]
        iu = np.triu_indices(group, k=1)
        total += np.abs(block[iu]).sum()
        count += iu[0].size
    return total / count


@dataclass
class LemmaCheck:
    epsilon: float
    gamma: float
    alpha: float
    beta_alpha_scaled: float
    coverage: float
    band: tuple[float, float] = (0.0, 0.0)
    mean_variance: float = 0.0
    trials: int = 0
    hw_constant: float = DEFAULT_HW_CONSTANT
    variance_samples: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "beta_alpha_scaled": self.beta_alpha_scaled,
            "coverage": self.coverage,
            "band_low": self.band[0],
            "band_high": self.band[1],
            "mean_variance": self.mean_variance,
            "trials": self.trials,
            "hw_constant": self.hw_constant,
        }


def lemma_band_check(
    t_pre_rht: np.ndarray,
    alpha: float = 0.05,
    trials: int = 50,
    rng: np.random.Generator | None = None,
    hw_constant: float = DEFAULT_HW_CONSTANT,
) -> LemmaCheck:
    """Empirical variance-band validation for the randomized transform.

    From the pre-transform tensor: epsilon = mean squared channel mean,
    gamma = off-diagonal covariance Frobenius norm. For each trial a fresh
    sign vector is drawn, the randomized transform applied, and per-channel
    variances tested against [1 - eps - gamma*beta, 1 + gamma*beta] with
    beta = sqrt(ln(2/alpha) / hw_constant) / d.
    """
    if rng is None:
        raise ValueError("a seeded generator is required")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    a = np.asarray(t_pre_rht, dtype=np.float32)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ShapeMismatch("need a 2-D tensor with at least 2 rows")
    d = a.shape[1]

    mu = col_means(a).astype(np.float64)
    epsilon = float((mu**2).mean())
    gamma = offdiag_frobenius(a)
    beta = math.sqrt(math.log(2.0 / alpha) / hw_constant) / d
    lo = 1.0 - epsilon - gamma * beta
    hi = 1.0 + gamma * beta

    inside = 0
    total = 0
    variances = []
    for _ in range(trials):
        sv = sign_vector(int(rng.integers(0, 2**63 - 1)), d)
        y = apply_rows(a, randomized=True, sv=sv).astype(np.float64)
        var = y.var(axis=0)
        variances.append(var)
        inside += int(((var >= lo) & (var <= hi)).sum())
        total += d
    var_all = np.concatenate(variances)
    return LemmaCheck(
        epsilon=epsilon,
        gamma=gamma,
        alpha=alpha,
        beta_alpha_scaled=beta,
        coverage=inside / total,
        band=(lo, hi),
        mean_variance=float(var_all.mean()),
        trials=trials,
        hw_constant=hw_constant,
        variance_samples=var_all,
    )
