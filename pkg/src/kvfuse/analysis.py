"""Exceedance-rate analysis of block similarity samples.

The similarity distribution of a pair of requests (or chunks) with ``m1`` and
``m2`` blocks is estimated from the ``n = m1 * m2`` cosine samples, either by
Gaussian-kernel KDE or by fitted Gaussian moments.  For a high threshold
``u``, the number of above-threshold similarities is asymptotically Poisson;
the rate feeds a closed-form prediction of the achievable compression ratio.

The standard normal CDF is scipy's ``ndtr`` (erf-based, accurate to machine
precision); all logarithms are natural.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DivergenceError, DomainError, InsufficientDataError

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SimilaritySampleSet:
    """Cosine-similarity observations from one layer."""

    samples: np.ndarray
    layer: int = 0
    source: str = "synthetic"  # "bff" | "cff" | "synthetic"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InsufficientDataError("sample set must be a nonempty 1-D array")
        if (np.abs(samples) > 1.0 + 1e-12).any():
            raise DomainError("similarity samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", np.clip(samples, -1.0, 1.0))

    @property
    def n(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class KdeModel:
    """Gaussian-kernel density estimate with bandwidth ``h``."""

    samples: SimilaritySampleSet
    h: float

    def __post_init__(self):
        if self.h <= 0:
            raise DomainError(f"bandwidth must be positive, got {self.h}")


@dataclass(frozen=True)
class LayerRate:
    """Poisson exceedance rate of one layer at threshold ``u``."""

    layer: int
    u: float
    lam: float
    method: str  # "kde-evt" | "gaussian"

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("rate must be nonnegative")


def kde_density(model: KdeModel, x) -> np.ndarray | float:
    """Density estimate ``1/(n h) sum phi((x - x_i) / h)``."""
    x = np.asarray(x, dtype=np.float64)
    z = (x[..., None] - model.samples.samples) / model.h
    out = np.exp(-0.5 * z * z).sum(axis=-1) / (model.samples.n * model.h * SQRT_2PI)
    return out if out.ndim else float(out)


def kde_cdf(model: KdeModel, x) -> np.ndarray | float:
    """Distribution estimate ``1/n sum Phi((x - x_i) / h)``."""
    x = np.asarray(x, dtype=np.float64)
    z = (x[..., None] - model.samples.samples) / model.h
    out = ndtr(z).sum(axis=-1) / model.samples.n
    return out if out.ndim else float(out)


def evt_constants(n: int) -> tuple[float, float]:
    """Gaussian extreme-value normalization constants ``(a_n, b_n)``."""
    if n < 3:
        raise DomainError(f"EVT constants need n >= 3 (log log n must be positive), got {n}")
    two_log_n = 2.0 * np.log(n)
    a_n = two_log_n ** -0.5
    b_n = two_log_n ** 0.5 - 0.5 * two_log_n ** -0.5 * (np.log(np.log(n)) + np.log(4.0 * np.pi))
    return float(a_n), float(b_n)


def poisson_rate_evt(samples: SimilaritySampleSet, h: float, u: float) -> float:
    """KDE/EVT exceedance rate ``1/n sum exp(-(u - (h b_n + x_i)) / (h a_n))``.

    Only asymptotically valid for high ``u``; a warning (not an error) is
    emitted when ``u`` lies below the sample maximum.
    """
    if h <= 0:
        raise DomainError(f"bandwidth must be positive, got {h}")
    x = samples.samples
    if u < x.max():
        warnings.warn(
            f"threshold u={u} below the sample maximum {x.max():.4g}; "
            "the asymptotic rate formula may be unreliable",
            stacklevel=2,
        )
    a_n, b_n = evt_constants(samples.n)
    exponents = -(u - (h * b_n + x)) / (h * a_n)
    return float(np.exp(exponents).mean())


def poisson_rate_gaussian(n: int, mu: float, sigma: float, u: float) -> float:
    """Gaussian-approximation exceedance rate ``n * (1 - Phi((u - mu) / sigma))``."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if n < 0:
        raise DomainError("n must be nonnegative")
    return float(n * ndtr(-(u - mu) / sigma))


def layer_moments(samples: SimilaritySampleSet) -> tuple[float, float]:
    """Population mean and standard deviation (no Bessel correction)."""
    if samples.n < 2:
        raise InsufficientDataError("moments need at least two samples")
    x = samples.samples
    mu = float(x.mean())
    sigma = float(np.sqrt(np.mean(x * x) - mu * mu))
    return mu, sigma


def predicted_compression_ratio(L: int, m1: int, m2: int, rates: list[LayerRate]) -> float:
    """Closed-form prediction ``L (m1 + m2) / (L (m1 + m2) - sum_l Lambda_l)``."""
    if len(rates) != L:
        raise DomainError(f"expected {L} per-layer rates, got {len(rates)}")
    total = L * (m1 + m2)
    fused = sum(r.lam for r in rates)
    if fused >= total:
        raise DivergenceError(
            f"total rate {fused:.4g} >= total blocks {total}; prediction diverges"
        )
    return total / (total - fused)


def prob_no_fusion(rate: LayerRate) -> float:
    """Probability of zero fusions in a layer: ``exp(-Lambda)``."""
    return float(np.exp(-rate.lam))


def silverman_bandwidth(samples: SimilaritySampleSet) -> float:
    """Rule-of-thumb bandwidth ``1.06 * sigma * n^(-1/5)``."""
    _, sigma = layer_moments(samples)
    if sigma == 0:
        raise DomainError("degenerate (constant) sample set has no usable bandwidth")
    return float(1.06 * sigma * samples.n ** -0.2)


def tail_exceedance_rate(samples, u: float, tail_fraction: float = 0.1) -> float:
    """Expected exceedance count ``n * (1 - F_h(u))`` with a tail-local bandwidth.

    Clustered workloads produce multimodal similarity mixtures whose global
    moments (and global Silverman bandwidth) wildly overestimate the upper
    tail.  Here the bandwidth is Silverman's rule applied only to the top
    ``tail_fraction`` of the samples, so the KDE tail tracks the spread of
    the component that actually generates exceedances.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n == 0:
        return 0.0
    k = min(n, max(8, int(np.ceil(tail_fraction * n))))
    top = np.sort(x)[-k:]
    sigma = float(top.std())
    if sigma == 0.0:
        return float((x > u).sum())
    h = 1.06 * sigma * k ** -0.2
    return float(n * ndtr((x - u) / h).mean())


def merge_exceedance_rate(record, u: float, method: str = "kde-tail") -> float:
    """Exceedance rate of one tree merge, capped at its right-side block count."""
    if record.n_samples < 2:
        return 0.0
    if method == "kde-tail":
        lam = tail_exceedance_rate(record.samples, u)
    elif method == "gaussian":
        mu = float(np.mean(record.samples))
        sigma = float(np.std(record.samples))
        if sigma == 0.0:
            lam = float(record.n_samples) if mu > u else 0.0
        else:
            lam = poisson_rate_gaussian(record.n_samples, mu, sigma, u)
    else:
        raise DomainError(f"unknown rate method {method!r}")
    return min(lam, float(record.right_blocks))


def predicted_layer_fusions(merge_records, u: float, method: str = "kde-tail") -> float:
    """Predicted fusion count for one layer's tree, summed over merges.

    Each merge contributes its exceedance rate passed through the Poisson
    saturation ``m_r * (1 - exp(-lam / m_r))``: with ``lam`` exceedances
    thinned over ``m_r`` right-side blocks, that is the expected number of
    blocks hit at least once, which is what absorption counts.
    """
    total = 0.0
    for m in merge_records:
        if m.n_samples < 2 or m.right_blocks == 0:
            continue
        if method == "kde-tail":
            lam = tail_exceedance_rate(m.samples, u)
        else:
            lam = merge_exceedance_rate(m, u, method)
        m_r = float(m.right_blocks)
        total += m_r * -np.expm1(-lam / m_r)
    return total
