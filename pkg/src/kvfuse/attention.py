"""Reference scaled-dot-product attention over paged cache views.

Also measures the L1 drift between pre- and post-fusion softmax
distributions and evaluates the analytic drift bound: with logits perturbed
by at most ``epsilon = max_i ||k_i|| ||q|| / sqrt(d) * sqrt(2 (1 - u))``,
the drift cannot exceed ``exp(2 epsilon) - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import LayerView
from .errors import DomainError, InvalidCacheError


@dataclass(frozen=True)
class AttentionQuery:
    """A single-head query against one layer."""

    q: np.ndarray
    head: int = 0
    layer: int = 0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or not np.isfinite(q).all():
            raise InvalidCacheError("query must be a finite 1-D vector")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class SoftmaxDistribution:
    """Probability vector over attended tokens."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidCacheError("softmax output must be a probability vector")
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return len(self.probs)


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax (max-subtraction)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def paged_attention(
    query: AttentionQuery, view: LayerView, row: int = 0
) -> tuple[np.ndarray, SoftmaxDistribution]:
    """Exact softmax attention over all logical tokens of one request.

    ``view`` must already be refolded, so each logical block is the rescaled
    ``norm * direction`` tensor.
    """
    if view.keys.size == 0:
        raise InvalidCacheError("empty cache view")
    if not 0 <= row < view.rows:
        raise InvalidCacheError(f"row {row} out of range [0, {view.rows})")
    p, t, h, d = view.keys.shape[1:]
    if not 0 <= query.head < h:
        raise InvalidCacheError(f"head {query.head} out of range [0, {h})")
    if query.q.shape != (d,):
        raise InvalidCacheError(f"query length {query.q.shape} does not match head size {d}")
    keys = view.keys[row, :, :, query.head, :].reshape(p * t, d)
    values = view.values[row, :, :, query.head, :].reshape(p * t, d)
    logits = keys @ query.q / np.sqrt(d)
    dist = softmax(logits)
    output = dist @ values
    return output, SoftmaxDistribution(dist)


def attention_drift(s: SoftmaxDistribution, s_prime: SoftmaxDistribution) -> float:
    """L1 distance between two attention distributions."""
    if len(s) != len(s_prime):
        raise DomainError(f"distribution lengths differ: {len(s)} vs {len(s_prime)}")
    return float(np.abs(s_prime.probs - s.probs).sum())


@dataclass(frozen=True)
class DriftBound:
    """Perturbation magnitude and the two forms of the drift bound."""

    epsilon: float
    loose_bound: float  # first-order 2*eps form
    exact_bound: float  # exp(2*eps) - 1


def drift_bound(q: np.ndarray, key_norms, u: float, d: int) -> DriftBound:
    """Worst-case drift bound for keys perturbed within cosine similarity ``u``."""
    if u > 1.0:
        raise DomainError(f"similarity threshold u={u} exceeds 1")
    if d < 1:
        raise DomainError("head dimension must be >= 1")
    norms = np.asarray(key_norms, dtype=np.float64)
    if (norms < 0).any():
        raise DomainError("key norms must be nonnegative")
    q = np.asarray(q, dtype=np.float64)
    eps = float(norms.max() * np.linalg.norm(q) / np.sqrt(d) * np.sqrt(2.0 * (1.0 - u)))
    return DriftBound(epsilon=eps, loose_bound=2.0 * eps, exact_bound=float(np.expm1(2.0 * eps)))


def _random_units(rng: np.random.Generator, *shape: int) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def perturb_directions(
    directions: np.ndarray, u: float, rng: np.random.Generator
) -> np.ndarray:
    """Rotate each unit vector toward a random orthogonal direction.

    The rotation angle is ``arccos(u)``, so the perturbed direction sits
    exactly at the similarity boundary (the worst case admitted by the bound).
    """
    w = rng.standard_normal(directions.shape)
    w -= np.sum(w * directions, axis=-1, keepdims=True) * directions
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    w = np.where(wn > 0, w / np.where(wn > 0, wn, 1.0), 0.0)
    return u * directions + np.sqrt(max(0.0, 1.0 - u * u)) * w


def verify_drift_bound(
    trials: int,
    d: int,
    u: float,
    n_keys: int = 16,
    seed: int = 0,
) -> dict:
    """Randomized check that measured drift never exceeds ``exp(2 eps) - 1``.

    Each trial samples a query and a set of keys (lognormal norms, uniform
    directions), perturbs every key direction to cosine exactly ``u`` while
    keeping its norm, and compares the resulting softmax L1 drift against the
    bound.  Returns a JSON-serializable report.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if u > 1.0:
        raise DomainError(f"similarity threshold u={u} exceeds 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((trials, d))
    norms = rng.lognormal(mean=0.0, sigma=0.25, size=(trials, n_keys))
    dirs = _random_units(rng, trials, n_keys, d)
    dirs_p = perturb_directions(dirs, u, rng)

    scale = norms / np.sqrt(d)
    z = scale * np.einsum("tkd,td->tk", dirs, q)
    z_p = scale * np.einsum("tkd,td->tk", dirs_p, q)
    ez = np.exp(z - z.max(axis=1, keepdims=True))
    ezp = np.exp(z_p - z_p.max(axis=1, keepdims=True))
    s = ez / ez.sum(axis=1, keepdims=True)
    s_p = ezp / ezp.sum(axis=1, keepdims=True)
    drift = np.abs(s_p - s).sum(axis=1)

    eps = norms.max(axis=1) * np.linalg.norm(q, axis=1) / np.sqrt(d) * np.sqrt(2.0 * (1.0 - u))
    bound = np.expm1(2.0 * eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(bound > 0, drift / np.where(bound > 0, bound, 1.0), 0.0)
    violations = int((drift > bound).sum())
    return {
        "trials": trials,
        "u": u,
        "d": d,
        "n_keys": n_keys,
        "seed": seed,
        "max_ratio": float(ratio.max()),
        "max_drift": float(drift.max()),
        "violations": violations,
    }


def verify_report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
