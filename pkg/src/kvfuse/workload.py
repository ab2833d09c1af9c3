"""Synthetic KV-cache generation with controllable similarity structure.

Blocks are drawn around a small set of base directions (clusters); angular
noise is calibrated so the mean within-cluster pairwise cosine hits a target.
RNG is numpy's default_rng (PCG64), so a fixed seed yields a byte-identical
cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import CacheDims, PagedKvCache
from .errors import ConfigError, DomainError
from .kvff import load_cache, save_cache  # noqa: F401  (re-exported cache I/O)

CALIBRATION_DRAWS = 10_000
CALIBRATION_SEED = 1234


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic cache."""

    dims: CacheDims
    clusters: int = 4
    intra_cluster_similarity: float = 0.95
    cluster_assignment: str = "uniform"  # "uniform" | "zipf"
    zipf_exponent: float = 1.5
    norm_mu: float = 0.0  # lognormal parameters for block norms
    norm_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if not 0.0 < self.intra_cluster_similarity <= 1.0:
            raise ConfigError("intra_cluster_similarity must lie in (0, 1]")
        if self.cluster_assignment not in ("uniform", "zipf"):
            raise ConfigError(f"unknown cluster assignment {self.cluster_assignment!r}")

    def to_dict(self) -> dict:
        return {
            "dims": {k: getattr(self.dims, k) for k in ("B", "p", "t", "h", "d", "L")},
            "clusters": self.clusters,
            "intra_cluster_similarity": self.intra_cluster_similarity,
            "cluster_assignment": self.cluster_assignment,
            "zipf_exponent": self.zipf_exponent,
            "norm_mu": self.norm_mu,
            "norm_sigma": self.norm_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        dims = CacheDims(**{k: int(v) for k, v in data.pop("dims").items()})
        return cls(dims=dims, **data)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mean_cosine_for_scale(
    r: int, scale: float, pairwise: bool, draws: int, seed: int
) -> float:
    """Monte-Carlo mean cosine around a fixed base direction at a noise scale."""
    rng = np.random.default_rng(seed)
    base = np.zeros(r)
    base[0] = 1.0
    a = base + scale * rng.standard_normal((draws, r))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    if pairwise:
        b = base + scale * rng.standard_normal((draws, r))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        return float(np.sum(a * b, axis=1).mean())
    return float(a[:, 0].mean())


@lru_cache(maxsize=None)
def calibrate_noise(
    r: int,
    target_cosine: float,
    pairwise: bool = False,
    draws: int = CALIBRATION_DRAWS,
    seed: int = CALIBRATION_SEED,
    tol: float = 1e-3,
) -> float:
    """Noise scale whose mean cosine against the base direction hits the target.

    ``pairwise=True`` targets the cosine between two independently perturbed
    copies instead (what within-cluster block similarity actually measures).
    Bisection against Monte-Carlo estimation with common random numbers, so
    the estimate is monotone in the scale.
    """
    if r < 2:
        raise DomainError("noise calibration needs r >= 2 (no orthogonal complement)")
    if not 0.0 < target_cosine <= 1.0:
        raise DomainError("target cosine must lie in (0, 1]")
    if target_cosine == 1.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while _mean_cosine_for_scale(r, hi, pairwise, draws, seed) > target_cosine:
        hi *= 2.0
        if hi > 1e6:
            raise DomainError(f"target cosine {target_cosine} unattainable")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        est = _mean_cosine_for_scale(r, mid, pairwise, draws, seed)
        if est > target_cosine:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(hi, 1e-12):
            break
    return 0.5 * (lo + hi)


def _base_directions(clusters: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Random base directions; orthogonalized when they fit in r dimensions."""
    raw = rng.standard_normal((r, clusters) if clusters <= r else (clusters, r))
    if clusters <= r:
        q, _ = np.linalg.qr(raw)
        return q.T[:clusters]
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _assignments(spec: SyntheticSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    if spec.cluster_assignment == "uniform":
        return rng.integers(0, spec.clusters, size=count)
    weights = np.arange(1, spec.clusters + 1, dtype=np.float64) ** -spec.zipf_exponent
    return rng.choice(spec.clusters, size=count, p=weights / weights.sum())


def generate(spec: SyntheticSpec) -> PagedKvCache:
    """Materialize a synthetic paged cache from a spec.

    Keys and values of a block share a cluster id but use independent noise
    and norms, so key-driven fusion keeps values coherent.
    """
    dims = spec.dims
    r = dims.r
    if r < 2:
        raise DomainError("generation needs r >= 2 (no orthogonal complement for noise)")
    rng = np.random.default_rng(spec.seed)
    scale = (
        0.0
        if spec.intra_cluster_similarity == 1.0
        else calibrate_noise(r, spec.intra_cluster_similarity, pairwise=True)
    )
    key_bases = _base_directions(spec.clusters, r, rng)
    value_bases = _base_directions(spec.clusters, r, rng)
    count = dims.L * dims.B * dims.p
    assign = _assignments(spec, count, rng)

    tensors = []
    for bases in (key_bases, value_bases):
        flat = bases[assign] + scale * rng.standard_normal((count, r))
        flat /= np.linalg.norm(flat, axis=1, keepdims=True)
        norms = rng.lognormal(mean=spec.norm_mu, sigma=spec.norm_sigma, size=(count, 1))
        tensors.append((norms * flat).reshape(dims.shape))
    return PagedKvCache(dims=dims, keys=tensors[0], values=tensors[1])


# Named fixture specs used by tests and the `kvfuse fixtures` subcommand.
FIXTURE_SPECS: dict[str, SyntheticSpec] = {
    # Maximal redundancy: every block shares one direction.  One block per
    # request, because the tree never compares blocks within a request, so
    # full collapse to a single physical block needs p = 1.
    "clusters1": SyntheticSpec(
        dims=CacheDims(B=8, p=1, t=4, h=2, d=8, L=2),
        clusters=1,
        intra_cluster_similarity=1.0,
        seed=7,
    ),
    # Zero redundancy: every block its own orthogonal direction.
    "orthogonal": SyntheticSpec(
        dims=CacheDims(B=4, p=4, t=4, h=2, d=8, L=2),
        clusters=16,
        intra_cluster_similarity=1.0,
        seed=11,
    ),
    # Clustered workload for sweeps and rate prediction; intra-cluster noise
    # broad enough that compression varies smoothly over thresholds ~0.9-0.94.
    "clusters4": SyntheticSpec(
        dims=CacheDims(B=8, p=8, t=4, h=2, d=8, L=4),
        clusters=4,
        intra_cluster_similarity=0.9,
        seed=42,
    ),
    # Chunk-aligned fixture for CFF (p=8, t=16).
    "cff": SyntheticSpec(
        dims=CacheDims(B=1, p=8, t=16, h=2, d=4, L=2),
        clusters=4,
        intra_cluster_similarity=0.95,
        seed=23,
    ),
}


def generate_fixture(name: str) -> PagedKvCache:
    try:
        spec = FIXTURE_SPECS[name]
    except KeyError:
        raise ConfigError(f"unknown fixture {name!r}; known: {sorted(FIXTURE_SPECS)}") from None
    if name == "orthogonal":
        return _generate_orthogonal(spec)
    return generate(spec)


def _generate_orthogonal(spec: SyntheticSpec) -> PagedKvCache:
    """One orthogonal direction per (request, block) slot, repeated across layers."""
    dims = spec.dims
    n = dims.B * dims.p
    if n > dims.r:
        raise ConfigError("orthogonal fixture needs B * p <= r")
    rng = np.random.default_rng(spec.seed)
    tensors = []
    for _ in range(2):
        q, _ = np.linalg.qr(rng.standard_normal((dims.r, n)))
        dirs = q.T[:n]
        norms = rng.lognormal(spec.norm_mu, spec.norm_sigma, size=(n, 1))
        layer = (norms * dirs).reshape((dims.B, dims.p, dims.t, dims.h, dims.d))
        tensors.append(np.broadcast_to(layer, dims.shape).copy())
    return PagedKvCache(dims=dims, keys=tensors[0], values=tensors[1])
