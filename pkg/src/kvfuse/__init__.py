"""kvfuse: similarity-threshold fusion of paged KV-cache blocks.

Provides the paged cache model and block tables (`core`), the tree fusion
algorithm (`fusion`), reference paged attention with drift bounds
(`attention`), Poisson exceedance-rate analysis (`analysis`), synthetic
workload generation and KVFF file I/O (`workload`, `kvff`), and a CLI
(`cli`).
"""

from .analysis import (
    KdeModel,
    LayerRate,
    SimilaritySampleSet,
    evt_constants,
    kde_cdf,
    kde_density,
    layer_moments,
    poisson_rate_evt,
    poisson_rate_gaussian,
    predicted_compression_ratio,
    prob_no_fusion,
    silverman_bandwidth,
)
from .attention import (
    AttentionQuery,
    DriftBound,
    SoftmaxDistribution,
    attention_drift,
    drift_bound,
    paged_attention,
    verify_drift_bound,
)
from .core import (
    BlockTable,
    CacheDims,
    FusedCache,
    FusedLayer,
    LayerView,
    PagedKvCache,
    UnfoldedLayer,
    cosine_similarity,
    refold,
    unfold_bff,
    unfold_cff,
)
from .fusion import (
    AdaptPolicy,
    FusionConfig,
    FusionEvent,
    FusionOutcome,
    FusionReport,
    adapt_threshold,
    fast_fusion,
    fuse_batch,
    fuse_chunks,
    tune_threshold,
)
from .kvff import load_cache, save_cache
from .workload import SyntheticSpec, calibrate_noise, generate, generate_fixture

__version__ = "0.1.0"

__all__ = [
    "AdaptPolicy",
    "AttentionQuery",
    "BlockTable",
    "CacheDims",
    "DriftBound",
    "FusedCache",
    "FusedLayer",
    "FusionConfig",
    "FusionEvent",
    "FusionOutcome",
    "FusionReport",
    "KdeModel",
    "LayerRate",
    "LayerView",
    "PagedKvCache",
    "SimilaritySampleSet",
    "SoftmaxDistribution",
    "SyntheticSpec",
    "UnfoldedLayer",
    "adapt_threshold",
    "attention_drift",
    "calibrate_noise",
    "cosine_similarity",
    "drift_bound",
    "evt_constants",
    "fast_fusion",
    "fuse_batch",
    "fuse_chunks",
    "generate",
    "generate_fixture",
    "kde_cdf",
    "kde_density",
    "layer_moments",
    "load_cache",
    "paged_attention",
    "poisson_rate_evt",
    "poisson_rate_gaussian",
    "predicted_compression_ratio",
    "prob_no_fusion",
    "refold",
    "save_cache",
    "silverman_bandwidth",
    "tune_threshold",
    "unfold_bff",
    "unfold_cff",
    "verify_drift_bound",
]
