"""Tree-structured block fusion over unfolded cache layers.

Rows (requests for BFF, chunks for CFF) are split recursively in half; each
merge compares every surviving left block against every surviving right block
by cosine similarity of their key directions and absorbs right blocks that
exceed the threshold into the matching left block.  Values follow the exact
absorption indices computed from keys.  Absorbed physical blocks are evicted
and their logical slots redirected through the block table; every slot keeps
its own stored norm, so distinct blocks sharing a direction stay
distinguishable after refolding.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BlockTable,
    FusedCache,
    FusedLayer,
    PagedKvCache,
    Slot,
    UnfoldedLayer,
    cff_chunk_count,
    unfold_bff,
    unfold_cff,
)
from .errors import ConfigError, InsufficientDataError

THREADS_ENV_VAR = "KVFUSE_THREADS"


def _max_workers() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class AdaptPolicy:
    """Feedback rule for self-adjusting the similarity threshold."""

    mode: str  # "percentile" | "target-compression"
    target: float
    step: float
    min_threshold: float
    max_threshold: float

    def __post_init__(self):
        if self.mode not in ("percentile", "target-compression"):
            raise ConfigError(f"unknown adapt mode {self.mode!r}")
        if self.step <= 0:
            raise ConfigError("adapt step must be positive")
        if not self.min_threshold < self.max_threshold:
            raise ConfigError("adapt bounds must satisfy min < max")


@dataclass(frozen=True)
class FusionConfig:
    """Threshold, variant, and grouping for a fusion run."""

    threshold: float
    variant: str = "bff"  # "bff" | "cff"
    group_size: int | None = None  # rows fused per invocation; None = all
    adapt: AdaptPolicy | None = None

    def __post_init__(self):
        if not -1.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie strictly inside (-1, 1), got {self.threshold}")
        if self.variant not in ("bff", "cff"):
            raise ConfigError(f"unknown fusion variant {self.variant!r}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError("group_size must be >= 1")


@dataclass(frozen=True)
class FusionEvent:
    """One absorption: the absorbing slot and the home slots it consumed."""

    absorber: Slot
    absorbed: tuple[Slot, ...]


@dataclass(frozen=True)
class MergeRecord:
    """Similarity statistics of a single tree merge."""

    level: int
    left_blocks: int
    right_blocks: int
    samples: np.ndarray
    fused_count: int

    @property
    def n_samples(self) -> int:
        return int(self.samples.size)

    def moments(self) -> tuple[float, float]:
        mu = float(np.mean(self.samples)) if self.samples.size else 0.0
        sigma = float(np.std(self.samples)) if self.samples.size else 0.0
        return mu, sigma


@dataclass
class FusionReport:
    """Per-layer outcome counters of a fusion run."""

    layer: int
    blocks_before: int
    blocks_after: int
    fused_events: list[FusionEvent]
    merge_calls: int
    tree_depth: int
    similarity_samples: np.ndarray
    merge_records: list[MergeRecord] = field(default_factory=list)

    @property
    def compression_ratio(self) -> float:
        return self.blocks_before / self.blocks_after

    @property
    def fused_blocks(self) -> int:
        return sum(len(e.absorbed) for e in self.fused_events)

    def to_dict(self) -> dict:
        samples = self.similarity_samples
        return {
            "layer": self.layer,
            "blocks_before": self.blocks_before,
            "blocks_after": self.blocks_after,
            "compression_ratio": self.compression_ratio,
            "merge_calls": self.merge_calls,
            "tree_depth": self.tree_depth,
            "fused_events": [
                [list(e.absorber), [list(s) for s in e.absorbed]] for e in self.fused_events
            ],
            "similarity": {
                "n": int(samples.size),
                "mean": float(np.mean(samples)) if samples.size else None,
                "std": float(np.std(samples)) if samples.size else None,
                "min": float(np.min(samples)) if samples.size else None,
                "max": float(np.max(samples)) if samples.size else None,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def aggregate(cls, reports: list["FusionReport"]) -> "FusionReport":
        """Collapse per-layer reports into one (layer index -1)."""
        samples = [r.similarity_samples for r in reports if r.similarity_samples.size]
        return cls(
            layer=-1,
            blocks_before=sum(r.blocks_before for r in reports),
            blocks_after=sum(r.blocks_after for r in reports),
            fused_events=[e for r in reports for e in r.fused_events],
            merge_calls=sum(r.merge_calls for r in reports),
            tree_depth=max((r.tree_depth for r in reports), default=0),
            similarity_samples=np.concatenate(samples) if samples else np.empty(0),
            merge_records=[m for r in reports for m in r.merge_records],
        )


CSV_HEADER = (
    "layer,blocks_before,blocks_after,compression_ratio,"
    "merge_calls,tree_depth,fused_blocks,sim_mean,sim_std"
)


def reports_to_csv(reports: list[FusionReport]) -> str:
    """One-row-per-layer CSV rendering of fusion reports."""
    lines = [CSV_HEADER]
    for r in reports:
        mu = float(np.mean(r.similarity_samples)) if r.similarity_samples.size else float("nan")
        sd = float(np.std(r.similarity_samples)) if r.similarity_samples.size else float("nan")
        lines.append(
            f"{r.layer},{r.blocks_before},{r.blocks_after},{r.compression_ratio:.6g},"
            f"{r.merge_calls},{r.tree_depth},{r.fused_blocks},{mu:.6g},{sd:.6g}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class FusionOutcome:
    """Fused layer plus its report."""

    fused: FusedCache
    report: FusionReport

    @property
    def table(self) -> BlockTable:
        return self.fused.table


class _Engine:
    """Mutable fusion state for one layer."""

    def __init__(
        self,
        keys: UnfoldedLayer,
        values: UnfoldedLayer,
        thr: float,
        table: BlockTable,
    ):
        rows, bpr, r = keys.vectors.shape
        if values.vectors.shape != keys.vectors.shape:
            raise ConfigError("keys and values must be row-aligned")
        self.thr = thr
        self.bpr = bpr
        self.kdir = keys.vectors.reshape(rows * bpr, r).copy()
        self.vdir = values.vectors.reshape(rows * bpr, r).copy()
        self.fusable = keys.fusable.reshape(rows * bpr).copy()
        self.alive = np.ones(rows * bpr, dtype=bool)
        self.home: list[Slot] = [(i, j) for i in range(rows) for j in range(bpr)]
        self.table = table
        self.merge_calls = 0
        self.events: list[FusionEvent] = []
        self.records: list[MergeRecord] = []

    def fuse_rows(self, row_indices: list[int]) -> tuple[list[int], int]:
        """Run the recursion over the given rows; returns (block ids, depth)."""
        if len(row_indices) == 1:
            i = row_indices[0]
            return [i * self.bpr + j for j in range(self.bpr)], 0
        mid = len(row_indices) // 2
        left, dl = self.fuse_rows(row_indices[:mid])
        right, dr = self.fuse_rows(row_indices[mid:])
        depth = max(dl, dr) + 1
        merged = self._merge(left, right, depth)
        return merged, depth

    def _merge(self, left: list[int], right: list[int], level: int) -> list[int]:
        self.merge_calls += 1
        left_arr = np.asarray(left)
        right_arr = np.asarray(right)
        sim = self.kdir[left_arr] @ self.kdir[right_arr].T
        fus_l = self.fusable[left_arr]
        fus_r = self.fusable[right_arr]
        samples = sim[np.ix_(fus_l, fus_r)].ravel().copy()

        absorbed = np.zeros(len(right), dtype=bool)
        fused_count = 0
        for li, lid in enumerate(left):
            if not fus_l[li]:
                continue
            cand = np.nonzero((sim[li] > self.thr) & fus_r & ~absorbed)[0]
            if cand.size == 0:
                continue
            rids = right_arr[cand]
            self.kdir[lid] = _unit(self.kdir[lid] + self.kdir[rids].sum(axis=0))
            self.vdir[lid] = _unit(self.vdir[lid] + self.vdir[rids].sum(axis=0))
            for rid in rids:
                self.table.redirect(int(rid), lid)
                self.alive[rid] = False
            absorbed[cand] = True
            fused_count += cand.size
            self.events.append(
                FusionEvent(
                    absorber=self.home[lid],
                    absorbed=tuple(self.home[int(rid)] for rid in rids),
                )
            )
        self.records.append(
            MergeRecord(
                level=level,
                left_blocks=int(fus_l.sum()),
                right_blocks=int(fus_r.sum()),
                samples=samples,
                fused_count=fused_count,
            )
        )
        return left + [rid for j, rid in enumerate(right) if not absorbed[j]]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v if n == 0.0 else v / n


def _fuse_layer(
    keys: UnfoldedLayer,
    values: UnfoldedLayer,
    thr: float,
    row_groups: list[list[int]],
    layer: int,
    table: BlockTable | None,
    block_shape: tuple[int, int, int] | None,
) -> tuple[FusedCache, FusionReport]:
    if not -1.0 < thr < 1.0:
        raise ConfigError(f"threshold must lie strictly inside (-1, 1), got {thr}")
    rows, bpr = keys.rows, keys.blocks_per_row
    if table is None:
        table = BlockTable.identity(layer, rows, bpr)
    else:
        table.audit()
        if len(table.entries) != rows * bpr or any(c != 1 for c in table.refcount.values()):
            raise ConfigError("fast_fusion requires an identity (pre-fusion) block table")
    engine = _Engine(keys, values, thr, table)
    ordered_ids: list[int] = []
    depth = 0
    for group in row_groups:
        ids, d = engine.fuse_rows(group)
        ordered_ids.extend(ids)
        depth = max(depth, d)
    table.audit()
    phys = tuple(int(i) for i in ordered_ids)
    fused = FusedCache(
        keys=FusedLayer(directions=engine.kdir[list(phys)], phys_ids=phys),
        values=FusedLayer(directions=engine.vdir[list(phys)], phys_ids=phys),
        key_norms=keys.norms.copy(),
        value_norms=values.norms.copy(),
        table=table,
        block_shape=block_shape or (1, 1, keys.r),
    )
    sample_arrays = [m.samples for m in engine.records if m.samples.size]
    report = FusionReport(
        layer=layer,
        blocks_before=rows * bpr,
        blocks_after=int(engine.alive.sum()),
        fused_events=engine.events,
        merge_calls=engine.merge_calls,
        tree_depth=depth,
        similarity_samples=np.concatenate(sample_arrays) if sample_arrays else np.empty(0),
        merge_records=engine.records,
    )
    return fused, report


def fast_fusion(
    keys: UnfoldedLayer,
    values: UnfoldedLayer,
    thr: float,
    table: BlockTable | None = None,
    layer: int = 0,
    block_shape: tuple[int, int, int] | None = None,
) -> FusionOutcome:
    """Fuse one unfolded layer with all rows in a single tree."""
    fused, report = _fuse_layer(
        keys, values, thr, [list(range(keys.rows))], layer, table, block_shape
    )
    return FusionOutcome(fused=fused, report=report)


def _grouped(indices: list[int], group_size: int | None) -> list[list[int]]:
    if group_size is None or group_size >= len(indices):
        return [indices]
    return [indices[i : i + group_size] for i in range(0, len(indices), group_size)]


def fuse_batch(cache: PagedKvCache, cfg: FusionConfig) -> list[FusionOutcome]:
    """Batch Fast-Fusion: fuse blocks across requests, independently per layer."""
    if cfg.variant != "bff":
        raise ConfigError(f"fuse_batch requires variant 'bff', got {cfg.variant!r}")
    dims = cache.dims
    shape = (dims.t, dims.h, dims.d)

    def run(layer: int) -> FusionOutcome:
        keys, values = unfold_bff(cache, layer)
        groups = _grouped(list(range(dims.B)), cfg.group_size)
        fused, report = _fuse_layer(keys, values, cfg.threshold, groups, layer, None, shape)
        return FusionOutcome(fused=fused, report=report)

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        return list(pool.map(run, range(dims.L)))


def fuse_chunks(cache: PagedKvCache, cfg: FusionConfig, chunk_tokens: int) -> list[FusionOutcome]:
    """Chunks Fast-Fusion: fuse blocks across chunks within each request.

    Rows of the fused layout are (request, chunk) pairs; chunks never fuse
    across requests.  Physical blocks shared after fusion are flagged as
    reusable for computation in the block table.
    """
    if cfg.variant != "cff":
        raise ConfigError(f"fuse_chunks requires variant 'cff', got {cfg.variant!r}")
    dims = cache.dims
    C = cff_chunk_count(dims.p, dims.t, chunk_tokens)
    shape = (dims.t, dims.h, dims.d)

    def run(layer: int) -> FusionOutcome:
        key_parts, value_parts = [], []
        for request in range(dims.B):
            k, v = unfold_cff(cache, layer, chunk_tokens, request)
            key_parts.append(k)
            value_parts.append(v)
        keys = UnfoldedLayer(
            vectors=np.concatenate([k.vectors for k in key_parts]),
            norms=np.concatenate([k.norms for k in key_parts]),
        )
        values = UnfoldedLayer(
            vectors=np.concatenate([v.vectors for v in value_parts]),
            norms=np.concatenate([v.norms for v in value_parts]),
        )
        groups = []
        for request in range(dims.B):
            request_rows = list(range(request * C, (request + 1) * C))
            groups.extend(_grouped(request_rows, cfg.group_size))
        fused, report = _fuse_layer(keys, values, cfg.threshold, groups, layer, None, shape)
        for phys, count in fused.table.refcount.items():
            if count > 1:
                fused.table.reusable.add(phys)
        return FusionOutcome(fused=fused, report=report)

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        return list(pool.map(run, range(dims.L)))


def adapt_threshold(policy: AdaptPolicy, report: FusionReport, current: float) -> float:
    """One feedback step of the threshold controller.

    Target-compression mode nudges the threshold by ``step`` against the
    direction of the compression error; percentile mode returns the empirical
    (1 - target)-quantile of the collected similarity samples (linear
    interpolation between order statistics, numpy's default convention).
    """
    if policy.mode == "target-compression":
        cr = report.compression_ratio
        if cr > policy.target:
            return min(current + policy.step, policy.max_threshold)
        if cr < policy.target:
            return max(current - policy.step, policy.min_threshold)
        return current
    samples = report.similarity_samples
    if samples.size == 0:
        raise InsufficientDataError("percentile adaptation needs a nonempty similarity sample set")
    q = float(np.quantile(samples, 1.0 - policy.target))
    return min(max(q, policy.min_threshold), policy.max_threshold)


def tune_threshold(
    cache: PagedKvCache,
    cfg: FusionConfig,
    policy: AdaptPolicy,
    rel_tol: float = 0.1,
    max_iters: int = 30,
) -> tuple[float, list[tuple[float, float]]]:
    """Iterate fuse + adapt until the overall CR is within ``rel_tol`` of target.

    Returns the final threshold and the (threshold, achieved CR) history.
    Raises ConfigError if the policy is not target-compression.
    """
    if policy.mode != "target-compression":
        raise ConfigError("tune_threshold requires a target-compression policy")
    thr = cfg.threshold
    history: list[tuple[float, float]] = []
    for _ in range(max_iters):
        run_cfg = FusionConfig(threshold=thr, variant=cfg.variant, group_size=cfg.group_size)
        outcomes = fuse_batch(cache, run_cfg)
        combined = FusionReport.aggregate([o.report for o in outcomes])
        cr = combined.compression_ratio
        history.append((thr, cr))
        if abs(cr - policy.target) / policy.target <= rel_tol:
            return thr, history
        thr = adapt_threshold(policy, combined, thr)
    return thr, history
