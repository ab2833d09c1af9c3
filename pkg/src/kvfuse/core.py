"""Paged KV-cache representation, layout unfolding, and block tables.

A cache holds key/value tensors of shape ``(L, B, p, t, h, d)``: layers,
requests, blocks per request, tokens per block, heads, and head embedding
size.  Unfolding flattens each block of ``t * h * d`` entries into a single
vector of length ``r`` (token-major, then head, then embedding -- i.e. plain
C-order over ``(t, h, d)``) and splits it into a unit direction plus a scalar
norm, which is the representation the fusion stage operates on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, CorruptionError, InvalidCacheError, ZeroVectorError

# Tolerance used by invariant checks on stored unit directions.
DIRECTION_NORM_TOL = 1e-5


@dataclass(frozen=True)
class CacheDims:
    """Dimensions of a paged KV-cache."""

    B: int
    p: int
    t: int
    h: int
    d: int
    L: int

    def __post_init__(self):
        for name in ("B", "p", "t", "h", "d", "L"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidCacheError(f"dimension {name} must be a positive integer, got {value!r}")

    @property
    def r(self) -> int:
        """Flattened block length ``t * h * d``."""
        return self.t * self.h * self.d

    @property
    def tokens_per_request(self) -> int:
        return self.p * self.t

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L, self.B, self.p, self.t, self.h, self.d)


@dataclass(frozen=True)
class PagedKvCache:
    """Immutable key/value tensors in the paged ``(L, B, p, t, h, d)`` layout.

    Inputs are widened to float64 on construction; 32-bit data loaded from
    disk therefore round-trips exactly.
    """

    dims: CacheDims
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if keys.shape != self.dims.shape:
            raise InvalidCacheError(f"keys shape {keys.shape} does not match dims {self.dims.shape}")
        if values.shape != keys.shape:
            raise InvalidCacheError(f"values shape {values.shape} differs from keys shape {keys.shape}")
        if not np.isfinite(keys).all() or not np.isfinite(values).all():
            raise InvalidCacheError("cache contains NaN or Inf entries")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class UnfoldedLayer:
    """One layer's blocks as unit directions plus per-block norms.

    ``vectors`` has shape ``(rows, blocks_per_row, r)`` where a row is a
    request (BFF) or a chunk (CFF).  A zero block keeps a zero direction and
    norm 0 and is excluded from similarity computations (unfusable).
    """

    vectors: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 3 or self.norms.shape != self.vectors.shape[:2]:
            raise InvalidCacheError(
                f"inconsistent unfolded shapes {self.vectors.shape} / {self.norms.shape}"
            )

    @property
    def rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def blocks_per_row(self) -> int:
        return self.vectors.shape[1]

    @property
    def r(self) -> int:
        return self.vectors.shape[2]

    @property
    def fusable(self) -> np.ndarray:
        """Boolean mask of blocks eligible for fusion (nonzero norm)."""
        return self.norms > 0.0


def _split_norm_direction(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(flat, axis=-1)
    safe = np.where(norms > 0.0, norms, 1.0)
    directions = flat / safe[..., None]
    return directions, norms


def unfold_bff(cache: PagedKvCache, layer: int) -> tuple[UnfoldedLayer, UnfoldedLayer]:
    """Unfold one layer into the per-request ``(B, p, r)`` layout."""
    if not 0 <= layer < cache.dims.L:
        raise InvalidCacheError(f"layer {layer} out of range [0, {cache.dims.L})")
    out = []
    for tensor in (cache.keys, cache.values):
        flat = tensor[layer].reshape(cache.dims.B, cache.dims.p, cache.dims.r)
        directions, norms = _split_norm_direction(flat)
        out.append(UnfoldedLayer(directions, norms))
    return out[0], out[1]


def cff_chunk_count(p: int, t: int, chunk_tokens: int) -> int:
    """Number of chunks for a request of ``p`` blocks of ``t`` tokens."""
    if chunk_tokens < 1 or chunk_tokens % t != 0:
        raise AlignmentError(f"chunk_tokens={chunk_tokens} is not a positive multiple of t={t}")
    if chunk_tokens > p * t:
        raise AlignmentError(f"chunk_tokens={chunk_tokens} exceeds the request's {p * t} tokens")
    return (p * t) // chunk_tokens


def unfold_cff(
    cache: PagedKvCache, layer: int, chunk_tokens: int, request: int = 0
) -> tuple[UnfoldedLayer, UnfoldedLayer]:
    """Unfold one request of one layer into the per-chunk ``(C, p/C, r)`` layout."""
    if not 0 <= layer < cache.dims.L:
        raise InvalidCacheError(f"layer {layer} out of range [0, {cache.dims.L})")
    if not 0 <= request < cache.dims.B:
        raise InvalidCacheError(f"request {request} out of range [0, {cache.dims.B})")
    p, t = cache.dims.p, cache.dims.t
    C = cff_chunk_count(p, t, chunk_tokens)
    if p % C != 0:
        raise AlignmentError(f"chunk count C={C} does not divide p={p}; blocks cannot be split evenly")
    blocks_per_chunk = p // C
    out = []
    for tensor in (cache.keys, cache.values):
        flat = tensor[layer, request].reshape(C, blocks_per_chunk, cache.dims.r)
        directions, norms = _split_norm_direction(flat)
        out.append(UnfoldedLayer(directions, norms))
    return out[0], out[1]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


Slot = tuple[int, int]


@dataclass
class BlockTable:
    """Per-layer mapping from logical slots ``(row, block)`` to physical blocks.

    Mutation is single-writer; reads are safe between mutations.
    """

    layer: int
    entries: dict[Slot, int] = field(default_factory=dict)
    refcount: dict[int, int] = field(default_factory=dict)
    reusable: set[int] = field(default_factory=set)
    _slots: dict[int, set[Slot]] = field(default_factory=dict, repr=False)

    @classmethod
    def identity(cls, layer: int, rows: int, blocks_per_row: int) -> "BlockTable":
        """Table where slot ``(i, j)`` maps to physical block ``i * blocks_per_row + j``."""
        table = cls(layer=layer)
        for i in range(rows):
            for j in range(blocks_per_row):
                phys = i * blocks_per_row + j
                table.entries[(i, j)] = phys
                table.refcount[phys] = 1
                table._slots[phys] = {(i, j)}
        return table

    def physical_of(self, slot: Slot) -> int:
        try:
            return self.entries[slot]
        except KeyError:
            raise CorruptionError(f"unknown logical slot {slot}") from None

    def is_shared(self, slot: Slot) -> bool:
        return self.refcount[self.physical_of(slot)] > 1

    def slots_of(self, phys: int) -> frozenset[Slot]:
        if phys not in self._slots:
            raise CorruptionError(f"dangling physical block id {phys}")
        return frozenset(self._slots[phys])

    def redirect(self, from_phys: int, to_phys: int) -> None:
        """Repoint every slot on ``from_phys`` to ``to_phys`` and evict ``from_phys``."""
        if from_phys not in self._slots:
            raise CorruptionError(f"dangling physical block id {from_phys}")
        if to_phys not in self._slots:
            raise CorruptionError(f"dangling physical block id {to_phys}")
        moved = self._slots.pop(from_phys)
        for slot in moved:
            self.entries[slot] = to_phys
        self._slots[to_phys] |= moved
        self.refcount[to_phys] += self.refcount.pop(from_phys)

    def live_blocks(self) -> set[int]:
        return set(self.refcount)

    def audit(self) -> None:
        """Raise CorruptionError unless refcounts match the entry map exactly."""
        counts: dict[int, int] = {}
        for slot, phys in self.entries.items():
            counts[phys] = counts.get(phys, 0) + 1
        if counts != self.refcount:
            raise CorruptionError("refcounts inconsistent with logical slot mapping")
        for phys, slots in self._slots.items():
            if {s for s in slots} != {s for s, q in self.entries.items() if q == phys}:
                raise CorruptionError(f"reverse slot index stale for physical block {phys}")


@dataclass(frozen=True)
class FusedLayer:
    """Surviving physical blocks of one layer after fusion.

    ``directions[i]`` is the unit direction of physical block ``phys_ids[i]``.
    """

    directions: np.ndarray
    phys_ids: tuple[int, ...]

    def index_of(self, phys: int) -> int:
        try:
            return self.phys_ids.index(phys)
        except ValueError:
            raise CorruptionError(f"dangling physical block id {phys}") from None


@dataclass(frozen=True)
class FusedCache:
    """One layer's fused keys and values plus per-slot norms and the block table."""

    keys: FusedLayer
    values: FusedLayer
    key_norms: np.ndarray
    value_norms: np.ndarray
    table: BlockTable
    block_shape: tuple[int, int, int]


@dataclass(frozen=True)
class LayerView:
    """Materialized logical view of one layer: ``(rows, blocks, t, h, d)`` tensors."""

    keys: np.ndarray
    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.keys.shape[0]


def refold(fused: FusedCache) -> LayerView:
    """Materialize the logical per-slot view of a fused layer.

    Shared physical blocks appear once in ``fused`` storage but once per
    logical slot here, each instance rescaled by that slot's own stored norm.
    """
    fused.table.audit()
    rows, blocks_per_row = fused.key_norms.shape
    t, h, d = fused.block_shape
    key_index = {phys: i for i, phys in enumerate(fused.keys.phys_ids)}
    value_index = {phys: i for i, phys in enumerate(fused.values.phys_ids)}
    keys = np.empty((rows, blocks_per_row, t, h, d), dtype=np.float64)
    values = np.empty_like(keys)
    for (i, j), phys in fused.table.entries.items():
        if phys not in key_index or phys not in value_index:
            raise CorruptionError(f"dangling physical block id {phys}")
        kdir = fused.keys.directions[key_index[phys]]
        vdir = fused.values.directions[value_index[phys]]
        keys[i, j] = (fused.key_norms[i, j] * kdir).reshape(t, h, d)
        values[i, j] = (fused.value_norms[i, j] * vdir).reshape(t, h, d)
    return LayerView(keys=keys, values=values)
