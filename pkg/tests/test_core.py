"""Unit tests for cache dims, unfolding, cosine similarity, and block tables."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvfuse.core import (
    BlockTable,
    CacheDims,
    PagedKvCache,
    cosine_similarity,
    refold,
    unfold_bff,
    unfold_cff,
)
from kvfuse.errors import (
    AlignmentError,
    CorruptionError,
    InvalidCacheError,
    ZeroVectorError,
)
from kvfuse.fusion import FusionConfig, fast_fusion, fuse_batch


class TestCacheDims:
    def test_r_is_flattened_block_length(self):
        dims = CacheDims(B=2, p=3, t=4, h=5, d=6, L=7)
        assert dims.r == 4 * 5 * 6

    @pytest.mark.parametrize("field", ["B", "p", "t", "h", "d", "L"])
    def test_nonpositive_rejected(self, field):
        kwargs = dict(B=1, p=1, t=1, h=1, d=1, L=1)
        kwargs[field] = 0
        with pytest.raises(InvalidCacheError):
            CacheDims(**kwargs)

    def test_fractional_rejected(self):
        with pytest.raises(InvalidCacheError):
            CacheDims(B=1.5, p=1, t=1, h=1, d=1, L=1)


class TestPagedKvCache:
    def test_shape_mismatch_rejected(self, small_dims):
        good = np.zeros(small_dims.shape)
        with pytest.raises(InvalidCacheError):
            PagedKvCache(dims=small_dims, keys=good, values=np.zeros((1,)))

    def test_nan_rejected(self, small_dims):
        bad = np.zeros(small_dims.shape)
        bad[0, 0, 0, 0, 0, 0] = np.nan
        with pytest.raises(InvalidCacheError):
            PagedKvCache(dims=small_dims, keys=bad, values=np.zeros(small_dims.shape))

    def test_float32_widened(self, small_dims):
        keys = np.zeros(small_dims.shape, dtype=np.float32)
        cache = PagedKvCache(dims=small_dims, keys=keys, values=keys.copy())
        assert cache.keys.dtype == np.float64


class TestUnfoldBff:
    def test_three_four_five_triangle(self):
        dims = CacheDims(B=1, p=1, t=1, h=1, d=2, L=1)
        keys = np.array([3.0, 4.0]).reshape(dims.shape)
        cache = PagedKvCache(dims=dims, keys=keys, values=keys.copy())
        unfolded, _ = unfold_bff(cache, 0)
        assert unfolded.norms[0, 0] == pytest.approx(5.0)
        np.testing.assert_allclose(unfolded.vectors[0, 0], [0.6, 0.8])

    def test_zero_block_unfusable(self):
        dims = CacheDims(B=1, p=1, t=1, h=1, d=2, L=1)
        zeros = np.zeros(dims.shape)
        cache = PagedKvCache(dims=dims, keys=zeros, values=zeros)
        unfolded, _ = unfold_bff(cache, 0)
        assert unfolded.norms[0, 0] == 0.0
        np.testing.assert_array_equal(unfolded.vectors[0, 0], [0.0, 0.0])
        assert not unfolded.fusable[0, 0]

    def test_round_trip_reconstruction(self, random_cache):
        keys, values = unfold_bff(random_cache, 1)
        rebuilt = (keys.norms[..., None] * keys.vectors).reshape(
            random_cache.keys[1].shape
        )
        np.testing.assert_allclose(rebuilt, random_cache.keys[1], rtol=1e-5)

    def test_directions_unit_norm(self, random_cache):
        keys, values = unfold_bff(random_cache, 0)
        for unfolded in (keys, values):
            norms = np.linalg.norm(unfolded.vectors, axis=-1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_norm_matches_flattened_block(self, random_cache):
        keys, _ = unfold_bff(random_cache, 0)
        flat = random_cache.keys[0].reshape(keys.norms.shape + (-1,))
        np.testing.assert_allclose(keys.norms, np.linalg.norm(flat, axis=-1), rtol=1e-6)

    def test_flattening_is_token_major(self):
        # entry (tok, head, e) must land at index (tok*h + head)*d + e
        dims = CacheDims(B=1, p=1, t=2, h=2, d=2, L=1)
        keys = np.arange(8.0).reshape(dims.shape)
        cache = PagedKvCache(dims=dims, keys=keys, values=keys.copy())
        unfolded, _ = unfold_bff(cache, 0)
        rebuilt = unfolded.norms[0, 0] * unfolded.vectors[0, 0]
        np.testing.assert_allclose(rebuilt, np.arange(8.0), rtol=1e-12)

    def test_bad_layer(self, random_cache):
        with pytest.raises(InvalidCacheError):
            unfold_bff(random_cache, 99)


class TestUnfoldCff:
    def _cache(self, p, t):
        dims = CacheDims(B=1, p=p, t=t, h=1, d=2, L=1)
        rng = np.random.default_rng(0)
        return PagedKvCache(
            dims=dims,
            keys=rng.standard_normal(dims.shape),
            values=rng.standard_normal(dims.shape),
        )

    def test_chunk_count_formula(self):
        cache = self._cache(p=8, t=16)
        keys, _ = unfold_cff(cache, 0, chunk_tokens=32)
        assert keys.rows == 4
        assert keys.blocks_per_row == 2

    def test_single_chunk_degenerate(self):
        cache = self._cache(p=8, t=16)
        keys, _ = unfold_cff(cache, 0, chunk_tokens=8 * 16)
        assert keys.rows == 1

    def test_floor_formula_by_hand(self):
        cache = self._cache(p=6, t=16)
        keys, _ = unfold_cff(cache, 0, chunk_tokens=48)
        assert keys.rows == 2
        assert keys.blocks_per_row == 3

    def test_misaligned_chunk_rejected(self):
        cache = self._cache(p=8, t=16)
        with pytest.raises(AlignmentError):
            unfold_cff(cache, 0, chunk_tokens=24)

    def test_oversized_chunk_rejected(self):
        cache = self._cache(p=8, t=16)
        with pytest.raises(AlignmentError):
            unfold_cff(cache, 0, chunk_tokens=256)

    def test_round_trip(self):
        cache = self._cache(p=4, t=8)
        keys, _ = unfold_cff(cache, 0, chunk_tokens=16)
        rebuilt = (keys.norms[..., None] * keys.vectors).reshape(cache.keys[0, 0].shape)
        np.testing.assert_allclose(rebuilt, cache.keys[0, 0], rtol=1e-5)


class TestCosineSimilarity:
    def test_identity(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_45_degrees(self):
        assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(
            1.0 / np.sqrt(2), abs=1e-6
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVectorError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @given(
        st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8),
        st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8),
    )
    @settings(max_examples=200)
    def test_always_in_range(self, a, b):
        n = min(len(a), len(b))
        a, b = np.asarray(a[:n]), np.asarray(b[:n])
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            return
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestBlockTable:
    def test_identity_refcounts(self):
        table = BlockTable.identity(0, rows=2, blocks_per_row=3)
        assert len(table.entries) == 6
        assert all(c == 1 for c in table.refcount.values())
        table.audit()

    def test_redirect_updates_refcount_and_shared(self):
        table = BlockTable.identity(0, rows=2, blocks_per_row=1)
        table.redirect(1, 0)
        assert table.refcount[0] == 2
        assert 1 not in table.refcount
        assert table.is_shared((0, 0))
        assert table.physical_of((1, 0)) == 0
        table.audit()

    def test_redirect_dangling_rejected(self):
        table = BlockTable.identity(0, rows=1, blocks_per_row=1)
        with pytest.raises(CorruptionError):
            table.redirect(5, 0)

    def test_audit_detects_corruption(self):
        table = BlockTable.identity(0, rows=2, blocks_per_row=1)
        table.refcount[0] = 7
        with pytest.raises(CorruptionError):
            table.audit()


class TestRefold:
    def test_identity_round_trip(self, random_cache):
        keys, values = unfold_bff(random_cache, 0)
        # threshold close to 1 on random data: nothing fuses
        outcome = fast_fusion(keys, values, thr=0.999999, block_shape=(2, 2, 4))
        view = refold(outcome.fused)
        np.testing.assert_allclose(view.keys, random_cache.keys[0], rtol=1e-5, atol=1e-12)
        np.testing.assert_allclose(view.values, random_cache.values[0], rtol=1e-5, atol=1e-12)

    def test_shared_blocks_rescaled_per_slot(self):
        # two identical directions with different norms share one physical block
        dims = CacheDims(B=2, p=1, t=1, h=1, d=2, L=1)
        keys = np.array([[[3.0, 4.0]], [[6.0, 8.0]]]).reshape(dims.shape)
        cache = PagedKvCache(dims=dims, keys=keys, values=keys.copy())
        outcomes = fuse_batch(cache, FusionConfig(threshold=0.9))
        fused = outcomes[0].fused
        assert len(fused.table.live_blocks()) == 1
        view = refold(fused)
        np.testing.assert_allclose(view.keys, cache.keys[0], rtol=1e-9)

    def test_refcount_audit_after_fusion(self, random_cache):
        outcomes = fuse_batch(random_cache, FusionConfig(threshold=0.2))
        for outcome in outcomes:
            outcome.table.audit()
            assert sum(outcome.table.refcount.values()) == len(outcome.table.entries)
