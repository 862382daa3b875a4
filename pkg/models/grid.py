from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from algorithms.autograd import Tensor
from config import SCALAR_DTYPE, SCENE_EXTENT
from utils.errors import ContractError, GridRangeError

# Tree geometry: leaves hold 8^3 voxels, lower internal nodes 16^3 leaves,
# upper internal nodes 32^3 lower nodes, the root is a hash map of upper nodes.
LEAF_LOG2 = 3
LOWER_LOG2 = 4
UPPER_LOG2 = 5
LEAF_SHIFT = LEAF_LOG2
LOWER_SHIFT = LEAF_LOG2 + LOWER_LOG2
UPPER_SHIFT = LEAF_LOG2 + LOWER_LOG2 + UPPER_LOG2
LEAF_VOXELS = 1 << (3 * LEAF_LOG2)
LEAF_WORDS = LEAF_VOXELS // 64
LOWER_WORDS = (1 << (3 * LOWER_LOG2)) // 64
UPPER_WORDS = (1 << (3 * UPPER_LOG2)) // 64

SPAN_LOG2 = 20
SPAN = 1 << SPAN_LOG2

# voxel_size (8) + origin (24) + voxel_count (8) + node counts (3 × 8)
ROOT_HEADER_BYTES = 64
ROOT_ENTRY_BYTES = 12 + 4


class Coord(NamedTuple):
    x: int
    y: int
    z: int


@dataclass(frozen=True)
class MemoryStats:
    topology_bytes: int
    index_bytes: int
    value_bytes: int
    bytes_per_active_voxel: float

    def to_dict(self):
        return {
            'topology_bytes': self.topology_bytes,
            'index_bytes': self.index_bytes,
            'value_bytes': self.value_bytes,
            'bytes_per_active_voxel': self.bytes_per_active_voxel,
        }


def as_coord_array(coords):
    """Coerce a coord list / array into an (n, 3) int64 array"""
    ijk = np.asarray(coords, dtype=np.int64)
    if ijk.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    ijk = ijk.reshape(-1, 3)
    return ijk


def check_span(ijk):
    """Raise GridRangeError for the first coord outside [-2^20, 2^20)"""
    if ijk.shape[0] == 0:
        return
    bad = np.any((ijk < -SPAN) | (ijk >= SPAN), axis=1)
    if bad.any():
        raise GridRangeError(ijk[np.argmax(bad)], SPAN)


def _pack(ijk, shift, bits):
    """Pack per-axis (ijk >> shift) into one non-negative int64 key, lexicographic order"""
    bias = 1 << (SPAN_LOG2 - shift)
    parts = (ijk >> shift) + bias
    return (parts[:, 0] << (2 * bits)) | (parts[:, 1] << bits) | parts[:, 2]


def _unpack(keys, shift, bits):
    bias = 1 << (SPAN_LOG2 - shift)
    mask = (1 << bits) - 1
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * bits)) & mask
    out[:, 1] = (keys >> bits) & mask
    out[:, 2] = keys & mask
    return (out - bias) << shift


def _child_bit(ijk, shift, log2):
    """Bit position of a child inside its parent node, x-major with z varying fastest"""
    m = (1 << log2) - 1
    local = (ijk >> shift) & m
    return (local[:, 0] << (2 * log2)) | (local[:, 1] << log2) | local[:, 2]


def _low_bits(bits):
    """uint64 mask with the `bits` lowest bits set"""
    bits = bits.astype(np.uint64)
    return (np.uint64(1) << bits) - np.uint64(1)


def _set_bits(n_rows, n_words, rows, bits):
    masks = np.zeros((n_rows, n_words), dtype=np.uint64)
    words = bits >> 6
    np.bitwise_or.at(masks, (rows, words), np.uint64(1) << (bits & 63).astype(np.uint64))
    return masks


def _rank(masks, prefix, rows, bits):
    """(present, rank) of bit `bits` in node `rows` using stored word prefix counts"""
    words = bits >> 6
    w = masks[rows, words]
    b = (bits & 63).astype(np.uint64)
    present = ((w >> b) & np.uint64(1)).astype(bool)
    rank = prefix[rows, words] + np.bitwise_count(w & _low_bits(b)).astype(np.int64)
    return present, rank


class IndexGrid:
    """
    Sparse voxel topology stored as a four-level tree.

    The root maps upper-node origins to upper nodes (32^3 children), which point
    to lower nodes (16^3 children), which point to 8^3 leaves. Every node keeps a
    presence bitmask; children of a node are stored contiguously so a child is
    found by popcount rank. Leaves carry a 64-bit base index so the linear index
    of a voxel is `base + rank` inside the leaf mask.

    Linear indices are dense in [0, voxel_count) and ordered by leaf origin
    (lexicographic x, y, z) then by the in-leaf offset x*64 + y*8 + z, so z varies
    fastest: (0,0,0), (0,0,1), ..., (0,0,7), (0,1,0) within one leaf.

    Voxel c has its centre at `origin + c * voxel_size`. Grids are immutable
    after construction and safe to share between reader threads.
    """

    def __init__(self, voxel_size=1.0, origin=(0.0, 0.0, 0.0)):
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3).copy()
        self.voxel_count = 0
        self._root = {}
        self._upper_origins = np.zeros((0, 3), dtype=np.int32)
        self._upper_masks = np.zeros((0, UPPER_WORDS), dtype=np.uint64)
        self._upper_prefix = np.zeros((0, UPPER_WORDS), dtype=np.int32)
        self._upper_start = np.zeros(0, dtype=np.int32)
        self._lower_origins = np.zeros((0, 3), dtype=np.int32)
        self._lower_masks = np.zeros((0, LOWER_WORDS), dtype=np.uint64)
        self._lower_prefix = np.zeros((0, LOWER_WORDS), dtype=np.int32)
        self._lower_start = np.zeros(0, dtype=np.int32)
        self._leaf_origins = np.zeros((0, 3), dtype=np.int32)
        self._leaf_masks = np.zeros((0, LEAF_WORDS), dtype=np.uint64)
        self._leaf_base = np.zeros(0, dtype=np.uint64)
        self._cache = {}

    # ------------------------------------------------------------------ build

    @classmethod
    def build_from_coords(cls, coords, voxel_size=1.0, origin=(0.0, 0.0, 0.0)):
        """
        Build a grid active exactly at the unique `coords`.

        Duplicates are dropped and input order does not matter: the resulting
        indexing is identical for every permutation of the same set.

        Raises:
            GridRangeError: a coordinate lies outside ±2^20
        """
        grid = cls(voxel_size, origin)
        ijk = as_coord_array(coords)
        check_span(ijk)
        if ijk.shape[0] == 0:
            grid._freeze()
            return grid

        # Index order key: leaf coordinate (18 bits per axis) then in-leaf offset
        leaf_keys = _pack(ijk, LEAF_SHIFT, SPAN_LOG2 - LEAF_SHIFT + 1)
        local = _child_bit(ijk, 0, LEAF_LOG2)
        keys = np.unique((leaf_keys << 9) | local)

        leaf_keys = keys >> 9
        local = keys & 511
        unique_leaves, leaf_of_voxel, counts = np.unique(leaf_keys, return_inverse=True, return_counts=True)
        leaf_origins = _unpack(unique_leaves, LEAF_SHIFT, SPAN_LOG2 - LEAF_SHIFT + 1)
        base = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.uint64)
        leaf_masks = _set_bits(unique_leaves.shape[0], LEAF_WORDS, leaf_of_voxel, local)

        # Lower nodes, grouped under upper nodes in child-bit order
        lower_keys = _pack(leaf_origins, LOWER_SHIFT, SPAN_LOG2 - LOWER_SHIFT + 1)
        unique_lower, lower_of_leaf = np.unique(lower_keys, return_inverse=True)
        lower_origins = _unpack(unique_lower, LOWER_SHIFT, SPAN_LOG2 - LOWER_SHIFT + 1)

        upper_keys = _pack(lower_origins, UPPER_SHIFT, SPAN_LOG2 - UPPER_SHIFT + 1)
        unique_upper, upper_of_lower = np.unique(upper_keys, return_inverse=True)
        upper_origins = _unpack(unique_upper, UPPER_SHIFT, SPAN_LOG2 - UPPER_SHIFT + 1)

        lower_bit = _child_bit(lower_origins, LOWER_SHIFT, UPPER_LOG2)
        lower_order = np.lexsort((lower_bit, upper_of_lower))
        lower_rank = np.empty_like(lower_order)
        lower_rank[lower_order] = np.arange(lower_order.shape[0])
        lower_origins = lower_origins[lower_order]
        upper_of_lower = upper_of_lower[lower_order]
        lower_bit = lower_bit[lower_order]
        lower_of_leaf = lower_rank[lower_of_leaf]

        leaf_bit = _child_bit(leaf_origins, LEAF_SHIFT, LOWER_LOG2)
        leaf_order = np.lexsort((leaf_bit, lower_of_leaf))
        leaf_origins = leaf_origins[leaf_order]
        leaf_masks = leaf_masks[leaf_order]
        base = base[leaf_order]
        lower_of_leaf = lower_of_leaf[leaf_order]
        leaf_bit = leaf_bit[leaf_order]

        n_upper = unique_upper.shape[0]
        n_lower = lower_origins.shape[0]
        upper_masks = _set_bits(n_upper, UPPER_WORDS, upper_of_lower, lower_bit)
        lower_masks = _set_bits(n_lower, LOWER_WORDS, lower_of_leaf, leaf_bit)

        grid._root = {tuple(int(v) for v in o): i for i, o in enumerate(upper_origins)}
        grid._upper_origins = upper_origins.astype(np.int32)
        grid._upper_masks = upper_masks
        grid._upper_prefix = _word_prefix(upper_masks)
        grid._upper_start = _first_child(upper_of_lower, n_upper)
        grid._lower_origins = lower_origins.astype(np.int32)
        grid._lower_masks = lower_masks
        grid._lower_prefix = _word_prefix(lower_masks)
        grid._lower_start = _first_child(lower_of_leaf, n_lower)
        grid._leaf_origins = leaf_origins.astype(np.int32)
        grid._leaf_masks = leaf_masks
        grid._leaf_base = base
        grid.voxel_count = int(keys.shape[0])
        grid._freeze()
        return grid

    def _freeze(self):
        for name in ('_upper_origins', '_upper_masks', '_upper_prefix', '_upper_start',
                     '_lower_origins', '_lower_masks', '_lower_prefix', '_lower_start',
                     '_leaf_origins', '_leaf_masks', '_leaf_base'):
            getattr(self, name).setflags(write=False)

    def empty_like(self):
        return IndexGrid.build_from_coords([], self.voxel_size, self.origin)

    # ----------------------------------------------------------------- lookup

    def lookup(self, coords):
        """Vectorized linear_index_of: int64 indices, -1 where inactive"""
        ijk = as_coord_array(coords)
        out = np.full(ijk.shape[0], -1, dtype=np.int64)
        if ijk.shape[0] == 0 or self.voxel_count == 0:
            return out

        inside = np.all((ijk >= -SPAN) & (ijk < SPAN), axis=1)
        sel = np.nonzero(inside)[0]
        q = ijk[sel]

        # Root hash map, one dict lookup per distinct upper origin
        upper_keys = _pack(q, UPPER_SHIFT, SPAN_LOG2 - UPPER_SHIFT + 1)
        unique_keys, inverse = np.unique(upper_keys, return_inverse=True)
        unique_origins = _unpack(unique_keys, UPPER_SHIFT, SPAN_LOG2 - UPPER_SHIFT + 1)
        node_of_key = np.array([self._root.get(tuple(int(v) for v in o), -1) for o in unique_origins],
                               dtype=np.int64)
        upper = node_of_key[inverse]
        ok = upper >= 0
        sel, q, upper = sel[ok], q[ok], upper[ok]

        present, rank = _rank(self._upper_masks, self._upper_prefix, upper,
                              _child_bit(q, LOWER_SHIFT, UPPER_LOG2))
        sel, q = sel[present], q[present]
        lower = self._upper_start[upper[present]] + rank[present]

        present, rank = _rank(self._lower_masks, self._lower_prefix, lower,
                              _child_bit(q, LEAF_SHIFT, LOWER_LOG2))
        sel, q = sel[present], q[present]
        leaf = self._lower_start[lower[present]] + rank[present]

        local = _child_bit(q, 0, LEAF_LOG2)
        words = self._leaf_masks[leaf]
        word = local >> 6
        w = words[np.arange(words.shape[0]), word]
        b = (local & 63).astype(np.uint64)
        present = ((w >> b) & np.uint64(1)).astype(bool)
        counts = np.bitwise_count(words).astype(np.int64)
        before = np.cumsum(counts, axis=1) - counts
        rank = before[np.arange(words.shape[0]), word] + np.bitwise_count(w & _low_bits(b)).astype(np.int64)
        out[sel[present]] = self._leaf_base[leaf[present]].astype(np.int64) + rank[present]
        return out

    def is_active(self, c):
        return self.linear_index_of(c) is not None

    def linear_index_of(self, c) -> Optional[int]:
        idx = int(self.lookup([tuple(c)])[0])
        return idx if idx >= 0 else None

    # -------------------------------------------------------------- iteration

    @property
    def coords(self):
        """All active coords (voxel_count × 3, int64) in linear-index order"""
        cached = self._cache.get('coords')
        if cached is not None:
            return cached
        if self.voxel_count == 0:
            ijk = np.zeros((0, 3), dtype=np.int64)
        else:
            order = np.argsort(self._leaf_base, kind='stable')
            masks = np.ascontiguousarray(self._leaf_masks[order]).astype('<u8')
            bits = np.unpackbits(masks.view(np.uint8), axis=1, bitorder='little')
            rows, local = np.nonzero(bits)
            offsets = np.stack([(local >> 6) & 7, (local >> 3) & 7, local & 7], axis=1)
            ijk = self._leaf_origins[order][rows].astype(np.int64) + offsets
        ijk.setflags(write=False)
        self._cache['coords'] = ijk
        return ijk

    def __iter__(self):
        for c in self.coords:
            yield Coord(int(c[0]), int(c[1]), int(c[2]))

    def __len__(self):
        return self.voxel_count

    def world_centers(self, coords=None):
        ijk = self.coords if coords is None else as_coord_array(coords)
        return self.origin + ijk.astype(np.float64) * self.voxel_size

    @property
    def resolution(self):
        """Grid resolution of the unit scene cube this grid's voxel size implies"""
        return int(round(SCENE_EXTENT / self.voxel_size))

    @property
    def leaf_count(self):
        return int(self._leaf_origins.shape[0])

    def bounding_box(self):
        if self.voxel_count == 0:
            return None
        ijk = self.coords
        return ijk.min(axis=0), ijk.max(axis=0)

    def same_frame(self, other, tol=1e-9):
        return (abs(self.voxel_size - other.voxel_size) <= tol * max(1.0, self.voxel_size)
                and np.allclose(self.origin, other.origin, atol=tol, rtol=0))

    def same_topology(self, other):
        if self is other:
            return True
        return (self.voxel_count == other.voxel_count and self.same_frame(other)
                and np.array_equal(self.coords, other.coords))

    def cached(self, key, factory):
        """Memoize derived data (kernel maps, parent maps) on this immutable grid"""
        value = self._cache.get(key)
        if value is None:
            value = factory()
            self._cache[key] = value
        return value

    # ------------------------------------------------------------ accounting

    def memory_stats(self, value_bytes=0) -> MemoryStats:
        topology = (ROOT_HEADER_BYTES + ROOT_ENTRY_BYTES * len(self._root)
                    + self._upper_origins.nbytes + self._upper_masks.nbytes
                    + self._lower_origins.nbytes + self._lower_masks.nbytes
                    + self._leaf_origins.nbytes + self._leaf_masks.nbytes)
        index = (self._upper_prefix.nbytes + self._upper_start.nbytes
                 + self._lower_prefix.nbytes + self._lower_start.nbytes
                 + self._leaf_base.nbytes)
        per_voxel = (topology + index) / self.voxel_count if self.voxel_count else 0.0
        return MemoryStats(int(topology), int(index), int(value_bytes), float(per_voxel))

    def __repr__(self):
        return (f"<IndexGrid {self.voxel_count} voxels, {self.leaf_count} leaves, "
                f"voxel_size={self.voxel_size:g}>")


def _word_prefix(masks):
    counts = np.bitwise_count(masks).astype(np.int32)
    return (np.cumsum(counts, axis=1) - counts).astype(np.int32)


def _first_child(parent_of_child, n_parents):
    """Index of each parent's first child; children are sorted by parent"""
    starts = np.searchsorted(parent_of_child, np.arange(n_parents), side='left')
    return starts.astype(np.int32)


class FeatureGrid:
    """An IndexGrid plus a voxel_count × C feature matrix aligned to its linear index"""

    def __init__(self, grid, features):
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features))
        if features.value.ndim != 2 or features.value.shape[0] != grid.voxel_count:
            raise ContractError(
                f"Feature matrix shape {features.value.shape} does not match {grid.voxel_count} voxels")
        self.grid = grid
        self.features = features

    @classmethod
    def zeros(cls, grid, channels, dtype=None):
        return cls(grid, np.zeros((grid.voxel_count, channels), dtype=dtype or SCALAR_DTYPE))

    @property
    def values(self):
        return self.features.value

    @property
    def channels(self):
        return int(self.features.value.shape[1])

    @property
    def voxel_count(self):
        return self.grid.voxel_count

    def with_features(self, features):
        return FeatureGrid(self.grid, features)

    def value_at(self, coords, fill=0.0):
        idx = self.grid.lookup(coords)
        out = np.full((idx.shape[0], self.channels), fill, dtype=self.values.dtype)
        found = idx >= 0
        out[found] = self.values[idx[found]]
        return out

    def memory_stats(self) -> MemoryStats:
        return self.grid.memory_stats(value_bytes=self.values.nbytes)

    def __repr__(self):
        return f"<FeatureGrid {self.voxel_count}×{self.channels}>"
