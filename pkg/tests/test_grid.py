import numpy as np
import pytest

from algorithms.topology import unit_frame
from models.grid import ROOT_HEADER_BYTES, SPAN, FeatureGrid, IndexGrid
from services.bench_service import shell_coords
from utils.errors import ContractError, GridRangeError


def test_empty_grid():
    grid = IndexGrid.build_from_coords([])
    assert grid.voxel_count == 0
    assert not grid.is_active((5, 5, 5))
    assert grid.linear_index_of((5, 5, 5)) is None
    assert grid.coords.shape == (0, 3)


def test_duplicates_collapse_into_one_leaf():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (0, 0, 0), (7, 7, 7)])
    assert grid.voxel_count == 2
    assert grid.leaf_count == 1


def test_single_voxel_has_index_zero():
    grid = IndexGrid.build_from_coords([(0, 0, 0)])
    assert grid.linear_index_of((0, 0, 0)) == 0
    assert grid.is_active((0, 0, 0))


def test_lookup_agrees_with_hash_set(rng, make_grid):
    grid, coords = make_grid(rng, 10_000, lo=-300, hi=300)
    inserted = {tuple(int(v) for v in c) for c in coords}
    assert grid.voxel_count == len(inserted)
    assert np.all(grid.lookup(coords) >= 0)

    queries = rng.integers(-300, 300, size=(10_000, 3))
    expected = np.array([tuple(int(v) for v in q) in inserted for q in queries])
    assert np.array_equal(grid.lookup(queries) >= 0, expected)


def test_linear_index_is_dense_and_leaf_ordered(rng, make_grid):
    grid, coords = make_grid(rng, 3000, lo=-40, hi=40)
    ijk = grid.coords
    assert np.array_equal(grid.lookup(ijk), np.arange(grid.voxel_count))
    assert {tuple(c) for c in ijk.tolist()} == {tuple(c) for c in coords.tolist()}

    leaf = ijk >> 3
    local = ((ijk[:, 0] & 7) << 6) | ((ijk[:, 1] & 7) << 3) | (ijk[:, 2] & 7)
    order = np.lexsort((local, leaf[:, 2], leaf[:, 1], leaf[:, 0]))
    assert np.array_equal(order, np.arange(grid.voxel_count))


def test_in_leaf_order_has_z_fastest():
    coords = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0), (0, 0, 7)]
    grid = IndexGrid.build_from_coords(coords)
    assert grid.coords.tolist() == [[0, 0, 0], [0, 0, 1], [0, 0, 7], [0, 1, 0], [1, 0, 0]]


def test_build_is_permutation_invariant(rng, make_grid):
    grid, coords = make_grid(rng, 2000, lo=-70, hi=70)
    shuffled = IndexGrid.build_from_coords(coords[rng.permutation(coords.shape[0])])
    assert np.array_equal(grid.coords, shuffled.coords)
    assert grid.memory_stats() == shuffled.memory_stats()


def test_out_of_span_coordinate_raises():
    with pytest.raises(GridRangeError) as info:
        IndexGrid.build_from_coords([(0, 0, 0), (SPAN, 0, 0)])
    assert info.value.coord == (SPAN, 0, 0)


def test_out_of_span_lookup_reports_inactive():
    grid = IndexGrid.build_from_coords([(0, 0, 0)])
    assert grid.lookup([(SPAN + 5, 0, 0), (-SPAN - 1, 0, 0)]).tolist() == [-1, -1]


def test_iteration_yields_coords():
    grid = IndexGrid.build_from_coords([(1, 2, 3), (0, 0, 0)])
    assert [tuple(c) for c in grid] == [(0, 0, 0), (1, 2, 3)]
    assert len(grid) == 2


def test_world_centers_follow_frame():
    grid = IndexGrid.build_from_coords([(2, 0, 1)], voxel_size=0.5, origin=(1.0, -1.0, 0.0))
    assert np.allclose(grid.world_centers(), [[2.0, -1.0, 0.5]])


def test_memory_stats_of_empty_grid_is_root_overhead():
    stats = IndexGrid.build_from_coords([]).memory_stats()
    assert stats.topology_bytes == ROOT_HEADER_BYTES
    assert stats.index_bytes == 0
    assert stats.bytes_per_active_voxel == 0.0


def test_full_leaf_value_bytes():
    axis = np.arange(8)
    coords = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
    grid = IndexGrid.build_from_coords(coords)
    fg = FeatureGrid.zeros(grid, 4, dtype=np.float32)
    stats = fg.memory_stats()
    assert grid.leaf_count == 1
    assert stats.value_bytes == 512 * 4 * 4
    assert stats.bytes_per_active_voxel == pytest.approx((stats.topology_bytes + stats.index_bytes) / 512)


def test_memory_tracks_active_voxels_not_box_volume():
    # The same 1-voxel-thick plane inside a box 8× larger in volume
    axis = np.arange(64)
    plane = np.stack(np.meshgrid(axis, axis, [0], indexing='ij'), axis=-1).reshape(-1, 3)
    small = IndexGrid.build_from_coords(plane, voxel_size=1 / 64)
    large = IndexGrid.build_from_coords(plane + 64, voxel_size=1 / 128)
    a, b = small.memory_stats(), large.memory_stats()
    ratio = (b.topology_bytes + b.index_bytes) / (a.topology_bytes + a.index_bytes)
    assert ratio < 2.0


@pytest.mark.slow
def test_shell_topology_bytes_scale_with_active_voxels():
    stats, counts = [], []
    for resolution in (512, 1024):
        voxel_size, origin = unit_frame(resolution)
        grid = IndexGrid.build_from_coords(shell_coords(resolution), voxel_size, origin)
        counts.append(grid.voxel_count)
        stats.append(grid.memory_stats())
    assert counts[1] > 2_000_000
    voxel_ratio = counts[1] / counts[0]
    byte_ratio = ((stats[1].topology_bytes + stats[1].index_bytes)
                  / (stats[0].topology_bytes + stats[0].index_bytes))
    assert abs(byte_ratio - voxel_ratio) <= 0.25 * voxel_ratio
    assert all(s.bytes_per_active_voxel <= 4.0 for s in stats)


def test_feature_grid_rejects_misaligned_rows():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (1, 0, 0)])
    with pytest.raises(ContractError):
        FeatureGrid(grid, np.zeros((3, 2)))


def test_value_at_fills_inactive():
    grid = IndexGrid.build_from_coords([(0, 0, 0)])
    fg = FeatureGrid(grid, np.array([[2.0]]))
    assert fg.value_at([(0, 0, 0), (1, 1, 1)], fill=-1.0)[:, 0].tolist() == [2.0, -1.0]
