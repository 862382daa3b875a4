import numpy as np
import pytest

from algorithms.autograd import Tape, backward, sum_all
from algorithms.sparse_ops import (CENTER_OFFSET, bce_logits, group_norm, kernel_map, kl_unit_gauss, l1,
                                   max_pool2, mse, positional_encoding, sparse_conv3, transfer,
                                   trilinear_sample, upsample_subdivide)
from algorithms.topology import NEIGHBOR_OFFSETS, coarsen_topology, dense_box, dilate, subdivide_topology
from models.grid import FeatureGrid, IndexGrid
from utils.errors import ContractError
from utils.parallel import set_max_threads


def offset_index(dx, dy, dz):
    return (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)


def dense_conv_oracle(fg, weight, out_grid):
    lookup = {tuple(c): row for row, c in enumerate(fg.grid.coords.tolist())}
    out = np.zeros((out_grid.voxel_count, weight.shape[2]))
    for row, c in enumerate(out_grid.coords.tolist()):
        for k, o in enumerate(NEIGHBOR_OFFSETS.tolist()):
            src = lookup.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]))
            if src is not None:
                out[row] += fg.values[src] @ weight[k]
    return out


def test_identity_kernel_copies_input():
    grid = IndexGrid.build_from_coords([(3, 3, 3)])
    fg = FeatureGrid(grid, np.array([[1.5, -2.0]], dtype=np.float32))
    weight = np.zeros((27, 2, 2), dtype=np.float32)
    weight[CENTER_OFFSET] = np.eye(2)
    assert np.array_equal(sparse_conv3(fg, weight).values, fg.values)


def test_stencil_reads_input_at_positive_offset():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (1, 0, 0)])
    fg = FeatureGrid(grid, np.array([[2.0], [5.0]]))
    weight = np.zeros((27, 1, 1))
    weight[offset_index(1, 0, 0)] = 1.0
    out = sparse_conv3(fg, weight).values[:, 0]
    assert out[grid.linear_index_of((0, 0, 0))] == 5.0
    assert out[grid.linear_index_of((1, 0, 0))] == 0.0


@pytest.mark.parametrize('seed', range(200))
def test_conv_matches_dense_oracle(seed, make_grid):
    rng = np.random.default_rng(seed)
    grid, _ = make_grid(rng, 80, lo=0, hi=6)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 3)).astype(np.float32))
    weight = rng.standard_normal((27, 3, 4)).astype(np.float32)
    bias = rng.standard_normal(4).astype(np.float32)
    out = sparse_conv3(fg, weight, bias)
    expected = dense_conv_oracle(fg, weight.astype(np.float64), grid) + bias
    assert np.allclose(out.values, expected, atol=1e-4)


def test_conv_is_linear_in_input_and_weight(rng, make_grid):
    grid, _ = make_grid(rng, 60, lo=0, hi=6)
    x, y = (rng.standard_normal((grid.voxel_count, 3)) for _ in range(2))
    w, v = (rng.standard_normal((27, 3, 2)) for _ in range(2))
    a, b = 1.7, -0.4

    def conv(values, weight):
        return sparse_conv3(FeatureGrid(grid, values), weight).values

    assert np.allclose(conv(a * x + b * y, w), a * conv(x, w) + b * conv(y, w))
    assert np.allclose(conv(x, a * w + b * v), a * conv(x, w) + b * conv(x, v))


def test_conv_onto_dilated_output_topology(rng, make_grid):
    grid, _ = make_grid(rng, 40, lo=0, hi=5)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 2)))
    weight = rng.standard_normal((27, 2, 2))
    out_grid = dilate(grid)
    out = sparse_conv3(fg, weight, out_grid=out_grid)
    assert out.grid is out_grid
    assert np.allclose(out.values, dense_conv_oracle(fg, weight, out_grid))


def test_conv_is_deterministic_across_thread_counts(rng, make_grid):
    grid, _ = make_grid(rng, 400, lo=0, hi=12)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 8)).astype(np.float32))
    weight = rng.standard_normal((27, 8, 8)).astype(np.float32)
    set_max_threads(1)
    single = sparse_conv3(fg, weight).values
    set_max_threads(8)
    many = sparse_conv3(fg, weight).values
    assert np.array_equal(single, many)


def test_conv_rejects_bad_weight_shape():
    fg = FeatureGrid(IndexGrid.build_from_coords([(0, 0, 0)]), np.zeros((1, 2)))
    with pytest.raises(ContractError):
        sparse_conv3(fg, np.zeros((27, 3, 1)))


def test_conv_on_empty_grid():
    fg = FeatureGrid(IndexGrid.build_from_coords([]), np.zeros((0, 4)))
    assert sparse_conv3(fg, np.ones((27, 4, 2))).values.shape == (0, 2)


def test_kernel_map_is_cached_on_output_grid(rng, make_grid):
    grid, _ = make_grid(rng, 50)
    assert kernel_map(grid, grid) is kernel_map(grid, grid)


def test_max_pool_examples():
    axis = (0, 1)
    children = [(x, y, z) for x in axis for y in axis for z in axis]
    grid = IndexGrid.build_from_coords(children)
    values = np.zeros((8, 1))
    values[grid.lookup(children), 0] = np.arange(1, 9)
    pooled = max_pool2(FeatureGrid(grid, values))
    assert pooled.values.tolist() == [[8.0]]

    lonely = IndexGrid.build_from_coords([(1, 0, 1)])
    assert max_pool2(FeatureGrid(lonely, np.array([[-3.0]]))).values.tolist() == [[-3.0]]


def test_max_pool_matches_child_enumeration(rng, make_grid):
    grid, _ = make_grid(rng, 300, lo=-6, hi=6)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 3)))
    pooled = max_pool2(fg)
    expected = {}
    for c, v in zip(grid.coords.tolist(), fg.values):
        key = tuple(x >> 1 for x in c)
        expected[key] = np.maximum(expected[key], v) if key in expected else v
    for c, v in zip(pooled.grid.coords.tolist(), pooled.values):
        assert np.array_equal(v, expected[tuple(c)])


def test_max_pool_gradient_goes_to_lowest_tied_child():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (0, 0, 1)])
    x = FeatureGrid(grid, np.ones((2, 1)))
    x.features.requires_grad = True
    with Tape() as tape:
        loss = sum_all(max_pool2(x).features)
    backward(tape, loss)
    assert x.features.grad[:, 0].tolist() == [1.0, 0.0]


def test_upsample_copies_parent_and_sums_gradient():
    parent = IndexGrid.build_from_coords([(0, 0, 0)])
    fine = subdivide_topology(parent, [True])
    x = FeatureGrid(parent, np.array([[4.0, -1.0]]))
    x.features.requires_grad = True
    with Tape() as tape:
        up = upsample_subdivide(x, fine)
        loss = sum_all(up.features)
    assert up.values.tolist() == [[4.0, -1.0]] * 8
    backward(tape, loss)
    assert x.features.grad.tolist() == [[8.0, 8.0]]


def test_upsample_rejects_orphans():
    parent = IndexGrid.build_from_coords([(0, 0, 0)])
    fine = subdivide_topology(IndexGrid.build_from_coords([(0, 0, 0), (3, 0, 0)]), [True, True])
    with pytest.raises(ContractError):
        upsample_subdivide(FeatureGrid(parent, np.zeros((1, 1))), fine)


def test_upsample_matches_coord_map(rng, make_grid):
    grid, _ = make_grid(rng, 100, lo=-5, hi=5)
    x = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 2)))
    fine = subdivide_topology(grid, rng.random((grid.voxel_count, 8)) < 0.5)
    up = upsample_subdivide(x, fine)
    parents = grid.lookup(fine.coords >> 1)
    assert np.array_equal(up.values, x.values[parents])


def test_pool_then_upsample_round_trip_frames(rng, make_grid):
    grid, _ = make_grid(rng, 100, lo=0, hi=8, voxel_size=1 / 8, origin=(-0.4375,) * 3)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 1)))
    pooled = max_pool2(fg, coarsen_topology(grid))
    assert upsample_subdivide(pooled, grid).grid is grid


def test_group_norm_constant_input_gives_beta():
    grid = dense_box(2)
    fg = FeatureGrid(grid, np.full((8, 4), 3.0))
    out = group_norm(fg, 2, gamma=np.full(4, 2.0), beta=np.array([0.1, 0.2, 0.3, 0.4]))
    assert np.allclose(out.values, [[0.1, 0.2, 0.3, 0.4]] * 8)


def test_group_norm_statistics(rng, make_grid):
    grid, _ = make_grid(rng, 400)
    fg = FeatureGrid(grid, 5.0 + 3.0 * rng.standard_normal((grid.voxel_count, 6)))
    out = group_norm(fg, 3, gamma=np.full(6, 1.5), beta=np.full(6, -0.5), eps=1e-12).values
    for g in range(3):
        block = out[:, 2 * g:2 * g + 2]
        assert abs(block.mean() + 0.5) < 1e-4
        assert abs(block.std() - 1.5) < 1e-4


def test_group_norm_rejects_uneven_groups():
    fg = FeatureGrid(dense_box(2), np.zeros((8, 5)))
    with pytest.raises(ContractError):
        group_norm(fg, 2)


def test_positional_encoding_channels():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (3, 1, 2)], voxel_size=0.25, origin=(0.0, 0.0, 0.0))
    assert positional_encoding(grid, 4).channels == 27
    plain = positional_encoding(grid, 0, dtype=np.float64)
    assert np.allclose(plain.values, grid.world_centers() / 0.5)
    at_origin = positional_encoding(grid, 2, dtype=np.float64).values[0]
    assert np.allclose(at_origin[3:6], 0.0) and np.allclose(at_origin[6:9], 1.0)
    assert np.allclose(at_origin[9:12], 0.0) and np.allclose(at_origin[12:15], 1.0)


def test_transfer_pads_and_restricts(rng, make_grid):
    grid, _ = make_grid(rng, 30, lo=0, hi=4)
    fg = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, 2)))
    wide = dilate(grid)
    padded = transfer(fg, wide)
    rows = wide.lookup(grid.coords)
    assert np.array_equal(padded.values[rows], fg.values)
    assert np.count_nonzero(np.abs(padded.values).sum(axis=1)) == grid.voxel_count
    assert np.array_equal(transfer(padded, grid).values, fg.values)


def test_trilinear_sample_at_centre_and_midpoint():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (1, 0, 0)])
    fg = FeatureGrid(grid, np.array([[-1.0], [1.0]]))
    values, complete = trilinear_sample(fg, [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]], fill=0.0)
    assert values.value[:, 0].tolist() == [-1.0, 0.0]
    assert not complete.any()


def test_loss_examples():
    assert float(bce_logits(np.array([[20.0]]), np.array([[1.0]])).value) < 1e-6
    assert float(kl_unit_gauss(np.zeros((3, 2)), np.zeros((3, 2))).value) == 0.0
    assert float(kl_unit_gauss(np.ones((1, 1)), np.zeros((1, 1))).value) == pytest.approx(0.5)
    assert float(mse(np.array([1.0, 3.0]), np.array([0.0, 0.0])).value) == pytest.approx(5.0)
    assert float(l1(np.array([1.0, -3.0]), np.array([0.0, 0.0])).value) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        mse(np.zeros(2), np.zeros(3))
