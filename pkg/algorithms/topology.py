import numpy as np

from algorithms.autograd import gather_rows
from models.grid import FeatureGrid, IndexGrid
from utils.errors import ContractError

NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64)
OCTANT_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)


def dilate(grid: IndexGrid, radius: int = 1) -> IndexGrid:
    """Minkowski sum of the active set with the 3^3 neighbourhood, same frame"""
    if radius != 1:
        raise ContractError(f"Only radius 1 dilation is supported, got {radius}")
    ijk = grid.coords
    if ijk.shape[0] == 0:
        return grid.empty_like()
    shifted = (ijk[None, :, :] + NEIGHBOR_OFFSETS[:, None, :]).reshape(-1, 3)
    return IndexGrid.build_from_coords(shifted, grid.voxel_size, grid.origin)


def coarse_frame(voxel_size, origin):
    return 2.0 * voxel_size, np.asarray(origin, dtype=np.float64) + 0.5 * voxel_size


def fine_frame(voxel_size, origin):
    return 0.5 * voxel_size, np.asarray(origin, dtype=np.float64) - 0.25 * voxel_size


def coarsen_topology(grid: IndexGrid, factor: int = 2) -> IndexGrid:
    """Coarse voxel floor(c/2) is active iff any of its 8 children is; voxel size doubles"""
    if factor != 2:
        raise ContractError(f"Only factor 2 coarsening is supported, got {factor}")
    voxel_size, origin = coarse_frame(grid.voxel_size, grid.origin)
    return IndexGrid.build_from_coords(grid.coords >> 1, voxel_size, origin)


def subdivide_topology(grid: IndexGrid, mask) -> IndexGrid:
    """
    Split masked voxels into octants at half the voxel size.

    Args:
        grid: coarse topology
        mask: voxel_count bools (all 8 octants) or voxel_count × 8 bools, octant
            index dx*4 + dy*2 + dz

    Raises:
        ContractError: mask length differs from voxel_count
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != grid.voxel_count or mask.ndim not in (1, 2) or (mask.ndim == 2 and mask.shape[1] != 8):
        raise ContractError(
            f"Subdivision mask shape {mask.shape} does not match {grid.voxel_count} voxels")
    if mask.ndim == 1:
        mask = np.repeat(mask[:, None], 8, axis=1)
    voxel_size, origin = fine_frame(grid.voxel_size, grid.origin)
    rows, octants = np.nonzero(mask)
    children = 2 * grid.coords[rows] + OCTANT_OFFSETS[octants]
    return IndexGrid.build_from_coords(children, voxel_size, origin)


def prune(fg: FeatureGrid, keep) -> FeatureGrid:
    """Keep the selected voxels; rows follow their voxels into the re-densified index"""
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.shape[0] != fg.voxel_count:
        raise ContractError(f"Keep mask length {keep.shape[0]} does not match {fg.voxel_count} voxels")
    if keep.all():
        return fg
    rows = np.nonzero(keep)[0]
    # A subset of an index-ordered coord list is still index-ordered
    grid = IndexGrid.build_from_coords(fg.grid.coords[rows], fg.grid.voxel_size, fg.grid.origin)
    return FeatureGrid(grid, gather_rows(fg.features, rows))


def restrict(grid: IndexGrid, keep) -> IndexGrid:
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.shape[0] != grid.voxel_count:
        raise ContractError(f"Keep mask length {keep.shape[0]} does not match {grid.voxel_count} voxels")
    return IndexGrid.build_from_coords(grid.coords[keep], grid.voxel_size, grid.origin)


def dense_box(resolution, voxel_size=None, origin=None) -> IndexGrid:
    """Fully active resolution^3 grid; defaults to the unit scene cube frame"""
    resolution = int(resolution)
    if voxel_size is None:
        voxel_size = 1.0 / resolution
    if origin is None:
        origin = np.full(3, -0.5 + 0.5 * voxel_size)
    axis = np.arange(resolution, dtype=np.int64)
    ijk = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
    return IndexGrid.build_from_coords(ijk, voxel_size, origin)


def unit_frame(resolution):
    """(voxel_size, origin) of a resolution^3 grid tiling the scene cube [-0.5, 0.5]^3"""
    voxel_size = 1.0 / resolution
    return voxel_size, np.full(3, -0.5 + 0.5 * voxel_size)


def parent_index(fine: IndexGrid, coarse: IndexGrid):
    """Coarse linear index of each fine voxel's parent, -1 for orphans"""
    def compute():
        return coarse.lookup(fine.coords >> 1)
    return fine.cached(('parent', id(coarse)), lambda: (coarse, compute()))[1]


def is_contained(fine: IndexGrid, coarse: IndexGrid):
    return bool(np.all(parent_index(fine, coarse) >= 0))


def intersect(a: IndexGrid, b: IndexGrid):
    """Rows of `a` and of `b` for voxels active in both, ordered by `a`'s index"""
    idx_b = b.lookup(a.coords)
    rows_a = np.nonzero(idx_b >= 0)[0]
    return rows_a, idx_b[rows_a]
