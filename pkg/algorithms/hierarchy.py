import numpy as np

from algorithms.topology import coarsen_topology
from config import SEMANTIC_CLASSES
from models.hierarchy import AttributeSet, VoxelHierarchy
from utils.errors import ContractError


def coarsen_attributes(attrs: AttributeSet) -> AttributeSet:
    """
    One 2× coarsening step of topology and attributes.

    Normals are child means renormalized, tsdf the child mean and semantics the
    child majority with ties going to the smallest id.
    """
    fine = attrs.grid
    coarse = coarsen_topology(fine)
    parent = coarse.lookup(fine.coords >> 1)
    n = coarse.voxel_count
    counts = np.bincount(parent, minlength=n).astype(np.float64)[:, None]

    normal_sum = np.zeros((n, 3))
    np.add.at(normal_sum, parent, attrs.normals.values.astype(np.float64))
    norm = np.linalg.norm(normal_sum, axis=1, keepdims=True)
    # Opposing children cancel; fall back to the first child's normal
    first_child = np.full(n, -1, dtype=np.int64)
    first_child[parent[::-1]] = np.arange(fine.voxel_count)[::-1]
    fallback = attrs.normals.values[first_child] if n else np.zeros((0, 3))
    normals = np.where(norm > 1e-8, normal_sum / np.maximum(norm, 1e-300), fallback)

    tsdf_sum = np.zeros((n, 1))
    np.add.at(tsdf_sum, parent, attrs.tsdf.values.astype(np.float64))

    ids = attrs.semantic_ids()
    classes = max(SEMANTIC_CLASSES, int(ids.max()) + 1 if ids.size else 1)
    votes = np.zeros((n, classes))
    np.add.at(votes, (parent, np.clip(ids, 0, None)), 1.0)
    semantics = np.argmax(votes, axis=1)

    return AttributeSet.from_arrays(coarse, normals, semantics, tsdf_sum / np.maximum(counts, 1.0))


def build_hierarchy(fine, resolutions) -> VoxelHierarchy:
    """
    Ground-truth hierarchy by repeated coarsening of the finest level.

    Args:
        fine: (IndexGrid, AttributeSet) at resolution resolutions[-1]
        resolutions: strictly increasing power-of-two chain, coarse first

    Raises:
        ContractError: the chain is not increasing powers of two ending at the
            fine grid's resolution
    """
    grid, attrs = fine
    resolutions = [int(r) for r in resolutions]
    if not resolutions:
        raise ContractError("Empty resolution chain")
    if resolutions[-1] != grid.resolution:
        raise ContractError(f"Finest resolution {resolutions[-1]} does not match grid resolution {grid.resolution}")
    for lo, hi in zip(resolutions[:-1], resolutions[1:]):
        ratio = hi // lo
        if hi <= lo or hi % lo or ratio & (ratio - 1):
            raise ContractError(f"Resolution chain {resolutions} is not power-of-two increasing")

    levels = [attrs]
    current = attrs
    for lo, hi in zip(reversed(resolutions[:-1]), reversed(resolutions[1:])):
        for _ in range(int(np.log2(hi // lo))):
            current = coarsen_attributes(current)
        levels.append(current)
    hierarchy = VoxelHierarchy(list(reversed(levels)), resolutions)
    hierarchy.check_containment()
    return hierarchy
