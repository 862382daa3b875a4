from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import SCALAR_DTYPE, TSDF_CLAMP
from models.grid import FeatureGrid, IndexGrid
from utils.errors import ContractError, HierarchyError

# Channel layout of the packed attribute matrix (SVX1 files, diffusion conditioning)
ATTRIBUTE_CHANNELS = 5
NORMAL_SLICE = slice(0, 3)
SEMANTIC_SLICE = slice(3, 4)
TSDF_SLICE = slice(4, 5)


@dataclass
class AttributeSet:
    """
    Per-voxel normals, semantics and tsdf sharing one IndexGrid.

    Semantics hold either one channel of integer class ids or S channels of
    logits (decoder output). Surface samples are world points with their signed
    distance in voxel units, used by the surface loss.
    """
    normals: FeatureGrid
    semantics: FeatureGrid
    tsdf: FeatureGrid
    samples: Optional[np.ndarray] = None
    sample_tsdf: Optional[np.ndarray] = None
    open_surface: bool = False

    def __post_init__(self):
        grid = self.normals.grid
        if self.semantics.grid is not grid or self.tsdf.grid is not grid:
            raise ContractError("Attribute channels must share one IndexGrid")
        if self.normals.channels != 3 or self.tsdf.channels != 1:
            raise ContractError("Attribute channels need 3 normal and 1 tsdf channel")

    @property
    def grid(self) -> IndexGrid:
        return self.normals.grid

    @property
    def voxel_count(self):
        return self.grid.voxel_count

    def semantic_ids(self):
        sem = self.semantics.values
        if sem.shape[1] == 1:
            return np.rint(sem[:, 0]).astype(np.int64)
        return np.argmax(sem, axis=1).astype(np.int64)

    def semantic_onehot(self, classes):
        onehot = np.zeros((self.voxel_count, classes), dtype=self.tsdf.values.dtype)
        ids = np.clip(self.semantic_ids(), 0, classes - 1)
        onehot[np.arange(self.voxel_count), ids] = 1.0
        return onehot

    def sample_owners(self):
        """Voxel row of every surface sample: the n centres first, then each voxel's jittered block"""
        n = self.voxel_count
        if self.samples is None:
            return np.arange(n)
        per_voxel = (self.samples.shape[0] - n) // max(1, n)
        return np.concatenate([np.arange(n), np.repeat(np.arange(n), per_voxel)])

    def packed(self, dtype=SCALAR_DTYPE):
        """voxel_count × 5 matrix: normal(3), semantic id(1), tsdf(1)"""
        return np.concatenate([
            self.normals.values.astype(dtype),
            self.semantic_ids()[:, None].astype(dtype),
            self.tsdf.values.astype(dtype),
        ], axis=1)

    def to_feature_grid(self, dtype=SCALAR_DTYPE) -> FeatureGrid:
        return FeatureGrid(self.grid, self.packed(dtype))

    @classmethod
    def from_feature_grid(cls, fg: FeatureGrid):
        if fg.channels != ATTRIBUTE_CHANNELS:
            raise ContractError(f"Packed attributes need {ATTRIBUTE_CHANNELS} channels, got {fg.channels}")
        values = fg.values
        return cls(
            FeatureGrid(fg.grid, values[:, NORMAL_SLICE].copy()),
            FeatureGrid(fg.grid, values[:, SEMANTIC_SLICE].copy()),
            FeatureGrid(fg.grid, np.clip(values[:, TSDF_SLICE], -TSDF_CLAMP, TSDF_CLAMP)),
        )

    @classmethod
    def from_arrays(cls, grid, normals, semantic_ids, tsdf, **kwargs):
        dtype = SCALAR_DTYPE
        return cls(
            FeatureGrid(grid, np.asarray(normals, dtype=dtype).reshape(-1, 3)),
            FeatureGrid(grid, np.asarray(semantic_ids, dtype=dtype).reshape(-1, 1)),
            FeatureGrid(grid, np.asarray(tsdf, dtype=dtype).reshape(-1, 1)),
            **kwargs,
        )

    @classmethod
    def empty(cls, grid):
        return cls.from_arrays(grid, np.zeros((0, 3)), np.zeros(0), np.zeros(0))


@dataclass
class VoxelHierarchy:
    """Coarse-to-fine list of attribute grids where every fine voxel has active ancestors"""
    levels: List[AttributeSet] = field(default_factory=list)
    resolutions: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != len(self.resolutions):
            raise ContractError(f"{len(self.levels)} levels but {len(self.resolutions)} resolutions")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, level) -> AttributeSet:
        return self.levels[level]

    @property
    def finest(self) -> AttributeSet:
        return self.levels[-1]

    def grids(self):
        return [attrs.grid for attrs in self.levels]

    def voxel_counts(self):
        return [attrs.voxel_count for attrs in self.levels]

    def check_containment(self):
        """
        Verify every fine voxel's ancestor chain is active at each coarser level.

        Raises:
            HierarchyError: naming the first offending level and voxel
        """
        for level in range(1, len(self.levels)):
            coarse = self.levels[level - 1].grid
            fine = self.levels[level].grid
            factor = self.resolutions[level] // self.resolutions[level - 1]
            shift = int(np.log2(factor))
            if (1 << shift) != factor:
                raise HierarchyError(f"Level {level} resolution is not a power-of-two refinement")
            parents = fine.coords >> shift
            missing = coarse.lookup(parents) < 0
            if missing.any():
                bad = fine.coords[np.argmax(missing)]
                raise HierarchyError(
                    f"Voxel {tuple(int(v) for v in bad)} at level {level} has no active ancestor at level {level - 1}")
        return True

    def truncated(self, levels):
        return VoxelHierarchy(self.levels[:levels], self.resolutions[:levels])
