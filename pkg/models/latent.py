from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from models.grid import FeatureGrid, IndexGrid
from models.hierarchy import AttributeSet
from utils.errors import ContractError


@dataclass
class LatentGrid:
    """Posterior mean and log-variance over one latent topology"""
    mu: FeatureGrid
    logvar: FeatureGrid

    def __post_init__(self):
        if self.mu.grid is not self.logvar.grid:
            raise ContractError("Latent mean and log-variance must share a topology")

    @property
    def grid(self) -> IndexGrid:
        return self.mu.grid

    @property
    def dim(self):
        return self.mu.channels


@dataclass
class DecodeOutput:
    """
    Decoder result for one level.

    `grids[i]` is the topology the i-th structure head scored, `logits[i]` its
    per-voxel structure logits and `keeps[i]` the mask applied to it; the final
    topology is `grids[-1]` restricted by `keeps[-1]`.
    """
    grid: IndexGrid
    grids: List[IndexGrid] = field(default_factory=list)
    logits: list = field(default_factory=list)
    keeps: List[np.ndarray] = field(default_factory=list)
    normals: Optional[object] = None
    semantics: Optional[object] = None
    tsdf: Optional[object] = None
    empty: bool = False
    empty_layer: Optional[int] = None

    def attributes(self) -> AttributeSet:
        """Detached AttributeSet on the predicted topology"""
        if self.empty or self.grid.voxel_count == 0:
            return AttributeSet.empty(self.grid)
        return AttributeSet(
            FeatureGrid(self.grid, self.normals.value.copy()),
            FeatureGrid(self.grid, self.semantics.value.copy()),
            FeatureGrid(self.grid, self.tsdf.value.copy()),
        )


@dataclass
class LatentSample:
    """One denoiser training example: a posterior latent, its conditioning and optional class"""
    x0: FeatureGrid
    cond: Optional[FeatureGrid] = None
    class_id: Optional[int] = None
