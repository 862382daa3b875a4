import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from algorithms.denoiser import SparseDenoiser, build_condition, sample_latent
from algorithms.structure_vae import StructureVAE
from algorithms.topology import dense_box
from models.hierarchy import VoxelHierarchy
from models.schedule import NoiseSchedule
from utils.errors import ContractError, SamplingFailure

logger = logging.getLogger(__name__)


@dataclass
class CascadeLevel:
    """Trained models and sampler settings for one hierarchy level"""
    vae: StructureVAE
    denoiser: SparseDenoiser
    schedule: NoiseSchedule
    ddim_steps: int = 50
    eta: float = 0.0
    guidance: float = 1.0

    @property
    def resolution(self):
        return self.vae.config.in_resolution

    @property
    def latent_resolution(self):
        return self.vae.config.latent_resolution


@dataclass
class CascadeConfig:
    levels: List[CascadeLevel] = field(default_factory=list)
    point_condition: bool = False

    def validate(self):
        if not self.levels:
            raise ContractError("Cascade needs at least one level")
        if not self.levels[0].vae.config.dense_latent:
            raise ContractError("The coarsest level must use a dense latent")
        previous = None
        for k, level in enumerate(self.levels):
            if previous is not None:
                if level.resolution <= previous.resolution:
                    raise ContractError("Cascade resolutions must strictly increase")
                if level.latent_resolution != previous.resolution:
                    raise ContractError(
                        f"Level {k} latent {level.latent_resolution}^3 does not match level {k - 1} "
                        f"output {previous.resolution}^3")
            previous = level
        return self


def sample_cascade(cascade: CascadeConfig, seed=0, class_id=None, given: Optional[VoxelHierarchy] = None,
                   given_levels=0, points=None, on_event: Optional[Callable] = None) -> VoxelHierarchy:
    """
    Generate a hierarchy coarse to fine.

    Level 0 denoises a dense latent box; every later level denoises on the
    previous level's decoded topology, conditioned on its attributes, so each
    fine grid is a subdivision of its parent by construction. With
    `given_levels=k` the first k levels are taken from `given` and only the
    finer ones are regenerated.

    Args:
        cascade: validated per-level models
        seed: base seed; level l uses (seed, l)
        class_id: optional global class
        points: optional scan points for the occupancy channel
        on_event: receives one dict per DDIM step and per decoded level

    Raises:
        ContractError: inconsistent cascade or `given` shorter than given_levels
        SamplingFailure: a level decoded to an empty grid
    """
    cascade.validate()
    levels = []
    if given_levels:
        if given is None or len(given) < given_levels:
            raise ContractError(f"Editing needs {given_levels} given levels")
        for k in range(given_levels):
            if given[k].grid.resolution != cascade.levels[k].resolution:
                raise ContractError(f"Given level {k} is not at {cascade.levels[k].resolution}^3")
            levels.append(given[k])

    emit = on_event or (lambda record: None)
    for k in range(given_levels, len(cascade.levels)):
        level = cascade.levels[k]
        started = time.monotonic()
        if k == 0:
            grid = dense_box(level.latent_resolution)
        else:
            grid = levels[k - 1].grid
        cond = build_condition(grid, levels[k - 1] if k > 0 else None, points, cascade.point_condition,
                               dtype=level.denoiser.dtype)

        def on_step(t, t_prev, k=k):
            emit({'event': 'ddim_step', 'level': k, 't': t, 't_prev': t_prev,
                  'elapsed_s': time.monotonic() - started})

        x = sample_latent(level.denoiser, grid, level.schedule, cond, class_id, level.ddim_steps, level.eta,
                          level.guidance, seed=(seed, k), on_step=on_step)
        out = level.vae.decode(x)
        if out.empty:
            raise SamplingFailure(k, f"decoder pruned every voxel at layer {out.empty_layer}")
        attrs = out.attributes()
        levels.append(attrs)
        elapsed = time.monotonic() - started
        emit({'event': 'level', 'level': k, 'resolution': level.resolution, 'voxels': attrs.voxel_count,
              'latent_voxels': grid.voxel_count, 'elapsed_s': elapsed})
        logger.info("Level %d (%d^3): %d voxels in %.2fs", k, level.resolution, attrs.voxel_count, elapsed)

    hierarchy = VoxelHierarchy(levels, [lv.resolution for lv in cascade.levels])
    hierarchy.check_containment()
    return hierarchy


def sample_many(cascade: CascadeConfig, count, seed=0, class_id=None, on_event=None):
    """`count` independent hierarchies, sample i seeded from the pair (seed, i)"""
    return [sample_cascade(cascade, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                           class_id=class_id, on_event=on_event) for i in range(count)]
