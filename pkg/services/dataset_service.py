import logging
import os

import numpy as np
from tqdm import tqdm

from algorithms.hierarchy import build_hierarchy
from algorithms.shapes import procedural_dataset
from algorithms.voxelizer import voxelize_mesh
from config import ExperimentConfig, POINTS_PER_SHAPE
from models.hierarchy import AttributeSet, VoxelHierarchy
from repositories.grid_repository import GridRepository
from repositories.mesh_repository import MeshRepository
from utils.errors import ContractError, MissingArtifactError

logger = logging.getLogger(__name__)

DATASET_DIR = 'dataset'


class DatasetService:
    """Builds, stores and reloads ground-truth voxel hierarchies"""

    @staticmethod
    def meshes(cfg: ExperimentConfig):
        """(training meshes, held-out meshes) of the configured procedural family"""
        ds = cfg.dataset
        meshes = procedural_dataset(ds.family, ds.count + ds.holdout, seed=ds.seed)
        return meshes[:ds.count], meshes[ds.count:]

    @staticmethod
    def hierarchy_for_mesh(mesh, resolutions, seed=0) -> VoxelHierarchy:
        grid, attrs = voxelize_mesh(mesh, resolutions[-1], normalize=False, seed=seed)
        return build_hierarchy((grid, attrs), resolutions)

    @staticmethod
    def build(cfg: ExperimentConfig, progress=False):
        """Voxelize every training mesh at the finest resolution and coarsen it into a hierarchy"""
        train, _ = DatasetService.meshes(cfg)
        hierarchies = []
        for index, mesh in enumerate(tqdm(train, disable=not progress, desc='voxelize')):
            hierarchy = DatasetService.hierarchy_for_mesh(mesh, cfg.resolutions, seed=(cfg.dataset.seed, index))
            if hierarchy.finest.voxel_count == 0:
                logger.warning("Shape %d produced no voxels; skipped", index)
                continue
            hierarchies.append(hierarchy)
        logger.info("Built %d hierarchies at %s", len(hierarchies), cfg.resolutions)
        return hierarchies

    @staticmethod
    def save(out_dir, hierarchies):
        root = os.path.join(out_dir, DATASET_DIR)
        for index, hierarchy in enumerate(hierarchies):
            GridRepository.save_hierarchy(os.path.join(root, f'shape{index:04d}'), hierarchy)
        return root

    @staticmethod
    def load(out_dir):
        root = os.path.join(out_dir, DATASET_DIR)
        if not os.path.isdir(root):
            raise MissingArtifactError('dataset', root)
        names = sorted(name for name in os.listdir(root) if name.startswith('shape'))
        if not names:
            raise MissingArtifactError('dataset shapes', root)
        return [GridRepository.load_hierarchy(os.path.join(root, name)) for name in names]

    @staticmethod
    def prepare(cfg: ExperimentConfig, progress=False):
        """
        Deterministic in-memory training set (with surface samples); written
        to `<out>/dataset` the first time.
        """
        hierarchies = DatasetService.build(cfg, progress)
        if not os.path.isdir(os.path.join(cfg.output_dir, DATASET_DIR)):
            DatasetService.save(cfg.output_dir, hierarchies)
        return hierarchies

    @staticmethod
    def voxelize_file(mesh_path, resolution, out_path, normalize=True):
        """Mesh file -> SVX1 attribute grid (normal, semantic id, tsdf)"""
        mesh = MeshRepository.load(mesh_path)
        _, attrs = voxelize_mesh(mesh, resolution, normalize=normalize)
        GridRepository.save(out_path, attrs)
        logger.info("Voxelized %s at %d^3: %d voxels", mesh_path, resolution, attrs.voxel_count)
        return attrs

    @staticmethod
    def hierarchy_from_file(grid_path, levels, out_dir) -> VoxelHierarchy:
        """Coarsen a saved attribute grid into the given resolution chain (finest last)"""
        attrs = GridRepository.load_attributes(grid_path)
        levels = sorted(int(r) for r in levels)
        if levels[-1] != attrs.grid.resolution:
            raise ContractError(
                f"Finest level {levels[-1]} does not match the grid's {attrs.grid.resolution}^3 resolution")
        hierarchy = build_hierarchy((attrs.grid, attrs), levels)
        GridRepository.save_hierarchy(out_dir, hierarchy)
        return hierarchy

    @staticmethod
    def simulate_scan(attrs: AttributeSet, view=(1.0, 0.0, 0.0), count=POINTS_PER_SHAPE, seed=0):
        """
        Partial point cloud seen by a viewer far along `view`: surface samples of
        voxels whose normal faces the viewer.
        """
        points = attrs.samples if attrs.samples is not None else attrs.grid.world_centers()
        facing = attrs.normals.values @ np.asarray(view, dtype=np.float64) > 0.0
        visible = points[facing[attrs.sample_owners()]]
        if visible.shape[0] == 0:
            return visible
        rng = np.random.default_rng(seed)
        pick = rng.choice(visible.shape[0], size=min(count, visible.shape[0]), replace=False)
        return visible[np.sort(pick)]
