import logging
import os

from algorithms.cascade import CascadeConfig, CascadeLevel, sample_cascade
from algorithms.surface import extract_mesh
from config import ExperimentConfig
from repositories.grid_repository import GridRepository
from repositories.mesh_repository import MeshRepository
from repositories.run_log_repository import RunLogRepository
from services.diffusion_service import DiffusionService
from services.vae_service import VaeService
from utils.errors import ContractError

logger = logging.getLogger(__name__)

SAMPLES_DIR = 'samples'
RUN_LOG = 'run.jsonl'
MESH_FILE = 'mesh.obj'


class SamplingService:
    """Loads trained levels into a cascade and writes sampled hierarchies"""

    @staticmethod
    def load_cascade(cfg: ExperimentConfig, ddim_steps=None, eta=None, guidance=None) -> CascadeConfig:
        d = cfg.diffusion
        schedule = DiffusionService.schedule(cfg)
        levels = []
        for level in range(len(cfg.resolutions)):
            levels.append(CascadeLevel(
                vae=VaeService.load_level(cfg, level),
                denoiser=DiffusionService.load_level(cfg, level),
                schedule=schedule,
                ddim_steps=d.ddim_steps if ddim_steps is None else ddim_steps,
                eta=d.eta if eta is None else eta,
                guidance=d.guidance_scale if guidance is None else guidance,
            ))
        return CascadeConfig(levels, point_condition=d.point_condition).validate()

    @staticmethod
    def sample_dir(out_dir, index):
        return os.path.join(out_dir, SAMPLES_DIR, f'sample{index:04d}')

    @staticmethod
    def sample(cfg: ExperimentConfig, count=1, seed=None, class_id=None, given_dir=None, keep_levels=0,
               ddim_steps=None, eta=None, guidance=None, write_mesh=True):
        """
        Draw `count` hierarchies and write each as `samples/sampleNNNN/level<k>.svx1`
        plus an OBJ mesh of the finest tsdf. Every DDIM step and decoded level is
        appended to `samples/run.jsonl`.

        Returns:
            list of (sample directory, VoxelHierarchy)
        """
        if count < 1:
            raise ContractError("Sample count must be at least 1")
        seed = cfg.seed if seed is None else seed
        cascade = SamplingService.load_cascade(cfg, ddim_steps, eta, guidance)
        given = GridRepository.load_hierarchy(given_dir) if given_dir else None
        if keep_levels and given is None:
            raise ContractError("--keep-levels needs --given")
        results = []
        log_path = os.path.join(cfg.output_dir, SAMPLES_DIR, RUN_LOG)
        with RunLogRepository.open(log_path) as run_log:
            for index in range(count):
                sample_seed = seed + index

                def on_event(record, index=index, sample_seed=sample_seed):
                    run_log.write(dict(record, sample=index, seed=sample_seed))

                hierarchy = sample_cascade(cascade, seed=sample_seed, class_id=class_id, given=given,
                                           given_levels=keep_levels, on_event=on_event)
                directory = SamplingService.sample_dir(cfg.output_dir, index)
                GridRepository.save_hierarchy(directory, hierarchy)
                if write_mesh:
                    mesh = extract_mesh(hierarchy.finest)
                    MeshRepository.save_obj(os.path.join(directory, MESH_FILE), mesh)
                    run_log.write({'event': 'mesh', 'sample': index, 'faces': mesh.face_count})
                logger.info("Sample %d: voxels per level %s", index, hierarchy.voxel_counts())
                results.append((directory, hierarchy))
        return results

    @staticmethod
    def list_samples(directory):
        root = directory if os.path.basename(os.path.normpath(directory)) == SAMPLES_DIR else \
            os.path.join(directory, SAMPLES_DIR)
        if not os.path.isdir(root):
            return []
        return [os.path.join(root, name) for name in sorted(os.listdir(root))
                if name.startswith('sample') and os.path.isdir(os.path.join(root, name))]
