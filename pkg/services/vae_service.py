import logging
import os
from dataclasses import asdict

import numpy as np

from algorithms.metrics import grid_iou
from algorithms.structure_vae import StructureVAE, train_vae
from config import ExperimentConfig
from repositories.checkpoint_repository import CheckpointRepository
from repositories.grid_repository import GridRepository
from utils.errors import ContractError, MissingArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = 'checkpoints'
NAN_DUMP_DIR = 'nan_dump'


def nan_dumper(out_dir, prefix):
    """Callback writing a failing batch as SVX1 grids; returns the dump directory"""
    def dump(batch):
        directory = os.path.join(out_dir, NAN_DUMP_DIR)
        for k, item in enumerate(batch):
            data = getattr(item, 'x0', item)
            GridRepository.save(os.path.join(directory, f'{prefix}_{k}.svx1'), data)
        logger.error("Dumped %d failing examples to %s", len(batch), directory)
        return directory
    return dump


class VaeService:
    """Trains, stores and reloads the per-level structure VAEs"""

    @staticmethod
    def checkpoint_path(out_dir, level):
        return os.path.join(out_dir, CHECKPOINT_DIR, f'vae_level{level}.pck1')

    @staticmethod
    def level_data(hierarchies, level):
        if not hierarchies:
            raise ContractError("No training hierarchies")
        if level >= len(hierarchies[0]):
            raise ContractError(f"Level {level} outside the {len(hierarchies[0])}-level hierarchy")
        return [h[level] for h in hierarchies]

    @staticmethod
    def train_level(cfg: ExperimentConfig, level, hierarchies, steps=None, progress=False):
        vae_cfg = cfg.level_vae_config(level)
        data = VaeService.level_data(hierarchies, level)
        logger.info("Training VAE level %d: %d^3 -> %d^3 latent on %d shapes", level, vae_cfg.in_resolution,
                    vae_cfg.latent_resolution, len(data))
        model, history = train_vae(data, vae_cfg, steps=steps, progress=progress,
                                   nan_dump=nan_dumper(cfg.output_dir, f'vae_level{level}'))
        path = VaeService.checkpoint_path(cfg.output_dir, level)
        CheckpointRepository.save(path, model.params, meta={
            'level': level,
            'config': asdict(vae_cfg),
            'history': history,
            'empty_intersections': model.empty_intersections,
        })
        return model, history

    @staticmethod
    def train_all(cfg: ExperimentConfig, hierarchies, steps=None, progress=False):
        return [VaeService.train_level(cfg, level, hierarchies, steps, progress)[0]
                for level in range(len(cfg.resolutions))]

    @staticmethod
    def load_level(cfg: ExperimentConfig, level, use_ema=True) -> StructureVAE:
        """Rebuild the level's network and fill it from its checkpoint (EMA weights by default)"""
        path = VaeService.checkpoint_path(cfg.output_dir, level)
        if not os.path.exists(path):
            raise MissingArtifactError(f'VAE checkpoint for level {level}', path)
        model = StructureVAE(cfg.level_vae_config(level))
        CheckpointRepository.copy_into(model.params, CheckpointRepository.load(path))
        if use_ema:
            for p in model.params:
                p.value = p.ema.copy()
        return model

    @staticmethod
    def reconstruction_iou(model: StructureVAE, data):
        """Grid IoU of the mean-latent reconstruction against each input"""
        scores = []
        for attrs in data:
            out = model.reconstruct(attrs)
            scores.append(grid_iou(out.grid, attrs.grid))
        mean = float(np.mean(scores)) if scores else float('nan')
        logger.info("Reconstruction IoU over %d shapes: %.4f", len(scores), mean)
        return scores
