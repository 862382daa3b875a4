import logging
import os
from dataclasses import asdict, replace

import numpy as np

from algorithms.denoiser import SparseDenoiser, build_condition, condition_channels, train_denoiser
from algorithms.diffusion import make_schedule
from algorithms.structure_vae import StructureVAE
from config import ExperimentConfig
from models.grid import FeatureGrid
from models.latent import LatentSample
from repositories.checkpoint_repository import CheckpointRepository
from services.dataset_service import DatasetService
from services.vae_service import CHECKPOINT_DIR, VaeService, nan_dumper
from utils.errors import MissingArtifactError

logger = logging.getLogger(__name__)


class DiffusionService:
    """Encodes posterior latents and trains / reloads the per-level denoisers"""

    @staticmethod
    def checkpoint_path(out_dir, level):
        return os.path.join(out_dir, CHECKPOINT_DIR, f'dm_level{level}.pck1')

    @staticmethod
    def schedule(cfg: ExperimentConfig):
        d = cfg.diffusion
        return make_schedule(d.schedule, d.steps, d.beta_start, d.beta_end)

    @staticmethod
    def encode_latents(vae: StructureVAE, hierarchies, level, cfg: ExperimentConfig):
        """
        One posterior sample per shape, conditioned on the shape's parent level.

        The parent's attributes live on exactly the latent topology, since the
        level's latent is its input coarsened to the parent resolution.
        """
        samples = []
        point_channel = cfg.diffusion.point_condition
        for index, hierarchy in enumerate(hierarchies):
            attrs = hierarchy[level]
            latent = vae.encode(attrs)
            x = vae.reparameterize(latent, seed=(cfg.seed, level, index))
            x0 = FeatureGrid(latent.grid, x.values.copy())
            points = None
            if point_channel:
                points = DatasetService.simulate_scan(hierarchy.finest, seed=(cfg.seed, index))
            cond = build_condition(latent.grid, hierarchy[level - 1] if level > 0 else None, points,
                                   point_channel, dtype=vae.dtype)
            samples.append(LatentSample(x0, cond))
        return samples

    @staticmethod
    def train_level(cfg: ExperimentConfig, level, hierarchies, steps=None, progress=False):
        """
        Raises:
            MissingArtifactError: the level's VAE has not been trained
        """
        vae = VaeService.load_level(cfg, level)
        samples = DiffusionService.encode_latents(vae, hierarchies, level, cfg)
        channels = condition_channels(level, cfg.diffusion.point_condition)
        logger.info("Training denoiser level %d on %d latents (%d^3, D=%d, %d conditioning channels)",
                    level, len(samples), vae.config.latent_resolution, vae.config.latent_dim, channels)
        d_cfg = replace(cfg.diffusion, seed=cfg.diffusion.seed + 211 * level)
        model, history = train_denoiser(samples, DiffusionService.schedule(cfg), d_cfg, cond_channels=channels,
                                        steps=steps, progress=progress,
                                        nan_dump=nan_dumper(cfg.output_dir, f'dm_level{level}'))
        CheckpointRepository.save(DiffusionService.checkpoint_path(cfg.output_dir, level), model.params, meta={
            'level': level,
            'latent_dim': model.latent_dim,
            'cond_channels': channels,
            'config': asdict(d_cfg),
            'history': history,
            'final_loss': float(np.mean(history['step_loss'][-50:])) if history['step_loss'] else None,
        })
        return model, history

    @staticmethod
    def train_all(cfg: ExperimentConfig, hierarchies, steps=None, progress=False):
        return [DiffusionService.train_level(cfg, level, hierarchies, steps, progress)[0]
                for level in range(len(cfg.resolutions))]

    @staticmethod
    def load_level(cfg: ExperimentConfig, level, use_ema=True) -> SparseDenoiser:
        path = DiffusionService.checkpoint_path(cfg.output_dir, level)
        if not os.path.exists(path):
            raise MissingArtifactError(f'denoiser checkpoint for level {level}', path)
        stored = CheckpointRepository.load(path)
        latent_dim = int(stored.meta.get('latent_dim', cfg.level_vae_config(level).latent_dim))
        channels = int(stored.meta.get('cond_channels', condition_channels(level, cfg.diffusion.point_condition)))
        model = SparseDenoiser(cfg.diffusion, latent_dim, channels)
        CheckpointRepository.copy_into(model.params, stored)
        if use_ema:
            for p in model.params:
                p.value = p.ema.copy()
        return model
