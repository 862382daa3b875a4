import logging
import os

import click

from commands import pass_settings
from repositories.run_log_repository import RunLogRepository
from services.dataset_service import DatasetService
from services.diffusion_service import DiffusionService
from services.evaluation_service import EvaluationService
from services.vae_service import VaeService

logger = logging.getLogger(__name__)

ABLATION_REPORT = 'ablation.json'


def _levels(cfg, level):
    return range(len(cfg.resolutions)) if level is None else [level]


@click.command('train-vae')
@click.option('--level', type=int, default=None, help='Train a single level (0-based); default all')
@click.option('--steps', type=int, default=None, help='Override the epoch-derived step budget')
@click.option('--ablation', is_flag=True, help='Also compare progressive and single-step pruning')
@click.option('--progress/--no-progress', default=True)
@pass_settings
def train_vae(settings, level, steps, ablation, progress):
    """Train the per-level structure VAEs on the procedural dataset"""
    cfg = settings.experiment()
    hierarchies = DatasetService.prepare(cfg, progress=progress)
    for lvl in _levels(cfg, level):
        model, history = VaeService.train_level(cfg, lvl, hierarchies, steps=steps, progress=progress)
        scores = VaeService.reconstruction_iou(model, [h[lvl] for h in hierarchies])
        click.echo(f"vae level{lvl}: final loss {history['step_loss'][-1]:.5f}, "
                   f"mean IoU {sum(scores) / len(scores):.4f}")
        if ablation:
            report = EvaluationService.pruning_ablation(cfg, hierarchies, lvl, steps=steps, progress=progress)
            path = os.path.join(cfg.output_dir, f'level{lvl}_{ABLATION_REPORT}')
            RunLogRepository.write_report(path, report)
            click.echo(f"ablation level{lvl}: progressive {report['progressive_iou']:.4f} "
                       f"vs single-step {report['single_step_iou']:.4f}")


@click.command('train-dm')
@click.option('--level', type=int, default=None, help='Train a single level (0-based); default all')
@click.option('--steps', type=int, default=None, help='Override diffusion.train_steps')
@click.option('--progress/--no-progress', default=True)
@pass_settings
def train_dm(settings, level, steps, progress):
    """Train the per-level latent denoisers (needs the VAE checkpoints)"""
    cfg = settings.experiment()
    for lvl in _levels(cfg, level):
        VaeService.load_level(cfg, lvl)
    hierarchies = DatasetService.prepare(cfg, progress=progress)
    for lvl in _levels(cfg, level):
        _, history = DiffusionService.train_level(cfg, lvl, hierarchies, steps=steps, progress=progress)
        click.echo(f"denoiser level{lvl}: final loss {history['step_loss'][-1]:.5f}")
