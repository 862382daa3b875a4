import os

import click

from commands import parse_levels, pass_settings
from config import POINTS_PER_SHAPE
from repositories.run_log_repository import RunLogRepository
from services.evaluation_service import EvaluationService
from services.sampling_service import SamplingService
from utils.errors import MissingArtifactError

EVAL_REPORT = 'eval.json'
HIERARCHY_REPORT = 'hierarchy_ablation.json'
METRIC_CHOICES = ('cd', 'emd')


@click.command('eval')
@click.option('--samples', 'samples_dir', type=click.Path(file_okay=False), default=None,
              help='Directory of sampleNNNN folders; defaults to <out>/samples')
@click.option('--from-voxels', is_flag=True, help='Sample finest-level voxel centres instead of the mesh')
@click.option('--metrics', default='cd,emd', show_default=True)
@click.option('--points', type=int, default=POINTS_PER_SHAPE, show_default=True)
@click.option('--report', 'report_path', type=click.Path(dir_okay=False), default=None)
@click.option('--hierarchy-ablation', is_flag=True,
              help='Train, sample and score one cascade per resolution chain instead')
@click.option('--ablation-levels', multiple=True,
              help='Resolution chain for the hierarchy ablation, e.g. 8,32; repeatable (default: config)')
@click.option('--count', type=int, default=8, show_default=True, help='Samples per chain in the hierarchy ablation')
@click.option('--vae-steps', type=int, default=None)
@click.option('--dm-steps', type=int, default=None)
@click.option('--progress/--no-progress', default=True)
@pass_settings
def evaluate(settings, samples_dir, from_voxels, metrics, points, report_path, hierarchy_ablation, ablation_levels,
             count, vae_steps, dm_steps, progress):
    """1-NNA (CD and EMD) of the sampled shapes against the held-out set"""
    cfg = settings.experiment()
    if hierarchy_ablation:
        level_lists = [parse_levels(v) for v in ablation_levels] or None
        report = EvaluationService.hierarchy_ablation(cfg, level_lists, count=count, points=points,
                                                      from_voxels=from_voxels, vae_steps=vae_steps,
                                                      dm_steps=dm_steps, progress=progress)
        RunLogRepository.write_report(report_path or os.path.join(cfg.output_dir, HIERARCHY_REPORT), report)
        for run in report['runs']:
            if 'error' in run:
                click.echo(f"{run['name']}: no usable samples ({run['error']})")
            else:
                click.echo(f"{run['name']}: 1-NNA-CD {run['nna_cd']['standard']:.2f}% "
                           f"(printed {run['nna_cd']['printed']:.2f}%)")
        return
    metrics = [m.strip().lower() for m in metrics.split(',') if m.strip()]
    for metric in metrics:
        if metric not in METRIC_CHOICES:
            raise click.BadParameter(f"unknown metric '{metric}'", param_hint='--metrics')
    samples_dir = samples_dir or cfg.output_dir
    dirs = SamplingService.list_samples(samples_dir)
    if not dirs:
        raise MissingArtifactError('sampled shapes', samples_dir)
    generated = EvaluationService.generated_clouds(dirs, from_voxels=from_voxels, points=points, seed=cfg.seed)
    reference = EvaluationService.reference_clouds(cfg, points=points, seed=cfg.seed)
    results = EvaluationService.evaluate(generated, reference, metrics, seed=cfg.seed)
    report = {'source': 'voxels' if from_voxels else 'mesh', 'results': results}
    RunLogRepository.write_report(report_path or os.path.join(cfg.output_dir, EVAL_REPORT), report)
    for row in results:
        click.echo(f"{row['metric']} ({row['variant']}): {row['value']:.2f}%")
