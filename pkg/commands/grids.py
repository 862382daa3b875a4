import logging
import os

import click

from commands import parse_levels
from repositories.grid_repository import GridRepository
from services.dataset_service import DatasetService
from utils.errors import MissingArtifactError

logger = logging.getLogger(__name__)


@click.command()
@click.argument('mesh_path', type=click.Path(dir_okay=False))
@click.option('-r', '--resolution', type=int, required=True, help='Grid resolution R (R^3 box)')
@click.option('-o', '--output', 'out_path', type=click.Path(dir_okay=False), required=True)
@click.option('--no-normalize', is_flag=True, help='Keep mesh coordinates instead of fitting the unit cube')
def voxelize(mesh_path, resolution, out_path, no_normalize):
    """Voxelize an OBJ/PLY mesh into an SVX1 attribute grid"""
    attrs = DatasetService.voxelize_file(mesh_path, resolution, out_path, normalize=not no_normalize)
    click.echo(f"{out_path}: {attrs.voxel_count} voxels at {resolution}^3")


@click.command()
@click.argument('grid_path', type=click.Path(dir_okay=False))
@click.option('--levels', required=True, help='Resolution chain, coarse to fine, e.g. 16,64')
@click.option('-o', '--output', 'out_dir', type=click.Path(file_okay=False), required=True)
def hierarchy(grid_path, levels, out_dir):
    """Coarsen an SVX1 grid into a level<k>.svx1 hierarchy"""
    result = DatasetService.hierarchy_from_file(grid_path, parse_levels(levels), out_dir)
    for level, count in enumerate(result.voxel_counts()):
        click.echo(f"level{level}: {result[level].grid.resolution}^3, {count} voxels")


def _describe(name, fg):
    stats = fg.memory_stats()
    click.echo(f"{name}: voxel_count={fg.voxel_count} channels={fg.channels} resolution={fg.grid.resolution}")
    click.echo(f"  topology_bytes={stats.topology_bytes} index_bytes={stats.index_bytes} "
               f"value_bytes={stats.value_bytes} bytes_per_active_voxel={stats.bytes_per_active_voxel:.2f}")


@click.command()
@click.argument('path', type=click.Path())
def info(path):
    """Print voxel count, channels and memory statistics of a grid or hierarchy directory"""
    if os.path.isdir(path):
        levels = GridRepository.load_hierarchy(path, check=False)
        for level in range(len(levels)):
            _describe(f'level{level}', levels[level].to_feature_grid())
        return
    if not os.path.exists(path):
        raise MissingArtifactError('grid file', path)
    _describe(os.path.basename(path), GridRepository.load(path))
