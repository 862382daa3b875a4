import click

from commands import pass_settings
from services.sampling_service import SamplingService


@click.command()
@click.option('--count', type=int, default=1, show_default=True)
@click.option('--given', 'given_dir', type=click.Path(file_okay=False), default=None,
              help='Hierarchy directory whose coarse levels are kept')
@click.option('--keep-levels', type=int, default=0, show_default=True, help='Levels of --given to keep')
@click.option('--ddim-steps', type=int, default=None)
@click.option('--eta', type=float, default=None)
@click.option('--guidance', type=float, default=None, help='Classifier-free guidance scale')
@click.option('--class-id', type=int, default=None)
@click.option('--no-mesh', is_flag=True, help='Skip mesh extraction')
@pass_settings
def sample(settings, count, given_dir, keep_levels, ddim_steps, eta, guidance, class_id, no_mesh):
    """Draw hierarchies level by level through the trained cascade"""
    cfg = settings.experiment()
    results = SamplingService.sample(cfg, count=count, class_id=class_id, given_dir=given_dir,
                                     keep_levels=keep_levels, ddim_steps=ddim_steps, eta=eta,
                                     guidance=guidance, write_mesh=not no_mesh)
    for directory, hierarchy in results:
        counts = ','.join(str(c) for c in hierarchy.voxel_counts())
        click.echo(f"{directory}: {counts}")
