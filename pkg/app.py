import logging
import sys

import click

from commands import Settings, setup_commands
from utils.errors import ContractError, NumericFailure, SamplingFailure
from utils.log import LOG_LEVELS, configure_logging
from utils.parallel import set_max_threads

logger = logging.getLogger(__name__)

EXIT_CONTRACT = 2
EXIT_NUMERIC = 3


class VoxflowGroup(click.Group):
    """Root group mapping project errors to exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ContractError as e:
            logger.error("%s", e)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(EXIT_CONTRACT)
        except (NumericFailure, SamplingFailure) as e:
            logger.error("%s", e)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(EXIT_NUMERIC)


def create_app():
    @click.group(cls=VoxflowGroup)
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='YAML experiment config')
    @click.option('--seed', type=int, default=None, help='Overrides the config seed')
    @click.option('--threads', type=int, default=None, help='Cap on operator threads (default: all cores)')
    @click.option('--out', type=click.Path(file_okay=False), default=None, help='Overrides output_dir')
    @click.option('--log-level', type=click.Choice(sorted(LOG_LEVELS)), default=None,
                  help='Overrides the VOXFLOW_LOG env var')
    @click.pass_context
    def app(ctx, config_path, seed, threads, out, log_level):
        """Sparse voxel hierarchies and hierarchical latent diffusion"""
        configure_logging(log_level)
        set_max_threads(threads)
        ctx.obj = Settings(config_path=config_path, seed=seed, out=out)

    setup_commands(app)
    return app


if __name__ == '__main__':
    sys.exit(create_app()(prog_name='voxflow'))
