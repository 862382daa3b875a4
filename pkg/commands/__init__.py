from dataclasses import dataclass, field

import click

from config import load_config


@dataclass
class Settings:
    """Root-group options shared by every command"""
    config_path: str = None
    seed: int = None
    out: str = None
    overrides: dict = field(default_factory=dict)

    def experiment(self, **extra):
        overrides = dict(self.overrides)
        if self.seed is not None:
            overrides['seed'] = self.seed
            overrides['diffusion'] = {'seed': self.seed}
        if self.out is not None:
            overrides['output_dir'] = self.out
        overrides.update(extra)
        return load_config(self.config_path, overrides)


pass_settings = click.make_pass_decorator(Settings, ensure=True)


def parse_levels(value):
    """'8,32,128' -> [8, 32, 128]"""
    try:
        levels = [int(v) for v in str(value).split(',') if v.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'") from e
    if not levels or any(r < 1 for r in levels):
        raise click.BadParameter(f"expected positive resolutions, got '{value}'")
    return levels


def setup_commands(app):
    from commands.bench import bench
    from commands.evaluation import evaluate
    from commands.grids import hierarchy, info, voxelize
    from commands.sampling import sample
    from commands.training import train_dm, train_vae

    for command in (voxelize, hierarchy, info, train_vae, train_dm, sample, evaluate, bench):
        app.add_command(command)
