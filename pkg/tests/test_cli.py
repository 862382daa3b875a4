import json
import os

import pytest
from click.testing import CliRunner

from algorithms.shapes import icosphere
from app import EXIT_CONTRACT, create_app
from repositories.grid_repository import GridRepository
from repositories.mesh_repository import MeshRepository

TINY_CONFIG = """
seed: 3
resolutions: [4, 8]
dense_latent_resolution: 2
dataset:
  family: boxes
  count: 4
  holdout: 2
vae:
  base_channels: 8
  channel_mults: [1, 1]
  latent_dim: 4
  posenc_freqs: 1
  epochs: 1
  batch_size: 2
diffusion:
  steps: 10
  base_channels: 8
  channel_mults: [1, 2]
  train_steps: 2
  batch_size: 2
  ddim_steps: 2
"""


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def sphere_obj(tmp_path):
    return MeshRepository.save_obj(str(tmp_path / 'sphere.obj'), icosphere(3, radius=0.5))


def invoke(runner, *args):
    return runner.invoke(create_app(), list(args), prog_name='voxflow')


def test_voxelize_then_info(runner, tmp_path, sphere_obj):
    grid_path = str(tmp_path / 'sphere.svx1')
    result = invoke(runner, 'voxelize', sphere_obj, '-r', '16', '-o', grid_path)
    assert result.exit_code == 0, result.output
    assert '16^3' in result.output
    assert GridRepository.load(grid_path).channels == 5

    result = invoke(runner, 'info', grid_path)
    assert result.exit_code == 0, result.output
    assert 'channels=5' in result.output and 'resolution=16' in result.output
    assert 'topology_bytes=' in result.output


def test_hierarchy_command(runner, tmp_path, sphere_obj):
    grid_path = str(tmp_path / 'sphere.svx1')
    invoke(runner, 'voxelize', sphere_obj, '-r', '16', '-o', grid_path)
    out_dir = str(tmp_path / 'levels')
    result = invoke(runner, 'hierarchy', grid_path, '--levels', '4,16', '-o', out_dir)
    assert result.exit_code == 0, result.output
    assert sorted(os.listdir(out_dir)) == ['level0.svx1', 'level1.svx1']
    assert 'level0: 4^3' in result.output

    result = invoke(runner, 'info', out_dir)
    assert result.exit_code == 0 and 'level1:' in result.output


def test_bad_level_chain_is_a_usage_error(runner, tmp_path, sphere_obj):
    grid_path = str(tmp_path / 'sphere.svx1')
    invoke(runner, 'voxelize', sphere_obj, '-r', '16', '-o', grid_path)
    assert invoke(runner, 'hierarchy', grid_path, '--levels', 'a,b', '-o', str(tmp_path / 'x')).exit_code == 2
    result = invoke(runner, 'hierarchy', grid_path, '--levels', '6,16', '-o', str(tmp_path / 'x'))
    assert result.exit_code == EXIT_CONTRACT
    assert 'Error:' in result.stderr


def test_missing_inputs_exit_with_contract_code(runner, tmp_path):
    result = invoke(runner, 'voxelize', str(tmp_path / 'absent.obj'), '-r', '8', '-o', str(tmp_path / 'g.svx1'))
    assert result.exit_code == EXIT_CONTRACT
    assert 'absent.obj' in result.stderr
    assert invoke(runner, 'info', str(tmp_path / 'absent.svx1')).exit_code == EXIT_CONTRACT


def test_training_needs_vae_checkpoints(runner, tmp_path):
    config = tmp_path / 'tiny.yaml'
    config.write_text(TINY_CONFIG)
    result = invoke(runner, '--config', str(config), '--out', str(tmp_path / 'run'), 'train-dm', '--no-progress')
    assert result.exit_code == EXIT_CONTRACT
    assert 'VAE checkpoint' in result.stderr
    result = invoke(runner, '--config', str(config), '--out', str(tmp_path / 'run'), 'sample')
    assert result.exit_code == EXIT_CONTRACT
    result = invoke(runner, '--config', str(config), '--out', str(tmp_path / 'run'), 'eval')
    assert result.exit_code == EXIT_CONTRACT


def test_missing_config_file(runner, tmp_path):
    result = invoke(runner, '--config', str(tmp_path / 'nope.yaml'), 'train-vae')
    assert result.exit_code == EXIT_CONTRACT


def test_bench_cases(runner, tmp_path):
    report = str(tmp_path / 'bench.json')
    result = invoke(runner, 'bench', '--case', 'shell32', '--case', 'empty', '--repeats', '1', '--channels', '4',
                    '--report', report)
    assert result.exit_code == 0, result.output
    data = json.loads(open(report).read())
    names = [c['name'] for c in data['cases']]
    assert names == ['shell32', 'empty']
    shell, empty = data['cases']
    assert 0 < shell['active_voxels'] < 32 ** 3
    assert shell['topology_bytes'] + shell['index_bytes'] < shell['dense_bytes']
    assert shell['dense_conv_ms'] > 0 and shell['conv_speedup'] > 0
    assert empty['active_voxels'] == 0
    assert invoke(runner, 'bench', '--case', 'torus').exit_code == EXIT_CONTRACT


def test_hierarchy_ablation_needs_two_chains(runner, tmp_path):
    config = tmp_path / 'tiny.yaml'
    config.write_text(TINY_CONFIG)
    result = invoke(runner, '--config', str(config), '--out', str(tmp_path / 'run'), 'eval', '--hierarchy-ablation',
                    '--ablation-levels', '8', '--no-progress')
    assert result.exit_code == EXIT_CONTRACT
    assert 'two resolution chains' in result.stderr
    result = invoke(runner, '--config', str(config), 'eval', '--hierarchy-ablation', '--ablation-levels', '8,x')
    assert result.exit_code == 2


@pytest.mark.slow
def test_tiny_pipeline(runner, tmp_path):
    config = tmp_path / 'tiny.yaml'
    config.write_text(TINY_CONFIG)
    out = str(tmp_path / 'run')
    base = ['--config', str(config), '--out', out]
    result = invoke(runner, *base, 'train-vae', '--steps', '2', '--no-progress')
    assert result.exit_code == 0, result.stderr
    assert os.path.exists(os.path.join(out, 'checkpoints', 'vae_level1.pck1'))
    result = invoke(runner, *base, 'train-dm', '--steps', '2', '--no-progress')
    assert result.exit_code == 0, result.stderr
    assert os.path.exists(os.path.join(out, 'checkpoints', 'dm_level0.pck1'))
    result = invoke(runner, *base, 'sample', '--count', '2', '--no-mesh')
    # Barely trained decoders may prune a level away, which is reported rather than raised
    assert result.exit_code in (0, 3)
    if result.exit_code == 3:
        assert 'Error:' in result.stderr
