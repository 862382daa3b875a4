import logging
import os
from dataclasses import replace

import numpy as np
from tqdm import tqdm

from algorithms.metrics import NNA_VARIANTS, one_nna, pairwise_distances
from algorithms.structure_vae import train_vae
from algorithms.surface import extract_mesh, sample_surface
from config import ExperimentConfig, POINTS_PER_SHAPE
from repositories.grid_repository import GridRepository
from repositories.mesh_repository import MeshRepository
from services.dataset_service import DatasetService
from services.diffusion_service import DiffusionService
from services.sampling_service import MESH_FILE, SamplingService
from services.vae_service import VaeService
from utils.errors import ContractError, SamplingFailure

logger = logging.getLogger(__name__)

ABLATION_DIR = 'hierarchy_ablation'


class EvaluationService:
    """Distribution metrics between sampled and held-out shapes, and the pruning and hierarchy ablations"""

    @staticmethod
    def generated_clouds(sample_dirs, from_voxels=False, points=POINTS_PER_SHAPE, seed=0):
        """
        Point clouds of sampled shapes: area-uniform points on the extracted
        mesh, or (from_voxels) finest-level voxel centres drawn with replacement.
        """
        clouds = []
        for index, directory in enumerate(sample_dirs):
            rng_seed = (seed, index)
            if from_voxels:
                centres = GridRepository.load_hierarchy(directory, check=False).finest.grid.world_centers()
                if centres.shape[0] == 0:
                    raise ContractError(f"{directory}: empty finest level")
                pick = np.random.default_rng(rng_seed).integers(0, centres.shape[0], points)
                clouds.append(centres[pick])
                continue
            mesh_path = os.path.join(directory, MESH_FILE)
            if os.path.exists(mesh_path):
                mesh = MeshRepository.load_obj(mesh_path)
            else:
                mesh = extract_mesh(GridRepository.load_hierarchy(directory, check=False).finest)
            clouds.append(sample_surface(mesh, points, seed=rng_seed))
        return clouds

    @staticmethod
    def reference_clouds(cfg: ExperimentConfig, points=POINTS_PER_SHAPE, seed=0):
        _, held_out = DatasetService.meshes(cfg)
        if not held_out:
            raise ContractError("Evaluation needs dataset.holdout > 0 reference shapes")
        return [sample_surface(mesh, points, seed=(seed, 10_000 + i)) for i, mesh in enumerate(held_out)]

    @staticmethod
    def evaluate(generated, reference, metrics=('cd', 'emd'), seed=0):
        """
        1-NNA of generated vs reference clouds for each metric, in both variants.

        Returns:
            list of {metric, variant, value, n_generated, n_reference, point_count, seed}
        """
        point_count = int(generated[0].shape[0]) if generated else 0
        results = []
        for metric in metrics:
            logger.info("Computing %s distances over %d clouds", metric, len(generated) + len(reference))
            distances = pairwise_distances(list(generated) + list(reference), metric)
            for variant in NNA_VARIANTS:
                value = one_nna(generated, reference, metric, variant, distances=distances)
                results.append({
                    'metric': f'1-NNA-{metric.upper()}',
                    'variant': variant,
                    'value': value,
                    'n_generated': len(generated),
                    'n_reference': len(reference),
                    'point_count': point_count,
                    'seed': seed,
                })
                logger.info("1-NNA-%s (%s): %.2f%%", metric.upper(), variant, value)
        return results

    @staticmethod
    def pruning_ablation(cfg: ExperimentConfig, hierarchies, level, steps=None, seeds=(0, 1, 2), progress=False):
        """
        Train the level's VAE with progressive and with single-step pruning under
        the same budget and compare mean reconstruction IoU per seed.
        """
        data = VaeService.level_data(hierarchies, level)
        base = cfg.level_vae_config(level)
        report = {'level': level, 'resolution': base.in_resolution, 'runs': []}
        means = {True: [], False: []}
        for seed in tqdm(seeds, disable=not progress, desc='ablation'):
            for progressive in (True, False):
                vae_cfg = replace(base, progressive_pruning=progressive, seed=int(seed))
                model, history = train_vae(data, vae_cfg, steps=steps)
                scores = VaeService.reconstruction_iou(model, data)
                means[progressive].append(float(np.mean(scores)))
                report['runs'].append({'seed': int(seed), 'progressive': progressive,
                                       'iou': means[progressive][-1], 'final_loss': history['step_loss'][-1]})
        report['progressive_iou'] = float(np.mean(means[True]))
        report['single_step_iou'] = float(np.mean(means[False]))
        report['progressive_wins'] = report['progressive_iou'] >= report['single_step_iou']
        logger.info("Pruning ablation: progressive %.4f vs single-step %.4f", report['progressive_iou'],
                    report['single_step_iou'])
        return report

    @staticmethod
    def hierarchy_ablation(cfg: ExperimentConfig, level_lists=None, count=8, points=POINTS_PER_SHAPE,
                           from_voxels=False, vae_steps=None, dm_steps=None, progress=False):
        """
        Train and sample one full cascade per resolution chain and compare their
        1-NNA-CD against the same held-out shapes. Each chain runs in its own
        `<out>/hierarchy_ablation/levels_<a>_<b>` directory.

        Args:
            level_lists: resolution chains (coarse first); defaults to cfg.hierarchy_ablation
            count: shapes sampled per chain

        Returns:
            {'runs': [{levels, value (printed and standard), voxels, error}], 'best': levels}

        Raises:
            ContractError: fewer than two chains, or an invalid chain
        """
        level_lists = [list(levels) for levels in (level_lists or cfg.hierarchy_ablation)]
        if len(level_lists) < 2:
            raise ContractError("The hierarchy ablation needs at least two resolution chains")
        if count < 2:
            raise ContractError("The hierarchy ablation needs at least two samples per chain")
        reference = EvaluationService.reference_clouds(cfg, points=points, seed=cfg.seed)
        report = {'count': count, 'point_count': points, 'runs': []}
        for levels in level_lists:
            name = 'levels_' + '_'.join(str(r) for r in levels)
            variant = replace(cfg, resolutions=levels, hierarchy_ablation=[],
                              output_dir=os.path.join(cfg.output_dir, ABLATION_DIR, name)).validate()
            logger.info("Hierarchy ablation %s: training %d levels", name, len(levels))
            hierarchies = DatasetService.prepare(variant, progress=progress)
            VaeService.train_all(variant, hierarchies, steps=vae_steps, progress=progress)
            DiffusionService.train_all(variant, hierarchies, steps=dm_steps, progress=progress)
            run = {'name': name, 'levels': levels}
            try:
                samples = SamplingService.sample(variant, count=count, write_mesh=not from_voxels)
                generated = EvaluationService.generated_clouds([d for d, _ in samples], from_voxels=from_voxels,
                                                               points=points, seed=cfg.seed)
            except (SamplingFailure, ContractError) as e:
                # Collapsed cascades are recorded and the remaining chains still run
                logger.warning("Hierarchy ablation %s produced no usable samples: %s", name, e)
                run['error'] = str(e)
                report['runs'].append(run)
                continue
            results = EvaluationService.evaluate(generated, reference, metrics=('cd',), seed=cfg.seed)
            run['nna_cd'] = {row['variant']: float(row['value']) for row in results}
            run['finest_voxels'] = float(np.mean([h.finest.voxel_count for _, h in samples]))
            report['runs'].append(run)
        scored = [r for r in report['runs'] if 'nna_cd' in r]
        # 1-NNA closest to 50% is best
        best = min(scored, key=lambda r: abs(r['nna_cd']['standard'] - 50.0), default=None)
        report['best'] = best['levels'] if best else None
        return report
