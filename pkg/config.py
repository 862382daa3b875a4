import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from omegaconf import OmegaConf

from utils.errors import ContractError, MissingArtifactError

# Scene frame: every dataset shape is normalized into the cube [-0.5, 0.5]^3
SCENE_EXTENT = 1.0
SHAPE_FILL = 0.9

# Per-voxel attribute layout
TSDF_CLAMP = 3.0
SURFACE_BAND = float(np.sqrt(3.0) / 2.0)
SURFACE_JITTER_SAMPLES = 4
SEMANTIC_CLASSES = 4

# Features are f32 unless a caller asks for f64 (gradient checks)
SCALAR_DTYPE = np.float32

DEFAULT_LOSS_WEIGHTS = {
    'kl_weight': 0.0015,
    'lambda_normal': 1.0,
    'lambda_semantic': 15.0,
    'lambda_surface': 1.0,
}

DEFAULT_SCHEDULE = {
    'kind': 'linear',
    'steps': 1000,
    'beta_start': 1e-4,
    'beta_end': 0.02,
}

DEFAULT_SAMPLER = {
    'ddim_steps': 50,
    'eta': 0.0,
}

POINTS_PER_SHAPE = 2048


@dataclass
class DatasetConfig:
    family: str = 'box-unions'
    count: int = 64
    seed: int = 0
    holdout: int = 0


@dataclass
class VaeConfig:
    in_resolution: int = 32
    latent_resolution: int = 8
    dense_latent: bool = False
    base_channels: int = 16
    channel_mults: List[int] = field(default_factory=lambda: [1, 2, 2])
    latent_dim: int = 8
    posenc_freqs: int = 4
    semantic_classes: int = SEMANTIC_CLASSES
    norm_groups: int = 4
    early_dilation: bool = True
    progressive_pruning: bool = True
    kl_weight: float = DEFAULT_LOSS_WEIGHTS['kl_weight']
    lambda_normal: float = DEFAULT_LOSS_WEIGHTS['lambda_normal']
    lambda_semantic: float = DEFAULT_LOSS_WEIGHTS['lambda_semantic']
    lambda_surface: float = DEFAULT_LOSS_WEIGHTS['lambda_surface']
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    ema_rate: float = 0.9999
    ema_warmup: bool = False
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0

    @property
    def upsampling_layers(self):
        return int(round(np.log2(self.in_resolution / self.latent_resolution)))

    def validate(self):
        ratio = self.in_resolution / self.latent_resolution
        layers = self.upsampling_layers
        if ratio < 2 or self.latent_resolution * (1 << layers) != self.in_resolution:
            raise ContractError(
                f"VAE input resolution {self.in_resolution} is not latent {self.latent_resolution} × 2^k")
        if len(self.channel_mults) != layers + 1:
            raise ContractError(
                f"channel_mults needs {layers + 1} entries for {layers} upsampling layers, got {len(self.channel_mults)}")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.norm_groups:
                raise ContractError(f"Width {self.base_channels * mult} not divisible by {self.norm_groups} groups")
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be at least 1")
        return self


@dataclass
class DiffusionConfig:
    schedule: str = DEFAULT_SCHEDULE['kind']
    steps: int = 200
    beta_start: float = DEFAULT_SCHEDULE['beta_start']
    beta_end: float = DEFAULT_SCHEDULE['beta_end']
    base_channels: int = 32
    channel_mults: List[int] = field(default_factory=lambda: [1, 2])
    norm_groups: int = 4
    num_classes: int = 0
    cond_dropout: float = 0.1
    point_condition: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    ema_rate: float = 0.9999
    ema_warmup: bool = False
    train_steps: int = 2000
    batch_size: int = 4
    ddim_steps: int = DEFAULT_SAMPLER['ddim_steps']
    eta: float = DEFAULT_SAMPLER['eta']
    guidance_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ContractError("Diffusion step count must be at least 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ContractError(f"Invalid beta range {self.beta_start}..{self.beta_end}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ContractError("cond_dropout must lie in [0, 1)")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.norm_groups:
                raise ContractError(f"Width {self.base_channels * mult} not divisible by {self.norm_groups} groups")
        return self


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    resolutions: List[int] = field(default_factory=lambda: [8, 32])
    dense_latent_resolution: int = 4
    vae: VaeConfig = field(default_factory=VaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    seed: int = 0
    output_dir: str = 'runs/default'
    # Resolution chains compared by the hierarchy-configuration ablation
    hierarchy_ablation: List[List[int]] = field(default_factory=list)

    def validate(self):
        if not self.resolutions:
            raise ContractError("At least one hierarchy resolution is required")
        previous = self.dense_latent_resolution
        for res in self.resolutions:
            if res <= previous or res % previous or (res // previous) & (res // previous - 1):
                raise ContractError(f"Resolution chain {[previous] + list(self.resolutions)} is not power-of-two increasing")
            previous = res
        for level in range(len(self.resolutions)):
            self.level_vae_config(level).validate()
        self.diffusion.validate()
        for levels in self.hierarchy_ablation:
            replace(self, resolutions=list(levels), hierarchy_ablation=[]).validate()
        return self

    def level_vae_config(self, level):
        """VAE hyperparameters for hierarchy level `level` (0-based, coarse first)"""
        latent = self.dense_latent_resolution if level == 0 else self.resolutions[level - 1]
        layers = int(round(np.log2(self.resolutions[level] / latent)))
        mults = list(self.vae.channel_mults)
        if len(mults) < layers + 1:
            mults = mults + [mults[-1]] * (layers + 1 - len(mults))
        cfg = OmegaConf.to_object(OmegaConf.structured(self.vae))
        cfg.in_resolution = self.resolutions[level]
        cfg.latent_resolution = latent
        cfg.dense_latent = level == 0
        cfg.channel_mults = mults[:layers + 1]
        cfg.seed = self.seed + 101 * level
        return cfg


def load_config(path=None, overrides=None):
    """Load an ExperimentConfig from YAML, merged over the structured defaults"""
    conf = OmegaConf.structured(ExperimentConfig)
    if path:
        if not os.path.exists(path):
            raise MissingArtifactError('config file', path)
        try:
            conf = OmegaConf.merge(conf, OmegaConf.load(path))
        except Exception as e:
            raise ContractError(f"Invalid config file {path}: {e}") from e
    if overrides:
        conf = OmegaConf.merge(conf, OmegaConf.create(overrides))
    cfg = OmegaConf.to_object(conf)
    return cfg.validate()


def save_config(cfg, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    OmegaConf.save(OmegaConf.structured(cfg), path)
