import logging
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from algorithms.autograd import Tape, add, backward, concat, gather_rows, scale, silu
from algorithms.diffusion import ddim_step, ddim_timesteps, q_sample, v_target
from algorithms.layers import Conv3, GroupNorm, Linear, ResBlock, activate, concat_features, timestep_embedding
from algorithms.optim import adam_step, ema_update
from algorithms.sparse_ops import max_pool2, mse, transfer, upsample_subdivide
from algorithms.voxelizer import quantize_points
from config import SCALAR_DTYPE, DiffusionConfig
from models.grid import FeatureGrid, IndexGrid
from models.hierarchy import ATTRIBUTE_CHANNELS, AttributeSet
from models.latent import LatentSample
from models.params import ModelParams
from models.schedule import NoiseSchedule
from utils.errors import ContractError, NumericFailure

logger = logging.getLogger(__name__)


def condition_channels(level, point_condition=False):
    """Conditioning width for a hierarchy level: packed parent attributes plus an optional scan channel"""
    return (ATTRIBUTE_CHANNELS if level > 0 else 0) + (1 if point_condition else 0)


def point_occupancy(points, grid: IndexGrid, dtype=SCALAR_DTYPE) -> FeatureGrid:
    """1 where a voxel of `grid` holds at least one of `points`, else 0"""
    out = np.zeros((grid.voxel_count, 1), dtype=dtype)
    if points is None or grid.voxel_count == 0:
        return FeatureGrid(grid, out)
    ijk, inside = quantize_points(points, grid.resolution)
    rows = grid.lookup(ijk[inside])
    out[rows[rows >= 0], 0] = 1.0
    return FeatureGrid(grid, out)


def build_condition(grid: IndexGrid, parent: Optional[AttributeSet] = None, points=None,
                    point_channel=False, dtype=SCALAR_DTYPE) -> Optional[FeatureGrid]:
    """
    Conditioning features on the latent topology.

    The parent level's packed attributes (normal, semantic id, tsdf) are
    concatenated as raw channels; with `point_channel` a scan occupancy column
    is appended.

    Returns:
        FeatureGrid on `grid`, or None when there is nothing to condition on
    """
    parts = []
    if parent is not None:
        parts.append(transfer(parent.to_feature_grid(dtype), grid).values)
    if point_channel:
        parts.append(point_occupancy(points, grid, dtype).values)
    if not parts:
        return None
    return FeatureGrid(grid, np.concatenate(parts, axis=1))


class SparseDenoiser:
    """
    UNet over a sparse latent topology predicting v.

    Down path: residual blocks with 2× max pooling between stages; up path:
    subdivision back onto the stored skip topologies, skip concatenation and
    residual blocks. The time embedding (sinusoidal then MLP, plus a learned
    class row when classes are configured) modulates every group norm. The
    output head is zero-initialised, so an untrained model predicts v̂ = 0.
    """

    def __init__(self, config: DiffusionConfig, latent_dim, cond_channels=0, dtype=SCALAR_DTYPE,
                 params: Optional[ModelParams] = None):
        self.config = config.validate()
        self.latent_dim = int(latent_dim)
        self.cond_channels = int(cond_channels)
        self.params = params if params is not None else ModelParams(dtype, seed=config.seed)
        self.dtype = self.params.dtype
        p = self.params
        c = config
        widths = [c.base_channels * m for m in c.channel_mults]
        self.widths = widths
        self.emb_dim = 4 * c.base_channels

        self.time_fc1 = Linear(p, 'time.fc1', c.base_channels, self.emb_dim)
        self.time_fc2 = Linear(p, 'time.fc2', self.emb_dim, self.emb_dim)
        self.class_table = None
        if c.num_classes > 0:
            # Last row is the null class used for unconditional passes
            self.class_table = p.create('class.table', (c.num_classes + 1, self.emb_dim), init='normal',
                                        fan_in=self.emb_dim)

        self.input_conv = Conv3(p, 'in.conv', self.latent_dim + self.cond_channels, widths[0])
        self.down = []
        previous = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(p, f'down{i}', previous, w, c.norm_groups, self.emb_dim))
            previous = w
        self.mid = ResBlock(p, 'mid', widths[-1], widths[-1], c.norm_groups, self.emb_dim)
        self.up = [None] * len(widths)
        for i in reversed(range(len(widths))):
            below = widths[min(i + 1, len(widths) - 1)]
            self.up[i] = ResBlock(p, f'up{i}', below + widths[i], widths[i], c.norm_groups, self.emb_dim)
        self.out_norm = GroupNorm(p, 'out.norm', widths[0], c.norm_groups)
        self.out_conv = Conv3(p, 'out.conv', widths[0], self.latent_dim, zero=True)

    def embed(self, t, class_id=None):
        base = timestep_embedding(t, self.config.base_channels).astype(self.dtype)
        emb = self.time_fc2.apply(silu(self.time_fc1.apply(base)))
        if self.class_table is not None:
            # The last row is the unconditional embedding, reachable only through class_id=None
            row = self.config.num_classes if class_id is None else int(class_id)
            if class_id is not None and not 0 <= row < self.config.num_classes:
                raise ContractError(f"Class id {class_id} outside [0, {self.config.num_classes})")
            emb = add(emb, gather_rows(self.class_table, np.array([row])))
        return emb

    def _inputs(self, x: FeatureGrid, cond: Optional[FeatureGrid]):
        if not self.cond_channels:
            return x
        if cond is None:
            values = np.zeros((x.voxel_count, self.cond_channels), dtype=self.dtype)
            return FeatureGrid(x.grid, concat([x.features, values], axis=1))
        if cond.channels != self.cond_channels:
            raise ContractError(f"Denoiser expects {self.cond_channels} conditioning channels, got {cond.channels}")
        if cond.grid is not x.grid and not cond.grid.same_topology(x.grid):
            raise ContractError("Conditioning topology differs from the latent topology")
        return FeatureGrid(x.grid, concat([x.features, cond.features], axis=1))

    def __call__(self, x: FeatureGrid, t, cond: Optional[FeatureGrid] = None, class_id=None) -> FeatureGrid:
        """
        Predict v̂ for latent X_t.

        Raises:
            ContractError: empty latent, channel mismatch, or conditioning on another topology
        """
        if x.voxel_count == 0:
            raise ContractError("Cannot denoise an empty latent")
        if x.channels != self.latent_dim:
            raise ContractError(f"Denoiser expects {self.latent_dim} latent channels, got {x.channels}")
        emb = self.embed(t, class_id)
        h = self.input_conv(self._inputs(x, cond))
        skips = []
        last = len(self.down) - 1
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < last:
                h = max_pool2(h)
        h = self.mid(h, emb)
        for i in reversed(range(len(self.up))):
            if i < last:
                h = upsample_subdivide(h, skips[i].grid)
            h = self.up[i](concat_features(h, skips[i]), emb)
        out = self.out_conv(activate(self.out_norm(h)))
        if out.grid is not x.grid:
            raise ContractError("Denoiser output topology differs from its input")
        return out

    def guided(self, x: FeatureGrid, t, cond=None, class_id=None, guidance=1.0) -> np.ndarray:
        """v̂_u + s·(v̂_c − v̂_u); a scale of 1, or nothing to condition on, is a single conditional pass"""
        v_cond = self(x, t, cond, class_id).values
        if guidance == 1.0 or (cond is None and class_id is None):
            return v_cond
        v_uncond = self(x, t, None, None).values
        return v_uncond + guidance * (v_cond - v_uncond)


def train_denoiser(samples: List[LatentSample], schedule: NoiseSchedule, config: DiffusionConfig,
                   cond_channels=0, dtype=SCALAR_DTYPE, steps=None, nan_dump: Optional[Callable] = None,
                   progress=False, model: Optional[SparseDenoiser] = None):
    """
    Fit a denoiser to posterior latents with the v-prediction loss.

    Each example draws t uniformly from [1, T] and fresh Gaussian noise; with
    probability `cond_dropout` its conditioning and class are dropped.

    Returns:
        (model, history) with per-step losses in history['step_loss']

    Raises:
        ContractError: empty dataset or mixed latent widths
        NumericFailure: non-finite loss
    """
    if not samples:
        raise ContractError("Cannot train a denoiser on an empty dataset")
    dims = {s.x0.channels for s in samples}
    if len(dims) != 1:
        raise ContractError(f"Latents disagree on channel count: {sorted(dims)}")
    model = model or SparseDenoiser(config, dims.pop(), cond_channels, dtype=dtype)
    params = model.params
    rng = np.random.default_rng(config.seed)
    total_steps = config.train_steps if steps is None else int(steps)
    history = {'step_loss': []}

    bar = tqdm(total=total_steps, disable=not progress, desc='denoiser')
    for step in range(total_steps):
        batch = [samples[i] for i in rng.integers(0, len(samples), config.batch_size)]
        params.zero_grad()
        batch_loss = 0.0
        for sample in batch:
            t = int(rng.integers(1, schedule.steps + 1))
            x0 = sample.x0.values.astype(model.dtype)
            eps = rng.standard_normal(x0.shape).astype(model.dtype)
            x_t = FeatureGrid(sample.x0.grid, q_sample(schedule, x0, t, eps).astype(model.dtype))
            target = v_target(schedule, x0, eps, t).astype(model.dtype)
            dropped = rng.random() < config.cond_dropout
            cond = None if dropped else sample.cond
            class_id = None if dropped else sample.class_id
            with Tape() as tape:
                pred = model(x_t, t, cond, class_id)
                loss = scale(mse(pred.features, target), 1.0 / len(batch))
            if not np.isfinite(loss.value):
                where = nan_dump(batch) if nan_dump else None
                raise NumericFailure(f"Non-finite denoiser loss at step {step}", where)
            backward(tape, loss)
            batch_loss += float(loss.value)
        adam_step(params, config.lr, config.beta1, config.beta2)
        ema_update(params, config.ema_rate, warmup=config.ema_warmup)
        history['step_loss'].append(batch_loss)
        bar.update(1)
        if (step + 1) % 100 == 0 or step + 1 == total_steps:
            window = history['step_loss'][-100:]
            logger.info("Denoiser step %d/%d: loss %.5f", step + 1, total_steps, float(np.mean(window)))
        else:
            logger.debug("Denoiser step %d: loss %.5f", step + 1, batch_loss)
    bar.close()
    return model, history


def sample_latent(model: SparseDenoiser, grid: IndexGrid, schedule: NoiseSchedule, cond=None, class_id=None,
                  ddim_steps=50, eta=0.0, guidance=1.0, seed=0, on_step: Optional[Callable] = None) -> FeatureGrid:
    """
    Run a DDIM chain from X_T ~ N(0, I) on `grid` down to X_0.

    `on_step(t, t_prev)` is called after every update.
    """
    rng = np.random.default_rng(seed)
    x = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, model.latent_dim)).astype(model.dtype))
    for t, t_prev in ddim_timesteps(schedule.steps, ddim_steps):
        v_hat = model.guided(x, t, cond, class_id, guidance)
        noise = rng.standard_normal(x.values.shape) if eta > 0 else None
        x = ddim_step(schedule, x, t, t_prev, v_hat, eta, noise)
        if on_step is not None:
            on_step(t, t_prev)
    return x
