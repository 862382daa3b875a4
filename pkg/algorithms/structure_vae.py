import logging
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from algorithms.autograd import (Tape, add, backward, exp, gather_rows, mul, row_l2_normalize,
                                 scale, tanh)
from algorithms.layers import ConvBlock, Linear
from algorithms.optim import adam_step, ema_update
from algorithms.sparse_ops import (bce_logits, kl_unit_gauss, max_pool2, mse, l1, positional_encoding,
                                   transfer, trilinear_sample, upsample_subdivide)
from algorithms.topology import (coarsen_topology, dense_box, fine_frame, intersect, prune, restrict,
                                 subdivide_topology)
from config import SCALAR_DTYPE, TSDF_CLAMP, VaeConfig
from models.grid import FeatureGrid, IndexGrid
from models.hierarchy import AttributeSet
from models.latent import DecodeOutput, LatentGrid
from models.params import ModelParams
from utils.errors import ContractError, NumericFailure

logger = logging.getLogger(__name__)


def structure_targets(gt_fine: IndexGrid, latent_topology: IndexGrid, layers, progressive=True):
    """
    Teacher-forced keep masks for every structure head of the decoder.

    Layer j's mask marks the voxels whose subtree at the final resolution holds
    a ground-truth voxel; the next layer's topology is the full subdivision of
    the kept voxels. The last entry scores the output resolution itself. With
    progressive=False the intermediate masks keep everything.

    Returns:
        (masks, grids) with masks[j] aligned to grids[j], layers + 1 entries each
    """
    ancestors = [gt_fine]
    for _ in range(layers):
        ancestors.append(coarsen_topology(ancestors[-1]))
    grid = latent_topology
    masks, grids = [], []
    for j in range(layers):
        if progressive:
            mask = ancestors[layers - j].lookup(grid.coords) >= 0
        else:
            mask = np.ones(grid.voxel_count, dtype=bool)
        masks.append(mask)
        grids.append(grid)
        grid = subdivide_topology(restrict(grid, mask), np.ones(int(mask.sum()), dtype=bool))
    masks.append(gt_fine.lookup(grid.coords) >= 0)
    grids.append(grid)
    return masks, grids


class StructureVAE:
    """
    Sparse structure VAE for one hierarchy level.

    The encoder lifts posenc + attributes, then alternates conv blocks and max
    pooling down to the latent resolution (densified to the full box when the
    latent is dense) and predicts μ and log σ² per latent voxel. The decoder
    runs conv blocks, scores every voxel with a structure head, prunes, then
    subdivides survivors and upsamples features, one layer per factor of two;
    a last structure head prunes at the output resolution before the normal,
    semantic and tsdf heads.
    """

    def __init__(self, config: VaeConfig, dtype=SCALAR_DTYPE, params: Optional[ModelParams] = None):
        self.config = config.validate()
        self.layers = config.upsampling_layers
        self.params = params if params is not None else ModelParams(dtype, seed=config.seed)
        self.dtype = self.params.dtype
        self.empty_intersections = 0
        p = self.params
        c = config
        widths = [c.base_channels * m for m in c.channel_mults]
        self.widths = widths
        in_channels = 6 * c.posenc_freqs + 3 + 3 + c.semantic_classes + 1

        self.enc_lift = Linear(p, 'enc.lift', in_channels, widths[0])
        self.enc_blocks = []
        self.enc_widen = []
        for i in range(self.layers):
            self.enc_blocks.append(ConvBlock(p, f'enc.block{i}', widths[i], widths[i], c.norm_groups))
            self.enc_widen.append(Linear(p, f'enc.widen{i}', widths[i], widths[i + 1]))
        self.enc_mid = ConvBlock(p, 'enc.mid', widths[-1], widths[-1], c.norm_groups)
        self.enc_mu = Linear(p, 'enc.mu', widths[-1], c.latent_dim, zero=True)
        self.enc_logvar = Linear(p, 'enc.logvar', widths[-1], c.latent_dim, zero=True)

        self.dec_lift = Linear(p, 'dec.lift', c.latent_dim, widths[-1])
        self.dec_blocks, self.dec_struct, self.dec_narrow = [], [], []
        for j in range(self.layers):
            w_in, w_out = widths[self.layers - j], widths[self.layers - j - 1]
            self.dec_blocks.append(ConvBlock(p, f'dec.block{j}', w_in, w_in, c.norm_groups))
            self.dec_struct.append(Linear(p, f'dec.struct{j}', w_in, 1))
            self.dec_narrow.append(Linear(p, f'dec.up{j}', w_in, w_out))
        self.dec_final = ConvBlock(p, 'dec.final', widths[0], widths[0], c.norm_groups)
        self.dec_struct_final = Linear(p, 'dec.struct_final', widths[0], 1)
        self.head_normal = Linear(p, 'dec.normal', widths[0], 3)
        self.head_semantic = Linear(p, 'dec.semantic', widths[0], c.semantic_classes)
        self.head_tsdf = Linear(p, 'dec.tsdf', widths[0], 1)

    # ---------------------------------------------------------------- encoder

    def input_features(self, attrs: AttributeSet) -> FeatureGrid:
        c = self.config
        grid = attrs.grid
        pe = positional_encoding(grid, c.posenc_freqs, dtype=self.dtype).values
        values = np.concatenate([
            pe,
            attrs.normals.values.astype(self.dtype),
            attrs.semantic_onehot(c.semantic_classes).astype(self.dtype),
            (attrs.tsdf.values / TSDF_CLAMP).astype(self.dtype),
        ], axis=1)
        return FeatureGrid(grid, values)

    def latent_topology(self, grid: IndexGrid) -> IndexGrid:
        """Coarsened input topology, or the full latent box for a dense latent"""
        coarse = grid
        for _ in range(self.layers):
            coarse = coarsen_topology(coarse)
        if self.config.dense_latent:
            return dense_box(self.config.latent_resolution, coarse.voxel_size, coarse.origin)
        return coarse

    def encode(self, attrs: AttributeSet) -> LatentGrid:
        """
        Posterior q(X | G, A) on the latent topology.

        Raises:
            ContractError: the input grid's resolution is not the configured one
        """
        if attrs.grid.voxel_count and attrs.grid.resolution != self.config.in_resolution:
            raise ContractError(
                f"VAE expects {self.config.in_resolution}^3 input, got {attrs.grid.resolution}^3")
        h = self.enc_lift(self.input_features(attrs))
        for block, widen in zip(self.enc_blocks, self.enc_widen):
            h = block(h)
            h = widen(max_pool2(h))
        if self.config.dense_latent:
            # Zero-pad the bottleneck into the dense box
            h = transfer(h, dense_box(self.config.latent_resolution, h.grid.voxel_size, h.grid.origin))
        h = self.enc_mid(h)
        return LatentGrid(self.enc_mu(h), self.enc_logvar(h))

    @staticmethod
    def reparameterize(latent: LatentGrid, seed) -> FeatureGrid:
        """X = μ + exp(½ log σ²)·ε with ε ~ N(0, I) drawn from `seed`"""
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(latent.mu.values.shape).astype(latent.mu.values.dtype)
        std = exp(scale(latent.logvar.features, 0.5))
        return FeatureGrid(latent.grid, add(latent.mu.features, mul(std, eps)))

    # ---------------------------------------------------------------- decoder

    def decode(self, x: FeatureGrid, targets: Optional[List[np.ndarray]] = None, keep_all=False) -> DecodeOutput:
        """
        Structure-predicting decoder.

        Args:
            x: latent features on the latent topology
            targets: teacher-forcing keep masks from structure_targets (training)
            keep_all: skip pruning entirely (pure subdivision)

        Returns:
            DecodeOutput; an all-pruned layer sets `empty` instead of raising
        """
        if x.voxel_count and x.grid.resolution != self.config.latent_resolution:
            raise ContractError(
                f"Decoder expects a {self.config.latent_resolution}^3 latent, got {x.grid.resolution}^3")
        progressive = self.config.progressive_pruning
        h = self.dec_lift(x)
        out = DecodeOutput(grid=x.grid)
        heads = 0
        for j in range(self.layers):
            h = self.dec_blocks[j](h, dilated=self.config.early_dilation)
            if progressive:
                logits = self.dec_struct[j](h).features
                keep = self._keep(logits, targets, heads, keep_all)
                out.grids.append(h.grid)
                out.logits.append(logits)
                out.keeps.append(keep)
                heads += 1
                if not keep.any():
                    return self._empty(out, j)
                h = prune(h, keep)
            fine = subdivide_topology(h.grid, np.ones(h.voxel_count, dtype=bool))
            h = self.dec_narrow[j](upsample_subdivide(h, fine))

        h = self.dec_final(h)
        logits = self.dec_struct_final(h).features
        keep = self._keep(logits, targets, heads, keep_all)
        out.grids.append(h.grid)
        out.logits.append(logits)
        out.keeps.append(keep)
        if not keep.any():
            return self._empty(out, self.layers)
        h = prune(h, keep)

        out.grid = h.grid
        out.normals = row_l2_normalize(self.head_normal(h).features)
        out.semantics = self.head_semantic(h).features
        out.tsdf = scale(tanh(self.head_tsdf(h).features), TSDF_CLAMP)
        return out

    @staticmethod
    def _keep(logits, targets, head, keep_all):
        if keep_all:
            return np.ones(logits.value.shape[0], dtype=bool)
        if targets is not None:
            keep = np.asarray(targets[head], dtype=bool)
            if keep.shape[0] != logits.value.shape[0]:
                raise ContractError("Structure targets do not match the decoded topology")
            return keep
        return logits.value[:, 0] > 0.0

    def _empty(self, out: DecodeOutput, layer):
        last = out.grids[-1]
        vs, origin = last.voxel_size, last.origin
        for _ in range(self.layers - min(layer, self.layers)):
            vs, origin = fine_frame(vs, origin)
        out.grid = IndexGrid.build_from_coords([], vs, origin)
        out.empty = True
        out.empty_layer = layer
        logger.debug("Decoder pruned every voxel at layer %d", layer)
        return out

    def targets_for(self, gt: IndexGrid, latent_grid: IndexGrid):
        masks, _ = structure_targets(gt, latent_grid, self.layers, self.config.progressive_pruning)
        return masks if self.config.progressive_pruning else masks[-1:]

    def reconstruct(self, attrs: AttributeSet, seed=None) -> DecodeOutput:
        """Encode, take μ (or a sample when `seed` is given) and decode without teacher forcing"""
        latent = self.encode(attrs)
        x = latent.mu if seed is None else self.reparameterize(latent, seed)
        return self.decode(x)

    # ------------------------------------------------------------------- loss

    def loss(self, out: DecodeOutput, gt: AttributeSet, latent: LatentGrid, targets):
        return vae_loss(out, gt, latent, targets, self.config, self)


def _sample_points(gt: AttributeSet):
    """GT surface-loss points, their tsdf and owning voxel row"""
    if gt.samples is not None and gt.sample_tsdf is not None:
        return gt.samples, gt.sample_tsdf.reshape(-1), gt.sample_owners()
    return gt.grid.world_centers(), gt.tsdf.values[:, 0].astype(np.float64), np.arange(gt.voxel_count)


def vae_loss(out: DecodeOutput, gt: AttributeSet, latent: LatentGrid, targets, config: VaeConfig, counter=None):
    """
    Structure BCE per head + λ1·normal + λ2·semantic + λ3·surface + λ·KL per voxel.

    Attribute terms only see voxels present in both the predicted and the GT
    topology; an empty intersection zeroes them and bumps
    `counter.empty_intersections`.

    Returns:
        (total loss Tensor, dict of float components)
    """
    dtype = latent.mu.values.dtype
    terms = {}
    structure = None
    for logits, target in zip(out.logits, targets):
        term = bce_logits(logits, np.asarray(target, dtype=dtype)[:, None])
        structure = term if structure is None else add(structure, term)
    total = structure
    terms['structure'] = float(structure.value) if structure is not None else 0.0

    kl = scale(kl_unit_gauss(latent.mu.features, latent.logvar.features), float(latent.dim))
    terms['kl'] = float(kl.value)
    total = add(total, scale(kl, config.kl_weight)) if total is not None else scale(kl, config.kl_weight)

    rows_pred, rows_gt = (intersect(out.grid, gt.grid) if not out.empty else (np.zeros(0, dtype=np.int64),) * 2)
    terms['normal'] = terms['semantic'] = terms['surface'] = 0.0
    terms['empty_intersection'] = rows_pred.shape[0] == 0
    if rows_pred.shape[0] == 0:
        if counter is not None:
            counter.empty_intersections += 1
        logger.debug("Predicted and ground-truth topologies do not intersect")
        return total, terms

    n_gt = gt.normals.values[rows_gt].astype(dtype)
    normal = scale(mse(gather_rows(out.normals, rows_pred), n_gt), 3.0)
    onehot = gt.semantic_onehot(config.semantic_classes)[rows_gt].astype(dtype)
    semantic = bce_logits(gather_rows(out.semantics, rows_pred), onehot)

    points, point_tsdf, owner = _sample_points(gt)
    in_both = np.zeros(gt.voxel_count, dtype=bool)
    in_both[rows_gt] = True
    sel = in_both[owner]
    pred_tsdf, _ = trilinear_sample(FeatureGrid(out.grid, out.tsdf), points[sel], fill=TSDF_CLAMP)
    surface = l1(pred_tsdf, point_tsdf[sel, None].astype(dtype))

    terms['normal'] = float(normal.value)
    terms['semantic'] = float(semantic.value)
    terms['surface'] = float(surface.value)
    total = add(total, scale(normal, config.lambda_normal))
    total = add(total, scale(semantic, config.lambda_semantic))
    total = add(total, scale(surface, config.lambda_surface))
    return total, terms


def train_vae(dataset: List[AttributeSet], config: VaeConfig, dtype=SCALAR_DTYPE, steps=None,
              nan_dump: Optional[Callable] = None, progress=False, model: Optional[StructureVAE] = None):
    """
    Train one level's VAE with Adam + EMA.

    Args:
        dataset: ground-truth AttributeSets at the level's resolution
        config: level hyperparameters
        steps: optional cap on optimizer steps (otherwise `epochs` full passes)
        nan_dump: called with the offending batch on a non-finite loss; returns
            the dump location
        progress: show a tqdm bar

    Returns:
        (model, history) where history holds per-epoch mean losses

    Raises:
        ContractError: empty dataset
        NumericFailure: non-finite loss
    """
    if not dataset:
        raise ContractError("Cannot train a VAE on an empty dataset")
    model = model or StructureVAE(config, dtype=dtype)
    params = model.params
    rng = np.random.default_rng(config.seed)
    history = {'epoch_loss': [], 'step_loss': []}
    step = 0
    total_steps = steps if steps is not None else config.epochs * int(np.ceil(len(dataset) / config.batch_size))
    target_cache = {}

    bar = tqdm(total=total_steps, disable=not progress, desc=f'vae {config.in_resolution}^3')
    while step < total_steps:
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            if step >= total_steps:
                break
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            batch_loss = 0.0
            for k, attrs in enumerate(batch):
                with Tape() as tape:
                    latent = model.encode(attrs)
                    key = id(attrs.grid)
                    if key not in target_cache:
                        target_cache[key] = model.targets_for(attrs.grid, latent.grid)
                    targets = target_cache[key]
                    x = model.reparameterize(latent, seed=(config.seed, step, k))
                    out = model.decode(x, targets=targets)
                    loss, terms = vae_loss(out, attrs, latent, targets, config, model)
                    loss = scale(loss, 1.0 / len(batch))
                if not np.isfinite(loss.value):
                    where = nan_dump(batch) if nan_dump else None
                    raise NumericFailure(f"Non-finite VAE loss at step {step}", where)
                backward(tape, loss)
                batch_loss += float(loss.value)
                logger.debug("step %d sample %d: %s", step, k, terms)
            adam_step(params, config.lr, config.beta1, config.beta2)
            ema_update(params, config.ema_rate, warmup=config.ema_warmup)
            history['step_loss'].append(batch_loss)
            epoch_losses.append(batch_loss)
            step += 1
            bar.update(1)
        history['epoch_loss'].append(float(np.mean(epoch_losses)) if epoch_losses else float('nan'))
        logger.info("VAE %d^3 epoch %d: loss %.5f", config.in_resolution, len(history['epoch_loss']),
                    history['epoch_loss'][-1])
    bar.close()
    return model, history
