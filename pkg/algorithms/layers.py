"""Parameterised building blocks shared by the structure VAE and the denoiser."""
import numpy as np

from algorithms.autograd import add, as_tensor, concat, matmul, mul, silu, slice_cols
from algorithms.sparse_ops import group_norm, sparse_conv3, transfer
from algorithms.topology import dilate
from models.grid import FeatureGrid


class Linear:
    """Per-voxel affine map (a 1^3 convolution)"""

    def __init__(self, params, name, c_in, c_out, zero=False):
        self.weight = params.create(f'{name}.weight', (c_in, c_out), init='zeros' if zero else 'normal', fan_in=c_in)
        self.bias = params.create(f'{name}.bias', (c_out,))
        self.c_out = c_out

    def apply(self, x):
        return add(matmul(as_tensor(x), self.weight), self.bias)

    def __call__(self, fg: FeatureGrid) -> FeatureGrid:
        return FeatureGrid(fg.grid, self.apply(fg.features))


class Conv3:
    def __init__(self, params, name, c_in, c_out, zero=False):
        self.weight = params.create(f'{name}.weight', (27, c_in, c_out),
                                    init='zeros' if zero else 'normal', fan_in=27 * c_in)
        self.bias = params.create(f'{name}.bias', (c_out,))

    def __call__(self, fg: FeatureGrid, out_grid=None) -> FeatureGrid:
        return sparse_conv3(fg, self.weight, self.bias, out_grid)


class GroupNorm:
    def __init__(self, params, name, channels, groups):
        self.gamma = params.create(f'{name}.gamma', (channels,), init='ones')
        self.beta = params.create(f'{name}.beta', (channels,))
        self.groups = groups
        self.channels = channels

    def __call__(self, fg: FeatureGrid, emb=None) -> FeatureGrid:
        """Group norm, plus (1 + scale)·x + shift when `emb` is a (1, 2C) modulation"""
        out = group_norm(fg, self.groups, self.gamma, self.beta)
        if emb is None:
            return out
        scale = slice_cols(emb, 0, self.channels)
        shift = slice_cols(emb, self.channels, 2 * self.channels)
        return FeatureGrid(fg.grid, add(mul(out.features, add(scale, 1.0)), shift))


def activate(fg: FeatureGrid) -> FeatureGrid:
    return FeatureGrid(fg.grid, silu(fg.features))


class ConvBlock:
    """(conv, group norm, SiLU) × 2, optionally run on the dilated topology and restricted back"""

    def __init__(self, params, name, c_in, c_out, groups):
        self.conv1 = Conv3(params, f'{name}.conv1', c_in, c_out)
        self.norm1 = GroupNorm(params, f'{name}.norm1', c_out, groups)
        self.conv2 = Conv3(params, f'{name}.conv2', c_out, c_out)
        self.norm2 = GroupNorm(params, f'{name}.norm2', c_out, groups)

    def __call__(self, fg: FeatureGrid, dilated=False) -> FeatureGrid:
        grid = fg.grid
        if dilated and grid.voxel_count:
            fg = transfer(fg, grid.cached('dilated', lambda: dilate(grid)))
        h = activate(self.norm1(self.conv1(fg)))
        h = activate(self.norm2(self.conv2(h)))
        return transfer(h, grid) if dilated else h


class ResBlock:
    """Pre-activation residual block with AdaGN time/class modulation"""

    def __init__(self, params, name, c_in, c_out, groups, emb_dim):
        self.norm1 = GroupNorm(params, f'{name}.norm1', c_in, groups)
        self.conv1 = Conv3(params, f'{name}.conv1', c_in, c_out)
        self.emb1 = Linear(params, f'{name}.emb1', emb_dim, 2 * c_in)
        self.norm2 = GroupNorm(params, f'{name}.norm2', c_out, groups)
        self.conv2 = Conv3(params, f'{name}.conv2', c_out, c_out, zero=True)
        self.emb2 = Linear(params, f'{name}.emb2', emb_dim, 2 * c_out)
        self.skip = Linear(params, f'{name}.skip', c_in, c_out) if c_in != c_out else None

    def __call__(self, fg: FeatureGrid, emb) -> FeatureGrid:
        act = silu(emb)
        h = self.conv1(activate(self.norm1(fg, self.emb1.apply(act))))
        h = self.conv2(activate(self.norm2(h, self.emb2.apply(act))))
        skip = self.skip(fg) if self.skip is not None else fg
        return FeatureGrid(fg.grid, add(h.features, skip.features))


def concat_features(*grids) -> FeatureGrid:
    return FeatureGrid(grids[0].grid, concat([g.features for g in grids], axis=1))


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of a scalar timestep, shape (1, dim)"""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(1, half))
    args = float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb[None, :]
