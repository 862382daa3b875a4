"""Differentiable operators over FeatureGrids."""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from algorithms.autograd import Tensor, absolute, as_tensor, mean_all, record, square, sub
from algorithms.topology import NEIGHBOR_OFFSETS, coarse_frame, coarsen_topology, fine_frame, parent_index
from config import SCALAR_DTYPE, SCENE_EXTENT
from models.grid import FeatureGrid, IndexGrid
from utils.errors import ContractError
from utils.parallel import parallel_map

CENTER_OFFSET = 13
CONV_BLOCK_ROWS = 4096


@dataclass
class KernelMap:
    """Per-offset (input row, output row) pairs of a 3^3 stencil, offset k = (dx+1)*9 + (dy+1)*3 + (dz+1)"""
    in_grid: IndexGrid
    out_grid: IndexGrid
    pairs: List[Tuple[np.ndarray, np.ndarray]]

    @property
    def pair_count(self):
        return int(sum(p[0].shape[0] for p in self.pairs))


def _frames_match(a: IndexGrid, b: IndexGrid):
    return a.same_frame(b)


def kernel_map(in_grid: IndexGrid, out_grid: IndexGrid) -> KernelMap:
    """Neighbour pairs such that coord(in) = coord(out) + offset; cached on the output grid"""
    def build():
        out_coords = out_grid.coords
        pairs = []
        for offset in NEIGHBOR_OFFSETS:
            idx = in_grid.lookup(out_coords + offset)
            out_rows = np.nonzero(idx >= 0)[0]
            pairs.append((idx[out_rows], out_rows))
        return KernelMap(in_grid, out_grid, pairs)

    return out_grid.cached(('kmap', id(in_grid)), build)


def sparse_conv3(x: FeatureGrid, weight, bias=None, out_grid: IndexGrid = None) -> FeatureGrid:
    """
    Submanifold-style 3^3 sparse convolution.

    out(c) = bias + Σ_o W[o] · in(c + o), with neighbours outside the input
    topology contributing zero.

    Args:
        x: input features (N_in × C_in)
        weight: 27 × C_in × C_out tensor
        bias: C_out tensor or None
        out_grid: output topology, defaults to the input topology

    Returns:
        FeatureGrid on out_grid with C_out channels
    """
    out_grid = x.grid if out_grid is None else out_grid
    weight = as_tensor(weight)
    c_in = x.channels
    if weight.value.ndim != 3 or weight.value.shape[:2] != (27, c_in):
        raise ContractError(f"Conv weight shape {weight.value.shape} does not match 27×{c_in}×C_out")
    c_out = weight.value.shape[2]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.value.shape != (c_out,):
            raise ContractError(f"Conv bias shape {bias.value.shape} does not match ({c_out},)")
    if not _frames_match(x.grid, out_grid):
        raise ContractError("Convolution output topology has a different voxel size or origin")

    kmap = kernel_map(x.grid, out_grid)
    xv = x.values
    wv = weight.value

    n_out = out_grid.voxel_count
    out = np.zeros((n_out, c_out), dtype=np.result_type(xv.dtype, wv.dtype))

    def block(lo):
        # Output rows are in linear-index order, so a row range covers whole leaves in turn.
        # Pairs are sorted by output row, so each offset contributes one slice per block.
        hi = min(lo + CONV_BLOCK_ROWS, n_out)
        acc = out[lo:hi]
        for k, (in_rows, out_rows) in enumerate(kmap.pairs):
            a, b = np.searchsorted(out_rows, (lo, hi))
            if a < b:
                acc[out_rows[a:b] - lo] += xv[in_rows[a:b]] @ wv[k]

    # Blocks are disjoint and their size does not depend on the thread count
    parallel_map(block, range(0, n_out, CONV_BLOCK_ROWS))
    if bias is not None:
        out += bias.value

    def grad_fn(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for k, (in_rows, out_rows) in enumerate(kmap.pairs):
            if in_rows.shape[0] == 0:
                continue
            go = g[out_rows]
            gx[in_rows] += go @ wv[k].T
            gw[k] = xv[in_rows].T @ go
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x.features, weight) + ((bias,) if bias is not None else ())
    return FeatureGrid(out_grid, record('conv3', out, parents, lambda g: grad_fn(g)[:len(parents)]))


def _child_groups(fine: IndexGrid, coarse: IndexGrid):
    """Fine rows sorted by parent (stable, so ascending index within a parent) and group starts"""
    def build():
        parent = parent_index(fine, coarse)
        if np.any(parent < 0):
            raise ContractError("Pooling target is not the coarsened input topology")
        order = np.argsort(parent, kind='stable')
        counts = np.bincount(parent, minlength=coarse.voxel_count)
        if np.any(counts == 0):
            raise ContractError("Pooling target has voxels without active children")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        return order, starts, counts
    return fine.cached(('groups', id(coarse)), lambda: (coarse, build()))[1]


def max_pool2(x: FeatureGrid, coarse: IndexGrid = None) -> FeatureGrid:
    """Per-channel max over active children; ties route the gradient to the lowest child index"""
    coarse = coarsen_topology(x.grid) if coarse is None else coarse
    vs, origin = coarse_frame(x.grid.voxel_size, x.grid.origin)
    if not np.isclose(coarse.voxel_size, vs) or not np.allclose(coarse.origin, origin):
        raise ContractError("Pooling target frame is not the 2× coarsened input frame")
    if coarse.voxel_count == 0:
        return FeatureGrid(coarse, record('maxpool', np.zeros((0, x.channels), dtype=x.values.dtype),
                                          (x.features,), lambda g: (np.zeros_like(x.values),)))

    order, starts, counts = _child_groups(x.grid, coarse)
    xv = x.values
    sorted_vals = xv[order]
    gmax = np.maximum.reduceat(sorted_vals, starts, axis=0)
    group_of = np.repeat(np.arange(coarse.voxel_count), counts)
    positions = np.where(sorted_vals == gmax[group_of], np.arange(order.shape[0])[:, None], order.shape[0])
    first = np.minimum.reduceat(positions, starts, axis=0)
    arg_rows = order[first]
    cols = np.broadcast_to(np.arange(x.channels), arg_rows.shape)

    def grad_fn(g):
        gx = np.zeros_like(xv)
        gx[arg_rows, cols] = g
        return (gx,)

    return FeatureGrid(coarse, record('maxpool', gmax, (x.features,), grad_fn))


def upsample_subdivide(x: FeatureGrid, fine: IndexGrid) -> FeatureGrid:
    """Nearest-neighbour copy of each parent's features onto its active children"""
    vs, origin = fine_frame(x.grid.voxel_size, x.grid.origin)
    if not np.isclose(fine.voxel_size, vs) or not np.allclose(fine.origin, origin):
        raise ContractError("Upsampling target frame is not the 2× subdivided input frame")
    parent = parent_index(fine, x.grid)
    if np.any(parent < 0):
        bad = fine.coords[np.argmax(parent < 0)]
        raise ContractError(f"Fine voxel {tuple(int(v) for v in bad)} has no active parent")
    n_rows = x.voxel_count
    xv = x.values

    def grad_fn(g):
        gx = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
        np.add.at(gx, parent, g)
        return (gx,)

    return FeatureGrid(fine, record('upsample', xv[parent], (x.features,), grad_fn))


def transfer(x: FeatureGrid, out_grid: IndexGrid) -> FeatureGrid:
    """Copy rows onto `out_grid` for shared coords, zero elsewhere (padding or restriction)"""
    if x.grid is out_grid:
        return x
    if not _frames_match(x.grid, out_grid):
        raise ContractError("Transfer between grids with different frames")
    idx = out_grid.cached(('transfer', id(x.grid)), lambda: (x.grid, x.grid.lookup(out_grid.coords)))[1]
    rows = np.nonzero(idx >= 0)[0]
    src = idx[rows]
    xv = x.values
    out = np.zeros((out_grid.voxel_count, x.channels), dtype=xv.dtype)
    out[rows] = xv[src]

    def grad_fn(g):
        gx = np.zeros_like(xv)
        gx[src] = g[rows]
        return (gx,)

    return FeatureGrid(out_grid, record('transfer', out, (x.features,), grad_fn))


def group_norm(x: FeatureGrid, groups, gamma=None, beta=None, eps=1e-5) -> FeatureGrid:
    """
    Group normalisation over all active voxels of the grid jointly.

    Raises:
        ContractError: channel count not divisible by `groups`
    """
    c = x.channels
    if groups < 1 or c % groups:
        raise ContractError(f"{c} channels are not divisible into {groups} groups")
    xv = x.values
    n = xv.shape[0]
    gamma = as_tensor(np.ones(c, dtype=xv.dtype) if gamma is None else gamma)
    beta = as_tensor(np.zeros(c, dtype=xv.dtype) if beta is None else beta)
    if n == 0:
        empty = np.zeros_like(xv)
        return FeatureGrid(x.grid, record('groupnorm', empty, (x.features, gamma, beta),
                                          lambda g: (empty, np.zeros_like(gamma.value), np.zeros_like(beta.value))))

    xg = xv.reshape(n, groups, c // groups)
    mean = xg.mean(axis=(0, 2), keepdims=True)
    var = xg.var(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, c)
    out = xhat * gamma.value + beta.value

    def grad_fn(g):
        dxhat = (g * gamma.value).reshape(n, groups, c // groups)
        xh = xhat.reshape(n, groups, c // groups)
        dx = inv * (dxhat - dxhat.mean(axis=(0, 2), keepdims=True)
                    - xh * (dxhat * xh).mean(axis=(0, 2), keepdims=True))
        return dx.reshape(n, c), (g * xhat).sum(axis=0), g.sum(axis=0)

    return FeatureGrid(x.grid, record('groupnorm', out.astype(xv.dtype), (x.features, gamma, beta), grad_fn))


def positional_encoding(grid: IndexGrid, frequencies: int, dtype=SCALAR_DTYPE) -> FeatureGrid:
    """[p, sin(2^k π p), cos(2^k π p)] for k < F, p the voxel centre scaled into [-1, 1]^3"""
    if frequencies < 0:
        raise ContractError("Positional encoding needs F >= 0")
    p = grid.world_centers() / (0.5 * SCENE_EXTENT)
    channels = [p]
    for k in range(frequencies):
        arg = (2.0 ** k) * np.pi * p
        channels.append(np.sin(arg))
        channels.append(np.cos(arg))
    values = np.concatenate(channels, axis=1) if grid.voxel_count else np.zeros((0, 6 * frequencies + 3))
    return FeatureGrid(grid, values.astype(dtype))


def trilinear_weights(grid: IndexGrid, points):
    """Corner rows (M × 8, -1 when inactive) and weights (M × 8) for world points"""
    u = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - grid.origin) / grid.voxel_size
    base = np.floor(u).astype(np.int64)
    frac = u - base
    corners = base[:, None, :] + np.array(
        [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)[None]
    rows = grid.lookup(corners.reshape(-1, 3)).reshape(-1, 8)
    bits = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    w = np.prod(np.where(bits[None], frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    return rows, w


def trilinear_sample(x: FeatureGrid, points, fill=0.0):
    """
    Trilinear interpolation of features at world points.

    Missing corners read `fill`. Returns (Tensor M × C, mask of points whose
    8 corners are all active).
    """
    rows, w = trilinear_weights(x.grid, points)
    xv = x.values
    present = rows >= 0
    corner_vals = np.full(rows.shape + (xv.shape[1],), fill, dtype=np.float64)
    corner_vals[present] = xv[rows[present]]
    out = (w[..., None] * corner_vals).sum(axis=1).astype(xv.dtype)
    n_rows = xv.shape[0]

    def grad_fn(g):
        gx = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
        point_of, corner_of = np.nonzero(present)
        np.add.at(gx, rows[point_of, corner_of], w[point_of, corner_of, None] * g[point_of])
        return (gx,)

    return record('trilinear', out, (x.features,), grad_fn), present.all(axis=1)


# --------------------------------------------------------------------- losses

def _check_shapes(a, b, name):
    if a.value.shape != b.value.shape:
        raise ContractError(f"{name}: shape mismatch {a.value.shape} vs {b.value.shape}")


def bce_logits(pred, target) -> Tensor:
    """Mean binary cross entropy on logits, in the overflow-free form"""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_shapes(pred, target, 'bce_logits')
    x = pred.value
    t = target.value.astype(x.dtype)
    n = max(1, x.size)
    loss = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return record('bce', np.asarray(loss), (pred,), lambda g: (g * (sig - t) / n,))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, 'mse')
    return mean_all(square(sub(a, b)))


def l1(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, 'l1')
    return mean_all(absolute(sub(a, b)))


def kl_unit_gauss(mu, logvar) -> Tensor:
    """½·mean(μ² + σ² − logσ² − 1) against N(0, I)"""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    _check_shapes(mu, logvar, 'kl_unit_gauss')
    m, lv = mu.value, logvar.value
    n = max(1, m.size)
    ev = np.exp(lv)
    loss = 0.5 * (m * m + ev - lv - 1.0).sum() / n
    return record('kl', np.asarray(loss), (mu, logvar), lambda g: (g * m / n, g * 0.5 * (ev - 1.0) / n))
