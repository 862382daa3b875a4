"""Point-set distances, 1-NNA and grid IoU used by the evaluation service."""
import logging
from typing import Callable, List, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from models.grid import IndexGrid
from utils.errors import ContractError
from utils.parallel import parallel_map

logger = logging.getLogger(__name__)

EXACT_EMD_LIMIT = 512
NNA_VARIANTS = ('standard', 'printed')


def as_point_set(points, name='points'):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError(f"{name} must be an n × 3 matrix, got shape {points.shape}")
    if points.shape[0] == 0:
        raise ContractError(f"{name} is empty")
    if not np.all(np.isfinite(points)):
        raise ContractError(f"{name} holds non-finite coordinates")
    return points


def chamfer(a, b):
    """
    Symmetric squared Chamfer distance.

    mean_a min_b ‖a − b‖² + mean_b min_a ‖b − a‖², with exact nearest
    neighbours from k-d trees.
    """
    a = as_point_set(a, 'a')
    b = as_point_set(b, 'b')
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab * d_ab) + np.mean(d_ba * d_ba))


def _auction(cost, rel_tol=1e-3, max_phases=40):
    """
    Forward auction with ε-scaling for a square min-cost assignment.

    Every unassigned row bids on its best column simultaneously; the highest
    bid per column wins (lowest row on equal bids). Phases shrink ε by 5× until
    the primal/dual gap falls below `rel_tol` of the primal cost.

    Returns:
        (assignment row -> column, relative duality gap)
    """
    n = cost.shape[0]
    benefit = -cost
    prices = np.zeros(n)
    scale_ = float(np.max(np.abs(cost))) or 1.0
    eps = scale_ / 5.0
    eps_floor = scale_ * 1e-9
    rows = np.arange(n)
    assigned = np.full(n, -1, dtype=np.int64)
    gap = np.inf

    for _ in range(max_phases):
        assigned[:] = -1
        owner = np.full(n, -1, dtype=np.int64)
        while True:
            free = np.nonzero(assigned < 0)[0]
            if free.size == 0:
                break
            values = benefit[free] - prices
            best = np.argmax(values, axis=1)
            v1 = values[np.arange(free.size), best]
            if n > 1:
                values[np.arange(free.size), best] = -np.inf
                v2 = values.max(axis=1)
            else:
                v2 = v1
            bids = prices[best] + (v1 - v2) + eps
            # Highest bid per column, lowest bidder row on ties
            order = np.lexsort((free, -bids, best))
            cols = best[order]
            first = np.ones(order.shape[0], dtype=bool)
            first[1:] = cols[1:] != cols[:-1]
            win_rows = free[order[first]]
            win_cols = cols[first]
            losers = owner[win_cols]
            assigned[losers[losers >= 0]] = -1
            owner[win_cols] = win_rows
            assigned[win_rows] = win_cols
            prices[win_cols] = bids[order[first]]

        primal = float(cost[rows, assigned].sum())
        dual = float(np.max(benefit - prices, axis=1).sum() + prices.sum())
        gap = max(0.0, primal + dual) / primal if primal > 0 else 0.0
        if gap <= rel_tol or eps <= eps_floor:
            break
        eps = max(eps / 5.0, eps_floor)
    return assigned, gap


def emd_with_gap(a, b, method='auto', rel_tol=1e-3):
    """
    Earth mover's distance between equal-size point sets with its duality gap.

    Args:
        method: 'exact' (Hungarian), 'auction', or 'auto' (exact up to 512 points)

    Returns:
        (mean Euclidean matching cost, relative gap; 0 for the exact solver)

    Raises:
        ContractError: sizes differ or unknown method
    """
    a = as_point_set(a, 'a')
    b = as_point_set(b, 'b')
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"EMD needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if method == 'auto':
        method = 'exact' if a.shape[0] <= EXACT_EMD_LIMIT else 'auction'
    cost = cdist(a, b)
    if method == 'exact':
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean()), 0.0
    if method == 'auction':
        assigned, gap = _auction(cost, rel_tol)
        if gap > 0.01:
            logger.warning("Auction EMD stopped with a %.2f%% duality gap", 100.0 * gap)
        return float(cost[np.arange(a.shape[0]), assigned].mean()), gap
    raise ContractError(f"Unknown EMD method '{method}'")


def emd(a, b, method='auto'):
    return emd_with_gap(a, b, method)[0]


DISTANCES = {
    'cd': chamfer,
    'emd': emd,
}


def pairwise_distances(sets: Sequence[np.ndarray], metric='cd') -> np.ndarray:
    """Symmetric matrix of `metric` over all pairs (diagonal 0), rows computed in parallel"""
    distance = _resolve_metric(metric)
    sets = [as_point_set(s, f'set[{k}]') for k, s in enumerate(sets)]
    n = len(sets)

    def row(i):
        return [distance(sets[i], sets[j]) for j in range(i + 1, n)]

    upper = parallel_map(row, range(n))
    out = np.zeros((n, n))
    for i, values in enumerate(upper):
        out[i, i + 1:] = values
    return out + out.T


def _resolve_metric(metric) -> Callable:
    if callable(metric):
        return metric
    try:
        return DISTANCES[metric.lower()]
    except (KeyError, AttributeError) as e:
        raise ContractError(f"Unknown point-set metric '{metric}', expected one of {sorted(DISTANCES)}") from e


def nearest_neighbours(distances: np.ndarray) -> np.ndarray:
    """Leave-one-out nearest index per row; ties go to the lowest index"""
    d = np.array(distances, dtype=np.float64)
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)


def one_nna(generated: List[np.ndarray], reference: List[np.ndarray], metric='cd', variant='standard',
            distances=None):
    """
    1-nearest-neighbour accuracy between two sets of point clouds, in percent.

    `standard` scores how often an element's leave-one-out nearest neighbour in
    the union belongs to its own set (50% means indistinguishable, 100% fully
    separable). `printed` counts, for both sets alike, neighbours that fall in
    the reference set.

    Args:
        distances: optional precomputed (|S_g|+|S_r|)² matrix, generated rows first

    Raises:
        ContractError: either set has fewer than two elements or unknown variant
    """
    if variant not in NNA_VARIANTS:
        raise ContractError(f"Unknown 1-NNA variant '{variant}', expected one of {NNA_VARIANTS}")
    n_gen, n_ref = len(generated), len(reference)
    if n_gen < 2 or n_ref < 2:
        raise ContractError("1-NNA needs at least two shapes in each set")
    if distances is None:
        distances = pairwise_distances(list(generated) + list(reference), metric)
    total = n_gen + n_ref
    if distances.shape != (total, total):
        raise ContractError(f"Distance matrix must be {total} × {total}")
    is_ref = np.concatenate([np.zeros(n_gen, dtype=bool), np.ones(n_ref, dtype=bool)])
    neighbour_is_ref = is_ref[nearest_neighbours(distances)]
    if variant == 'standard':
        hits = neighbour_is_ref == is_ref
    else:
        hits = neighbour_is_ref
    return 100.0 * float(hits.sum()) / total


def grid_iou(a: IndexGrid, b: IndexGrid):
    """
    |a ∩ b| / |a ∪ b| over active voxels; two empty grids score 1.

    Raises:
        ContractError: grids with a different voxel size or origin
    """
    if not a.same_frame(b):
        raise ContractError("IoU needs grids with the same voxel size and origin")
    if a.voxel_count == 0 and b.voxel_count == 0:
        return 1.0
    inter = int((b.lookup(a.coords) >= 0).sum())
    union = a.voxel_count + b.voxel_count - inter
    return inter / union
