import numpy as np
import pytest

from algorithms.metrics import (EXACT_EMD_LIMIT, chamfer, emd, emd_with_gap, grid_iou, nearest_neighbours,
                                one_nna, pairwise_distances)
from models.grid import IndexGrid
from utils.errors import ContractError


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def test_chamfer_examples(rng):
    assert chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == pytest.approx(2.0)
    a = rng.standard_normal((100, 3))
    assert chamfer(a, a) == 0.0


def test_chamfer_matches_brute_force(rng):
    a = rng.uniform(-0.5, 0.5, size=(512, 3))
    b = rng.uniform(-0.5, 0.5, size=(512, 3))
    assert abs(chamfer(a, b) - brute_chamfer(a, b)) < 1e-9
    c = rng.uniform(-0.5, 0.5, size=(37, 3))
    assert abs(chamfer(a, c) - brute_chamfer(a, c)) < 1e-9


@pytest.mark.parametrize('seed', range(20))
def test_distances_are_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((64, 3))
    b = rng.standard_normal((64, 3)) * 0.5 + 0.3
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12) and chamfer(a, b) > 0
    assert emd(a, b) == pytest.approx(emd(b, a), rel=1e-9) and emd(a, b) > 0
    c = rng.standard_normal((17, 3))
    assert chamfer(a, c) == pytest.approx(chamfer(c, a), rel=1e-12)


def test_point_set_contracts():
    with pytest.raises(ContractError):
        chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
    with pytest.raises(ContractError):
        chamfer(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        chamfer([[np.nan, 0.0, 0.0]], [[0.0, 0.0, 0.0]])


def test_emd_examples(rng):
    a = rng.standard_normal((30, 3))
    assert emd(a, a) == 0.0
    assert emd([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [0, 0, 0]]) == 0.0
    assert emd([[0, 0, 0]], [[0, 3, 4]]) == pytest.approx(5.0)


def test_emd_size_mismatch():
    with pytest.raises(ContractError):
        emd(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        emd_with_gap(np.zeros((2, 3)), np.zeros((2, 3)), method='sinkhorn')


@pytest.mark.parametrize('seed', range(3))
def test_auction_within_one_percent_of_hungarian(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.5, 0.5, size=(64, 3))
    b = rng.uniform(-0.5, 0.5, size=(64, 3))
    exact, exact_gap = emd_with_gap(a, b, method='exact')
    approx, gap = emd_with_gap(a, b, method='auction')
    assert exact_gap == 0.0
    assert exact <= approx <= exact * 1.01
    assert gap <= 0.01


def test_emd_auto_switches_to_auction(rng):
    a = rng.standard_normal((EXACT_EMD_LIMIT + 1, 3))
    b = a + 0.01
    value, gap = emd_with_gap(a, b)
    assert value == pytest.approx(0.01 * np.sqrt(3.0), rel=0.01)
    assert gap <= 0.01


def test_pairwise_distances_is_symmetric(rng):
    sets = [rng.standard_normal((20, 3)) + k for k in range(4)]
    d = pairwise_distances(sets, 'cd')
    assert np.allclose(d, d.T) and np.all(np.diag(d) == 0.0)
    assert d[0, 1] == pytest.approx(chamfer(sets[0], sets[1]))
    with pytest.raises(ContractError):
        pairwise_distances(sets, 'hausdorff')


def test_nearest_neighbour_ties_go_to_lowest_index():
    d = np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 2.0], [1.0, 2.0, 0.0]])
    assert nearest_neighbours(d).tolist() == [1, 0, 0]


def clusters(rng, count, centre):
    return [centre + 0.01 * rng.standard_normal((32, 3)) for _ in range(count)]


@pytest.mark.parametrize('metric', ['cd', 'emd'])
def test_one_nna_separated_sets(rng, metric):
    generated = clusters(rng, 4, np.zeros(3))
    reference = clusters(rng, 4, np.full(3, 10.0))
    assert one_nna(generated, reference, metric) == 100.0
    assert one_nna(generated, reference, metric, variant='printed') == 50.0


def test_one_nna_duplicates(rng):
    reference = [k + rng.standard_normal((32, 3)) for k in range(5)]
    generated = [r.copy() for r in reference]
    assert one_nna(generated, reference, 'cd', variant='printed') == 50.0
    assert one_nna(generated, reference, 'cd', variant='standard') == 0.0


def test_one_nna_contracts(rng):
    sets = clusters(rng, 2, np.zeros(3))
    with pytest.raises(ContractError):
        one_nna(sets[:1], sets, 'cd')
    with pytest.raises(ContractError):
        one_nna(sets, sets, 'cd', variant='balanced')
    with pytest.raises(ContractError):
        one_nna(sets, sets, 'cd', distances=np.zeros((3, 3)))


@pytest.mark.slow
def test_one_nna_of_same_distribution_is_near_half():
    rng = np.random.default_rng(0)
    shapes = [rng.standard_normal((128, 3)) * rng.uniform(0.5, 1.5, 3) for _ in range(200)]
    d = pairwise_distances(shapes, 'cd')
    scores = []
    for _ in range(20):
        order = rng.permutation(200)
        sub = d[np.ix_(order, order)]
        scores.append(one_nna(shapes[:100], shapes[100:], distances=sub))
    assert abs(np.mean(scores) - 50.0) <= 10.0


def test_grid_iou_cases():
    a = IndexGrid.build_from_coords([(0, 0, 0), (1, 0, 0)])
    b = IndexGrid.build_from_coords([(1, 0, 0), (2, 0, 0)])
    c = IndexGrid.build_from_coords([(5, 5, 5)])
    assert grid_iou(a, a) == 1.0
    assert grid_iou(a, c) == 0.0
    assert grid_iou(a, b) == pytest.approx(1 / 3)
    assert grid_iou(a.empty_like(), a.empty_like()) == 1.0
    assert grid_iou(a, a.empty_like()) == 0.0
    with pytest.raises(ContractError):
        grid_iou(a, IndexGrid.build_from_coords([(0, 0, 0)], voxel_size=0.5))
