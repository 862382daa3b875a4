import numpy as np
import pytest
from scipy.spatial import cKDTree

from algorithms.hierarchy import build_hierarchy, coarsen_attributes
from algorithms.shapes import SHAPE_FAMILIES, box_mesh, icosphere, procedural_dataset, union_of_boxes
from algorithms.surface import extract_mesh, sample_surface, tsdf_at
from algorithms.topology import dense_box, unit_frame
from algorithms.voxelizer import voxelize_mesh, voxelize_points
from config import SURFACE_BAND, TSDF_CLAMP
from models.grid import IndexGrid
from models.hierarchy import AttributeSet
from models.mesh import TriMesh
from tests.conftest import SPHERE_RADIUS
from utils.errors import ContractError, HierarchyError


def unit_centres(resolution):
    voxel_size, origin = unit_frame(resolution)
    axis = origin[0] + voxel_size * np.arange(resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3), voxel_size


def test_unit_cube_shell_matches_distance_oracle():
    mesh = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    grid, attrs = voxelize_mesh(mesh, 8, normalize=False)
    assert grid.voxel_count == 8 ** 3 - 6 ** 3

    centres, voxel_size = unit_centres(8)
    # Every centre is inside the cube; its distance to the boundary is 0.5 − max|c|
    distance = 0.5 - np.abs(centres).max(axis=1)
    expected = IndexGrid.build_from_coords(
        np.rint((centres[distance <= SURFACE_BAND * voxel_size] + 0.5) * 8 - 0.5).astype(np.int64),
        grid.voxel_size, grid.origin)
    assert grid.same_topology(expected)
    assert np.allclose(attrs.tsdf.values, -0.5, atol=1e-5)


def test_unit_cube_normals_point_outward():
    grid, attrs = voxelize_mesh(box_mesh((-0.5,) * 3, (0.5,) * 3), 8, normalize=False)
    centres = grid.world_centers()
    assert np.all(np.einsum('ij,ij->i', attrs.normals.values, centres) > 0)
    assert np.allclose(np.linalg.norm(attrs.normals.values, axis=1), 1.0, atol=1e-5)


def test_single_triangle_on_voxel_centres():
    tri = TriMesh([(-0.3, -0.3, 0.0), (0.3, -0.3, 0.0), (0.0, 0.3, 0.0)], [(0, 1, 2)])
    grid, attrs = voxelize_mesh(tri, 9, normalize=False)
    centres = grid.world_centers()
    on_plane = np.abs(centres[:, 2]) < 1e-9
    assert on_plane.any()
    assert np.all(np.abs(attrs.tsdf.values[on_plane, 0]) < 0.5)
    assert attrs.open_surface
    assert np.all(np.abs(attrs.tsdf.values) <= SURFACE_BAND + 1e-6)


def test_sphere_tsdf_matches_analytic_distance(sphere64):
    grid, attrs = sphere64
    analytic = (np.linalg.norm(grid.world_centers(), axis=1) - SPHERE_RADIUS) / grid.voxel_size
    assert grid.voxel_count > 0
    assert np.max(np.abs(attrs.tsdf.values[:, 0] - analytic)) < 0.1


@pytest.mark.parametrize('resolution', [16, 32, 64])
def test_voxelized_sphere_stays_within_hausdorff_bound(sphere_mesh, resolution):
    grid, _ = voxelize_mesh(sphere_mesh, resolution, normalize=False, samples_per_voxel=0)
    centres = grid.world_centers()
    surface = sample_surface(sphere_mesh, 20000, seed=resolution)
    to_voxels, _ = cKDTree(centres).query(surface)
    assert to_voxels.max() <= 1.5 * grid.voxel_size
    # Icosphere facets sit slightly inside the analytic sphere
    to_surface = np.abs(np.linalg.norm(centres, axis=1) - SPHERE_RADIUS)
    assert to_surface.max() <= np.sqrt(3.0) / 2 * grid.voxel_size + 1e-3


def test_quarter_turn_rotates_the_voxelization(sphere_mesh):
    resolution = 32
    v = sphere_mesh.vertices
    turned = TriMesh(np.stack([-v[:, 1], v[:, 0], v[:, 2]], axis=1), sphere_mesh.triangles, sphere_mesh.labels)
    grid, attrs = voxelize_mesh(sphere_mesh, resolution, normalize=False, samples_per_voxel=0)
    turned_grid, turned_attrs = voxelize_mesh(turned, resolution, normalize=False, samples_per_voxel=0)
    c = grid.coords
    mapped = np.stack([resolution - 1 - c[:, 1], c[:, 0], c[:, 2]], axis=1)
    assert turned_grid.voxel_count == grid.voxel_count
    rows = turned_grid.lookup(mapped)
    assert np.all(rows >= 0)
    assert np.allclose(turned_attrs.tsdf.values[rows], attrs.tsdf.values, atol=1e-9)
    n = attrs.normals.values
    assert np.allclose(turned_attrs.normals.values[rows], np.stack([-n[:, 1], n[:, 0], n[:, 2]], axis=1), atol=1e-6)


def test_sphere_labels_split_hemispheres(sphere16):
    grid, attrs = sphere16
    z = grid.world_centers()[:, 2]
    ids = attrs.semantic_ids()
    assert np.all(ids[z > 0.1] == 1) and np.all(ids[z < -0.1] == 0)


def test_surface_samples_layout(sphere16):
    grid, attrs = sphere16
    n = grid.voxel_count
    assert attrs.samples.shape == (5 * n, 3)
    assert np.allclose(attrs.samples[:n], grid.world_centers())
    owners = attrs.sample_owners()
    offsets = np.abs(attrs.samples - grid.world_centers()[owners]).max(axis=1)
    assert np.all(offsets <= 0.5 * grid.voxel_size + 1e-12)
    analytic = (np.linalg.norm(attrs.samples, axis=1) - SPHERE_RADIUS) / grid.voxel_size
    assert np.max(np.abs(np.clip(analytic, -TSDF_CLAMP, TSDF_CLAMP) - attrs.sample_tsdf)) < 0.1


def test_voxelize_is_deterministic(sphere_mesh):
    a = voxelize_mesh(sphere_mesh, 16, seed=4)
    b = voxelize_mesh(sphere_mesh, 16, seed=4)
    assert a[0].same_topology(b[0])
    assert np.array_equal(a[1].tsdf.values, b[1].tsdf.values)
    assert np.array_equal(a[1].samples, b[1].samples)


def test_voxelize_rejects_empty_and_degenerate_meshes():
    with pytest.raises(ContractError):
        voxelize_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 8)
    with pytest.raises(ContractError):
        voxelize_mesh(TriMesh([(0, 0, 0), (1, 1, 1), (2, 2, 2)], [(0, 1, 2)]), 8)


def test_voxelize_single_point():
    grid, attrs = voxelize_points([[0.01, 0.02, 0.03]], 16, normals=[[0.0, 0.0, 2.0]], labels=[2])
    assert grid.voxel_count == 1
    assert np.allclose(attrs.normals.values, [[0.0, 0.0, 1.0]])
    assert attrs.semantic_ids().tolist() == [2]
    assert attrs.tsdf.values.tolist() == [[0.0]]


def test_voxelize_points_averages_per_cell(rng):
    voxel_size, origin = unit_frame(8)
    centre = origin + voxel_size * np.array([3, 4, 5])
    points = centre + rng.uniform(-0.4, 0.4, size=(8, 3)) * voxel_size
    normals = np.tile([1.0, 0.0, 0.0], (8, 1)) + rng.normal(0.0, 0.01, size=(8, 3))
    labels = [1, 1, 1, 2, 2, 2, 0, 0]
    grid, attrs = voxelize_points(points, 8, normals, labels)
    assert list(grid) == [(3, 4, 5)]
    expected = normals.mean(axis=0) / np.linalg.norm(normals.mean(axis=0))
    assert np.allclose(attrs.normals.values[0], expected, atol=1e-6)
    assert attrs.semantic_ids().tolist() == [1]


def test_voxelize_points_rejects_empty():
    with pytest.raises(ContractError):
        voxelize_points(np.zeros((0, 3)), 8)


def test_hierarchy_single_voxel_chain():
    voxel_size, origin = unit_frame(512)
    grid = IndexGrid.build_from_coords([(0, 0, 0)], voxel_size, origin)
    attrs = AttributeSet.from_arrays(grid, [[0.0, 0.0, 1.0]], [3], [0.25])
    hierarchy = build_hierarchy((grid, attrs), [128, 512])
    coarse = hierarchy[0]
    assert list(coarse.grid) == [(0, 0, 0)]
    assert coarse.grid.resolution == 128
    assert np.allclose(coarse.grid.origin, unit_frame(128)[1])
    assert coarse.semantic_ids().tolist() == [3]
    assert np.allclose(coarse.tsdf.values, 0.25)


def test_hierarchy_containment_on_sphere(sphere64):
    hierarchy = build_hierarchy(sphere64, [4, 16, 64])
    assert hierarchy.resolutions == [4, 16, 64]
    assert hierarchy.check_containment()
    counts = hierarchy.voxel_counts()
    assert counts[0] < counts[1] < counts[2]
    for level, resolution in enumerate(hierarchy.resolutions):
        assert hierarchy[level].grid.resolution == resolution


def test_hierarchy_rejects_bad_chains(sphere16):
    with pytest.raises(ContractError):
        build_hierarchy(sphere16, [8, 32])
    with pytest.raises(ContractError):
        build_hierarchy(sphere16, [6, 16])
    with pytest.raises(ContractError):
        build_hierarchy(sphere16, [])


def test_containment_violation_is_reported(sphere16):
    hierarchy = build_hierarchy(sphere16, [8, 16])
    hierarchy.levels[0] = AttributeSet.empty(hierarchy[0].grid.empty_like())
    with pytest.raises(HierarchyError):
        hierarchy.check_containment()


def test_coarsen_attributes_majority_and_cancellation():
    grid = IndexGrid.build_from_coords([(0, 0, 0), (0, 0, 1), (0, 1, 0)], 0.25, (0.0, 0.0, 0.0))
    attrs = AttributeSet.from_arrays(grid, [[0, 0, 1], [0, 0, -1], [0, 0, 1]], [2, 1, 1], [1.0, -1.0, 3.0])
    coarse = coarsen_attributes(attrs)
    assert coarse.voxel_count == 1
    assert coarse.semantic_ids().tolist() == [1]
    assert np.allclose(coarse.tsdf.values, 1.0)
    assert np.allclose(coarse.normals.values, [[0.0, 0.0, 1.0]])


def test_sample_surface_single_triangle():
    a, b, c = np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    point = sample_surface(TriMesh([a, b, c], [(0, 1, 2)]), 1, seed=3)[0]
    weights = np.linalg.solve(np.stack([b - a, c - a, [0.0, 0.0, 1.0]], axis=1), point - a)
    assert weights[0] >= 0 and weights[1] >= 0 and weights[0] + weights[1] <= 1
    assert abs(weights[2]) < 1e-12


def test_sample_surface_on_sphere(sphere_mesh):
    points = sample_surface(sphere_mesh, 20000, seed=0)
    assert np.allclose(np.linalg.norm(points, axis=1), SPHERE_RADIUS, atol=2e-3)
    assert np.all(np.abs(points.mean(axis=0)) < 0.01)
    assert np.array_equal(points, sample_surface(sphere_mesh, 20000, seed=0))
    assert not np.array_equal(points, sample_surface(sphere_mesh, 20000, seed=1))


def test_sample_surface_contracts(sphere_mesh):
    with pytest.raises(ContractError):
        sample_surface(sphere_mesh, 0)
    with pytest.raises(ContractError):
        sample_surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 5)


def test_tsdf_at_voxel_centres(sphere16):
    grid, attrs = sphere16
    values, out_of_band = tsdf_at(attrs, grid.world_centers())
    assert np.allclose(values, attrs.tsdf.values[:, 0], atol=1e-4)
    assert not out_of_band.any()


def test_tsdf_at_midpoint_and_outside():
    grid = IndexGrid.build_from_coords([(2, 2, 2), (3, 2, 2)], 0.125, (-0.4375,) * 3)
    attrs = AttributeSet.from_arrays(grid, np.zeros((2, 3)), [0, 0], [-1.0, 1.0])
    mid = grid.world_centers().mean(axis=0)
    values, out_of_band = tsdf_at(attrs, [mid, [0.45, 0.45, 0.45]])
    assert values[0] == pytest.approx(0.0, abs=1e-6)
    assert values[1] == pytest.approx(TSDF_CLAMP)
    assert out_of_band.tolist() == [False, True]


def test_extract_mesh_on_sphere(sphere64):
    grid, attrs = sphere64
    mesh = extract_mesh(attrs)
    assert mesh.face_count > 0
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(radii - SPHERE_RADIUS)) < grid.voxel_size
    assert set(np.unique(mesh.face_labels())) <= {0, 1}


def test_extract_mesh_is_independent_of_slab_width(sphere16):
    _, attrs = sphere16
    whole = extract_mesh(attrs)
    pieces = extract_mesh(attrs, slab=3)
    assert whole.face_count == pieces.face_count
    assert np.allclose(np.sort(whole.vertices, axis=0), np.sort(pieces.vertices, axis=0))


def test_extract_mesh_reproduces_plane():
    voxel_size, origin = unit_frame(8)
    coords = [(i, j, k) for i in range(4) for j in range(4) for k in (0, 1)]
    grid = IndexGrid.build_from_coords(coords, voxel_size, origin)
    z = grid.coords[:, 2].astype(np.float64)
    attrs = AttributeSet.from_arrays(grid, np.tile([0.0, 0.0, 1.0], (grid.voxel_count, 1)),
                                     np.zeros(grid.voxel_count), z - 0.5)
    mesh = extract_mesh(attrs)
    assert mesh.face_count > 0
    local_z = (mesh.vertices[:, 2] - origin[2]) / voxel_size
    assert np.allclose(local_z, 0.5, atol=1e-4)
    assert np.all(mesh.face_normals()[:, 2] > 0.99)


def test_extract_mesh_without_crossing_is_empty():
    grid = dense_box(4)
    attrs = AttributeSet.from_arrays(grid, np.zeros((64, 3)), np.zeros(64), np.ones(64))
    assert extract_mesh(attrs).is_empty()
    assert extract_mesh(AttributeSet.empty(grid.empty_like())).is_empty()


def test_box_and_union_meshes_are_closed():
    box = box_mesh((0, 0, 0), (1, 2, 3))
    assert box.face_count == 12
    assert box.is_watertight() and box.euler_characteristic() == 2
    assert box.signed_volume() == pytest.approx(6.0)
    union = union_of_boxes([((0, 0, 0), (2, 1, 1)), ((1, 0, 0), (3, 1, 1))])
    assert union.is_watertight()
    assert union.signed_volume() == pytest.approx(3.0)


def test_icosphere_is_a_closed_sphere():
    sphere = icosphere(2, radius=2.0)
    assert sphere.face_count == 20 * 4 ** 2
    assert sphere.euler_characteristic() == 2
    assert np.allclose(np.linalg.norm(sphere.vertices, axis=1), 2.0)
    assert sphere.signed_volume() > 0


@pytest.mark.parametrize('family', ['boxes', 'spheres', 'L-shapes'])
def test_procedural_family_is_watertight(family):
    for mesh in procedural_dataset(family, 4, seed=0):
        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2
        lo, hi = mesh.bounds()
        assert np.max(hi - lo) == pytest.approx(0.9)
        assert np.allclose(0.5 * (lo + hi), 0.0)


def test_procedural_dataset_is_deterministic_and_diverse():
    a = procedural_dataset('boxes', 64, seed=7)
    b = procedural_dataset('boxes', 64, seed=7)
    assert all(np.array_equal(x.vertices, y.vertices) for x, y in zip(a, b))
    signatures = {tuple(np.round(m.bounds()[1] - m.bounds()[0], 6)) for m in a}
    assert len(signatures) == 64


def test_procedural_dataset_contracts():
    assert set(SHAPE_FAMILIES) == {'boxes', 'spheres', 'box-unions', 'L-shapes'}
    with pytest.raises(ContractError):
        procedural_dataset('teapots', 1)
    with pytest.raises(ContractError):
        procedural_dataset('boxes', 0)
