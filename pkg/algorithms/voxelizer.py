import logging

import numpy as np
from scipy.spatial import cKDTree

from algorithms.topology import unit_frame
from config import SEMANTIC_CLASSES, SURFACE_BAND, SURFACE_JITTER_SAMPLES, TSDF_CLAMP
from models.grid import FeatureGrid, IndexGrid
from models.hierarchy import AttributeSet
from models.mesh import TriMesh
from utils.errors import ContractError
from utils.parallel import parallel_map

logger = logging.getLogger(__name__)

# Closest-feature region codes returned by closest_point_on_triangles
REGION_FACE = 0
REGION_VERTEX = (1, 2, 3)
REGION_EDGE = (4, 5, 6)   # AB, BC, CA

PAIR_CHUNK = 1 << 21
POINT_CHUNK = 1 << 15


def _dot(u, v):
    return np.einsum('ij,ij->i', u, v)


def closest_point_on_triangles(p, a, b, c):
    """
    Closest point on triangle (a, b, c) to p, row-wise.

    Returns:
        (closest points, region code) where the region is 0 for the face
        interior, 1-3 for vertices a/b/c and 4-6 for edges ab/bc/ca
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ca = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    with np.errstate(divide='ignore', invalid='ignore'):
        t_ab = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
        t_ca = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
        e_bc = (d4 - d3) + (d5 - d6)
        t_bc = (d4 - d3) / np.where(e_bc == 0, 1.0, e_bc)
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v, w = vb / denom, vc / denom

    face = a + ab * v[:, None] + ac * w[:, None]
    conds = [in_a, in_b, in_ab, in_c, in_ca, in_bc]
    choices = [a, b, a + ab * t_ab[:, None], c, a + ac * t_ca[:, None], b + (c - b) * t_bc[:, None]]
    region = np.select(conds, [1, 2, 4, 3, 6, 5], default=REGION_FACE)
    closest = face.copy()
    # First matching region wins, as in the sequential early-return test
    taken = np.zeros(p.shape[0], dtype=bool)
    for cond, choice in zip(conds, choices):
        sel = cond & ~taken
        closest[sel] = choice[sel]
        taken |= cond
    return closest, region


class MeshDistance:
    """
    Signed distance queries against a triangle mesh.

    The sign comes from angle-weighted pseudo-normals of the closest feature,
    which is exact for closed manifold meshes. Open meshes (some edge not used
    by exactly two faces) take the sign from the nearest face normal instead.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.is_empty():
            raise ContractError("Mesh has no triangles")
        self.mesh = mesh
        tri = mesh.corners()
        self.a, self.b, self.c = tri[:, 0], tri[:, 1], tri[:, 2]
        self.face_normals = mesh.face_normals()
        self.labels = mesh.face_labels()

        edges, counts = mesh.edge_use_counts()
        self.open_surface = bool(np.any(counts != 2))
        tri_edges = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        edge_id = _row_lookup(edges, tri_edges).reshape(-1, 3)
        self.edge_of_face = edge_id
        self.edge_normals = np.zeros((edges.shape[0], 3))
        np.add.at(self.edge_normals, edge_id.reshape(-1), np.repeat(self.face_normals, 3, axis=0))

        angles = np.stack([
            _angle(self.b - self.a, self.c - self.a),
            _angle(self.c - self.b, self.a - self.b),
            _angle(self.a - self.c, self.b - self.c),
        ], axis=1)
        self.vertex_normals = np.zeros((mesh.vertex_count, 3))
        np.add.at(self.vertex_normals, mesh.triangles.reshape(-1),
                  (angles[:, :, None] * self.face_normals[:, None, :]).reshape(-1, 3))

        centroids = (self.a + self.b + self.c) / 3.0
        self.tree = cKDTree(centroids)
        self.max_radius = float(np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2)))

    def pseudo_normals(self, tris, region):
        """Normal used for the inside/outside test of each (triangle, region) pair"""
        if self.open_surface:
            return self.face_normals[tris]
        out = self.face_normals[tris].copy()
        for k, code in enumerate(REGION_VERTEX):
            sel = region == code
            out[sel] = self.vertex_normals[self.mesh.triangles[tris[sel], k]]
        for k, code in enumerate(REGION_EDGE):
            sel = region == code
            out[sel] = self.edge_normals[self.edge_of_face[tris[sel], k]]
        return out

    def sign_of(self, points, closest, tris, region):
        normals = self.pseudo_normals(tris, region)
        return np.where(_dot(points - closest, normals) < 0, -1.0, 1.0)

    def pair_distance(self, points, tris):
        closest, region = closest_point_on_triangles(points, self.a[tris], self.b[tris], self.c[tris])
        diff = points - closest
        return _dot(diff, diff), closest, region

    def query(self, points, upper=None):
        """
        Exact nearest triangle for each point.

        Args:
            points: (M, 3) world points
            upper: optional per-point upper bound on the surface distance; the
                nearest-centroid distance is used when absent

        Returns:
            dict of signed distance, nearest triangle, closest point
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        chunks = [slice(s, min(s + POINT_CHUNK, points.shape[0])) for s in range(0, points.shape[0], POINT_CHUNK)]
        parts = parallel_map(lambda sl: self._query_chunk(points[sl], None if upper is None else upper[sl]), chunks)
        if not parts:
            return {'signed': np.zeros(0), 'triangle': np.zeros(0, dtype=np.int64), 'closest': np.zeros((0, 3))}
        return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}

    def _query_chunk(self, points, upper):
        if upper is None:
            upper, _ = self.tree.query(points)
        radius = np.asarray(upper, dtype=np.float64) + self.max_radius + 1e-12
        lists = self.tree.query_ball_point(points, r=radius)
        lengths = np.array([len(lst) for lst in lists], dtype=np.int64)
        tris = np.concatenate([np.asarray(lst, dtype=np.int64) for lst in lists]) if lengths.sum() else \
            np.zeros(0, dtype=np.int64)
        owner = np.repeat(np.arange(points.shape[0]), lengths)
        d2, closest, region = self.pair_distance(points[owner], tris)
        order = np.lexsort((tris, d2, owner))
        first = order[np.concatenate([[0], np.cumsum(lengths)[:-1]])]
        best_tri = tris[first]
        best_closest = closest[first]
        sign = self.sign_of(points, best_closest, best_tri, region[first])
        return {
            'signed': sign * np.sqrt(d2[first]),
            'triangle': best_tri,
            'closest': best_closest,
        }


def _angle(u, v):
    cos = _dot(u, v) / np.maximum(np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1), 1e-300)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _row_lookup(table, rows):
    """Index of each row of `rows` in the lexicographically sorted unique `table`"""
    keys_t = table[:, 0] * (table.max() + 1) + table[:, 1]
    keys_r = rows[:, 0] * (table.max() + 1) + rows[:, 1]
    return np.searchsorted(keys_t, keys_r)


def _triangle_boxes(dist: MeshDistance, resolution, voxel_size, origin, band):
    tri = np.stack([dist.a, dist.b, dist.c], axis=1)
    lo = np.ceil((tri.min(axis=1) - band - origin) / voxel_size - 1e-9).astype(np.int64)
    hi = np.floor((tri.max(axis=1) + band - origin) / voxel_size + 1e-9).astype(np.int64)
    lo = np.clip(lo, 0, resolution - 1)
    hi = np.clip(hi, -1, resolution - 1)
    dims = np.maximum(hi - lo + 1, 0)
    return lo, dims


def _band_pairs(dist: MeshDistance, resolution, band, lo, dims, tri_range):
    """(voxel key, triangle, squared distance, closest point, region) for in-band pairs"""
    start, stop = tri_range
    tris = np.arange(start, stop)
    counts = dims[tris].prod(axis=1)
    total = int(counts.sum())
    if total == 0:
        return None
    tri_rep = np.repeat(tris, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    d = dims[tri_rep]
    iz = local % d[:, 2]
    iy = (local // d[:, 2]) % d[:, 1]
    ix = local // (d[:, 2] * d[:, 1])
    ijk = lo[tri_rep] + np.stack([ix, iy, iz], axis=1)
    centres = (2.0 * ijk + 1.0 - resolution) / (2.0 * resolution)
    d2, closest, region = dist.pair_distance(centres, tri_rep)
    keep = d2 <= band * band * (1.0 + 1e-9)
    keys = (ijk[keep, 0] * resolution + ijk[keep, 1]) * resolution + ijk[keep, 2]
    return keys, tri_rep[keep], d2[keep], closest[keep], region[keep]


def voxelize_mesh(mesh: TriMesh, resolution, normalize=True, samples_per_voxel=SURFACE_JITTER_SAMPLES, seed=0):
    """
    Voxelize a triangle mesh at resolution^3 inside the unit scene cube.

    A voxel is active iff its centre lies within √3/2 voxel of the surface. Its
    normal is the area-weighted mean of the in-band face normals, its tsdf the
    signed centre distance in voxel units clamped to ±3 and its semantic id the
    nearest face's label. Each voxel also gets its centre plus
    `samples_per_voxel` jittered points with exact signed distances.

    Raises:
        ContractError: the mesh has no (non-degenerate) triangles
    """
    if mesh.is_empty():
        raise ContractError("Cannot voxelize an empty mesh")
    mesh = mesh.cleaned()
    if mesh.is_empty():
        raise ContractError("Mesh has only degenerate triangles")
    if normalize:
        mesh = mesh.normalized()
    resolution = int(resolution)
    voxel_size, origin = unit_frame(resolution)
    band = SURFACE_BAND * voxel_size
    dist = MeshDistance(mesh)

    lo, dims = _triangle_boxes(dist, resolution, voxel_size, origin, band)
    cum = np.cumsum(dims.prod(axis=1))
    bounds = np.searchsorted(cum, np.arange(PAIR_CHUNK, int(cum[-1]) + PAIR_CHUNK, PAIR_CHUNK), side='right')
    edges = np.unique(np.concatenate([[0], np.minimum(bounds, mesh.face_count), [mesh.face_count]]))
    ranges = [(int(s), int(e)) for s, e in zip(edges[:-1], edges[1:]) if e > s]
    parts = [p for p in parallel_map(lambda r: _band_pairs(dist, resolution, band, lo, dims, r), ranges) if p]
    if not parts:
        logger.warning("Mesh produced no active voxels at resolution %d", resolution)
        grid = IndexGrid.build_from_coords([], voxel_size, origin)
        return grid, AttributeSet.empty(grid)
    keys, tris, d2, closest, region = (np.concatenate(x) for x in zip(*parts))

    # Deterministic merge: sort by voxel, then distance, then triangle id
    order = np.lexsort((tris, d2, keys))
    keys, tris, d2, closest, region = keys[order], tris[order], d2[order], closest[order], region[order]
    voxel_keys, starts, counts = np.unique(keys, return_index=True, return_counts=True)
    ijk = np.stack([voxel_keys // (resolution * resolution), (voxel_keys // resolution) % resolution,
                    voxel_keys % resolution], axis=1)
    centres = (2.0 * ijk + 1.0 - resolution) / (2.0 * resolution)

    near_tri = tris[starts]
    near_closest = closest[starts]
    sign = dist.sign_of(centres, near_closest, near_tri, region[starts])
    signed = sign * np.sqrt(d2[starts])

    weighted = dist.face_normals[tris] * mesh.face_areas()[tris][:, None]
    by_tri = np.lexsort((tris, keys))
    normal_sum = np.add.reduceat(weighted[by_tri], starts, axis=0)
    norm = np.linalg.norm(normal_sum, axis=1, keepdims=True)
    normals = np.where(norm > 1e-12, normal_sum / np.maximum(norm, 1e-300), dist.face_normals[near_tri])

    grid = IndexGrid.build_from_coords(ijk, voxel_size, origin)
    rows = grid.lookup(ijk)
    n = grid.voxel_count
    out_normals = np.zeros((n, 3))
    out_normals[rows] = normals
    out_sem = np.zeros(n)
    out_sem[rows] = np.clip(dist.labels[near_tri], 0, None)
    out_tsdf = np.zeros(n)
    out_tsdf[rows] = np.clip(signed / voxel_size, -TSDF_CLAMP, TSDF_CLAMP)

    samples, sample_tsdf = None, None
    if samples_per_voxel > 0:
        ordered_centres = np.zeros((n, 3))
        ordered_centres[rows] = centres
        ordered_closest = np.zeros((n, 3))
        ordered_closest[rows] = near_closest
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(-0.5, 0.5, size=(n, samples_per_voxel, 3)) * voxel_size
        jittered = (ordered_centres[:, None, :] + jitter).reshape(-1, 3)
        upper = np.linalg.norm(jittered - np.repeat(ordered_closest, samples_per_voxel, axis=0), axis=1)
        jittered_signed = dist.query(jittered, upper=upper)['signed']
        samples = np.concatenate([ordered_centres, jittered])
        sample_tsdf = np.clip(np.concatenate([out_tsdf, jittered_signed / voxel_size]), -TSDF_CLAMP, TSDF_CLAMP)

    attrs = AttributeSet.from_arrays(grid, out_normals, out_sem, out_tsdf, samples=samples,
                                     sample_tsdf=sample_tsdf, open_surface=dist.open_surface)
    if dist.open_surface:
        logger.debug("Open mesh: tsdf sign taken from nearest face normals")
    logger.debug("Voxelized %d faces at %d^3 into %d voxels", mesh.face_count, resolution, n)
    return grid, attrs


def quantize_points(points, resolution):
    """Cell coords of points in the unit scene cube; points outside are dropped"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ijk = np.floor((points + 0.5) * resolution).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < resolution), axis=1)
    return ijk, inside


def average_per_cell(points, values, resolution):
    """FeatureGrid of per-cell means of `values` for the points that fall in each cell"""
    ijk, inside = quantize_points(points, resolution)
    values = np.asarray(values, dtype=np.float64).reshape(ijk.shape[0], -1)
    if not inside.any():
        raise ContractError("No points inside the scene cube")
    voxel_size, origin = unit_frame(resolution)
    grid = IndexGrid.build_from_coords(ijk[inside], voxel_size, origin)
    rows = grid.lookup(ijk[inside])
    sums = np.zeros((grid.voxel_count, values.shape[1]))
    np.add.at(sums, rows, values[inside])
    counts = np.bincount(rows, minlength=grid.voxel_count)
    return FeatureGrid(grid, sums / counts[:, None])


def voxelize_points(points, resolution, normals=None, labels=None):
    """
    Quantize a point cloud (e.g. a single depth scan) to the voxels it hits.

    Per-cell normals are averaged and renormalized, labels take the majority
    (smallest id on ties) and tsdf is zero since the points lie on the surface.

    Raises:
        ContractError: no points, or none inside the scene cube
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise ContractError("Cannot voxelize an empty point set")
    ijk, inside = quantize_points(points, resolution)
    if not inside.all():
        logger.warning("Dropped %d points outside the scene cube", int((~inside).sum()))
    if normals is None:
        normals = np.zeros_like(points)
    mean_normals = average_per_cell(points, normals, resolution)
    grid = mean_normals.grid
    norm = np.linalg.norm(mean_normals.values, axis=1, keepdims=True)
    unit = np.where(norm > 1e-12, mean_normals.values / np.maximum(norm, 1e-300), 0.0)

    sem = np.zeros(grid.voxel_count)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)[inside]
        rows = grid.lookup(ijk[inside])
        votes = np.zeros((grid.voxel_count, max(SEMANTIC_CLASSES, int(labels.max()) + 1)))
        np.add.at(votes, (rows, labels), 1.0)
        sem = np.argmax(votes, axis=1)
    return grid, AttributeSet.from_arrays(grid, unit, sem, np.zeros(grid.voxel_count))
