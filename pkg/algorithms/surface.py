import logging

import numpy as np
from skimage import measure

from algorithms.sparse_ops import trilinear_sample, trilinear_weights
from config import TSDF_CLAMP
from models.hierarchy import AttributeSet
from models.mesh import TriMesh
from utils.errors import ContractError

logger = logging.getLogger(__name__)

SLAB = 64
WELD_DECIMALS = 6


def tsdf_at(attrs: AttributeSet, points):
    """
    Trilinear tsdf (voxel units) at world points.

    Inactive corners read the +3 clamp value. Returns (values, out_of_band)
    where out_of_band marks points none of whose 8 corners are active.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values, _ = trilinear_sample(attrs.tsdf, points, fill=TSDF_CLAMP)
    rows, _ = trilinear_weights(attrs.grid, points)
    out_of_band = np.all(rows < 0, axis=1)
    return values.value[:, 0].astype(np.float64), out_of_band


def _dense_field(attrs: AttributeSet):
    """Padded dense copy of the tsdf over the active bounding box (+3 where inactive)"""
    grid = attrs.grid
    ijk = grid.coords
    lo = ijk.min(axis=0) - 1
    hi = ijk.max(axis=0) + 1
    shape = tuple(int(v) for v in hi - lo + 1)
    field = np.full(shape, TSDF_CLAMP, dtype=np.float64)
    active = np.zeros(shape, dtype=bool)
    local = ijk - lo
    field[local[:, 0], local[:, 1], local[:, 2]] = attrs.tsdf.values[:, 0]
    active[local[:, 0], local[:, 1], local[:, 2]] = True
    return field, active, lo


def _cell_mask(active):
    """True at cell origins whose 8 corners are all active"""
    cells = active.copy()
    cells[-1, :, :] = False
    cells[:, -1, :] = False
    cells[:, :, -1] = False
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                shifted = np.zeros_like(active)
                shifted[:active.shape[0] - dx, :active.shape[1] - dy, :active.shape[2] - dz] = \
                    active[dx:, dy:, dz:]
                cells &= shifted
    return cells


def extract_mesh(attrs: AttributeSet, slab=SLAB) -> TriMesh:
    """
    Marching cubes over cells whose 8 corners are active voxels.

    The padded bounding box is processed in x-slabs sharing one plane, and
    the pieces are welded. Faces are oriented so normals point toward positive
    tsdf. A field without zero crossings yields an empty mesh.
    """
    grid = attrs.grid
    if grid.voxel_count == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    field, active, lo = _dense_field(attrs)
    cells = _cell_mask(active)

    verts_parts, face_parts = [], []
    offset = 0
    nx = field.shape[0]
    for x0 in range(0, max(1, nx - 1), slab):
        x1 = min(nx, x0 + slab + 1)
        sub = field[x0:x1]
        sub_mask = cells[x0:x1].copy()
        sub_mask[-1] = False
        if x1 - x0 < 2 or not sub_mask.any():
            continue
        try:
            verts, faces, _, _ = measure.marching_cubes(sub, level=0.0, mask=sub_mask,
                                                        gradient_direction='ascent', allow_degenerate=False)
        except (ValueError, RuntimeError) as e:
            logger.debug("No surface in slab x=%d: %s", x0, e)
            continue
        if faces.shape[0] == 0:
            continue
        verts = verts.astype(np.float64)
        verts[:, 0] += x0
        verts_parts.append(verts)
        face_parts.append(faces.astype(np.int64) + offset)
        offset += verts.shape[0]

    if not face_parts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    verts = np.concatenate(verts_parts)
    faces = np.concatenate(face_parts)
    welded, inverse = np.unique(np.round(verts, WELD_DECIMALS), axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]

    world = grid.origin + (lo + welded) * grid.voxel_size
    mesh = TriMesh(world, faces)
    if mesh.is_watertight() and mesh.signed_volume() < 0:
        mesh = TriMesh(world, faces[:, ::-1])

    centroids = mesh.corners().mean(axis=1)
    rows = grid.lookup(np.rint((centroids - grid.origin) / grid.voxel_size).astype(np.int64))
    ids = attrs.semantic_ids()
    labels = np.where(rows >= 0, ids[np.maximum(rows, 0)], 0)
    return TriMesh(mesh.vertices, mesh.triangles, labels)


def sample_surface(source, n, seed=0):
    """
    Area-uniform surface points.

    Args:
        source: TriMesh, or AttributeSet whose tsdf isosurface is extracted first
        n: number of points (>= 1)
        seed: sampling seed

    Raises:
        ContractError: n < 1 or the surface is empty
    """
    if n < 1:
        raise ContractError("Need at least one surface sample")
    mesh = source if isinstance(source, TriMesh) else extract_mesh(source)
    if mesh.is_empty():
        raise ContractError("Cannot sample an empty surface")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ContractError("Surface has zero area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(mesh.face_count, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.corners()[faces]
    return ((1.0 - r1)[:, None] * tri[:, 0] + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])
