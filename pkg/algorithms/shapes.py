import logging
from typing import List

import numpy as np

from config import SEMANTIC_CLASSES, SHAPE_FILL
from models.mesh import TriMesh
from utils.errors import ContractError

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ('boxes', 'spheres', 'box-unions', 'L-shapes')

# Outward-facing quads of a unit cell per axis direction, as (axis, sign, corner offsets)
_FACE_QUADS = {
    (0, -1): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
    (0, +1): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
    (1, -1): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
    (1, +1): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
    (2, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
    (2, +1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
}


def box_mesh(lo, hi, label=0) -> TriMesh:
    """Closed 12-triangle axis-aligned box with outward normals"""
    return union_of_boxes([(lo, hi)], labels=[label])


def icosphere(subdivisions=3, radius=1.0, label_split=True) -> TriMesh:
    """
    Unit icosahedron refined `subdivisions` times and projected onto the sphere.

    With label_split the upper hemisphere (z > 0) gets label 1, the rest 0.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        unique_edges, inverse = np.unique(edges, axis=0, return_inverse=True)
        mids = verts[unique_edges].mean(axis=1)
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        mid_index = inverse.reshape(-1, 3) + verts.shape[0]
        verts = np.concatenate([verts, mids])
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mid_index[:, 0], mid_index[:, 1], mid_index[:, 2]
        faces = np.concatenate([
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ])

    labels = None
    if label_split:
        labels = (verts[faces].mean(axis=1)[:, 2] > 0).astype(np.int64)
    return TriMesh(verts * radius, faces, labels)


def union_of_boxes(boxes, labels=None) -> TriMesh:
    """
    Boundary of a union of axis-aligned boxes as a closed triangle mesh.

    The boxes' face coordinates split space into a rectilinear cell grid; the
    surface is every cell face between an occupied and an empty cell, built on
    shared grid vertices so the result has no cracks. A boundary face takes
    the label of the first box containing its occupied cell.
    """
    boxes = [(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)) for lo, hi in boxes]
    labels = list(range(len(boxes))) if labels is None else list(labels)
    breaks = [np.unique(np.concatenate([[lo[a], hi[a]] for lo, hi in boxes])) for a in range(3)]
    centres = [0.5 * (b[:-1] + b[1:]) for b in breaks]
    shape = tuple(len(c) for c in centres)

    owner = np.full(shape, -1, dtype=np.int64)
    cx, cy, cz = np.meshgrid(*centres, indexing='ij')
    for k in reversed(range(len(boxes))):
        lo, hi = boxes[k]
        inside = ((cx > lo[0]) & (cx < hi[0]) & (cy > lo[1]) & (cy < hi[1]) & (cz > lo[2]) & (cz < hi[2]))
        owner[inside] = k
    occupied = np.pad(owner >= 0, 1)

    quads, quad_labels = [], []
    cells = np.argwhere(owner >= 0)
    for (axis, sign), corners in _FACE_QUADS.items():
        step = np.zeros(3, dtype=np.int64)
        step[axis] = sign
        nb = cells + 1 + step
        exposed = ~occupied[nb[:, 0], nb[:, 1], nb[:, 2]]
        for cell in cells[exposed]:
            quads.append([tuple(cell + np.array(c)) for c in corners])
            quad_labels.append(labels[owner[tuple(cell)]])

    if not quads:
        raise ContractError("Box union has no volume")
    corner_idx = np.array(quads, dtype=np.int64).reshape(-1, 3)
    unique_corners, inverse = np.unique(corner_idx, axis=0, return_inverse=True)
    verts = np.stack([breaks[a][unique_corners[:, a]] for a in range(3)], axis=1)
    q = inverse.reshape(-1, 4)
    faces = np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])
    face_labels = np.concatenate([quad_labels, quad_labels])
    return TriMesh(verts, faces, face_labels)


def _random_box(rng, centre_spread=0.25, size_range=(0.2, 0.6)):
    centre = rng.uniform(-centre_spread, centre_spread, 3)
    half = 0.5 * rng.uniform(*size_range, 3)
    return centre - half, centre + half


def _make_shape(family, rng) -> TriMesh:
    if family == 'boxes':
        lo, hi = _random_box(rng, centre_spread=0.0, size_range=(0.3, 1.0))
        return union_of_boxes([(lo, hi)], labels=[int(rng.integers(SEMANTIC_CLASSES))])
    if family == 'spheres':
        sphere = icosphere(subdivisions=3)
        radii = rng.uniform(0.5, 1.0, 3)
        return TriMesh(sphere.vertices * radii, sphere.triangles, sphere.labels)
    if family == 'box-unions':
        count = int(rng.integers(2, 5))
        boxes = [_random_box(rng) for _ in range(count)]
        # Chain each box to the previous one so the union stays connected
        for k in range(1, count):
            lo, hi = boxes[k]
            plo, phi_ = boxes[k - 1]
            anchor = rng.uniform(plo, phi_)
            shift = anchor - 0.5 * (lo + hi)
            boxes[k] = (lo + shift, hi + shift)
        return union_of_boxes(boxes, labels=[k % SEMANTIC_CLASSES for k in range(count)])
    if family == 'L-shapes':
        length = rng.uniform(0.6, 1.0)
        thick = rng.uniform(0.15, 0.35, 2)
        height = rng.uniform(0.4, 1.0)
        base = (np.array([0.0, 0.0, 0.0]), np.array([length, thick[0], height]))
        arm = (np.array([0.0, 0.0, 0.0]), np.array([thick[1], length, height]))
        mesh = union_of_boxes([base, arm], labels=[0, 1])
        axes = rng.permutation(3)
        return TriMesh(mesh.vertices[:, axes], mesh.triangles if np.linalg.det(np.eye(3)[axes]) > 0
                       else mesh.triangles[:, ::-1], mesh.labels)
    raise ContractError(f"Unknown shape family '{family}', expected one of {SHAPE_FAMILIES}")


def procedural_dataset(family, count, seed=0) -> List[TriMesh]:
    """
    Deterministic list of `count` meshes of one family, each normalized so its
    longest bounding-box side is 0.9 and its box is centred at the origin.

    Raises:
        ContractError: unknown family or count < 1
    """
    if family not in SHAPE_FAMILIES:
        raise ContractError(f"Unknown shape family '{family}', expected one of {SHAPE_FAMILIES}")
    if count < 1:
        raise ContractError("Dataset needs at least one shape")
    meshes = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        meshes.append(_make_shape(family, rng).normalized(SHAPE_FILL))
    logger.debug("Generated %d '%s' shapes (seed %d)", count, family, seed)
    return meshes
