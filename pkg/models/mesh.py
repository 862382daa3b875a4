from typing import Optional

import numpy as np

from config import SHAPE_FILL
from utils.errors import ContractError

DEGENERATE_AREA = 1e-14


class TriMesh:
    """Triangle mesh in scene units with an optional per-face semantic label"""

    def __init__(self, vertices, triangles, labels: Optional[np.ndarray] = None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64).reshape(-1)
        if self.labels is not None and self.labels.shape[0] != self.triangles.shape[0]:
            raise ContractError(f"{self.labels.shape[0]} face labels for {self.triangles.shape[0]} faces")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.vertices.shape[0]):
            raise ContractError("Triangle index out of range")

    @property
    def face_count(self):
        return int(self.triangles.shape[0])

    @property
    def vertex_count(self):
        return int(self.vertices.shape[0])

    def is_empty(self):
        return self.face_count == 0

    def corners(self):
        """(F, 3, 3) triangle corner positions"""
        return self.vertices[self.triangles]

    def face_cross(self):
        tri = self.corners()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return cross / np.maximum(norm, 1e-300)

    def face_labels(self):
        return self.labels if self.labels is not None else np.zeros(self.face_count, dtype=np.int64)

    def cleaned(self):
        """Drop zero-area triangles and unreferenced vertices"""
        keep = self.face_areas() > DEGENERATE_AREA
        tris = self.triangles[keep]
        used, inverse = np.unique(tris.reshape(-1), return_inverse=True)
        labels = None if self.labels is None else self.labels[keep]
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), labels)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def normalized(self, fill=SHAPE_FILL):
        """Centre the AABB at the origin and scale its longest side to `fill`"""
        if self.vertex_count == 0:
            raise ContractError("Cannot normalize an empty mesh")
        lo, hi = self.bounds()
        extent = float((hi - lo).max())
        if extent <= 0:
            raise ContractError("Mesh has a zero-size bounding box")
        centre = 0.5 * (lo + hi)
        return TriMesh((self.vertices - centre) * (fill / extent), self.triangles, self.labels)

    def edge_use_counts(self):
        """Unique undirected edges (E, 2) and how many faces use each"""
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(edges, axis=0, return_counts=True)

    def is_watertight(self):
        if self.is_empty():
            return False
        _, counts = self.edge_use_counts()
        return bool(np.all(counts == 2))

    def euler_characteristic(self):
        edges, _ = self.edge_use_counts()
        used = np.unique(self.triangles.reshape(-1)).shape[0]
        return int(used - edges.shape[0] + self.face_count)

    def signed_volume(self):
        tri = self.corners()
        return float(np.einsum('ij,ij->i', tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def transformed(self, matrix):
        return TriMesh(self.vertices @ np.asarray(matrix, dtype=np.float64).T, self.triangles, self.labels)

    def __repr__(self):
        return f"<TriMesh {self.vertex_count} vertices, {self.face_count} faces>"
