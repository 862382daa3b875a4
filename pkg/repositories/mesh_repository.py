import logging
import os
import re

import numpy as np

from models.mesh import TriMesh
from utils.errors import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

LABEL_GROUP = re.compile(r'^label_(\d+)$')
PLY_TYPES = {
    'char': 'i1', 'int8': 'i1', 'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2', 'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4', 'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4', 'double': 'f8', 'float64': 'f8',
}


def _require(path, artifact):
    if not os.path.exists(path):
        raise MissingArtifactError(artifact, path)


class MeshRepository:
    """OBJ and binary PLY meshes plus the `labels.txt` semantic palette"""

    @staticmethod
    def load(path) -> TriMesh:
        ext = os.path.splitext(path)[1].lower()
        if ext == '.obj':
            return MeshRepository.load_obj(path)
        if ext == '.ply':
            return MeshRepository.load_ply(path)
        raise FormatError(f"{path}: unsupported mesh extension '{ext}'")

    @staticmethod
    def load_obj(path) -> TriMesh:
        """
        Read `v` and `f` records; polygons are fan-triangulated and `g label_<k>`
        groups become face labels.
        """
        _require(path, 'mesh file')
        verts, faces, labels = [], [], []
        label = 0
        has_labels = False
        with open(path, encoding='utf-8', errors='replace') as f:
            for number, line in enumerate(f, start=1):
                parts = line.split()
                if not parts or parts[0].startswith('#'):
                    continue
                try:
                    if parts[0] == 'v':
                        verts.append([float(v) for v in parts[1:4]])
                    elif parts[0] == 'f':
                        idx = []
                        for token in parts[1:]:
                            k = int(token.split('/')[0])
                            idx.append(k - 1 if k > 0 else len(verts) + k)
                        for j in range(1, len(idx) - 1):
                            faces.append((idx[0], idx[j], idx[j + 1]))
                            labels.append(label)
                    elif parts[0] == 'g' and len(parts) > 1:
                        match = LABEL_GROUP.match(parts[1])
                        if match:
                            label = int(match.group(1))
                            has_labels = True
                except (ValueError, IndexError) as e:
                    raise FormatError(f"{path}:{number}: malformed '{parts[0]}' record") from e
        if not verts:
            raise FormatError(f"{path}: no vertices")
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise FormatError(f"{path}: face index out of range")
        return TriMesh(np.array(verts, dtype=np.float64), faces,
                       np.array(labels, dtype=np.int64) if has_labels else None)

    @staticmethod
    def save_obj(path, mesh: TriMesh):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        labels = mesh.face_labels()
        with open(path, 'w') as f:
            f.write(f"# {mesh.vertex_count} vertices, {mesh.face_count} faces\n")
            for v in mesh.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            current = None
            for tri, label in zip(mesh.triangles + 1, labels):
                if mesh.labels is not None and label != current:
                    f.write(f"g label_{int(label)}\n")
                    current = label
                f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
        logger.debug("Wrote %d faces to %s", mesh.face_count, path)
        return path

    @staticmethod
    def _ply_header(f, path):
        if f.readline().strip() != b'ply':
            raise FormatError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: PLY header has no end_header")
            parts = line.decode('ascii', errors='replace').split()
            if not parts or parts[0] in ('comment', 'obj_info'):
                continue
            if parts[0] == 'end_header':
                break
            if parts[0] == 'format':
                fmt = parts[1]
            elif parts[0] == 'element':
                elements.append({'name': parts[1], 'count': int(parts[2]), 'props': []})
            elif parts[0] == 'property':
                if not elements:
                    raise FormatError(f"{path}: property before element")
                if parts[1] == 'list':
                    elements[-1]['props'].append((parts[4], 'list', PLY_TYPES[parts[2]], PLY_TYPES[parts[3]]))
                else:
                    elements[-1]['props'].append((parts[2], 'scalar', PLY_TYPES[parts[1]], None))
        if fmt not in ('binary_little_endian', 'binary_big_endian'):
            raise FormatError(f"{path}: only binary PLY is supported, got '{fmt}'")
        return ('<' if fmt == 'binary_little_endian' else '>'), elements

    @staticmethod
    def load_ply(path) -> TriMesh:
        """Binary PLY with x/y/z vertices and a vertex_indices face list (optional int `label` per face)"""
        _require(path, 'mesh file')
        with open(path, 'rb') as f:
            try:
                endian, elements = MeshRepository._ply_header(f, path)
            except KeyError as e:
                raise FormatError(f"{path}: unknown PLY property type {e}") from e
            body = f.read()

        offset = 0
        verts, faces, labels = None, [], None
        for element in elements:
            props = element['props']
            count = element['count']
            if all(kind == 'scalar' for _, kind, _, _ in props):
                dtype = np.dtype([(name, endian + t) for name, _, t, _ in props])
                if offset + dtype.itemsize * count > len(body):
                    raise FormatError(f"{path}: truncated '{element['name']}' element")
                table = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
                offset += dtype.itemsize * count
                if element['name'] == 'vertex':
                    verts = np.stack([table['x'], table['y'], table['z']], axis=1).astype(np.float64)
                continue
            if element['name'] == 'face' and not any(
                    name in ('vertex_indices', 'vertex_index') for name, kind, _, _ in props if kind == 'list'):
                raise FormatError(f"{path}: face element without vertex_indices")
            try:
                offset, rows = MeshRepository._read_list_element(body, offset, count, props, endian)
            except (ValueError, IndexError) as e:
                raise FormatError(f"{path}: truncated '{element['name']}' element") from e
            if element['name'] == 'face':
                faces, face_labels = [], []
                for row in rows:
                    idx = row.get('vertex_indices', row.get('vertex_index'))
                    for j in range(1, len(idx) - 1):
                        faces.append((int(idx[0]), int(idx[j]), int(idx[j + 1])))
                        face_labels.append(int(row.get('label', 0)))
                if any(name == 'label' for name, _, _, _ in props):
                    labels = np.array(face_labels, dtype=np.int64)
        if verts is None:
            raise FormatError(f"{path}: no vertex element")
        return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), labels)

    @staticmethod
    def _read_list_element(body, offset, count, props, endian):
        rows = []
        for _ in range(count):
            row = {}
            for name, kind, t, t_item in props:
                if kind == 'list':
                    n = int(np.frombuffer(body, dtype=endian + t, count=1, offset=offset)[0])
                    offset += np.dtype(t).itemsize
                    row[name] = np.frombuffer(body, dtype=endian + t_item, count=n, offset=offset)
                    offset += np.dtype(t_item).itemsize * n
                else:
                    row[name] = np.frombuffer(body, dtype=endian + t, count=1, offset=offset)[0]
                    offset += np.dtype(t).itemsize
            rows.append(row)
        return offset, rows

    @staticmethod
    def save_ply(path, mesh: TriMesh):
        """Binary little-endian PLY; face labels are written as an int property"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        header = [
            'ply', 'format binary_little_endian 1.0',
            f'element vertex {mesh.vertex_count}',
            'property double x', 'property double y', 'property double z',
            f'element face {mesh.face_count}',
            'property list uchar int vertex_indices',
        ]
        if mesh.labels is not None:
            header.append('property int label')
        header.append('end_header')
        face_fields = [('n', 'u1'), ('idx', '<i4', (3,))]
        if mesh.labels is not None:
            face_fields.append(('label', '<i4'))
        face_table = np.zeros(mesh.face_count, dtype=np.dtype(face_fields))
        face_table['n'] = 3
        face_table['idx'] = mesh.triangles
        if mesh.labels is not None:
            face_table['label'] = mesh.labels
        with open(path, 'wb') as f:
            f.write(('\n'.join(header) + '\n').encode('ascii'))
            f.write(mesh.vertices.astype('<f8').tobytes())
            f.write(face_table.tobytes())
        return path

    @staticmethod
    def save(path, mesh: TriMesh):
        ext = os.path.splitext(path)[1].lower()
        if ext == '.ply':
            return MeshRepository.save_ply(path, mesh)
        return MeshRepository.save_obj(path, mesh)

    @staticmethod
    def load_labels(path):
        """`labels.txt` palette: one `id name` pair per line"""
        _require(path, 'label palette')
        palette = {}
        with open(path, encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith('#'):
                    continue
                key, _, name = line.partition(' ')
                try:
                    palette[int(key)] = name.strip()
                except ValueError as e:
                    raise FormatError(f"{path}:{number}: expected '<id> <name>'") from e
        return palette

    @staticmethod
    def save_labels(path, palette):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for key in sorted(palette):
                f.write(f"{int(key)} {palette[key]}\n")
        return path
