import logging
import os
import re

import numpy as np

from models.grid import FeatureGrid, IndexGrid
from models.hierarchy import ATTRIBUTE_CHANNELS, AttributeSet, VoxelHierarchy
from utils.errors import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

SVX_MAGIC = b'SVX1'
SVX_VERSION = 1
SVX_HEADER = np.dtype([
    ('magic', 'S4'),
    ('version', '<u4'),
    ('voxel_size', '<f8'),
    ('origin', '<f8', (3,)),
    ('channels', '<u4'),
    ('count', '<u8'),
])
LEVEL_FILE = re.compile(r'^level(\d+)\.svx1$')


class GridRepository:
    """Reads and writes SVX1 grid files and per-level hierarchy directories"""

    @staticmethod
    def encode(fg: FeatureGrid) -> bytes:
        grid = fg.grid
        header = np.zeros(1, dtype=SVX_HEADER)
        header['magic'] = SVX_MAGIC
        header['version'] = SVX_VERSION
        header['voxel_size'] = grid.voxel_size
        header['origin'] = grid.origin
        header['channels'] = fg.channels
        header['count'] = grid.voxel_count
        coords = grid.coords.astype('<i4')
        values = fg.values.astype('<f4')
        return header.tobytes() + coords.tobytes() + values.tobytes()

    @staticmethod
    def decode(data: bytes, source='<bytes>') -> FeatureGrid:
        """
        Parse an SVX1 buffer.

        Raises:
            FormatError: wrong magic, unknown version or truncated payload
        """
        if len(data) < SVX_HEADER.itemsize:
            raise FormatError(f"{source}: truncated SVX1 header")
        header = np.frombuffer(data, dtype=SVX_HEADER, count=1)[0]
        if bytes(header['magic']) != SVX_MAGIC:
            raise FormatError(f"{source}: not an SVX1 file (magic {bytes(header['magic'])!r})")
        if int(header['version']) != SVX_VERSION:
            raise FormatError(f"{source}: unsupported SVX1 version {int(header['version'])}")
        count = int(header['count'])
        channels = int(header['channels'])
        offset = SVX_HEADER.itemsize
        expected = offset + count * 3 * 4 + count * channels * 4
        if len(data) != expected:
            raise FormatError(f"{source}: expected {expected} bytes, found {len(data)}")
        coords = np.frombuffer(data, dtype='<i4', count=count * 3, offset=offset).reshape(count, 3)
        offset += count * 3 * 4
        values = np.frombuffer(data, dtype='<f4', count=count * channels, offset=offset).reshape(count, channels)
        grid = IndexGrid.build_from_coords(coords.astype(np.int64), float(header['voxel_size']),
                                           np.array(header['origin'], dtype=np.float64))
        if grid.voxel_count != count:
            raise FormatError(f"{source}: duplicate coordinates in voxel list")
        # Stored rows follow the writer's index order; realign in case it differs
        rows = grid.lookup(coords.astype(np.int64))
        ordered = np.empty((count, channels), dtype=np.float32)
        ordered[rows] = values
        return FeatureGrid(grid, ordered)

    @staticmethod
    def save(path, data):
        """Write a FeatureGrid or AttributeSet (packed to 5 channels)"""
        fg = data.to_feature_grid() if isinstance(data, AttributeSet) else data
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(GridRepository.encode(fg))
        logger.debug("Wrote %d voxels × %d channels to %s", fg.voxel_count, fg.channels, path)
        return path

    @staticmethod
    def load(path) -> FeatureGrid:
        if not os.path.exists(path):
            raise MissingArtifactError('grid file', path)
        with open(path, 'rb') as f:
            return GridRepository.decode(f.read(), source=path)

    @staticmethod
    def load_attributes(path) -> AttributeSet:
        fg = GridRepository.load(path)
        if fg.channels != ATTRIBUTE_CHANNELS:
            raise FormatError(f"{path}: expected {ATTRIBUTE_CHANNELS} attribute channels, found {fg.channels}")
        return AttributeSet.from_feature_grid(fg)

    @staticmethod
    def save_hierarchy(directory, hierarchy: VoxelHierarchy):
        os.makedirs(directory, exist_ok=True)
        paths = []
        for level, attrs in enumerate(hierarchy.levels):
            paths.append(GridRepository.save(os.path.join(directory, f'level{level}.svx1'), attrs))
        return paths

    @staticmethod
    def load_hierarchy(directory, check=True) -> VoxelHierarchy:
        """Read `level<k>.svx1` files in level order; resolutions come from the voxel sizes"""
        if not os.path.isdir(directory):
            raise MissingArtifactError('hierarchy directory', directory)
        found = sorted((int(m.group(1)), name) for name in os.listdir(directory)
                       for m in [LEVEL_FILE.match(name)] if m)
        if not found:
            raise MissingArtifactError('hierarchy level files', directory)
        if [k for k, _ in found] != list(range(len(found))):
            raise FormatError(f"{directory}: level files are not numbered 0..{len(found) - 1}")
        levels = [GridRepository.load_attributes(os.path.join(directory, name)) for _, name in found]
        hierarchy = VoxelHierarchy(levels, [attrs.grid.resolution for attrs in levels])
        if check:
            hierarchy.check_containment()
        return hierarchy
