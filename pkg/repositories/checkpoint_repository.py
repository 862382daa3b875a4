import json
import logging
import os

import numpy as np

from models.params import ModelParams, ParamTensor
from utils.errors import FormatError, MissingArtifactError
from utils.json_helpers import dumps

logger = logging.getLogger(__name__)

PCK_MAGIC = b'PCK1'


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, dtype, count=1):
        dtype = np.dtype(dtype)
        size = dtype.itemsize * count
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.source}: truncated PCK1 data at byte {self.offset}")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out

    def raw(self, size):
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.source}: truncated PCK1 data at byte {self.offset}")
        out = self.data[self.offset:self.offset + size]
        self.offset += size
        return out


class CheckpointRepository:
    """
    PCK1 parameter checkpoints plus a JSON sidecar for the optimizer step and
    run metadata (config, loss history).
    """

    @staticmethod
    def encode(params: ModelParams) -> bytes:
        chunks = [PCK_MAGIC, np.array([len(params)], dtype='<u4').tobytes()]
        for name, p in params.items():
            encoded = name.encode('utf-8')
            chunks.append(np.array([len(encoded)], dtype='<u4').tobytes())
            chunks.append(encoded)
            chunks.append(np.array([p.value.ndim], dtype='<u4').tobytes())
            chunks.append(np.array(p.value.shape, dtype='<u8').tobytes())
            chunks.append(p.value.astype('<f4').tobytes())
            chunks.append(p.ema.astype('<f4').tobytes())
        return b''.join(chunks)

    @staticmethod
    def decode(data: bytes, dtype=np.float32, source='<bytes>') -> ModelParams:
        reader = _Reader(data, source)
        if reader.raw(4) != PCK_MAGIC:
            raise FormatError(f"{source}: not a PCK1 checkpoint")
        count = int(reader.take('<u4')[0])
        params = ModelParams(dtype)
        for _ in range(count):
            length = int(reader.take('<u4')[0])
            try:
                name = reader.raw(length).decode('utf-8')
            except UnicodeDecodeError as e:
                raise FormatError(f"{source}: corrupt tensor name") from e
            rank = int(reader.take('<u4')[0])
            shape = tuple(int(d) for d in reader.take('<u8', rank))
            size = int(np.prod(shape)) if shape else 1
            value = reader.take('<f4', size).reshape(shape).astype(dtype)
            ema = reader.take('<f4', size).reshape(shape).astype(dtype)
            param = ParamTensor(value)
            param.ema = ema
            params.add(name, param)
        if reader.offset != len(data):
            raise FormatError(f"{source}: {len(data) - reader.offset} trailing bytes")
        return params

    @staticmethod
    def save(path, params: ModelParams, meta=None):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CheckpointRepository.encode(params))
        sidecar = dict(meta or {})
        sidecar['step'] = params.step
        with open(CheckpointRepository.meta_path(path), 'w') as f:
            f.write(dumps(sidecar, indent=2))
        logger.info("Saved %d tensors (%d scalars) to %s", len(params), params.num_scalars(), path)
        return path

    @staticmethod
    def load(path, dtype=np.float32) -> ModelParams:
        if not os.path.exists(path):
            raise MissingArtifactError('checkpoint', path)
        with open(path, 'rb') as f:
            params = CheckpointRepository.decode(f.read(), dtype, source=path)
        meta = CheckpointRepository.load_meta(path)
        params.step = int(meta.get('step', 0))
        params.meta = meta
        return params

    @staticmethod
    def meta_path(path):
        return os.path.splitext(path)[0] + '.json'

    @staticmethod
    def load_meta(path):
        meta_path = CheckpointRepository.meta_path(path)
        if not os.path.exists(meta_path):
            return {}
        try:
            with open(meta_path) as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{meta_path}: invalid checkpoint metadata") from e

    @staticmethod
    def copy_into(target: ModelParams, source: ModelParams):
        """Overwrite a freshly built network's tensors with checkpoint values, matching by name"""
        missing = [name for name in target.names() if name not in source]
        extra = [name for name in source.names() if name not in target]
        if missing or extra:
            raise FormatError(f"Checkpoint does not match the network: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in target.items():
            q = source[name]
            if q.value.shape != p.value.shape:
                raise FormatError(f"Tensor '{name}' has shape {q.value.shape}, network expects {p.value.shape}")
            p.value = q.value.astype(target.dtype)
            p.ema = q.ema.astype(target.dtype)
        target.step = source.step
        target.meta = dict(source.meta)
        return target
