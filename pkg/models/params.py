from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from algorithms.autograd import Tensor
from utils.errors import ContractError


class ParamTensor(Tensor):
    """A trainable leaf tensor with an EMA shadow and Adam moment slots"""

    def __init__(self, value, name=None):
        super().__init__(np.array(value), requires_grad=True, name=name)
        self.ema = self.value.copy()
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


class ModelParams:
    """
    Named parameter store shared by a network's layers.

    Names are registered in creation order, which is also the order the
    checkpoint writer uses.
    """

    def __init__(self, dtype=np.float32, seed=0):
        self._params = OrderedDict()
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.meta = {}

    def create(self, name, shape, init='zeros', fan_in=None):
        if name in self._params:
            raise ContractError(f"Parameter '{name}' registered twice")
        if init == 'zeros':
            value = np.zeros(shape)
        elif init == 'ones':
            value = np.ones(shape)
        elif init == 'normal':
            fan = fan_in or (shape[0] if len(shape) > 1 else 1)
            value = self.rng.normal(0.0, 1.0 / np.sqrt(max(1, fan)), size=shape)
        else:
            raise ContractError(f"Unknown initialiser '{init}'")
        param = ParamTensor(value.astype(self.dtype), name=name)
        self._params[name] = param
        return param

    def add(self, name, param):
        if name in self._params:
            raise ContractError(f"Parameter '{name}' registered twice")
        param.name = name
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def num_scalars(self):
        return int(sum(p.value.size for p in self._params.values()))

    def grad_norm(self):
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def astype(self, dtype):
        """Cast values (and shadows) in place, e.g. to f64 for gradient checks"""
        self.dtype = np.dtype(dtype)
        for p in self._params.values():
            p.value = p.value.astype(dtype)
            p.ema = p.ema.astype(dtype)
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
            p.grad = None
        return self

    @contextmanager
    def ema_weights(self):
        """Temporarily swap EMA shadows in as live values"""
        saved = {name: p.value for name, p in self._params.items()}
        for p in self._params.values():
            p.value = p.ema.copy()
        try:
            yield self
        finally:
            for name, p in self._params.items():
                p.value = saved[name]

    def __repr__(self):
        return f"<ModelParams {len(self)} tensors, {self.num_scalars()} scalars>"
