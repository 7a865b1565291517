"""A built network: module tree, parameter store and its config."""

import numpy as np

from ..errors import ShapeError
from .layers import ParamStore


class Network:
    def __init__(self, module, config, input_shape, seed=0, dtype=np.float32):
        self.module = module
        self.config = dict(config)
        self.input_shape = tuple(input_shape)
        self.store = ParamStore()
        self._dtype = np.dtype(dtype)
        module.register(self.store, "", np.random.default_rng(seed), dtype)
        self.output_shape = module.output_shape(self.input_shape)

    @property
    def dtype(self):
        for p in self.store.params.values():
            return p.value.dtype
        return self._dtype

    def train(self, mode=True):
        self.module.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x, record=False):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects input (batch, {self.input_shape}), got {x.shape}")
        return self.module.forward(np.ascontiguousarray(x, dtype=self.dtype), record)

    __call__ = forward

    def backward(self, gy, need_input=False):
        return self.module.backward(np.ascontiguousarray(gy, dtype=self.dtype), need_input)

    def num_params(self):
        return sum(p.value.size for _, p in self.store)
