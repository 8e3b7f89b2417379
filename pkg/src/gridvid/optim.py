"""Adam over named parameter dicts.

Parameter iteration is sorted by name so update order (and therefore float
rounding) is deterministic across runs. Moment state is float32 like the
parameters; bias corrections are applied in float64 inside the kernel.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import NonFiniteError


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    state: dict = field(default_factory=dict)

    def step(self, params):
        """Apply one update to every param with a gradient; clears nothing."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            if not p.requires_grad or p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = (np.zeros_like(p.data), np.zeros_like(p.data))
                self.state[name] = st
            m, v = st
            flag = kernels.adam_step(
                p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                m.reshape(-1), v.reshape(-1),
                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)
            if flag:
                raise NonFiniteError(f"non-finite gradient or parameter in {name}")

    def zero_grad(self, params):
        for p in params.values():
            p.grad = None

    def state_arrays(self):
        """Named flat views of optimizer state, for checkpointing."""
        out = {}
        for name in sorted(self.state):
            m, v = self.state[name]
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out
