"""Adam with per-step multiplicative learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class OptimizerState:
    lr: float
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


class Adam:
    """Adam over a named parameter dictionary.

    The learning rate used at step t is ``lr * decay**(t - 1)``.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, decay: float = 1.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, decay=decay, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] = None) -> None:
        """Apply one update.

        Args:
            grads: optional name -> gradient map; defaults to each parameter's
                accumulated ``.grad`` (missing gradients count as zero).
        """
        st = self.state
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = st.m[name] = b1 * st.m[name] + (1.0 - b1) * g
            v = st.v[name] = b2 * st.v[name] + (1.0 - b2) * (g * g)
            update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            new = (p.data - update).astype(p.data.dtype, copy=False)
            new.flags.writeable = False
            p.data = new
        st.lr *= st.decay
