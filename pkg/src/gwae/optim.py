"""Gradient-based optimizers over named parameter dictionaries.

Parameter tensors are updated in place; optimizer buffers are exposed
for checkpointing so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Gradients, Tensor


class RMSProp:
    """Running mean-square scaling, used for the main model and critic."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.square_avg = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Gradients) -> None:
        for name, p in self.params.items():
            g = grads.of(p)
            s = self.square_avg[name]
            s *= self.alpha
            s += (1.0 - self.alpha) * g * g
            p.data -= self.lr * g / (np.sqrt(s) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/sq/{k}": v for k, v in self.square_avg.items()}

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for k in self.square_avg:
            self.square_avg[k] = arrays[f"{prefix}/sq/{k}"].copy()


class Adam:
    """Adam with bias correction, used by the ELBO/MMD baselines."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Gradients) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.of(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        out[f"{prefix}/t"] = np.asarray(float(self.t))
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = arrays[f"{prefix}/m/{k}"].copy()
            self.v[k] = arrays[f"{prefix}/v/{k}"].copy()
        self.t = int(arrays[f"{prefix}/t"])
