"""Adam with exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamConfig:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 0.7
    decay_interval: int = 5000


class Adam:
    """Adam over a named parameter dict.

    The effective learning rate is ``base_lr * decay_rate ** (step / decay_interval)``
    with the pre-increment step count, i.e. the first step runs at ``base_lr``.
    """

    def __init__(self, params: dict[str, Tensor], cfg: AdamConfig | None = None):
        self.params = params
        self.cfg = cfg or AdamConfig()
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr(self) -> float:
        c = self.cfg
        return c.base_lr * c.decay_rate ** (self.step_count / c.decay_interval)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        lr = self.lr()
        self.step_count += 1
        t = self.step_count
        c = self.cfg
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + c.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Optimizer state as named arrays for the checkpoint container."""
        out = {"adam.step": np.array(float(self.step_count))}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["adam.step"])
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])
