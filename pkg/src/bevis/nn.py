"""Layers shared by the 2D and 3D networks: dense, 3x3 conv, batch norm.

Layers own their parameters as gradient-requiring Tensors and expose them
through ``params()`` (trainable) and ``state()`` (running statistics). The
train/eval distinction is an explicit ``training`` argument; evaluation always
uses frozen running statistics.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.name = name
        self.w = Tensor(he_init(rng, (cin, cout), cin), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.add_bias(ad.matmul(x, self.w), self.b)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def state(self):
        return {}


class Conv3x3:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.name = name
        self.w = Tensor(he_init(rng, (3, 3, cin, cout), 9 * cin), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.conv3x3(x, self.w, self.b)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def state(self):
        return {}


class BatchNorm:
    """Channel-last batch norm with running statistics for inference."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training: bool):
        if training:
            out, mu, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            return out
        return ad.batchnorm_eval(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps
        )

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def state(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def load_state(self, arrays: dict):
        self.running_mean = np.array(arrays[f"{self.name}.running_mean"])
        self.running_var = np.array(arrays[f"{self.name}.running_var"])
        if np.any(self.running_var <= 0):
            raise ValueError(f"{self.name}: running variance must stay positive")


class ConvBnRelu:
    """conv3x3 -> batchnorm -> relu, the standard block of both networks."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv3x3(f"{name}.conv", cin, cout, rng)
        self.bn = BatchNorm(f"{name}.bn", cout)

    def __call__(self, x, training: bool):
        return ad.relu(self.bn(self.conv(x), training))

    def params(self):
        return {**self.conv.params(), **self.bn.params()}

    def state(self):
        return self.bn.state()


class DenseBnRelu:
    """dense -> batchnorm -> relu, the shared edge/head MLP block."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.dense = Dense(f"{name}.dense", cin, cout, rng)
        self.bn = BatchNorm(f"{name}.bn", cout)

    def __call__(self, x, training: bool):
        return ad.relu(self.bn(self.dense(x), training))

    def params(self):
        return {**self.dense.params(), **self.bn.params()}

    def state(self):
        return self.bn.state()


def merge_params(*layers) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for layer in layers:
        out.update(layer.params())
    return out


def merge_state(*layers) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for layer in layers:
        out.update(layer.state())
    return out


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class loss weights: negative log of the class frequency.

    Frequencies are clamped to [1e-6, 1 - 1e-6] so weights stay finite and
    strictly positive even for absent or dominant classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    freq = counts / max(labels.size, 1)
    freq = np.clip(freq, 1e-6, 1.0 - 1e-6)
    return -np.log(freq)
