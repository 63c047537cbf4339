"""Small neural-net building blocks on top of the autodiff core.

Layers hold named parameter Tensors; ``Module.parameters`` flattens them
into a ``{dotted.name: Tensor}`` dict which is also the checkpoint schema.
Initialization draws from a caller-supplied seeded Generator so training
runs are reproducible end to end.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Module", "Linear", "MLP", "Adam", "uniform_init"]


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base container: children registered as attributes are traversed."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(prefix=f"{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {tensor.data.shape}"
                )
            tensor.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = ad.parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = ad.parameter(uniform_init(rng, in_dim, (out_dim,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Stack of Linear layers with LeakyReLU between them (not after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, slope: float = 0.01):
        if len(dims) < 2:
            raise ValueError(f"MLP needs at least input and output dims, got {dims}")
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters().values())


class Adam:
    """Adam with bias correction; operates on a fixed parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
