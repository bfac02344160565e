"""Parameter init and small building blocks shared by encoder and decoder."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamInit:
    """Creates named parameters in a fixed order from one seeded generator."""

    def __init__(self, params: dict, rng: np.random.Generator, std: float = 0.02):
        self.params = params
        self.rng = rng
        self.std = std

    def normal(self, name: str, shape, std=None) -> Tensor:
        std = self.std if std is None else std
        p = T.parameter(self.rng.normal(0.0, std, shape), name=name)
        self.params[name] = p
        return p

    def zeros(self, name: str, shape) -> Tensor:
        p = T.parameter(np.zeros(shape), name=name)
        self.params[name] = p
        return p

    def ones(self, name: str, shape) -> Tensor:
        p = T.parameter(np.ones(shape), name=name)
        self.params[name] = p
        return p

    def linear(self, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
        self.normal(f"{name}.w", (d_in, d_out), std=1.0 / math.sqrt(d_in))
        if bias:
            self.zeros(f"{name}.b", (d_out,))

    def layer_norm(self, name: str, d: int) -> None:
        self.ones(f"{name}.g", (d,))
        self.zeros(f"{name}.b", (d,))


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    y = T.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else T.add_bias(y, b)


def norm(x: Tensor, params: dict, name: str) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """B x n x D -> B x H x n x D/H."""
    B, n, D = x.shape
    return T.transpose(T.reshape(x, (B, n, n_heads, D // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    B, H, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, H * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention over B x H x n x dh tensors.

    ``mask`` is boolean and broadcastable to B x H x n_q x n_k; False hides a key.
    """
    dh = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    return T.matmul(T.softmax(logits, mask), v)


def feed_forward(x: Tensor, params: dict, name: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")
