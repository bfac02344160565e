"""Bidirectional InfoNCE alignment of image and answer embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    alpha: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("temperature must be positive")
        if self.alpha < 0:
            raise ContractError("loss weight must be non-negative")


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def similarity_logits(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """N x N matrix of cosine similarities divided by tau."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if x.shape != y.shape or x.ndim != 2:
        raise ContractError(f"embedding batches must be N x d, got {x.shape} and {y.shape}")
    xn, yn = T.l2_normalize(x), T.l2_normalize(y)
    return T.scale(T.pairwise_dot(xn, yn), 1.0 / tau)


def info_nce_directional(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """Mean over rows i of -log softmax_j(<x_i, y_j>/tau)[i]."""
    logits = similarity_logits(x, y, tau)
    return T.cross_entropy(logits, np.arange(x.shape[0]))


def encoder_loss(x: Tensor, y: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """alpha * (L_{x->y} + L_{y->x})."""
    logits = similarity_logits(x, y, cfg.tau)
    targets = np.arange(x.shape[0])
    fwd = T.cross_entropy(logits, targets)
    rev = T.cross_entropy(T.transpose(logits), targets)
    return T.scale(T.add(fwd, rev), cfg.alpha)


def directional_from_similarity(sim: np.ndarray, tau: float) -> float:
    """Plain-numpy loss for a precomputed similarity matrix (row i = anchor i)."""
    z = np.asarray(sim, dtype=np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(logp)))
