"""Image patch encoder, transformer text encoder, bilinear attention fusion
and projection into the shared embedding space.

All functions operate on batches: images are B x H x W, token ids B x n
with a matching 0/1 padding mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .layers import ParamInit, attend, feed_forward, linear, merge_heads, norm, split_heads
from .tensor import Tensor


@dataclass
class EncoderConfig:
    vocab_size: int
    image_size: int = 16
    patch_size: int = 4
    d_x: int = 32
    d_q: int = 32
    d: int = 16
    glimpses: int = 2
    rank: int = 8
    text_layers: int = 2
    text_heads: int = 2
    max_len: int = 200
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be a multiple of patch_size")
        if self.glimpses < 1 or self.d < 2:
            raise ContractError("need glimpses >= 1 and d >= 2")
        if self.d_q % self.text_heads:
            raise ContractError("d_q must be divisible by text_heads")

    @property
    def n_x(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def init_encoder(cfg: EncoderConfig, init: ParamInit) -> None:
    p2 = cfg.patch_size**2
    init.linear("enc.patch", p2, cfg.d_x)
    init.normal("enc.patch_pos", (cfg.n_x, cfg.d_x))
    init.layer_norm("enc.img_ln", cfg.d_x)
    init.linear("enc.img_ffn.fc1", cfg.d_x, cfg.ffn_mult * cfg.d_x)
    init.linear("enc.img_ffn.fc2", cfg.ffn_mult * cfg.d_x, cfg.d_x)
    init.normal("enc.tok", (cfg.vocab_size, cfg.d_q))
    init.normal("enc.pos", (cfg.max_len, cfg.d_q))
    for i in range(cfg.text_layers):
        pre = f"enc.text{i}"
        init.layer_norm(f"{pre}.ln1", cfg.d_q)
        for w in ("q", "k", "v", "o"):
            init.linear(f"{pre}.{w}", cfg.d_q, cfg.d_q)
        init.layer_norm(f"{pre}.ln2", cfg.d_q)
        init.linear(f"{pre}.ffn.fc1", cfg.d_q, cfg.ffn_mult * cfg.d_q)
        init.linear(f"{pre}.ffn.fc2", cfg.ffn_mult * cfg.d_q, cfg.d_q)
    init.layer_norm("enc.text_ln", cfg.d_q)
    for g in range(cfg.glimpses):
        init.linear(f"enc.ban{g}.u", cfg.d_x, cfg.rank, bias=False)
        init.linear(f"enc.ban{g}.v", cfg.d_q, cfg.rank, bias=False)
        init.linear(f"enc.ban{g}.w", cfg.rank, cfg.d_x, bias=False)
    init.linear("enc.proj_img", cfg.d_x, cfg.d, bias=False)
    init.linear("enc.proj_txt", cfg.d_q, cfg.d, bias=False)


def augment_image(img: np.ndarray, seed: int = 0, train: bool = False, mean: float = 0.5,
                  std: float = 0.5, erase_prob: float = 0.5) -> np.ndarray:
    """Scale to [0, 1], standardize, and (train only) maybe zero one rectangle."""
    out = (np.asarray(img, dtype=np.float64) / 255.0 - mean) / std
    if not train:
        return out
    rng = np.random.default_rng(seed)
    if rng.random() < erase_prob:
        H, W = out.shape
        h = int(rng.integers(1, max(1, H // 2) + 1))
        w = int(rng.integers(1, max(1, W // 2) + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        out[top: top + h, left: left + w] = 0.0
    return out


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """B x H x W -> B x n_x x p*p, patches in row-major order."""
    B, H, W = images.shape
    if H % p or W % p or H < p or W < p:
        raise DimensionError(f"image {H}x{W} is not divisible into {p}x{p} patches")
    x = images.reshape(B, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, (H // p) * (W // p), p * p)


def encode_image(images: np.ndarray, params: dict, cfg: EncoderConfig) -> Tensor:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    patches = patchify(images, cfg.patch_size)
    pos = params["enc.patch_pos"]
    if patches.shape[1] != pos.shape[0]:
        raise DimensionError(f"{patches.shape[1]} patches but {pos.shape[0]} position rows")
    out = T.add_bias(linear(Tensor(patches), params, "enc.patch"), pos)
    return out[0] if single else out


def refine_image(X: Tensor, params: dict) -> Tensor:
    """Residual per-patch MLP; rows stay tied to their patches."""
    return T.add(X, feed_forward(norm(X, params, "enc.img_ln"), params, "enc.img_ffn"))


def _key_mask(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask, dtype=bool)[:, None, None, :]


def encode_text(ids: np.ndarray, mask: np.ndarray, params: dict, cfg: EncoderConfig) -> Tensor:
    """Bidirectional transformer over token ids; PAD keys are masked out."""
    ids = np.asarray(ids, dtype=np.int64)
    B, n = ids.shape
    if n > cfg.max_len:
        raise ContractError(f"text of {n} tokens exceeds the {cfg.max_len}-token cap")
    x = T.add_bias(T.take(params["enc.tok"], ids), params["enc.pos"][:n])
    kmask = _key_mask(mask)
    H = cfg.text_heads
    for i in range(cfg.text_layers):
        pre = f"enc.text{i}"
        h = norm(x, params, f"{pre}.ln1")
        q, k, v = (split_heads(linear(h, params, f"{pre}.{w}"), H) for w in "qkv")
        x = T.add(x, linear(merge_heads(attend(q, k, v, kmask)), params, f"{pre}.o"))
        x = T.add(x, feed_forward(norm(x, params, f"{pre}.ln2"), params, f"{pre}.ffn"))
    return norm(x, params, "enc.text_ln")


def ban_fuse(X: Tensor, Q: Tensor, q_mask: np.ndarray, params: dict, cfg: EncoderConfig,
             return_attention: bool = False):
    """Fuse question features into the image grid with low-rank bilinear attention.

    Every glimpse computes its attention map from the unfused image features;
    the pooled question context of each glimpse is added residually.
    """
    q_mask = np.asarray(q_mask, dtype=bool)
    if not np.all(q_mask.any(axis=-1)):
        raise ContractError("question with no non-PAD tokens")
    r = params["enc.ban0.u.w"].shape[1]
    scale = 1.0 / math.sqrt(r)
    out = X
    maps = []
    for g in range(cfg.glimpses):
        xu = linear(X, params, f"enc.ban{g}.u")
        qv = linear(Q, params, f"enc.ban{g}.v")
        logits = T.scale(T.matmul(xu, T.transpose(qv, (0, 2, 1))), scale)
        att = T.softmax(logits, q_mask[:, None, :])
        maps.append(att)
        pooled = linear(T.matmul(att, qv), params, f"enc.ban{g}.w")
        out = T.add(out, pooled)
    return (out, maps) if return_attention else out


def project_embed(feats: Tensor, mask, params: dict, name: str) -> Tensor:
    """Masked mean over rows, bias-free linear map, then unit L2 norm."""
    if feats.shape[-2] < 1:
        raise ContractError("project_embed needs at least one row")
    if mask is None:
        mask = np.ones(feats.shape[:-1])
    pooled = T.masked_mean(feats, mask)
    return T.l2_normalize(linear(pooled, params, name))
