"""Autoregressive decoder conditioned on image features and prior context.

Each block's self-attention sees three key/value streams: the token states
themselves (causally masked), the fused image grid and the embedded prior
context.  The two conditioning streams are visible from every position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD
from .errors import ContractError, DimensionError
from .layers import ParamInit, attend, feed_forward, linear, merge_heads, norm, split_heads
from .tensor import Tensor


@dataclass
class DecoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    width: int = 64
    max_len: int = 200
    d_x: int = 32
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError("decoder width must be divisible by heads")
        if self.max_len < 5:
            raise ContractError("max_len must be >= 5")

    @property
    def d_c(self) -> int:
        return self.width


@dataclass
class GenerationConstraints:
    min_len: int = 5
    no_repeat_ngram: int = 2
    max_tokens: int = 200
    beam: int = 1

    def __post_init__(self):
        if self.min_len < 0 or self.min_len >= self.max_tokens:
            raise ContractError("need 0 <= min_len < max_tokens")
        if self.no_repeat_ngram < 0 or self.beam < 1:
            raise ContractError("no_repeat_ngram must be >= 0 and beam >= 1")


def init_decoder(cfg: DecoderConfig, init: ParamInit) -> None:
    D = cfg.width
    init.normal("dec.tok", (cfg.vocab_size, D))
    init.normal("dec.pos", (cfg.max_len, D))
    for i in range(cfg.layers):
        pre = f"dec.block{i}"
        init.layer_norm(f"{pre}.ln1", D)
        for w in ("q", "k", "v"):
            init.linear(f"{pre}.{w}", D, D)
        init.linear(f"{pre}.kx", cfg.d_x, D, bias=False)
        init.linear(f"{pre}.vx", cfg.d_x, D, bias=False)
        init.linear(f"{pre}.kc", cfg.d_c, D, bias=False)
        init.linear(f"{pre}.vc", cfg.d_c, D, bias=False)
        init.linear(f"{pre}.o", D, D)
        init.layer_norm(f"{pre}.ln2", D)
        init.linear(f"{pre}.ffn.fc1", D, cfg.ffn_mult * D)
        init.linear(f"{pre}.ffn.fc2", cfg.ffn_mult * D, D)
    init.layer_norm("dec.ln_f", D)


def _rows(t: Optional[Tensor]) -> int:
    return 0 if t is None else t.shape[1]


def multimodal_attention(Y: Tensor, X: Optional[Tensor], C: Optional[Tensor], params: dict,
                         prefix: str, n_heads: int, causal_mask=None, x_mask=None,
                         c_mask=None) -> Tensor:
    """Attention of token states Y (B x n_y x D) over [Y; X; C] keys/values.

    ``causal_mask`` (n_y x n_y boolean, default lower-triangular) applies to
    the Y-Y block only.  ``x_mask``/``c_mask`` (B x n) hide padded rows.
    """
    B, n_y, _ = Y.shape
    if causal_mask is None:
        causal_mask = np.tril(np.ones((n_y, n_y), dtype=bool))
    causal_mask = np.asarray(causal_mask, dtype=bool)
    if causal_mask.shape != (n_y, n_y):
        raise DimensionError(f"causal mask {causal_mask.shape} for {n_y} token rows")
    keys = [linear(Y, params, f"{prefix}.k")]
    vals = [linear(Y, params, f"{prefix}.v")]
    masks = [np.broadcast_to(causal_mask, (B, n_y, n_y))]
    for tag, S, m in (("x", X, x_mask), ("c", C, c_mask)):
        if S is None or S.shape[1] == 0:
            continue
        if S.shape[0] != B:
            raise DimensionError(f"conditioning batch {S.shape[0]} vs token batch {B}")
        keys.append(T.matmul(S, params[f"{prefix}.k{tag}.w"]))
        vals.append(T.matmul(S, params[f"{prefix}.v{tag}.w"]))
        m = np.ones(S.shape[:2], dtype=bool) if m is None else np.asarray(m, dtype=bool)
        if m.shape != S.shape[:2]:
            raise DimensionError(f"{tag} mask {m.shape} vs rows {S.shape[:2]}")
        masks.append(np.broadcast_to(m[:, None, :], (B, n_y, m.shape[1])))
    K = keys[0] if len(keys) == 1 else T.concat(keys, axis=1)
    V = vals[0] if len(vals) == 1 else T.concat(vals, axis=1)
    mask = np.concatenate(masks, axis=2)[:, None]
    q = split_heads(linear(Y, params, f"{prefix}.q"), n_heads)
    out = attend(q, split_heads(K, n_heads), split_heads(V, n_heads), mask)
    return linear(merge_heads(out), params, f"{prefix}.o")


def embed_tokens(ids: np.ndarray, params: dict) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[1]
    pos = params["dec.pos"]
    if n > pos.shape[0]:
        raise ContractError(f"sequence of {n} tokens exceeds max_len {pos.shape[0]}")
    return T.add_bias(T.take(params["dec.tok"], ids), pos[:n])


def embed_context(ids: np.ndarray, params: dict) -> Tensor:
    """Prior context rows: retrieved/ground-truth answer ids through the decoder's embeddings."""
    return embed_tokens(ids, params)


def decoder_forward(ids, X: Optional[Tensor], C: Optional[Tensor], params: dict,
                    cfg: DecoderConfig, c_mask=None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ContractError("decoder input must be a non-empty B x n id array")
    if np.any(ids[:, 0] != BOS):
        raise ContractError("decoder input must start with BOS")
    h = embed_tokens(ids, params)
    for i in range(cfg.layers):
        pre = f"dec.block{i}"
        a = multimodal_attention(norm(h, params, f"{pre}.ln1"), X, C, params, pre,
                                 cfg.heads, c_mask=c_mask)
        h = T.add(h, a)
        h = T.add(h, feed_forward(norm(h, params, f"{pre}.ln2"), params, f"{pre}.ffn"))
    h = norm(h, params, "dec.ln_f")
    return T.matmul(h, T.transpose(params["dec.tok"]))


def teacher_forced_loss(answers, answer_mask, X, C, params: dict, cfg: DecoderConfig,
                        c_mask=None) -> Tensor:
    """Mean next-token cross-entropy over non-PAD targets."""
    answers = np.asarray(answers, dtype=np.int64)
    mask = np.asarray(answer_mask, dtype=np.float64)
    if answers.shape[1] < 2 or mask[:, 1:].sum() == 0:
        raise ContractError("teacher forcing needs at least one target token")
    logits = decoder_forward(answers[:, :-1], X, C, params, cfg, c_mask)
    return T.cross_entropy(logits, answers[:, 1:], mask[:, 1:])


def per_sample_loss(answers, answer_mask, X, C, params: dict, cfg: DecoderConfig,
                    c_mask=None) -> np.ndarray:
    """Teacher-forced loss of each sample separately (no gradient)."""
    answers = np.asarray(answers, dtype=np.int64)
    mask = np.asarray(answer_mask, dtype=np.float64)[:, 1:]
    logits = decoder_forward(answers[:, :-1], X, C, params, cfg, c_mask).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, answers[:, 1:, None], axis=-1)[..., 0]
    return -(picked * mask).sum(axis=1) / mask.sum(axis=1)


# generation ---------------------------------------------------------------

StepFn = Callable[[list], np.ndarray]


def constrain(scores: np.ndarray, seq: list, cons: GenerationConstraints) -> np.ndarray:
    """Mask next-token scores given the sequence so far (which starts with BOS)."""
    s = np.array(scores, dtype=np.float64)
    s[PAD] = -np.inf
    s[BOS] = -np.inf
    if len(seq) - 1 < cons.min_len:
        s[EOS] = -np.inf
    n = cons.no_repeat_ngram
    if n >= 1 and len(seq) >= n - 1:
        tail = tuple(seq[len(seq) - (n - 1):]) if n > 1 else ()
        for i in range(len(seq) - n + 1):
            if tuple(seq[i: i + n - 1]) == tail:
                s[seq[i + n - 1]] = -np.inf
    return s


def greedy_search(step: StepFn, cons: GenerationConstraints) -> list:
    seq = [BOS]
    while len(seq) - 1 < cons.max_tokens:
        s = constrain(step(seq), seq, cons)
        if not np.any(np.isfinite(s)):
            raise ContractError("every token is masked by the generation constraints")
        tok = int(np.argmax(s))  # first maximum = lowest id on ties
        seq.append(tok)
        if tok == EOS:
            break
    return seq[1:]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def beam_search(step: StepFn, cons: GenerationConstraints, width: int) -> list:
    """Length-normalized beam search (exponent 1) under the same masks as greedy."""
    if width < 1:
        raise ContractError("beam width must be >= 1")
    beams = [([BOS], 0.0)]
    finished = []
    while beams:
        cands = []
        for bi, (seq, score) in enumerate(beams):
            s = constrain(_log_softmax(step(seq)), seq, cons)
            for t in np.flatnonzero(np.isfinite(s)):
                cands.append((score + float(s[t]), int(t), bi))
        if not cands:
            if finished:
                break
            raise ContractError("every token is masked by the generation constraints")
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for score, t, bi in cands[:width]:
            seq = beams[bi][0] + [t]
            if t == EOS or len(seq) - 1 >= cons.max_tokens:
                finished.append((seq, score))
            else:
                nxt.append((seq, score))
        beams = nxt
    best = max(finished, key=lambda f: f[1] / (len(f[0]) - 1))
    return best[0][1:]


def make_step(X: Optional[Tensor], C: Optional[Tensor], params: dict, cfg: DecoderConfig) -> StepFn:
    def step(seq: list) -> np.ndarray:
        logits = decoder_forward(np.asarray([seq]), X, C, params, cfg)
        return logits.data[0, -1]

    return step


def greedy_decode(X, C, params: dict, cfg: DecoderConfig, cons: GenerationConstraints) -> list:
    """Generated ids after BOS, ending in EOS unless ``max_tokens`` cut it short."""
    cons = _clip(cons, cfg)
    return greedy_search(make_step(X, C, params, cfg), cons)


def beam_decode(X, C, params: dict, cfg: DecoderConfig, cons: GenerationConstraints) -> list:
    cons = _clip(cons, cfg)
    return beam_search(make_step(X, C, params, cfg), cons, cons.beam)


def _clip(cons: GenerationConstraints, cfg: DecoderConfig) -> GenerationConstraints:
    # BOS occupies one position
    cap = min(cons.max_tokens, cfg.max_len - 1)
    if cap == cons.max_tokens:
        return cons
    return GenerationConstraints(cons.min_len, cons.no_repeat_ngram, cap, cons.beam)
