"""End-to-end model: encoder, contrastive alignment, classifier, retrieval and decoder."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Config
from .contrastive import encoder_loss
from .data import PAD, AnswerVocab, Batch, Dataset, collate, make_batches, pad
from .decoder import (beam_decode, decoder_forward, embed_context, greedy_decode,
                      init_decoder, per_sample_loss, teacher_forced_loss)
from .encoder import (augment_image, ban_fuse, encode_image, encode_text, init_encoder,
                      project_embed, refine_image)
from .errors import ContractError, DimensionError
from .layers import ParamInit
from .retrieval import AnswerIndex
from .tensor import AdamW, Tape, Tensor, backward
from .vqa import classify_answer, init_classifier, predict

log = logging.getLogger(__name__)


class RepsNetModel:
    def __init__(self, cfg: Config, answer_vocab: Optional[AnswerVocab] = None):
        if cfg.vocab_size < 5:
            raise ContractError("config vocab_size must be set before building the model")
        self.cfg = cfg
        self.enc_cfg = cfg.encoder()
        self.dec_cfg = cfg.decoder()
        self.answer_vocab = answer_vocab
        self.index: Optional[AnswerIndex] = None
        self.params: dict = {}
        init = ParamInit(self.params, np.random.default_rng(cfg.seed), std=cfg.init_std)
        init_encoder(self.enc_cfg, init)
        init_decoder(self.dec_cfg, init)
        if cfg.n_classes > 0:
            init_classifier(cfg.d_x, cfg.cls_hidden, cfg.n_classes, init)

    @classmethod
    def from_params(cls, cfg: Config, params: dict, answer_vocab: Optional[AnswerVocab] = None):
        """Rebuild a model around stored tensors; names and shapes must match the config."""
        model = cls(cfg, answer_vocab)
        if set(params) != set(model.params):
            extra = sorted(set(params) ^ set(model.params))
            raise ContractError(f"checkpoint tensors do not match config: {extra[:4]}")
        for name, t in params.items():
            if t.shape != model.params[name].shape:
                raise DimensionError(f"tensor {name!r} has shape {t.shape}, config implies "
                                     f"{model.params[name].shape}")
            model.params[name].data = np.array(t.data, dtype=np.float64)
        return model

    # encoding -------------------------------------------------------------

    def prepare_images(self, images: np.ndarray, aug_seed: Optional[int]) -> np.ndarray:
        """Normalize a B x H x W stack; augment per sample when ``aug_seed`` is given."""
        c = self.cfg
        train = aug_seed is not None and c.augment
        return np.stack([
            augment_image(img, 0 if aug_seed is None else aug_seed * 1_000_003 + i, train,
                          c.norm_mean, c.norm_std, c.erase_prob)
            for i, img in enumerate(images)
        ])

    def encode(self, images: np.ndarray, questions, q_mask, aug_seed=None):
        """Returns (image features, fused features)."""
        imgs = self.prepare_images(images, aug_seed)
        feats = refine_image(encode_image(imgs, self.params, self.enc_cfg), self.params)
        Q = encode_text(questions, q_mask, self.params, self.enc_cfg)
        fused = ban_fuse(feats, Q, q_mask, self.params, self.enc_cfg)
        return feats, fused

    def image_embedding(self, feats: Tensor, fused: Tensor) -> Tensor:
        src = fused if self.cfg.retrieval_key == "fused" else feats
        return project_embed(src, None, self.params, "enc.proj_img")

    def answer_embedding(self, answers, a_mask) -> Tensor:
        Y = encode_text(answers, a_mask, self.params, self.enc_cfg)
        return project_embed(Y, a_mask, self.params, "enc.proj_txt")

    def class_logits(self, fused: Tensor) -> Tensor:
        pooled = T.masked_mean(fused, np.ones(fused.shape[:-1]))
        return classify_answer(pooled, self.params)

    # training -------------------------------------------------------------

    def forward_train(self, batch: Batch, aug_seed: Optional[int] = None):
        """Total loss and its components for one batch."""
        c = self.cfg
        if batch.images.shape[1:] != (c.image_size, c.image_size):
            raise DimensionError(f"batch images {batch.images.shape[1:]} vs config {c.image_size}")
        feats, fused = self.encode(batch.images, batch.questions, batch.question_mask, aug_seed)
        parts = {}
        if c.alpha_l > 0 and len(batch) > 1:
            x_hat = self.image_embedding(feats, fused)
            y_hat = self.answer_embedding(batch.answers, batch.answer_mask)
            parts["contrastive"] = encoder_loss(x_hat, y_hat, c.contrastive())
        else:
            parts["contrastive"] = Tensor(0.0)
        close = [i for i, s in enumerate(batch.samples) if s.answer_type == "close"]
        if close:
            if self.answer_vocab is None or "cls.out.w" not in self.params:
                raise ContractError("close-ended samples but no classifier head")
            targets = [self.answer_vocab.id(batch.samples[i].answer_class) for i in close]
            logits = self.class_logits(fused[np.asarray(close)])
            parts["classification"] = T.cross_entropy(logits, targets)
        opened = [i for i, s in enumerate(batch.samples) if s.answer_type == "open"]
        if opened:
            sel = np.asarray(opened)
            answers, a_mask = batch.answers[sel], batch.answer_mask[sel]
            keep = a_mask.sum(axis=0) > 0
            answers, a_mask = answers[:, keep], a_mask[:, keep]
            ctx, c_mask = None, None
            if c.use_context:
                # ground-truth answer as prior context during training
                ctx, c_mask = embed_context(answers, self.params), a_mask
            parts["decoder"] = teacher_forced_loss(answers, a_mask, fused[sel], ctx,
                                                   self.params, self.dec_cfg, c_mask)
        total = parts["contrastive"]
        for key in ("classification", "decoder"):
            if key in parts:
                total = T.add(total, parts[key])
        return total, {k: v.item() for k, v in parts.items()}

    def make_optimizer(self) -> AdamW:
        c = self.cfg
        return AdamW(self.params, lr=c.lr, betas=(c.beta1, c.beta2), eps=c.adam_eps,
                     weight_decay=c.weight_decay)

    def train_step(self, batch: Batch, opt: AdamW, aug_seed: Optional[int] = None):
        opt.zero_grad()
        with Tape() as tape:
            total, parts = self.forward_train(batch, aug_seed)
        if tape.nodes:
            backward(total, tape)
            opt.step()
        return total.item(), parts

    def fit(self, train: Dataset, epochs: Optional[int] = None, opt: Optional[AdamW] = None,
            on_epoch=None) -> list:
        """Seed-deterministic training; returns per-epoch mean losses and components."""
        c = self.cfg
        epochs = c.epochs if epochs is None else epochs
        opt = opt or self.make_optimizer()
        history = []
        for epoch in range(epochs):
            batches = make_batches(train, c.batch_size, seed=c.seed * 100_003 + epoch,
                                   max_tokens=c.max_tokens, max_question=c.max_question_tokens)
            sums: dict = {}
            total = 0.0
            for b, batch in enumerate(batches):
                loss, parts = self.train_step(batch, opt, aug_seed=(c.seed * 7919 + epoch) * 997 + b)
                total += loss
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
            row = {"epoch": epoch + 1, "total": total / len(batches)}
            row.update({k: v / len(batches) for k, v in sums.items()})
            history.append(row)
            log.debug("epoch %d total %.6f", epoch + 1, row["total"])
            if on_epoch is not None:
                on_epoch(row)
        return history

    # inference ------------------------------------------------------------

    def _single(self, ds: Dataset, sample):
        batch = collate(ds, [sample], self.cfg.max_tokens, self.cfg.max_question_tokens)
        return self.encode(batch.images, batch.questions, batch.question_mask)

    def embed_answers(self, answer_ids: list) -> np.ndarray:
        out = []
        for ids in answer_ids:
            arr = np.asarray([ids])
            out.append(self.answer_embedding(arr, (arr != PAD).astype(float)).data[0])
        return np.array(out)

    def context_for(self, neighbours: list) -> tuple:
        if not self.cfg.use_context or not neighbours:
            return None, None
        ids = [t for n in neighbours for t in n.tokens][: self.cfg.max_tokens]
        arr = np.asarray([ids])
        return embed_context(arr, self.params), np.ones(arr.shape, dtype=bool)

    def _search(self, feats, fused, k):
        if self.index is None or len(self.index) == 0:
            raise ContractError("answer index is empty")
        q = self.image_embedding(feats, fused).data[0]
        return self.index.topk(q, self.cfg.k if k is None else k)

    def retrieve(self, ds: Dataset, sample, k: Optional[int] = None) -> list:
        return self._search(*self._single(ds, sample), k)

    def infer_open(self, ds: Dataset, sample, k: Optional[int] = None, beam: Optional[int] = None):
        """Generated token ids (after BOS) and the retrieved neighbours."""
        feats, fused = self._single(ds, sample)
        neighbours = self._search(feats, fused, k) if self.cfg.use_context else []
        ctx, _ = self.context_for(neighbours)
        cons = self.cfg.constraints()
        width = self.cfg.beam if beam is None else beam
        if width > 1:
            cons = replace(cons, beam=width)
            tokens = beam_decode(fused, ctx, self.params, self.dec_cfg, cons)
        else:
            tokens = greedy_decode(fused, ctx, self.params, self.dec_cfg, cons)
        return tokens, neighbours

    def infer_close(self, ds: Dataset, sample) -> int:
        _, fused = self._single(ds, sample)
        return int(predict(self.class_logits(fused))[0])

    def build_index(self, train: Dataset) -> AnswerIndex:
        opened = [s for s in train if s.answer_type == "open"]
        if not opened:
            raise ContractError("no open-ended train samples to index")
        idx = AnswerIndex(self.cfg.d)
        vecs = self.embed_answers([s.answer_text for s in opened])
        for s, v in zip(opened, vecs):
            idx.add(v, s.answer_text, s.id)
        self.index = idx
        return idx

    def teacher_forced_losses(self, ds: Dataset, samples: list, contexts: Optional[list] = None) -> np.ndarray:
        """Per-sample decoder loss; ``contexts`` overrides the ground-truth context ids."""
        batch = collate(ds, samples, self.cfg.max_tokens, self.cfg.max_question_tokens)
        _, fused = self.encode(batch.images, batch.questions, batch.question_mask)
        ctx = c_mask = None
        if self.cfg.use_context:
            if contexts is None:
                cids, c_mask = batch.answers, batch.answer_mask
            else:
                cids, c_mask = pad(contexts, self.cfg.max_tokens)
            ctx = embed_context(cids, self.params)
        return per_sample_loss(batch.answers, batch.answer_mask, fused, ctx, self.params,
                               self.dec_cfg, c_mask)
