"""Close-ended answer classification and accuracy with unseen-class exclusion.

The head is two linear maps with a GELU between them, applied to the
mean-pooled fused image grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import AnswerVocab, Dataset
from .errors import ContractError, DimensionError
from .layers import ParamInit, linear
from .tensor import Tensor


def init_classifier(d_in: int, hidden: int, n_classes: int, init: ParamInit) -> None:
    init.linear("cls.hidden", d_in, hidden)
    init.linear("cls.out", hidden, n_classes)


def classify_answer(pooled: Tensor, params: dict) -> Tensor:
    d_in = params["cls.hidden.w"].shape[0]
    if pooled.shape[-1] != d_in:
        raise DimensionError(f"features of width {pooled.shape[-1]} into head of width {d_in}")
    return linear(T.gelu(linear(pooled, params, "cls.hidden")), params, "cls.out")


def predict(logits) -> np.ndarray:
    """Argmax per row; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


@dataclass
class AccuracyReport:
    accuracy: float
    correct: int
    eligible: int
    unseen: int
    total: int


def accuracy_eval(predictions: Sequence[Optional[int]], ds: Dataset,
                  answer_vocab: AnswerVocab) -> AccuracyReport:
    """Accuracy over close-ended samples whose class is a known answer class.

    ``predictions`` is aligned with ``ds.samples``; entries for open-ended
    samples are ignored.
    """
    if len(predictions) != len(ds):
        raise ContractError(f"{len(predictions)} predictions for {len(ds)} samples")
    correct = eligible = unseen = total = 0
    for pred, s in zip(predictions, ds.samples):
        if s.answer_type != "close":
            continue
        total += 1
        if s.answer_class not in answer_vocab:
            unseen += 1
            continue
        eligible += 1
        correct += int(pred is not None and int(pred) == answer_vocab.id(s.answer_class))
    if eligible == 0:
        raise ContractError("no eligible close-ended samples to score")
    return AccuracyReport(correct / eligible, correct, eligible, unseen, total)
