"""Vocabulary, tokenization, JSONL datasets, batching and synthetic data."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_TOKENS = 200
MAX_QUESTION_TOKENS = 12


def normalize(text: str) -> list[str]:
    """Lowercase, drop non-alphanumeric characters, split on whitespace."""
    kept = "".join(ch for ch in text.lower() if ch.isalnum() or ch.isspace())
    return kept.split()


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ContractError("vocab must start with the four special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        return self.index.get(tok, UNK)


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Tokens seen at least ``min_count`` times, most frequent first (ties lexicographic)."""
    counts: Counter = Counter()
    n = 0
    for text in corpus:
        n += 1
        counts.update(normalize(text))
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


def encode(text: str, vocab: Vocab, add_specials: bool = False) -> list[int]:
    ids = [vocab.id(t) for t in normalize(text)]
    return [BOS] + ids + [EOS] if add_specials else ids


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    n = len(vocab)
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise ContractError(f"token id {i} outside vocab of size {n}")
        if i > UNK:
            words.append(vocab.tokens[i])
    return " ".join(words)


def truncate(ids: Sequence[int], cap: int) -> list[int]:
    """Cap a sequence at ``cap`` tokens, forcing EOS into the last slot if it was cut."""
    ids = list(ids)
    if len(ids) <= cap:
        return ids
    out = ids[:cap]
    if ids[-1] == EOS:
        out[-1] = EOS
    return out


@dataclass
class Sample:
    id: str
    image: np.ndarray
    question: list[int]
    answer_type: str
    answer_class: Optional[str] = None
    answer_text: Optional[list[int]] = None
    unseen: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.answer_type == "close":
            if self.answer_class is None or self.answer_text is not None:
                raise ContractError(f"sample {self.id}: close-ended needs answer_class only")
        elif self.answer_type == "open":
            if self.answer_text is None or self.answer_class is not None:
                raise ContractError(f"sample {self.id}: open-ended needs answer_text only")
        elif self.answer_type != "none":
            raise ContractError(f"sample {self.id}: bad answer_type {self.answer_type!r}")


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"
    # token ids of each close-ended class string, used as its answer text
    class_text: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ContractError(f"{self.split} dataset is empty")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate sample ids in {self.split} split")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def answer_tokens(self, s: Sample) -> list[int]:
        if s.answer_type == "open":
            return s.answer_text
        if s.answer_type == "close":
            return self.class_text[s.answer_class]
        raise ContractError(f"sample {s.id} has no answer")


# JSONL --------------------------------------------------------------------

_REQUIRED = ("id", "image", "question", "answer_type")


def _parse_image(raw, where: str) -> np.ndarray:
    try:
        img = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise ContractError(f"{where}: image is not a numeric grid") from err
    if img.ndim != 2 or img.size == 0:
        raise ContractError(f"{where}: image must be a non-empty 2-D grid")
    if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
        raise ContractError(f"{where}: image values must be integers in 0-255")
    return img


def sample_from_record(rec: dict, vocab: Vocab, where: str, require_answer: bool = True) -> Sample:
    required = _REQUIRED if require_answer else ("id", "image", "question")
    for key in required:
        if key not in rec:
            raise ContractError(f"{where}: missing required field {key!r}")
    atype = rec.get("answer_type", "none")
    if atype not in ("close", "open", "none") or (require_answer and atype == "none"):
        raise ContractError(f"{where}: answer_type must be 'close' or 'open'")
    has_cls, has_txt = "answer_class" in rec, "answer_text" in rec
    if atype == "close" and (not has_cls or has_txt):
        raise ContractError(f"{where}: close-ended record needs 'answer_class' and no 'answer_text'")
    if atype == "open" and (not has_txt or has_cls):
        raise ContractError(f"{where}: open-ended record needs 'answer_text' and no 'answer_class'")
    question = truncate(encode(str(rec["question"]), vocab), MAX_QUESTION_TOKENS)
    text = None
    if atype == "open":
        text = encode(str(rec["answer_text"]), vocab, add_specials=True)
    cls = " ".join(normalize(str(rec["answer_class"]))) if atype == "close" else None
    return Sample(
        id=str(rec["id"]),
        image=_parse_image(rec["image"], where),
        question=question,
        answer_type=atype,
        answer_class=cls,
        answer_text=text,
        meta=dict(rec.get("meta", {})),
    )


def read_records(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ContractError(f"{path}:{lineno}: malformed JSON ({err.msg})") from err
            if not isinstance(rec, dict):
                raise ContractError(f"{path}:{lineno}: record is not a JSON object")
            records.append((lineno, rec))
    return records


def corpus_of(records) -> list[str]:
    """All text in a list of records, for vocabulary building."""
    out = []
    for _, rec in records:
        for key in ("question", "answer_text", "answer_class"):
            if key in rec:
                out.append(str(rec[key]))
    return out


def load_jsonl(path, vocab: Vocab, split: str = "train", require_answer: bool = True) -> Dataset:
    samples = [
        sample_from_record(rec, vocab, f"{path}:{lineno}", require_answer)
        for lineno, rec in read_records(path)
    ]
    return make_dataset(samples, vocab, split)


def make_dataset(samples: list[Sample], vocab: Vocab, split: str) -> Dataset:
    class_text = {
        s.answer_class: encode(s.answer_class, vocab, add_specials=True)
        for s in samples
        if s.answer_type == "close"
    }
    return Dataset(samples, split, class_text)


def sample_to_record(s: Sample, vocab: Vocab) -> dict:
    rec = {
        "id": s.id,
        "image": s.image.astype(int).tolist(),
        "question": decode(s.question, vocab),
        "answer_type": s.answer_type,
    }
    if s.answer_type == "close":
        rec["answer_class"] = s.answer_class
    elif s.answer_type == "open":
        rec["answer_text"] = decode(s.answer_text, vocab)
    if s.meta:
        rec["meta"] = s.meta
    return rec


def write_jsonl(ds: Dataset, vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in ds:
            fh.write(json.dumps(sample_to_record(s, vocab), sort_keys=True) + "\n")


# answer classes -----------------------------------------------------------


@dataclass
class AnswerVocab:
    classes: list[str]
    counts: dict[str, int]
    min_occurrence: int = 0
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {c: i for i, c in enumerate(self.classes)}

    def __len__(self):
        return len(self.classes)

    def __contains__(self, cls) -> bool:
        return cls in self.index

    def id(self, cls: str) -> int:
        return self.index[cls]


def filter_min_occurrence(train: Dataset, eval: Dataset, min_occurrence: int):
    """Drop classes with fewer than ``min_occurrence`` train instances.

    Returns the filtered train set, the eval set with ``unseen`` flags set on
    close-ended samples whose class was not retained, and the class map.
    """
    counts = Counter(s.answer_class for s in train if s.answer_type == "close")
    if not counts:
        raise ContractError("no close-ended samples to build answer classes from")
    kept = sorted((c for c, n in counts.items() if n >= min_occurrence), key=lambda c: (-counts[c], c))
    if not kept:
        raise ContractError(f"every class has fewer than {min_occurrence} train instances")
    avocab = AnswerVocab(kept, {c: counts[c] for c in kept}, min_occurrence)
    train_s = [s for s in train if s.answer_type != "close" or s.answer_class in avocab]
    eval_s = [
        replace(s, unseen=s.answer_type == "close" and s.answer_class not in avocab)
        for s in eval
    ]
    return (
        Dataset(train_s, train.split, dict(train.class_text)),
        Dataset(eval_s, eval.split, dict(eval.class_text)),
        avocab,
    )


# batching -----------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # B x H x W raw intensities
    questions: np.ndarray  # B x Lq, PAD-filled
    question_mask: np.ndarray
    answers: np.ndarray  # B x La, BOS ... EOS then PAD
    answer_mask: np.ndarray
    lengths: np.ndarray  # answer lengths
    samples: list[Sample]

    def __len__(self):
        return len(self.samples)


def pad(seqs: Sequence[Sequence[int]], cap: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [truncate(s, cap) for s in seqs]
    width = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, (ids != PAD).astype(np.float64)


def collate(ds: Dataset, samples: Sequence[Sample], max_tokens: int = MAX_TOKENS,
            max_question: int = MAX_QUESTION_TOKENS) -> Batch:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ContractError(f"mixed image shapes in batch: {sorted(shapes)}")
    q, qm = pad([s.question for s in samples], max_question)
    a, am = pad([ds.answer_tokens(s) if s.answer_type != "none" else [BOS, EOS]
                 for s in samples], max_tokens)
    return Batch(
        images=np.stack([s.image for s in samples]),
        questions=q,
        question_mask=qm,
        answers=a,
        answer_mask=am,
        lengths=am.sum(axis=1).astype(np.int64),
        samples=list(samples),
    )


def make_batches(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
                 max_tokens: int = MAX_TOKENS,
                 max_question: int = MAX_QUESTION_TOKENS) -> list[Batch]:
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(ds))
    samples = ds.samples
    return [
        collate(ds, [samples[i] for i in order[j: j + batch_size]], max_tokens, max_question)
        for j in range(0, len(ds), batch_size)
    ]


# synthetic data -----------------------------------------------------------

# Each concept is a region finding with three severities.  Descriptions are
# built so no bigram repeats inside an answer (the decoder's no-repeat rule).
_CONCEPTS = [
    ("upper left", "opacity", "apical"),
    ("upper right", "nodule", "hilar"),
    ("lower left", "effusion", "basal"),
    ("lower right", "consolidation", "costophrenic"),
    ("center", "mass", "mediastinal"),
    ("left border", "atelectasis", "lingular"),
    ("right border", "pneumothorax", "pleural"),
    ("top band", "fracture", "clavicular"),
]
_SEVERITY = ("small", "moderate", "large")


def describe(concept: int, severity: int) -> str:
    region, finding, zone = _CONCEPTS[concept]
    text = f"there is a {_SEVERITY[severity]} {finding} in the {region} {zone} zone."
    if severity >= 1:
        text += " no pleural abnormality elsewhere."
    if severity == 1:
        text += " recommend clinical correlation."
    if severity == 2:
        text += " urgent follow up imaging is advised."
    return text


OPEN_QUESTIONS = ("describe the findings", "what are the findings in this image")
CLOSE_QUESTIONS = ("where is the abnormality", "which region is abnormal")


def _motif(concept: int, size: int) -> np.ndarray:
    """Binary mask of the region lit up for a concept."""
    m = np.zeros((size, size))
    h = size // 2
    q = size // 4
    if concept == 0:
        m[:h, :h] = 1
    elif concept == 1:
        m[:h, h:] = 1
    elif concept == 2:
        m[h:, :h] = 1
    elif concept == 3:
        m[h:, h:] = 1
    elif concept == 4:
        m[q:size - q, q:size - q] = 1
    elif concept == 5:
        m[:, :q] = 1
    elif concept == 6:
        m[:, size - q:] = 1
    elif concept == 7:
        m[:q, :] = 1
    return m


@dataclass
class SynthSpec:
    n_concepts: int = 4
    n_samples: int = 64
    image_size: int = 16
    open_fraction: float = 0.5
    noise: float = 12.0


def synth_image(concept: int, severity: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    base = 40.0 + rng.normal(0.0, noise, (size, size))
    level = (130.0, 170.0, 210.0)[severity]
    img = base + _motif(concept, size) * (level - 40.0)
    return np.clip(np.round(img), 0, 255)


def generate_synthetic(spec: Optional[SynthSpec] = None, seed: int = 0):
    """Deterministic paired corpus: returns (train, eval, vocab)."""
    spec = spec or SynthSpec()
    if spec.n_concepts < 2 or spec.n_concepts > len(_CONCEPTS):
        raise ContractError(f"n_concepts must be in 2..{len(_CONCEPTS)}")
    rng = np.random.default_rng(seed)
    raw = []
    for i in range(spec.n_samples):
        concept = i % spec.n_concepts
        severity = int(rng.integers(0, 3))
        is_open = rng.random() < spec.open_fraction
        qs = OPEN_QUESTIONS if is_open else CLOSE_QUESTIONS
        rec = {
            "id": f"syn-{i:04d}",
            "image": synth_image(concept, severity, spec.image_size, rng, spec.noise),
            "question": qs[int(rng.integers(0, len(qs)))],
            "answer_type": "open" if is_open else "close",
            "meta": {"concept": concept, "severity": severity},
        }
        if is_open:
            rec["answer_text"] = describe(concept, severity)
        else:
            rec["answer_class"] = _CONCEPTS[concept][0]
        raw.append(rec)
    corpus = [str(r.get("answer_text", r.get("answer_class"))) for r in raw]
    corpus += [r["question"] for r in raw]
    # every template word, so eval text never maps to UNK
    corpus += [describe(c, s) for c in range(spec.n_concepts) for s in range(3)]
    corpus += [c[0] for c in _CONCEPTS[: spec.n_concepts]] + list(OPEN_QUESTIONS + CLOSE_QUESTIONS)
    vocab = build_vocab(corpus, 1)
    samples = [sample_from_record(r, vocab, r["id"]) for r in raw]
    order = rng.permutation(len(samples))
    n_train = int(0.8 * len(samples))
    train = make_dataset([samples[i] for i in sorted(order[:n_train])], vocab, "train")
    eval_ = make_dataset([samples[i] for i in sorted(order[n_train:])], vocab, "eval")
    return train, eval_, vocab
