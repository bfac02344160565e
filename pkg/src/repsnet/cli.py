"""Command-line entry points: synth, train, eval, generate, retrieve.

A training run directory holds ``model.rsnc`` (weights and config),
``vocab.json`` (token list and answer classes), ``index.rnix`` (answer
index, present when the train set has open-ended samples) and
``metrics.log`` (one line per epoch).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, format_config, load_config
from .data import (AnswerVocab, SynthSpec, Vocab, build_vocab, corpus_of, decode,
                   filter_min_occurrence, generate_synthetic, load_jsonl, make_dataset,
                   read_records, sample_from_record, write_jsonl)
from .errors import ContractError, RepsNetError
from .metrics import corpus_eval
from .model import RepsNetModel
from .retrieval import index_load, index_save
from .vqa import accuracy_eval

log = logging.getLogger("repsnet")

MODEL_FILE = "model.rsnc"
VOCAB_FILE = "vocab.json"
INDEX_FILE = "index.rnix"
METRICS_FILE = "metrics.log"


def _strip(ids) -> list:
    return [int(t) for t in ids if int(t) > 3]


def _run_dir(path) -> Path:
    p = Path(path)
    return p.parent if p.suffix == ".rsnc" else p


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# loading ------------------------------------------------------------------


class Run:
    """A trained model with its vocabularies and (optional) index."""

    def __init__(self, path):
        self.dir = _run_dir(path)
        cfg, params = load_checkpoint(self.dir / MODEL_FILE)
        with open(self.dir / VOCAB_FILE, encoding="utf-8") as fh:
            meta = json.load(fh)
        self.vocab = Vocab(list(meta["tokens"]))
        if len(self.vocab) != cfg.vocab_size:
            raise ContractError(f"vocab.json has {len(self.vocab)} tokens but the checkpoint "
                                f"expects {cfg.vocab_size}")
        classes = list(meta.get("classes", []))
        if len(classes) != cfg.n_classes:
            raise ContractError(f"vocab.json lists {len(classes)} answer classes but the "
                                f"checkpoint expects {cfg.n_classes}")
        avocab = AnswerVocab(classes, dict(meta.get("class_counts", {})),
                             cfg.min_occurrence) if classes else None
        self.cfg = cfg
        self.model = RepsNetModel.from_params(cfg, params, avocab)
        index_path = self.dir / INDEX_FILE
        if index_path.exists():
            self.model.index = index_load(index_path)
            if self.model.index.d != cfg.d:
                raise ContractError(f"index dimension {self.model.index.d} != config d {cfg.d}")

    def require_index(self):
        if self.model.index is None or len(self.model.index) == 0:
            raise ContractError(f"no answer index in {self.dir}")

    def load(self, path, require_answer: bool = True):
        ds = load_jsonl(path, self.vocab, "eval", require_answer)
        size = self.cfg.image_size
        for s in ds:
            if s.image.shape != (size, size):
                raise ContractError(f"sample {s.id}: image {s.image.shape} but the model "
                                    f"expects {size}x{size}")
        return ds


# commands -----------------------------------------------------------------


def cmd_synth(out, seed: int = 0, spec: Optional[SynthSpec] = None) -> Path:
    """Write a synthetic train/eval pair and a config that points at them."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, eval_, vocab = generate_synthetic(spec, seed)
    write_jsonl(train, vocab, out / "train.jsonl")
    write_jsonl(eval_, vocab, out / "eval.jsonl")
    cfg = Config(seed=seed, train_data=str(out / "train.jsonl"), eval_data=str(out / "eval.jsonl"))
    _write(out / "config.txt", format_config(cfg))
    return out


def cmd_train(config_path, out, seed: Optional[int] = None) -> Path:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    if not cfg.train_data:
        raise ContractError("config key 'train_data' is not set")
    records = read_records(cfg.train_data)
    if not records:
        raise ContractError(f"{cfg.train_data}: no records")
    vocab = build_vocab(corpus_of(records))
    samples = [sample_from_record(r, vocab, f"{cfg.train_data}:{n}") for n, r in records]
    train = make_dataset(samples, vocab, "train")
    avocab = None
    if any(s.answer_type == "close" for s in train):
        train, _, avocab = filter_min_occurrence(train, train, cfg.min_occurrence)
    cfg = cfg.with_(vocab_size=len(vocab), n_classes=len(avocab) if avocab else 0)
    shapes = {s.image.shape for s in train}
    if shapes != {(cfg.image_size, cfg.image_size)}:
        raise ContractError(f"train images {sorted(shapes)} do not match image_size {cfg.image_size}")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = RepsNetModel(cfg, avocab)
    lines = []

    def on_epoch(row):
        parts = " ".join(f"{k}={row[k]:.9g}" for k in sorted(row) if k not in ("epoch", "total"))
        lines.append(f"epoch={row['epoch']} total={row['total']:.9g} {parts}".rstrip() + "\n")
        log.info(lines[-1].rstrip())

    model.fit(train, on_epoch=on_epoch)
    _write(out / METRICS_FILE, "".join(lines))
    save_checkpoint(cfg, model.params, out / MODEL_FILE)
    meta = {"tokens": vocab.tokens,
            "classes": avocab.classes if avocab else [],
            "class_counts": avocab.counts if avocab else {}}
    _write(out / VOCAB_FILE, json.dumps(meta, sort_keys=True, indent=1) + "\n")
    index_path = out / INDEX_FILE
    if any(s.answer_type == "open" for s in train):
        index_save(model.build_index(train), index_path)
    elif index_path.exists():
        index_path.unlink()
    return out / MODEL_FILE


def evaluate(run: Run, ds, k: Optional[int] = None, beam: Optional[int] = None) -> dict:
    model = run.model
    report: dict = {"samples": len(ds)}
    close = [s for s in ds if s.answer_type == "close"]
    if close:
        if model.answer_vocab is None:
            raise ContractError("eval data has close-ended samples but the model has no classifier")
        preds = [model.infer_close(ds, s) if s.answer_type == "close" and s.answer_class
                 in model.answer_vocab else None for s in ds]
        acc = accuracy_eval(preds, ds, model.answer_vocab)
        report["accuracy"] = acc.accuracy
        report["unseen"] = acc.unseen
    opened = [s for s in ds if s.answer_type == "open"]
    if opened:
        if model.cfg.use_context:
            run.require_index()
        pairs = [(_strip(model.infer_open(ds, s, k, beam)[0]), _strip(s.answer_text)) for s in opened]
        report["bleu"] = corpus_eval(pairs).as_dict()
    return report


def format_report(report: dict) -> str:
    lines = [f"samples: {report['samples']}"]
    if "accuracy" in report:
        lines.append(f"accuracy: {report['accuracy']:.6f} (unseen excluded: {report['unseen']})")
    else:
        lines.append("accuracy: omitted (no close-ended samples)")
    if "bleu" in report:
        lines.append("bleu: " + " ".join(f"{k.upper()}={v:.6f}" for k, v in report["bleu"].items()))
    else:
        lines.append("bleu: omitted (no open-ended samples)")
    return "\n".join(lines) + "\n"


def cmd_eval(checkpoint, data, out=None, k=None, beam=None) -> dict:
    run = Run(checkpoint)
    report = evaluate(run, run.load(data), k, beam)
    sys.stdout.write(format_report(report))
    target = Path(out) if out else run.dir / "eval.json"
    _write(target, json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def cmd_generate(checkpoint, data, k=None, beam=None, out=None) -> str:
    run = Run(checkpoint)
    run.require_index()
    ds = run.load(data, require_answer=False)
    chunks = []
    for s in ds:
        tokens, neighbours = run.model.infer_open(ds, s, k, beam)
        words = _strip(tokens)
        rows = [f"id: {s.id}", f"answer: {decode(words, run.vocab)}", f"tokens: {len(words)}"]
        if not neighbours:
            neighbours = run.model.retrieve(ds, s, k)
        for rank, n in enumerate(neighbours, 1):
            rows.append(f"context {rank}: score={n.score:.6f} id={n.sample_id} "
                        f"text={decode(n.tokens, run.vocab)}")
        chunks.append("\n".join(rows) + "\n")
    text = "\n".join(chunks)
    sys.stdout.write(text)
    if out:
        _write(Path(out), text)
    return text


def cmd_retrieve(checkpoint, data, k: int = 1, out=None) -> str:
    if k < 1:
        raise ContractError("k must be >= 1")
    run = Run(checkpoint)
    run.require_index()
    size = len(run.model.index)
    if k > size:
        log.warning("k=%d exceeds index size %d; returning all rows", k, size)
        k = size
    ds = run.load(data, require_answer=False)
    chunks = []
    for s in ds:
        rows = [f"id: {s.id}"]
        for n in run.model.retrieve(ds, s, k):
            rows.append(f"{n.score:.6f}\t{n.sample_id}\t{decode(n.tokens, run.vocab)}")
        chunks.append("\n".join(rows) + "\n")
    text = "\n".join(chunks)
    sys.stdout.write(text)
    if out:
        _write(Path(out), text)
    return text


# argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repsnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus and config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)

    for name, hlp in (("eval", "score a checkpoint on labelled data"),
                      ("generate", "generate answers for image+question records"),
                      ("retrieve", "list nearest train answers")):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--k", type=int, default=None if name != "retrieve" else 1)
        c.add_argument("--out")
        if name != "retrieve":
            c.add_argument("--beam", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            cmd_synth(args.out, args.seed)
        elif args.command == "train":
            cmd_train(args.config, args.out, args.seed)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.data, args.out, args.k, args.beam)
        elif args.command == "generate":
            cmd_generate(args.checkpoint, args.data, args.k, args.beam, args.out)
        else:
            cmd_retrieve(args.checkpoint, args.data, args.k, args.out)
    except RepsNetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
