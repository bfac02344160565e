"""Acceptance criteria, each reported as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed
in the terminal summary (and to stdout with ``-s``).
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from test_metrics import HAND_TABLE
from repsnet import tensor as T
from repsnet.cli import cmd_eval, cmd_generate, cmd_synth, cmd_train
from repsnet.config import Config, format_config, load_config
from repsnet.contrastive import ContrastiveConfig, encoder_loss
from repsnet.data import (BOS, EOS, AnswerVocab, Sample, SynthSpec, build_vocab,
                          filter_min_occurrence, generate_synthetic, make_dataset)
from repsnet.decoder import (DecoderConfig, GenerationConstraints, beam_decode, embed_context,
                             greedy_decode, init_decoder, multimodal_attention, teacher_forced_loss)
from repsnet.encoder import EncoderConfig, ban_fuse, init_encoder
from repsnet.layers import ParamInit
from repsnet.metrics import bleu_n, corpus_eval
from repsnet.model import RepsNetModel
from repsnet.retrieval import AnswerIndex, dump_index, index_add, index_topk, parse_index
from repsnet.tensor import Tensor, grad_check
from repsnet.vqa import accuracy_eval, classify_answer, init_classifier

SEEDS = range(10)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def words(ids):
    return [int(t) for t in ids if int(t) > 3]


# 1 -------------------------------------------------------------------------


def _weighted(out: Tensor, seed: int) -> Tensor:
    # a random linear read-out keeps every output coordinate in the check
    w = np.random.default_rng(seed + 1000).normal(size=out.shape)
    return T.tsum(T.mul(out, Tensor(w)))


def _grad_cases(seed: int):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 4)), Tensor(rng.normal(size=(4, 5)))
    yield "matmul", lambda t: _weighted(T.matmul(t, B), seed), A

    yield "softmax", lambda t: _weighted(T.softmax(t), seed), rng.normal(size=(3, 6)) * 2

    g, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    yield "layer_norm", lambda t: _weighted(T.layer_norm(t, g, b), seed), rng.normal(size=(4, 6))

    ecfg = EncoderConfig(vocab_size=10, d_x=6, d_q=4, text_heads=2, rank=3)
    ep = {}
    init_encoder(ecfg, ParamInit(ep, rng, std=0.5))
    X = rng.normal(size=(2, 5, 6))
    Q = Tensor(rng.normal(size=(2, 3, 4)))
    qm = np.array([[1, 1, 1], [1, 1, 0]])
    yield "ban_fusion", lambda t: _weighted(ban_fuse(t, Q, qm, ep, ecfg), seed), X

    y = Tensor(rng.normal(size=(4, 5)))
    ccfg = ContrastiveConfig()
    yield "encoder_loss", lambda t: encoder_loss(t, y, ccfg), rng.normal(size=(4, 5))

    dcfg = DecoderConfig(vocab_size=9, width=8, d_x=6, layers=1, heads=2, max_len=10)
    dp = {}
    init_decoder(dcfg, ParamInit(dp, rng, std=0.5))
    Xd = Tensor(rng.normal(size=(2, 3, 6)))
    C = Tensor(rng.normal(size=(2, 2, 8)))
    Y = rng.normal(size=(2, 4, 8))
    yield ("multimodal_attention",
           lambda t: _weighted(multimodal_attention(t, Xd, C, dp, "dec.block0", 2), seed), Y)

    answers = np.array([[BOS, 4, 5, 6, EOS], [BOS, 7, 8, EOS, 0]])
    mask = (answers != 0).astype(float)
    yield ("teacher_forced_loss",
           lambda t: teacher_forced_loss(answers, mask, Xd, C, {**dp, "dec.block0.q.w": t}, dcfg),
           dp["dec.block0.q.w"].data.copy())

    cp = {}
    init_classifier(6, 5, 4, ParamInit(cp, rng, std=0.5))
    targets = rng.integers(0, 4, size=3)
    yield ("classifier_ce",
           lambda t: T.cross_entropy(classify_answer(t, cp), targets), rng.normal(size=(3, 6)))


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    worst: dict = {}
    for seed in SEEDS:
        for name, f, x in _grad_cases(seed):
            worst[name] = max(worst.get(name, 0.0), grad_check(f, x, h=1e-5))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60 and len(worst) == 8
    report(1, ok, f"worst rel err {worst[top]:.2e} ({top}) over {len(worst)} ops x 10 seeds, "
                  f"{elapsed:.1f}s")


# 2 -------------------------------------------------------------------------


def test_criterion_2_infonce_oracles():
    one = encoder_loss(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, -1.0]])),
                       ContrastiveConfig(tau=1.0, alpha=0.5)).item()
    e = np.eye(2)
    ortho = encoder_loss(Tensor(e), Tensor(e), ContrastiveConfig(tau=1.0, alpha=0.5)).item()
    want = math.log(1 + math.exp(-1))
    n = 6
    collapsed = np.tile([[0.3, -1.2, 2.0]], (n, 1))
    coll = encoder_loss(Tensor(collapsed), Tensor(collapsed), ContrastiveConfig(alpha=0.5)).item()
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    cfg = ContrastiveConfig()
    swap = encoder_loss(Tensor(x), Tensor(y), cfg).item() == encoder_loss(Tensor(y), Tensor(x), cfg).item()
    ok = one == 0.0 and abs(ortho - want) <= 1e-9 and abs(coll - math.log(n)) <= 1e-9 and swap
    report(2, ok, f"N=1 -> {one + 0.0}, orthonormal err {abs(ortho - want):.1e}, "
                  f"collapsed err {abs(coll - math.log(n)):.1e}, swap-exact={swap}")


# 3 -------------------------------------------------------------------------


def test_criterion_3_contrastive_retrieval():
    start = time.perf_counter()
    tr, ev, voc = generate_synthetic(SynthSpec(n_concepts=4, n_samples=64, open_fraction=1.0), 0)
    m = RepsNetModel(Config(vocab_size=len(voc), lr=1e-3, epochs=100, seed=0))
    m.fit(tr)
    m.build_index(tr)
    concept = {s.id: s.meta["concept"] for s in tr}
    hits = sum(concept[m.retrieve(ev, s, 1)[0].sample_id] == s.meta["concept"] for s in ev)
    acc = hits / len(ev)
    elapsed = time.perf_counter() - start
    report(3, acc >= 0.9 and elapsed < 300,
           f"eval top-1 concept accuracy {acc:.3f} ({hits}/{len(ev)}), 100 epochs, {elapsed:.0f}s")


# 4 -------------------------------------------------------------------------


def test_criterion_4_retrieval_exactness():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(1000, 16))
    idx = AnswerIndex(16)
    for i, v in enumerate(vecs):
        index_add(idx, v, [BOS, 4 + i % 5, EOS], f"v{i}")
    unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    mismatches = 0
    for q in rng.normal(size=(20, 16)):
        scores = [float(r @ (q / np.linalg.norm(q))) for r in unit]
        oracle = sorted(range(1000), key=lambda i: -scores[i])
        for k in (1, 5, 50):
            got = [int(n.sample_id[1:]) for n in index_topk(idx, q, k)]
            mismatches += got != oracle[:k]
    raw = dump_index(idx)
    back = parse_index(raw)
    exact = dump_index(back) == raw and np.array_equal(back.matrix, idx.matrix)
    report(4, mismatches == 0 and exact,
           f"{mismatches} mismatches over 20 queries x k in (1,5,50); round trip exact={exact}")


# 5 and 6 -------------------------------------------------------------------


@pytest.fixture(scope="module")
def memorized():
    start = time.perf_counter()
    tr, ev, voc = generate_synthetic(SynthSpec(n_samples=8, open_fraction=1.0), 0)
    ds = make_dataset(list(tr) + list(ev), voc, "train")
    m = RepsNetModel(Config(vocab_size=len(voc), lr=3e-3, seed=0, augment=False))
    opt = m.make_optimizer()
    epochs, loss = 0, math.inf
    while loss >= 0.01 and epochs < 1000:
        m.fit(ds, epochs=1, opt=opt)
        epochs += 1
        loss = float(m.teacher_forced_losses(ds, list(ds)).mean())
    return m, ds, loss, epochs, time.perf_counter() - start


def test_criterion_5_memorization(memorized):
    m, ds, loss, epochs, elapsed = memorized
    start = time.perf_counter()
    pairs = []
    for s in ds:
        _, fused = m._single(ds, s)
        ctx = embed_context(np.asarray([ds.answer_tokens(s)]), m.params)
        out = greedy_decode(fused, ctx, m.params, m.dec_cfg, m.cfg.constraints())
        pairs.append((words(out), words(s.answer_text)))
    exact = sum(h == r for h, r in pairs)
    b4 = corpus_eval(pairs).b4
    elapsed += time.perf_counter() - start
    ok = len(ds) == 8 and loss < 0.01 and exact == 8 and b4 >= 0.9 and elapsed < 300
    report(5, ok, f"loss {loss:.4f} after {epochs} epochs, {exact}/8 exact, B4 {b4:.4f}, {elapsed:.0f}s")


def test_criterion_6_context_carries_signal(memorized):
    m, ds, *_ = memorized
    samples = list(ds)
    answers = [ds.answer_tokens(s) for s in samples]
    wrong = []
    for i in range(len(samples)):
        # the next sample (cyclically) whose answer differs
        j = next(j % len(samples) for j in range(i + 1, i + len(samples))
                 if answers[j % len(samples)] != answers[i])
        wrong.append(answers[j])
    base = m.teacher_forced_losses(ds, samples)
    shuffled = m.teacher_forced_losses(ds, samples, wrong)
    up = int((shuffled > base).sum())
    report(6, up >= 7, f"wrong context raised loss on {up}/8 samples "
                       f"(mean {base.mean():.4f} -> {shuffled.mean():.4f})")


# 7 -------------------------------------------------------------------------


def ablation_b1(seed: int, epochs: int = 100) -> list:
    """Eval B1 of Vis, Vis+CE and Vis+CE+PC trained on one synthetic corpus."""
    tr, ev, voc = generate_synthetic(SynthSpec(n_concepts=4, n_samples=64, open_fraction=1.0), seed)
    scores = []
    for alpha, ctx in ((0.0, False), (1.0, False), (1.0, True)):
        m = RepsNetModel(Config(vocab_size=len(voc), lr=1e-3, epochs=epochs, alpha_l=alpha,
                                use_context=ctx, seed=seed))
        m.fit(tr)
        m.build_index(tr)
        pairs = [(words(m.infer_open(ev, s)[0]), words(s.answer_text)) for s in ev]
        scores.append(corpus_eval(pairs).b1)
    return scores


def test_criterion_7_ablation_ordering():
    rows = {seed: ablation_b1(seed) for seed in range(3)}
    held = [seed for seed, (vis, ce, pc) in rows.items() if pc >= ce >= vis]
    text = "; ".join(f"seed {s}: " + "/".join(f"{v:.3f}" for v in r) for s, r in rows.items())
    report(7, len(held) >= 2, f"ordering held on {len(held)}/3 seeds (Vis/Vis+CE/Vis+CE+PC B1 {text})")


# 8 -------------------------------------------------------------------------


def test_criterion_8_generation_constraints():
    cap = 24
    bad = []
    beam_equal = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        cfg = DecoderConfig(vocab_size=12, width=16, d_x=8, layers=1, heads=2, max_len=cap + 1)
        p = {}
        init_decoder(cfg, ParamInit(p, rng, std=1.0))
        X = Tensor(rng.normal(size=(1, 4, 8)))
        C = Tensor(rng.normal(size=(1, 3, 16)))
        cons = GenerationConstraints(min_len=5, no_repeat_ngram=2, max_tokens=cap)
        out = greedy_decode(X, C, p, cfg, cons)
        seq = [BOS] + out
        bigrams = list(zip(seq, seq[1:]))
        early = EOS in out and out.index(EOS) < 5
        if len(bigrams) != len(set(bigrams)) or early or len(out) > cap:
            bad.append(seed)
        one = GenerationConstraints(min_len=5, no_repeat_ngram=2, max_tokens=cap, beam=1)
        beam_equal += beam_decode(X, C, p, cfg, one) == out
    report(8, not bad and beam_equal == 100,
           f"{100 - len(bad)}/100 decodes within constraints, beam-1 == greedy on {beam_equal}/100")


# 9 -------------------------------------------------------------------------


def test_criterion_9_bleu_oracle():
    errs = [abs(bleu_n(h.split(), [r.split() for r in refs], n) - want) for h, refs, n, want in HAND_TABLE]
    bp_case = abs(HAND_TABLE[0][3] - 0.7165) < 1e-4
    s = "no acute cardiopulmonary abnormality is seen today".split()
    ident = all(bleu_n(s, [s], n) == 1.0 for n in (1, 2, 3, 4))
    ok = len(errs) == 10 and max(errs) <= 1e-9 and bp_case and ident
    report(9, ok, f"max hand-table err {max(errs):.1e} over {len(errs)} cases, identity=1.0: {ident}")


# 10 ------------------------------------------------------------------------


def _close(i, cls, vocab):
    return Sample(f"c{i}", np.zeros((16, 16)), [BOS, 4, EOS], "close", answer_class=cls)


def test_criterion_10_vqa_pipeline():
    tr, _, voc = generate_synthetic(SynthSpec(n_samples=10, open_fraction=0.0), 0)
    tr = make_dataset(list(tr)[:8], voc, "train")
    tr, _, av = filter_min_occurrence(tr, tr, 0)
    m = RepsNetModel(Config(vocab_size=len(voc), n_classes=len(av), lr=1e-3, epochs=200, seed=0), av)
    m.fit(tr)
    preds = [m.infer_close(tr, s) for s in tr]
    overfit = accuracy_eval(preds, tr, av).accuracy

    vocab = build_vocab(["a b"])
    crafted_av = AnswerVocab(["left", "right"], {"left": 3, "right": 3})
    crafted = make_dataset([_close(i, c, vocab) for i, c in
                            enumerate(["left", "right", "top", "center", "bottom"])], vocab, "eval")
    r = accuracy_eval([0, 0, 1, 1, 1], crafted, crafted_av)

    counts = {"a": 12, "b": 7, "c": 3, "d": 1}
    pool = [_close(i, c, vocab) for i, c in enumerate(c for c, n in counts.items() for _ in range(n))]
    train = make_dataset(pool, vocab, "train")
    held = make_dataset([_close(100 + i, c, vocab) for i, c in enumerate(counts)], vocab, "eval")
    kept, sizes, unseen = [], [], []
    for mo in (0, 5, 10):
        t, e, v = filter_min_occurrence(train, held, mo)
        kept.append(set(v.classes))
        sizes.append(len(t))
        unseen.append(sum(s.unseen for s in e))
    mono = (kept[0] >= kept[1] >= kept[2] and sizes == sorted(sizes, reverse=True)
            and unseen == sorted(unseen))
    ok = overfit == 1.0 and r.accuracy == 0.5 and r.unseen == 3 and mono
    report(10, ok, f"overfit acc {overfit:.2f}, crafted acc {r.accuracy} unseen {r.unseen}, "
                   f"M_o classes {[len(k) for k in kept]} monotone={mono}")


# 11 ------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path, capsys):
    cmd_synth(tmp_path / "data", seed=5)
    cfg_path = tmp_path / "data" / "config.txt"
    cfg_path.write_text(format_config(load_config(cfg_path).with_(epochs=3, lr=1e-3, max_tokens=40)))
    a = cmd_train(cfg_path, tmp_path / "a")
    b = cmd_train(cfg_path, tmp_path / "b")
    same_ckpt = a.read_bytes() == b.read_bytes()
    data = tmp_path / "data" / "eval.jsonl"
    cmd_eval(a, data, tmp_path / "e1.json")
    cmd_eval(b, data, tmp_path / "e2.json")
    same_eval = (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()
    g = [cmd_generate(run, data, out=tmp_path / f"g{i}.txt") for i, run in enumerate((a, b, a))]
    same_gen = g[0] == g[1] == g[2] and (tmp_path / "g0.txt").read_bytes() == (tmp_path / "g1.txt").read_bytes()
    capsys.readouterr()
    report(11, same_ckpt and same_eval and same_gen,
           f"checkpoint identical={same_ckpt} ({a.stat().st_size} bytes), eval identical={same_eval}, "
           f"generate identical={same_gen}")
