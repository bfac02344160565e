import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from repsnet.errors import ContractError
from repsnet.metrics import bleu_n, brevity_penalty, clipped_precision, corpus_eval

EPS = 1e-9


def w(text):
    return text.split()


# (hypothesis, references, n, expected) with expected worked out by hand
HAND_TABLE = [
    # 3/3 unigrams, closest ref length 4 against 3 tokens
    ("the cat sat", ["the cat sat down"], 1, math.exp(1 - 4 / 3)),
    ("a b c d", ["a b c d"], 4, 1.0),
    ("x y", ["a b"], 1, 0.0),
    # "the" clipped to one match out of four, hypothesis longer so no penalty
    ("the the the the", ["the cat"], 1, 1 / 4),
    # p1 = 4/5, p2 = 2/4
    ("a b c d e", ["a b x d e"], 2, math.sqrt(4 / 5 * 2 / 4)),
    # p3 = p4 = 0 are smoothed to 1e-9
    ("a b c d e", ["a b x d e"], 4, (4 / 5 * 2 / 4 * EPS * EPS) ** 0.25),
    # two-token hypothesis scored on orders 1..2, penalty exp(1 - 3/2)
    ("a b", ["a b c"], 4, math.exp(-0.5)),
    # closest reference is the 3-token one, so no penalty
    ("a b c d", ["a b c", "a b c d e f"], 2, 1.0),
    # lengths 3 and 5 are equally close; the shorter is used
    ("a b c d", ["a b c", "a b c d e"], 1, 1.0),
    # p1 = 2/3 (second "a" clipped), p2 = 1/2
    ("a a b", ["a b"], 2, math.sqrt(2 / 3 * 1 / 2)),
]


def test_table_values_by_hand():
    assert abs(HAND_TABLE[0][3] - 0.7165) < 1e-4
    assert abs(HAND_TABLE[4][3] - 0.632456) < 1e-6
    assert abs(HAND_TABLE[6][3] - 0.606531) < 1e-6
    assert abs(HAND_TABLE[9][3] - 0.577350) < 1e-6


@pytest.mark.parametrize("hyp,refs,n,want", HAND_TABLE)
def test_hand_table(hyp, refs, n, want):
    assert abs(bleu_n(w(hyp), [w(r) for r in refs], n) - want) <= 1e-9


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_identity(n):
    s = w("there is a small nodule in the upper right zone")
    assert bleu_n(s, [s], n) == 1.0


def test_empty_hypothesis():
    assert bleu_n([], [w("a b")], 4) == 0.0


def test_zero_unigram_precision_is_zero():
    assert bleu_n(w("p q r s"), [w("a b c d")], 4) == 0.0


def test_contracts():
    with pytest.raises(ContractError):
        bleu_n(w("a"), [w("a")], 5)
    with pytest.raises(ContractError):
        bleu_n(w("a"), [], 1)
    with pytest.raises(ContractError):
        corpus_eval([])


def test_individual_order():
    # p2 alone is 2/4
    assert abs(bleu_n(w("a b c d e"), [w("a b x d e")], 2, cumulative=False) - 0.5) < 1e-12
    assert bleu_n(w("a b"), [w("a b")], 3, cumulative=False) == 0.0


def test_higher_order_can_score_higher():
    # p1 = 4/5, p2 = 3/4, p3 = 3/3
    hyp, ref = [0, 1, 0, 0, 1], [0, 0, 1, 0, 0]
    b2, b3 = bleu_n(hyp, [ref], 2), bleu_n(hyp, [ref], 3)
    assert abs(b3 - (4 / 5 * 3 / 4) ** (1 / 3)) < 1e-12 and b3 > b2


def test_pieces():
    assert clipped_precision(w("the the the"), [w("the cat the")], 1) == (2, 3)
    assert brevity_penalty(5, [w("a b c")]) == 1.0
    assert abs(brevity_penalty(2, [w("a b c d")]) - math.exp(-1)) < 1e-15


class TestCorpus:
    def test_identical(self):
        pairs = [(w("a b c d e"), w("a b c d e")), (w("x y z w"), w("x y z w"))]
        r = corpus_eval(pairs)
        assert (r.b1, r.b2, r.b3, r.b4) == (1.0, 1.0, 1.0, 1.0)

    def test_singleton(self):
        hyp, ref = w("a b c d e"), w("a b x d e")
        r = corpus_eval([(hyp, ref)])
        assert r.b2 == bleu_n(hyp, [ref], 2) and r.b4 == bleu_n(hyp, [ref], 4)

    def test_mean_of_hand_cases(self):
        r = corpus_eval([(w("the cat sat"), w("the cat sat down")), (w("x y"), w("a b"))])
        assert abs(r.b1 - math.exp(1 - 4 / 3) / 2) <= 1e-9
        assert abs(r.b1 - 0.3583) < 1e-4
        assert r.as_dict().keys() == {"b1", "b2", "b3", "b4"}
        assert len(r.per_sample) == 2


tokens = st.lists(st.integers(0, 6), min_size=1, max_size=12)


@given(tokens, tokens, st.permutations(list(range(7))))
def test_relabeling_invariance(hyp, ref, perm):
    relabel = lambda s: [perm[t] for t in s]
    for n in (1, 2, 3, 4):
        assert bleu_n(hyp, [ref], n) == bleu_n(relabel(hyp), [relabel(ref)], n)


@given(tokens, tokens)
def test_range(hyp, ref):
    for n in (1, 2, 3, 4):
        assert 0.0 <= bleu_n(hyp, [ref], n) <= 1.0


@given(st.lists(st.integers(0, 3), min_size=4, max_size=8), tokens, tokens)
def test_orders_decrease_when_precisions_decrease(common, head, tail):
    # a shared run of four or more tokens keeps every precision positive; the
    # geometric mean only falls with order when the precisions do
    hyp, ref = common + tail, head + common
    precisions = [m / t for m, t in (clipped_precision(hyp, [ref], n) for n in (1, 2, 3, 4))]
    assume(all(a >= b for a, b in zip(precisions, precisions[1:])))
    scores = [bleu_n(hyp, [ref], n) for n in (1, 2, 3, 4)]
    assert all(a >= b - 1e-15 for a, b in zip(scores, scores[1:]))
