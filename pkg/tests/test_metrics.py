import math
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from dlnlab.exceptions import EmptyInput, MissingIdf
from dlnlab.metrics import (
    IdfTable,
    MetricTriple,
    bleu,
    build_idf,
    cider,
    meteor_alignment,
    meteor_lite,
    rouge_l,
    score_triple,
    stem,
)
from oracles import bleu_oracle, cider_oracle, meteor_oracle, rouge_oracle

GOLDEN = Path(__file__).parent / "data" / "golden_metrics.tsv"

vocab_words = st.sampled_from("a the man men cat cats is are cooking cooked sat on mat dog".split())
sentences = st.lists(vocab_words, min_size=1, max_size=7)
short_sentences = st.lists(vocab_words, min_size=1, max_size=5)


def load_golden():
    idf_corpus, rows = [], []
    for line in GOLDEN.read_text().splitlines():
        if line.startswith("#idf\t"):
            idf_corpus.append(line.split("\t", 1)[1].split())
        elif line and not line.startswith("#"):
            cand, ref, b, m, c = line.split("\t")
            rows.append((cand.split(), ref.split(), float(b), float(m), float(c)))
    return build_idf(idf_corpus), rows


def test_golden_suite():
    idf, rows = load_golden()
    assert len(rows) >= 20
    for cand, ref, b, m, c in rows:
        triple = score_triple(cand, ref, idf)
        assert triple.bleu == pytest.approx(b, abs=1e-9), (cand, ref)
        assert triple.meteor == pytest.approx(m, abs=1e-9), (cand, ref)
        assert triple.cider == pytest.approx(c, abs=1e-9), (cand, ref)


# -- BLEU ---------------------------------------------------------------------


def test_bleu_identity_and_disjoint():
    s = "the cat sat on mat".split()
    assert bleu(s, [s]) == 1.0
    assert bleu("a b c d".split(), ["e f g h".split()]) <= 1e-9


def test_bleu_short_candidate_hand_value():
    # N_eff = 2, p1 = p2 = 1, BP = exp(1 - 6/2)
    got = bleu("the cat".split(), ["the cat sat on the mat".split()])
    assert got == pytest.approx(math.exp(-2.0), abs=1e-12)


def test_bleu_clipping_hand_value():
    # p1 = 3/3 ("the" x2 is within the reference's two), p2 = 1/2, p3 smoothed to 1e-12,
    # BP = exp(1 - 6/3)
    got = bleu("the the cat".split(), ["the cat sat on the mat".split()])
    expected = math.exp(1 - 6 / 3) * math.exp((math.log(1 / 2) + math.log(1e-12)) / 3)
    assert got == pytest.approx(expected, abs=1e-15)


@given(sentences)
def test_bleu_identity_property(s):
    assert bleu(s, [s]) == 1.0


@given(sentences, st.lists(sentences, min_size=1, max_size=3))
def test_bleu_matches_oracle_and_order_free(c, refs):
    got = bleu(c, refs)
    assert got == pytest.approx(bleu_oracle(c, refs), abs=1e-12)
    assert got == bleu(c, list(reversed(refs)))
    assert 0.0 <= got <= 1.0


def test_bleu_empty():
    with pytest.raises(EmptyInput):
        bleu([], [["a"]])
    with pytest.raises(EmptyInput):
        bleu(["a"], [])


# -- ROUGE-L ------------------------------------------------------------------


def test_rouge_examples():
    assert rouge_l("a man is here".split(), "a man is here".split()) == 1.0
    assert rouge_l("a b".split(), "c d".split()) == 0.0
    # LCS = 2: P = 2/3, R = 2/5
    p, r, b2 = 2 / 3, 2 / 5, 1.44
    expected = (1 + b2) * p * r / (r + b2 * p)
    assert rouge_l("the cat sat".split(), "the cat on the mat".split()) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.47843137254901963, abs=1e-12)


@given(sentences, st.floats(0.1, 5.0))
def test_rouge_identity(s, beta):
    assert rouge_l(s, s, beta) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(sentences, sentences)
def test_rouge_matches_brute_force(c, r):
    assert rouge_l(c, r) == pytest.approx(rouge_oracle(c, r), abs=1e-12)


# -- METEOR-lite --------------------------------------------------------------


def test_meteor_examples():
    assert meteor_lite("a b c".split(), "a b c".split()) == pytest.approx(1 - 0.5 / 27, abs=1e-12)
    assert meteor_lite("a b c".split(), "a b c".split()) == pytest.approx(0.98148, abs=1e-5)
    assert meteor_lite("x y".split(), "p q".split()) == 0.0


def test_meteor_stem_matching():
    assert stem("cooking") == "cook" and stem("cooked") == "cook" and stem("cats") == "cat"
    assert stem("s") == "s"
    assert len(meteor_alignment("cats cooking".split(), "cat cooked".split())) == 2


def test_meteor_permutation_penalty():
    ref = "a man is slicing an onion".split()
    perm = "onion an slicing is man a".split()
    ident = meteor_lite(ref, ref)
    shuffled = meteor_lite(perm, ref)
    assert len(meteor_alignment(perm, ref)) == len(meteor_alignment(ref, ref))
    assert shuffled < ident


@settings(max_examples=80, deadline=None)
@given(short_sentences, short_sentences)
def test_meteor_matches_brute_force(c, r):
    assert meteor_lite(c, r) == pytest.approx(meteor_oracle(c, r), abs=1e-12)


@given(sentences, sentences, st.randoms(use_true_random=False))
def test_meteor_match_count_permutation_invariant(c, r, rnd):
    shuffled = list(c)
    rnd.shuffle(shuffled)
    assert len(meteor_alignment(shuffled, r)) == len(meteor_alignment(c, r))


def test_meteor_repeated_words_stay_bounded():
    c = ["the"] * 25
    r = ["the"] * 25
    assert meteor_lite(c, r) == pytest.approx(1 - 0.5 / 25 ** 3)


# -- CIDEr-D ------------------------------------------------------------------


TOY = [s.split() for s in ("a man is cooking", "a woman is cooking", "the cat sat")]


def test_idf_examples():
    single = build_idf([["a", "b"]])
    assert single.n_docs == 1 and all(v == 1 for d in single.df for v in d.values())
    assert single.idf(("a",)) == 0.0
    ten = build_idf([["x"]] + [["y"]] * 9)
    assert ten.idf(("x",)) == pytest.approx(math.log(10))
    assert ten.idf(("y",)) == pytest.approx(math.log(10 / 9))
    every = build_idf([["z", "q"], ["z"]])
    assert every.idf(("z",)) == 0.0


def test_cider_single_document_is_zero():
    idf = build_idf([["a", "man"]])
    assert cider("a man".split(), ["a man".split()], idf) == 0.0
    assert cider("x y z".split(), ["a man".split()], idf) == 0.0


def test_cider_identity_toy_corpus():
    idf = build_idf(TOY)
    # every 1..4-gram of "the cat sat" with n <= 3 occurs in one of three documents
    raw = cider("the cat sat".split(), ["the cat sat".split()], idf)
    # n = 1, 2, 3 have nonzero vectors, n = 4 is empty -> 10 * 3 / 4
    assert raw == pytest.approx(7.5, abs=1e-12)
    # "a ... is cooking" shares "a", "is", "cooking", "is cooking" with the other doc;
    # all its n-grams still have nonzero IDF because D = 3 > df
    raw2 = cider("a man is cooking".split(), ["a man is cooking".split()], idf)
    assert raw2 == pytest.approx(10.0, abs=1e-12)


def test_cider_disjoint_and_errors():
    idf = build_idf(TOY)
    assert cider("dog runs".split(), ["the cat sat".split()], idf) == 0.0
    with pytest.raises(MissingIdf):
        cider(["a"], [["a"]], IdfTable(1, ({}, {}, {}, {})))
    with pytest.raises(EmptyInput):
        cider([], [["a"]], idf)


@settings(max_examples=60, deadline=None)
@given(sentences, st.lists(sentences, min_size=1, max_size=3))
def test_cider_matches_dense_oracle(c, refs):
    idf = build_idf(TOY + refs)
    got = cider(c, refs, idf)
    assert got == pytest.approx(cider_oracle(c, refs, TOY + refs), abs=1e-9)
    assert got == pytest.approx(cider(c, list(reversed(refs)), idf), abs=1e-12)
    assert 0.0 <= got <= 10.0 + 1e-9


# -- composite ----------------------------------------------------------------


def test_score_triple_examples():
    s = "a man cooks".split()
    t = score_triple(s, s, build_idf([s]))
    assert t.bleu == 1.0
    assert t.meteor == pytest.approx(1 - 0.5 / 27)
    assert t.cider == 0.0
    d = score_triple("x y".split(), "p q r".split(), build_idf(TOY))
    assert d.bleu <= 1e-9 and d.meteor == 0.0 and d.cider == 0.0


@given(sentences, sentences)
def test_score_triple_in_unit_cube(c, r):
    t = score_triple(c, r, build_idf(TOY + [r]))
    assert all(0.0 <= v <= 1.0 for v in t)


def test_metric_triple_validates():
    with pytest.raises(ValueError):
        MetricTriple(1.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricTriple(float("nan"), 0.0, 0.0)
