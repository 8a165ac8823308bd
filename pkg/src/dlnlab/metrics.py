"""Exact caption-metric oracles: sentence BLEU-4, METEOR-lite, CIDEr-D and ROUGE-L.

These are plain Python over token tuples. They produce the regression
targets for the surrogate network and every evaluation number in the
package, so they favour clarity and determinism over speed.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from dlnlab.exceptions import EmptyInput, MissingIdf
from dlnlab.text import ngrams

BLEU_EPS = 1e-12
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
_METEOR_SEARCH_CAP = 4096
_STEM_SUFFIXES = ("ing", "ed", "s")


def _check_nonempty(*seqs):
    for s in seqs:
        if s is None or len(s) == 0:
            raise EmptyInput("metric inputs must be non-empty token sequences")


@dataclass(frozen=True)
class MetricTriple:
    """(BLEU, METEOR, CIDEr/10), every component in ``[0, 1]``."""

    bleu: float
    meteor: float
    cider: float

    def __post_init__(self):
        for name in ("bleu", "meteor", "cider"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v!r} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.bleu, self.meteor, self.cider)

    def __iter__(self):
        return iter(self.as_tuple())


# -- BLEU ---------------------------------------------------------------------


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Smoothed sentence-level BLEU.

    The n-gram order is capped at ``min(max_n, len(candidate), longest
    reference)`` so that a candidate identical to a reference always scores
    exactly 1. Zero clipped counts are replaced by ``BLEU_EPS``.
    """
    _check_nonempty(candidate)
    if not references:
        raise EmptyInput("at least one reference is required")
    _check_nonempty(*references)

    c = len(candidate)
    n_eff = min(max_n, c, max(len(r) for r in references))
    log_p = 0.0
    for n in range(1, n_eff + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, k in ngrams(ref, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        clipped = sum(min(k, max_ref[g]) for g, k in cand.items())
        total = c - n + 1
        p = clipped / total if clipped > 0 else BLEU_EPS
        log_p += math.log(p)
    # closest reference length, ties resolved toward the shorter one
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n_eff)


# -- ROUGE-L ------------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    _check_nonempty(candidate, reference)
    if beta <= 0:
        raise ValueError("beta must be positive")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


# -- METEOR-lite --------------------------------------------------------------


def stem(word: str) -> str:
    """Naive suffix stripper: drops one trailing ``ing``, ``ed`` or ``s``."""
    for suf in _STEM_SUFFIXES:
        if word.endswith(suf) and len(word) > len(suf):
            return word[: -len(suf)]
    return word


def _group_options(c_pos, r_pos, exhaustive):
    """Maximum injective pairings between two position lists; only the
    in-order pairing when ``exhaustive`` is false."""
    k = min(len(c_pos), len(r_pos))
    if len(c_pos) <= len(r_pos):
        perms = itertools.permutations(r_pos, k) if exhaustive else [r_pos[:k]]
        return [tuple(zip(c_pos, perm)) for perm in perms]
    perms = itertools.permutations(c_pos, k) if exhaustive else [c_pos[:k]]
    return [tuple(zip(perm, r_pos)) for perm in perms]


def _stage_groups(candidate, reference, c_free, r_free, key, budget):
    c_by, r_by = defaultdict(list), defaultdict(list)
    for i in c_free:
        c_by[key(candidate[i])].append(i)
    for j in r_free:
        r_by[key(reference[j])].append(j)
    shared = sorted(c_by.keys() & r_by.keys())
    combos = 1
    for k in shared:
        a, b = len(c_by[k]), len(r_by[k])
        combos *= math.perm(max(a, b), min(a, b))
    exhaustive = combos <= budget
    return [_group_options(c_by[k], r_by[k], exhaustive) for k in shared], (combos if exhaustive else 1)


def count_chunks(alignment) -> int:
    """Number of runs contiguous in both candidate and reference order."""
    if not alignment:
        return 0
    pairs = sorted(alignment)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_alignment(candidate: Sequence[str], reference: Sequence[str]):
    """Maximum exact-then-stem alignment with the fewest chunks.

    The match count does not depend on which maximum pairing is chosen, so
    only the chunk count is optimised. When the tied pairings exceed an
    internal cap (long runs of repeated words) the in-order pairing is used
    instead of the exhaustive search.
    """
    exact_groups, n_exact = _stage_groups(
        candidate, reference, range(len(candidate)), range(len(reference)), lambda w: w, _METEOR_SEARCH_CAP
    )
    budget = _METEOR_SEARCH_CAP // n_exact
    best, best_chunks = None, None
    for choice in itertools.product(*exact_groups):
        exact = [p for grp in choice for p in grp]
        c_used = {i for i, _ in exact}
        r_used = {j for _, j in exact}
        stem_groups, _ = _stage_groups(
            candidate, reference,
            [i for i in range(len(candidate)) if i not in c_used],
            [j for j in range(len(reference)) if j not in r_used],
            stem, budget,
        )
        for s_choice in itertools.product(*stem_groups):
            alignment = exact + [p for grp in s_choice for p in grp]
            chunks = count_chunks(alignment)
            if best_chunks is None or chunks < best_chunks:
                best, best_chunks = alignment, chunks
    return sorted(best)


def meteor_lite(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Unigram METEOR with exact and suffix-stem matching only.

    ``F = 10PR / (R + 9P)``, fragmentation penalty ``0.5 (chunks/m)^3``.
    """
    _check_nonempty(candidate, reference)
    alignment = meteor_alignment(candidate, reference)
    m = len(alignment)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (count_chunks(alignment) / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


# -- CIDEr-D ------------------------------------------------------------------


@dataclass(frozen=True)
class IdfTable:
    """Per-order document frequencies over a reference corpus.

    n-grams never seen in the corpus get ``df = 1`` (IDF ``log D``), the
    usual CIDEr-D convention.
    """

    n_docs: int
    df: tuple[Mapping[tuple, int], ...] = field(repr=False)

    def idf(self, gram: tuple) -> float:
        n = len(gram)
        d = self.df[n - 1].get(gram, 0)
        return math.log(self.n_docs / max(1, d))

    @property
    def log_docs(self) -> float:
        return math.log(self.n_docs)

    def __len__(self) -> int:
        return sum(len(d) for d in self.df)


def build_idf(reference_corpus: Sequence[Sequence[str]], max_n: int = CIDER_MAX_N) -> IdfTable:
    if not reference_corpus:
        raise EmptyInput("reference corpus is empty")
    df = [Counter() for _ in range(max_n)]
    for sent in reference_corpus:
        for n in range(1, max_n + 1):
            df[n - 1].update(set(ngrams(sent, n)))
    return IdfTable(len(reference_corpus), tuple(dict(d) for d in df))


def _cider_vectors(seq, idf: IdfTable, max_n):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        v = {g: k * idf.idf(g) for g, k in ngrams(seq, n).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider(
    candidate: Sequence[str],
    references: Sequence[Sequence[str]],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
) -> float:
    """Raw CIDEr-D in ``[0, 10]``."""
    _check_nonempty(candidate)
    if not references:
        raise EmptyInput("at least one reference is required")
    _check_nonempty(*references)
    if idf is None or idf.n_docs < 1 or len(idf) == 0:
        raise MissingIdf("CIDEr needs a non-empty IDF table")

    max_n = len(idf.df)
    c_vecs, c_norms = _cider_vectors(candidate, idf, max_n)
    per_n = [0.0] * max_n
    for ref in references:
        r_vecs, r_norms = _cider_vectors(ref, idf, max_n)
        delta = len(candidate) - len(ref)
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        for n in range(max_n):
            if c_norms[n] == 0.0 or r_norms[n] == 0.0:
                continue
            cv, rv = c_vecs[n], r_vecs[n]
            dot = sum(min(x, rv[g]) * rv[g] for g, x in cv.items() if g in rv)
            per_n[n] += dot / (c_norms[n] * r_norms[n]) * penalty
    return 10.0 * sum(per_n) / max_n / len(references)


# -- composite ----------------------------------------------------------------


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def score_triple(candidate: Sequence[str], reference, idf: IdfTable) -> MetricTriple:
    """Ground-truth triple for one (candidate, reference) pair.

    ``reference`` may also be a list of references; METEOR then takes the
    best single-reference score.
    """
    refs = [reference] if reference and isinstance(reference[0], str) else list(reference)
    _check_nonempty(candidate, *refs)
    return MetricTriple(
        bleu=_clamp(bleu(candidate, refs)),
        meteor=_clamp(max(meteor_lite(candidate, r) for r in refs)),
        cider=_clamp(cider(candidate, refs, idf) / 10.0),
    )


def corpus_report(candidates, references, idf: IdfTable) -> dict[str, float]:
    """Mean of each sentence metric over a test set (``references`` is a
    list of reference lists)."""
    if len(candidates) != len(references) or not candidates:
        raise EmptyInput("need equally many, at least one, candidates and reference sets")
    totals = dict(bleu=0.0, meteor=0.0, cider=0.0, rouge=0.0)
    for cand, refs in zip(candidates, references):
        totals["bleu"] += bleu(cand, refs)
        totals["meteor"] += max(meteor_lite(cand, r) for r in refs)
        totals["cider"] += cider(cand, refs, idf)
        totals["rouge"] += max(rouge_l(cand, r) for r in refs)
    return {k: v / len(candidates) for k, v in totals.items()}
