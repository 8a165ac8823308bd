"""Independent brute-force re-implementations used to freeze golden values.

Nothing here imports dlnlab; each formula is written out the slow way.
"""

import itertools
import math
from fractions import Fraction

import numpy as np


def grams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def bleu_oracle(cand, refs, max_n=4, eps=1e-12):
    n_eff = min(max_n, len(cand), max(len(r) for r in refs))
    logs = []
    for n in range(1, n_eff + 1):
        cg = grams(cand, n)
        matched = 0
        for g in set(cg):
            cap = max(grams(r, n).count(g) for r in refs)
            matched += min(cg.count(g), cap)
        p = matched / len(cg)
        logs.append(math.log(p) if matched else math.log(eps))
    lens = sorted(len(r) for r in refs)
    r = min(lens, key=lambda L: (abs(L - len(cand)), L))
    bp = math.exp(1 - r / len(cand)) if len(cand) < r else 1.0
    return bp * math.exp(sum(logs) / n_eff)


def rouge_oracle(cand, ref, beta=1.2):
    # LCS by brute-force over candidate subsequences (small inputs only)
    best = 0
    for k in range(len(cand), 0, -1):
        for idx in itertools.combinations(range(len(cand)), k):
            sub = [cand[i] for i in idx]
            it = iter(ref)
            if all(any(w == x for x in it) for w in sub):
                best = k
                break
        if best:
            break
    if best == 0:
        return 0.0
    p = Fraction(best, len(cand))
    r = Fraction(best, len(ref))
    b2 = Fraction(beta).limit_denominator(1000) ** 2
    return float((1 + b2) * p * r / (r + b2 * p))


def _stem(w):
    for suf in ("ing", "ed", "s"):
        if w.endswith(suf) and len(w) > len(suf):
            return w[: -len(suf)]
    return w


def meteor_oracle(cand, ref):
    """Enumerate every partial injective map cand->ref; keep those with the
    most exact links, then most stem links, then fewest chunks."""
    options = []
    for i, w in enumerate(cand):
        opts = [None]
        for j, x in enumerate(ref):
            if w == x or _stem(w) == _stem(x):
                opts.append(j)
        options.append(opts)
    best_key, best = None, None
    for assign in itertools.product(*options):
        used = [j for j in assign if j is not None]
        if len(used) != len(set(used)):
            continue
        exact = sum(1 for i, j in enumerate(assign) if j is not None and cand[i] == ref[j])
        stemmed = len(used) - exact
        pairs = [(i, j) for i, j in enumerate(assign) if j is not None]
        chunks = 0
        prev = None
        for i, j in pairs:
            if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
                chunks += 1
            prev = (i, j)
        key = (exact, stemmed, -chunks)
        if best_key is None or key > best_key:
            best_key, best = key, (len(used), chunks)
    m, chunks = best
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f = 10 * p * r / (r + 9 * p)
    return f * (1 - 0.5 * (chunks / m) ** 3)


def cider_oracle(cand, refs, corpus, max_n=4, sigma=6.0):
    D = len(corpus)
    total = 0.0
    for ref in refs:
        for n in range(1, max_n + 1):
            vocab = sorted(set(grams(cand, n)) | set(grams(ref, n)))
            if not vocab:
                continue
            idf = np.array([math.log(D / max(1, sum(g in grams(doc, n) for doc in corpus))) for g in vocab])
            cv = np.array([grams(cand, n).count(g) for g in vocab], float) * idf
            rv = np.array([grams(ref, n).count(g) for g in vocab], float) * idf
            nc, nr = np.linalg.norm(cv), np.linalg.norm(rv)
            if nc == 0 or nr == 0:
                continue
            sim = float(np.minimum(cv, rv) @ rv) / (nc * nr)
            total += sim * math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
    return 10 * total / max_n / len(refs)
