"""Self-supervised scored pairs for training the metric surrogate.

Two sources: random word deletion/swap applied to corpus sentences, and
(prediction, ground truth) pairs harvested from a captioner during training.
Both are scored with the exact oracles in :mod:`dlnlab.metrics`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from joblib import Parallel, delayed

from dlnlab.exceptions import MalformedRecord
from dlnlab.metrics import IdfTable, MetricTriple, score_triple
from dlnlab.text import TokenSeq

OPS = ("delete", "swap")
PROVENANCES = ("perturbed", "harvested")
DEFAULT_P = 0.25
DEFAULT_COUNT = 20_000


@dataclass(frozen=True)
class PerturbPolicy:
    p: float = DEFAULT_P
    ops: tuple[str, ...] = OPS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        ops = tuple(self.ops)
        if not ops or any(op not in OPS for op in ops) or len(set(ops)) != len(ops):
            raise ValueError(f"ops must be a non-empty subset of {OPS}, got {self.ops}")
        object.__setattr__(self, "ops", ops)


@dataclass(frozen=True)
class ScoredPairRecord:
    candidate: TokenSeq
    reference: TokenSeq
    truth: MetricTriple
    provenance: str
    epoch: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "candidate", TokenSeq(self.candidate))
        object.__setattr__(self, "reference", TokenSeq(self.reference))

    def to_json(self) -> str:
        return json.dumps({
            "candidate": " ".join(self.candidate),
            "reference": " ".join(self.reference),
            "bleu": self.truth.bleu,
            "meteor": self.truth.meteor,
            "cider": self.truth.cider,
            "provenance": self.provenance,
            "epoch": self.epoch,
        })

    @classmethod
    def from_json(cls, line: str, lineno: int = 0) -> "ScoredPairRecord":
        try:
            obj = json.loads(line)
            epoch = obj["epoch"]
            if epoch is not None and not isinstance(epoch, int):
                raise ValueError("epoch must be an integer or null")
            return cls(
                candidate=TokenSeq(obj["candidate"].split(" ")),
                reference=TokenSeq(obj["reference"].split(" ")),
                truth=MetricTriple(float(obj["bleu"]), float(obj["meteor"]), float(obj["cider"])),
                provenance=obj["provenance"],
                epoch=epoch,
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise MalformedRecord(lineno, str(exc) or type(exc).__name__) from None


def perturb_sentence(seq: Sequence[str], policy: PerturbPolicy, rng: np.random.Generator) -> TokenSeq:
    """Independently select each position with probability ``policy.p`` and
    apply a uniformly chosen enabled op to it.

    Swaps exchange a token with its right neighbour (the last position swaps
    left) and are applied left to right; deletions remove the originally
    selected tokens afterwards. If every token would be deleted, the one
    with the lowest original index is kept.
    """
    n = len(seq)
    if n < 1:
        raise ValueError("cannot perturb an empty sequence")
    selected = rng.random(n) < policy.p
    op_ids = rng.integers(len(policy.ops), size=n)

    work = list(range(n))
    doomed = set()
    for i in range(n):
        if not selected[i]:
            continue
        op = policy.ops[op_ids[i]]
        if op == "delete":
            doomed.add(i)
        elif n > 1:
            j = i + 1 if i < n - 1 else i - 1
            a, b = work.index(i), work.index(j)
            work[a], work[b] = work[b], work[a]
    if len(doomed) == n:
        doomed.discard(0)
    return TokenSeq(seq[k] for k in work if k not in doomed)


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for record ``index``; records are independent of one another."""
    return np.random.default_rng([seed, index])


def _make_records(corpus, policy, idf, start, stop):
    out = []
    for k in range(start, stop):
        rng = record_rng(policy.seed, k)
        ref = corpus[int(rng.integers(len(corpus)))]
        cand = perturb_sentence(ref, policy, rng)
        out.append(ScoredPairRecord(cand, ref, score_triple(cand, ref, idf), "perturbed"))
    return out


def generate_pairs(
    corpus: Sequence[TokenSeq],
    policy: PerturbPolicy,
    count: int,
    idf: IdfTable,
    n_jobs: int = 1,
    chunk_size: int = 1000,
) -> Iterator[ScoredPairRecord]:
    """Yield ``count`` (perturbed, original) pairs sampled with replacement."""
    if not corpus:
        raise ValueError("corpus is empty")
    if count < 1:
        raise ValueError("count must be >= 1")
    corpus = list(corpus)
    bounds = [(s, min(s + chunk_size, count)) for s in range(0, count, chunk_size)]
    if n_jobs == 1:
        for lo, hi in bounds:
            yield from _make_records(corpus, policy, idf, lo, hi)
        return
    chunks = Parallel(n_jobs=n_jobs)(delayed(_make_records)(corpus, policy, idf, lo, hi) for lo, hi in bounds)
    for chunk in chunks:
        yield from chunk


def harvest_pairs(decoded: Sequence[tuple], idf: IdfTable) -> list[ScoredPairRecord]:
    """Score (prediction, ground truth, epoch) triples from a captioner run."""
    if not decoded:
        raise ValueError("nothing to harvest")
    out = []
    for pred, truth, epoch in decoded:
        pred, truth = TokenSeq(pred), TokenSeq(truth)
        out.append(ScoredPairRecord(pred, truth, score_triple(pred, truth, idf), "harvested",
                                    None if epoch is None else int(epoch)))
    return out


def write_records(path, records: Iterable[ScoredPairRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n


def read_records(path) -> list[ScoredPairRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(ScoredPairRecord.from_json(line, lineno))
    return out


def records_to_xy(records: Sequence[ScoredPairRecord]):
    """Split records into ``(pairs, targets)`` for :class:`~dlnlab.dln.DynamicLossNetwork`."""
    X = [(r.candidate, r.reference) for r in records]
    y = np.array([r.truth.as_tuple() for r in records], dtype=np.float64).reshape(-1, 3)
    return X, y
