"""Tokenization, vocabulary and n-gram helpers shared by the metric oracles,
the pair generator and both networks."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from dlnlab.exceptions import EmptyAfterTokenize

MAX_CAPTION_LEN = 30
DEFAULT_MIN_COUNT = 5

_STRIP = re.compile(r"[^a-z0-9'\s]")


class TokenSeq(tuple):
    """Immutable, non-empty sequence of lowercase word tokens."""

    __slots__ = ()

    def __new__(cls, tokens: Iterable[str]):
        tokens = tuple(tokens)
        if not tokens:
            raise EmptyAfterTokenize("token sequence is empty")
        for tok in tokens:
            if not isinstance(tok, str) or not tok:
                raise ValueError(f"invalid token {tok!r}")
        return super().__new__(cls, tokens)

    def text(self) -> str:
        return " ".join(self)

    def __repr__(self) -> str:
        return f"TokenSeq({list(self)!r})"


def tokenize(text: str) -> TokenSeq:
    """Lowercase, drop characters outside ``[a-z0-9']`` and split on whitespace.

    >>> list(tokenize("A man is Cooking."))
    ['a', 'man', 'is', 'cooking']
    """
    words = _STRIP.sub("", text.lower()).split()
    if not words:
        raise EmptyAfterTokenize(f"no tokens survive in {text!r}")
    return TokenSeq(words)


def as_tokens(seq) -> TokenSeq:
    """Coerce a string or token iterable to a :class:`TokenSeq`."""
    if isinstance(seq, TokenSeq):
        return seq
    if isinstance(seq, str):
        return tokenize(seq)
    return TokenSeq(seq)


def truncate(seq: TokenSeq, max_len: int = MAX_CAPTION_LEN) -> TokenSeq:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq) <= max_len:
        return seq
    return TokenSeq(seq[:max_len])


def ngrams(seq: Sequence[str], n: int) -> Counter:
    """Multiset of contiguous ``n``-grams, keyed by token tuples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def read_corpus(path, max_len: int = MAX_CAPTION_LEN) -> list[TokenSeq]:
    """One sentence per line; blank or punctuation-only lines are skipped."""
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                corpus.append(truncate(tokenize(line), max_len))
            except EmptyAfterTokenize:
                continue
    return corpus


class Vocabulary:
    """Dense word/id mapping with fixed reserved ids.

    Ids ``0..4`` are ``PAD, BOS, EOS, UNK, SEP``; kept words follow in order
    of decreasing frequency, ties broken alphabetically.
    """

    PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
    RESERVED = (PAD, BOS, EOS, UNK, SEP)
    pad_id, bos_id, eos_id, unk_id, sep_id = range(5)

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(self.RESERVED)
        for w in words:
            if w in self.RESERVED:
                continue
            self.itos.append(w)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def build(cls, corpus: Sequence[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> "Vocabulary":
        if not corpus:
            raise ValueError("corpus is empty")
        counts = Counter(tok for seq in corpus for tok in seq)
        kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __hash__(self) -> int:
        return hash(tuple(self.itos))

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    @property
    def words(self) -> list[str]:
        """Non-reserved words in id order."""
        return self.itos[len(self.RESERVED):]

    def encode(self, seq: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(tok, unk) for tok in seq]

    def decode(self, ids: Iterable[int], strip_special: bool = False) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i < len(self.RESERVED):
                if i == self.eos_id:
                    break
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{w}\t{i}\n" for i, w in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            word, _, idx = line.partition("\t")
            if not idx.isdigit():
                raise ValueError(f"{path}:{lineno}: expected 'word<TAB>id'")
            entries.append((int(idx), word))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: ids are not dense")
        words = [w for _, w in entries]
        if tuple(words[:len(cls.RESERVED)]) != cls.RESERVED:
            raise ValueError(f"{path}: reserved ids do not match")
        return cls(words)


def build_vocab(corpus: Sequence[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    return Vocabulary.build(corpus, min_count)
