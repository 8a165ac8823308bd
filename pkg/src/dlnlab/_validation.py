"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from dlnlab.exceptions import NotADistribution
from dlnlab.text import TokenSeq, as_tokens


def check_pairs(X) -> list[tuple[TokenSeq, TokenSeq]]:
    """Coerce ``X`` to a list of ``(candidate, reference)`` token pairs.

    Each side may be a string or a token sequence.
    """
    if isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], tuple):
        raise TypeError("X must be a sequence of (candidate, reference) pairs, not a single pair")
    pairs = []
    for i, item in enumerate(X):
        try:
            cand, ref = item
        except (TypeError, ValueError):
            raise TypeError(f"X[{i}] is not a (candidate, reference) pair") from None
        pairs.append((as_tokens(cand), as_tokens(ref)))
    if not pairs:
        raise ValueError("X is empty")
    return pairs


def check_targets(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1 and y.size == 3 and n_samples == 1:
        y = y.reshape(1, 3)
    if y.shape != (n_samples, 3):
        raise ValueError(f"y must have shape ({n_samples}, 3), got {y.shape}")
    if not np.all(np.isfinite(y)) or y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("targets must be finite and lie in [0, 1]")
    return y


def check_distributions(dist: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Rows along the last axis must be non-negative and sum to one."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim < 2:
        raise NotADistribution(f"expected at least 2-d distributions, got shape {dist.shape}")
    if np.any(dist < -atol) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > atol):
        raise NotADistribution("each row must be non-negative and sum to 1")
    return dist


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
