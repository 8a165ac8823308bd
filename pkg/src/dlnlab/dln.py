"""Dynamic loss network: a small self-attention regressor that predicts
(BLEU, METEOR, CIDEr/10) for a (candidate, reference) sentence pair.

The candidate side can also be fed as per-position probability
distributions over the vocabulary (``forward_soft``); each position then
embeds as the probability-weighted mixture of embedding rows, which keeps
the predicted scores differentiable with respect to a decoder's softmax.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from dlnlab import autograd as ag
from dlnlab._validation import check_distributions, check_pairs, check_random_state, check_targets
from dlnlab.autograd import Tensor, no_grad, parameter
from dlnlab.checkpoint import load_arrays, save_arrays
from dlnlab.exceptions import DatasetTooSmall, NotADistribution
from dlnlab.optim import Adam
from dlnlab.text import DEFAULT_MIN_COUNT, TokenSeq, Vocabulary

log = logging.getLogger(__name__)

METRICS = ("bleu", "meteor", "cider")
_NEG = -1e9


@dataclass(frozen=True)
class PairEncoding:
    """``[BOS, candidate..., SEP, reference..., EOS]`` with segment flags
    (0 up to and including SEP, 1 after)."""

    ids: np.ndarray
    segments: np.ndarray
    n_candidate: int
    n_reference: int

    def __len__(self) -> int:
        return len(self.ids)


def _fit_lengths(n_cand: int, n_ref: int, max_len: int) -> tuple[int, int]:
    budget = max_len - 3
    if budget < 2:
        raise ValueError("max pair length must be at least 5")
    if n_cand + n_ref <= budget:
        return n_cand, n_ref
    c = min(n_cand, max(budget - n_ref, math.ceil(budget / 2)))
    return c, min(n_ref, budget - c)


def _layout(n_cand: int, ref_ids, max_len: int):
    """Ids (candidate slots left as PAD) and segments for a pair layout."""
    c, r = _fit_lengths(n_cand, len(ref_ids), max_len)
    V = Vocabulary
    ids = [V.bos_id] + [V.pad_id] * c + [V.sep_id] + list(ref_ids[:r]) + [V.eos_id]
    segments = [0] * (c + 2) + [1] * (r + 1)
    return np.array(ids, dtype=np.int64), np.array(segments, dtype=np.int64), c, r


def encode_pair(candidate, reference, vocab: Vocabulary, max_len: int = 64) -> PairEncoding:
    """Lay out a pair for the network; overlong pairs are trimmed, candidate first."""
    cand_ids = vocab.encode(candidate)
    ids, segments, c, r = _layout(len(cand_ids), vocab.encode(reference), max_len)
    ids[1:1 + c] = cand_ids[:c]
    return PairEncoding(ids, segments, c, r)


def pad_batch(encodings):
    L = max(len(e) for e in encodings)
    B = len(encodings)
    ids = np.full((B, L), Vocabulary.pad_id, dtype=np.int64)
    segs = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, e in enumerate(encodings):
        ids[b, :len(e)] = e.ids
        segs[b, :len(e)] = e.segments
        mask[b, :len(e)] = True
    return ids, segs, mask


def stage1_loss(pred: Tensor, truth, weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted squared error per metric, summed over metrics, mean over the batch."""
    w = np.asarray(weights, dtype=np.float64)
    sq = ag.square(ag.sub(pred, np.asarray(truth, dtype=np.float64)))
    return ag.mean(ag.sum_(ag.mul(sq, w), axis=1))


def pearson(truth: np.ndarray, pred: np.ndarray) -> tuple[float, bool]:
    """Pearson r, or ``(0.0, True)`` when either side is constant."""
    if truth.size < 2 or np.std(truth) == 0.0 or np.std(pred) == 0.0:
        return 0.0, True
    return float(np.corrcoef(truth, pred)[0, 1]), False


@dataclass
class Stage1Report:
    """Held-out agreement between oracle scores and predictions."""

    pearson: dict[str, float]
    degenerate: dict[str, bool]
    mae: dict[str, float]
    bin_edges: np.ndarray
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def write_histograms(self, path, metric: str = "bleu") -> None:
        truth, pred = self.histograms[metric]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "truth_count", "pred_count"])
            for lo, hi, t, p in zip(self.bin_edges[:-1], self.bin_edges[1:], truth, pred):
                w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(t), int(p)])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "pearson", "degenerate", "mae"])
            for m in METRICS:
                w.writerow([m, f"{self.pearson[m]:.6f}", int(self.degenerate[m]), f"{self.mae[m]:.6f}"])


def evaluate_predictions(truth: np.ndarray, pred: np.ndarray, bins: int = 20) -> Stage1Report:
    truth, pred = np.asarray(truth, float), np.asarray(pred, float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    r, flag, mae, hist = {}, {}, {}, {}
    for k, m in enumerate(METRICS):
        r[m], flag[m] = pearson(truth[:, k], pred[:, k])
        mae[m] = float(np.mean(np.abs(truth[:, k] - pred[:, k])))
        hist[m] = (np.histogram(truth[:, k], edges)[0], np.histogram(pred[:, k], edges)[0])
    return Stage1Report(r, flag, mae, edges, hist)


class DynamicLossNetwork(RegressorMixin, BaseEstimator):
    """Pre-LN transformer encoder over a joined pair, masked mean pooling and a
    three-layer head ending in a sigmoid.

    Parameters
    ----------
    vocabulary : Vocabulary, optional
        Shared with the captioner. Built from the training pairs when omitted.
    loss_weights : tuple of three floats
        Per-metric weights of the squared error during fitting.
    holdout_fraction : float
        Share of the records kept out of training; the epoch with the lowest
        held-out loss is the one retained.
    """

    forward_calls = 0  # process-wide count of network evaluations

    def __init__(
        self,
        vocabulary=None,
        d_model=64,
        n_heads=2,
        n_layers=2,
        d_ff=128,
        head_hidden=64,
        max_pair_len=64,
        loss_weights=(1.0, 1.0, 1.0),
        learning_rate=1e-4,
        batch_size=64,
        epochs=20,
        holdout_fraction=0.1,
        min_records=1000,
        clip_norm=1.0,
        random_state=0,
        verbose=False,
    ):
        self.vocabulary = vocabulary
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.head_hidden = head_hidden
        self.max_pair_len = max_pair_len
        self.loss_weights = loss_weights
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.holdout_fraction = holdout_fraction
        self.min_records = min_records
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.verbose = verbose

    # -- setup ---------------------------------------------------------------

    def _validate_params(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        w = np.asarray(self.loss_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("loss_weights must be three non-negative values, not all zero")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        d, V = self.d_model, len(self.vocabulary_)

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        p = {
            "tok_emb": rng.normal(0.0, 0.3, size=(V, d)),
            "pos_emb": rng.normal(0.0, 0.1, size=(self.max_pair_len, d)),
            "seg_emb": rng.normal(0.0, 0.1, size=(2, d)),
        }
        for i in range(self.n_layers):
            pre = f"layer{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = dense(d, d)
            p[pre + "bo"] = np.zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            p[pre + "w1"], p[pre + "b1"] = dense(d, self.d_ff), np.zeros(self.d_ff)
            p[pre + "w2"], p[pre + "b2"] = dense(self.d_ff, d), np.zeros(d)
        p["ln_f.g"], p["ln_f.b"] = np.ones(d), np.zeros(d)
        h = self.head_hidden
        p["head.w1"], p["head.b1"] = dense(d, h), np.zeros(h)
        p["head.w2"], p["head.b2"] = dense(h, h // 2), np.zeros(h // 2)
        p["head.w3"], p["head.b3"] = dense(h // 2, 3), np.zeros(3)
        return {k: parameter(v, name=k) for k, v in p.items()}

    # -- network -------------------------------------------------------------

    def _attention(self, x: Tensor, key_bias: np.ndarray, pre: str) -> Tensor:
        P = self.params_
        B, L, d = x.shape
        h = self.n_heads
        dh = d // h

        def split(t):
            return ag.transpose(ag.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q = split(x @ P[pre + "wq"])
        k = split(x @ P[pre + "wk"])
        v = split(x @ P[pre + "wv"])
        scores = ag.mul(q @ ag.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        attn = ag.softmax(ag.add(scores, key_bias))
        ctx = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (B, L, d))
        return ctx @ P[pre + "wo"] + P[pre + "bo"]

    def _encode(self, x: Tensor, segments: np.ndarray, mask: np.ndarray) -> Tensor:
        """Embedded tokens ``[B, L, d]`` to predicted scores ``[B, 3]``."""
        P = self.params_
        self.n_forward_calls_ = getattr(self, "n_forward_calls_", 0) + 1
        DynamicLossNetwork.forward_calls += 1
        L = x.shape[1]
        x = x + P["pos_emb"][:L] + ag.embedding(P["seg_emb"], segments)
        key_bias = np.where(mask, 0.0, _NEG)[:, None, None, :]
        for i in range(self.n_layers):
            pre = f"layer{i}."
            x = x + self._attention(ag.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"]), key_bias, pre)
            hdn = ag.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            hdn = ag.relu(hdn @ P[pre + "w1"] + P[pre + "b1"]) @ P[pre + "w2"] + P[pre + "b2"]
            x = x + hdn
        x = ag.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        m = mask.astype(np.float64)
        pooled = ag.mul(ag.sum_(ag.mul(x, m[:, :, None]), axis=1), 1.0 / m.sum(axis=1, keepdims=True))
        z = ag.relu(pooled @ P["head.w1"] + P["head.b1"])
        z = ag.relu(z @ P["head.w2"] + P["head.b2"])
        return ag.sigmoid(z @ P["head.w3"] + P["head.b3"])

    def forward_encoded(self, encodings) -> Tensor:
        ids, segs, mask = pad_batch(encodings)
        return self._encode(ag.embedding(self.params_["tok_emb"], ids), segs, mask)

    def forward(self, X) -> Tensor:
        """Differentiable predictions ``[n, 3]`` for hard token pairs."""
        check_is_fitted(self, "params_")
        pairs = check_pairs(X)
        return self.forward_encoded([encode_pair(c, r, self.vocabulary_, self.max_pair_len) for c, r in pairs])

    def forward_soft(self, distributions, references, lengths=None) -> Tensor:
        """Predicted scores with probability rows in place of candidate tokens.

        Parameters
        ----------
        distributions : Tensor or ndarray, shape (B, T, V)
            Row ``t`` of sample ``b`` is the distribution for candidate position
            ``t``; only the first ``lengths[b]`` rows are used.
        references : sequence of B token sequences
        lengths : sequence of B ints, optional (defaults to T for every sample)
        """
        check_is_fitted(self, "params_")
        dist = ag.as_tensor(distributions)
        if dist.ndim != 3 or dist.shape[2] != len(self.vocabulary_):
            raise NotADistribution(f"expected (B, T, {len(self.vocabulary_)}) distributions, got {dist.shape}")
        B, T, V = dist.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if len(references) != B or len(lengths) != B or lengths.min() < 1 or lengths.max() > T:
            raise ValueError("references and lengths must match the batch of distributions")
        valid = np.arange(T)[None, :] < lengths[:, None]
        check_distributions(dist.data[valid])

        layouts = [_layout(int(n), self.vocabulary_.encode(ref), self.max_pair_len) for n, ref in zip(lengths, references)]
        L = max(len(ids) for ids, _, _, _ in layouts)
        zero_row = B * T
        ids = np.full((B, L), Vocabulary.pad_id, dtype=np.int64)
        segs = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        slot = np.full((B, L), zero_row, dtype=np.int64)
        for b, (row_ids, row_segs, c, _) in enumerate(layouts):
            n = len(row_ids)
            ids[b, :n], segs[b, :n], mask[b, :n] = row_ids, row_segs, True
            slot[b, 1:1 + c] = b * T + np.arange(c)
        is_hard = (slot == zero_row).astype(np.float64)[:, :, None]

        tok = self.params_["tok_emb"]
        soft_rows = ag.reshape(dist, (B * T, V)) @ tok
        soft_rows = ag.concat([soft_rows, Tensor(np.zeros((1, self.d_model)))], axis=0)
        x = ag.mul(ag.embedding(tok, ids), is_hard) + ag.embedding(soft_rows, slot)
        return self._encode(x, segs, mask)

    # -- estimator API -------------------------------------------------------

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params_.values())

    def set_trainable(self, trainable: bool) -> "DynamicLossNetwork":
        """Freeze (``False``) or unfreeze the network's parameters."""
        for p in self.params_.values():
            p.requires_grad = trainable
            p.grad = np.zeros_like(p.data) if trainable else None
        return self

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on scored pairs with mini-batch Adam.

        Without ``X_val`` a ``holdout_fraction`` share of ``X`` is held out
        (fixed by ``random_state``).
        """
        self._validate_params()
        pairs = check_pairs(X)
        y = check_targets(y, len(pairs))
        if len(pairs) < self.min_records:
            raise DatasetTooSmall(f"need at least {self.min_records} records, got {len(pairs)}")
        rng = check_random_state(self.random_state)

        if self.vocabulary is None:
            corpus = [seq for pair in pairs for seq in pair]
            self.vocabulary_ = Vocabulary.build(corpus, DEFAULT_MIN_COUNT)
        else:
            self.vocabulary_ = self.vocabulary
        self.params_ = self._init_params(rng)
        self.n_parameters_ = int(sum(p.size for p in self.params_.values()))
        log.info("dln: %d parameters, vocabulary of %d", self.n_parameters_, len(self.vocabulary_))

        enc = [encode_pair(c, r, self.vocabulary_, self.max_pair_len) for c, r in pairs]
        if X_val is None:
            order = rng.permutation(len(enc))
            n_hold = max(1, int(round(self.holdout_fraction * len(enc))))
            hold_idx, train_idx = order[:n_hold], order[n_hold:]
            val_enc, y_hold = [enc[i] for i in hold_idx], y[hold_idx]
        else:
            train_idx = np.arange(len(enc))
            vp = check_pairs(X_val)
            val_enc = [encode_pair(c, r, self.vocabulary_, self.max_pair_len) for c, r in vp]
            y_hold = check_targets(y_val, len(vp))
        self.heldout_indices_ = None if X_val is not None else np.sort(hold_idx)

        opt = Adam(self.parameters, lr=self.learning_rate, clip_norm=self.clip_norm)
        self.history_ = []
        best_loss, best_state = np.inf, None
        for epoch in range(1, self.epochs + 1):
            perm = train_idx[rng.permutation(len(train_idx))]
            total, n_seen = 0.0, 0
            for lo in range(0, len(perm), self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                opt.zero_grad()
                loss = stage1_loss(self.forward_encoded([enc[i] for i in idx]), y[idx], self.loss_weights)
                ag.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                n_seen += len(idx)
            pred = self._predict_encoded(val_enc)
            report = evaluate_predictions(y_hold, pred)
            w = np.asarray(self.loss_weights, float)
            hold_loss = float(np.mean(((pred - y_hold) ** 2) @ w))
            row = {"epoch": epoch, "train_loss": total / n_seen, "heldout_loss": hold_loss}
            row.update({f"r_{m}": report.pearson[m] for m in METRICS})
            row.update({f"mae_{m}": report.mae[m] for m in METRICS})
            self.history_.append(row)
            if self.verbose:
                log.warning("dln epoch %d: train %.5f heldout %.5f r=(%.3f, %.3f, %.3f)", epoch, row["train_loss"],
                            hold_loss, row["r_bleu"], row["r_meteor"], row["r_cider"])
            if hold_loss < best_loss:
                best_loss = hold_loss
                best_state = {k: p.data.copy() for k, p in self.params_.items()}
                self.best_epoch_ = epoch
        for k, p in self.params_.items():
            p.data = best_state[k]
        return self

    def _predict_encoded(self, encodings, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for lo in range(0, len(encodings), batch_size):
                out.append(self.forward_encoded(encodings[lo:lo + batch_size]).data)
        return np.concatenate(out, axis=0)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        pairs = check_pairs(X)
        return self._predict_encoded([encode_pair(c, r, self.vocabulary_, self.max_pair_len) for c, r in pairs])

    def evaluate(self, X, y, bins: int = 20) -> Stage1Report:
        pairs = check_pairs(X)
        return evaluate_predictions(check_targets(y, len(pairs)), self.predict(pairs), bins)

    def write_history(self, path) -> None:
        cols = ["epoch", "train_loss", "r_bleu", "r_meteor", "r_cider", "mae_bleu", "mae_meteor", "mae_cider"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.history_:
                w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in cols[1:]])

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        params = self.get_params()
        params.pop("vocabulary")
        params["loss_weights"] = list(params["loss_weights"])
        meta = {"kind": "dln", "params": params, "vocabulary": self.vocabulary_.itos,
                "history": self.history_, "best_epoch": getattr(self, "best_epoch_", None)}
        save_arrays(path, {k: p.data for k, p in self.params_.items()}, meta)

    @classmethod
    def load(cls, path) -> "DynamicLossNetwork":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "dln":
            raise ValueError(f"{path} is not a dynamic loss network checkpoint")
        params = dict(meta["params"])
        params["loss_weights"] = tuple(params["loss_weights"])
        vocab = Vocabulary(meta["vocabulary"])
        model = cls(vocabulary=vocab, **params)
        model.vocabulary_ = vocab
        model.params_ = {k: parameter(v, name=k) for k, v in arrays.items()}
        model.n_parameters_ = int(sum(a.size for a in arrays.values()))
        model.history_ = meta.get("history", [])
        model.best_epoch_ = meta.get("best_epoch")
        return model
