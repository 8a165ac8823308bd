"""Attention LSTM captioner over synthetic frame features.

Training minimises token cross-entropy plus, optionally, the negated scores
predicted by a fitted :class:`~dlnlab.dln.DynamicLossNetwork` (fed the
decoder's per-step softmax) and a temporal-coherence penalty on the projected
feature streams and attention weights. The surrogate weight ramps linearly
from zero so that early training is driven by cross-entropy alone.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from dlnlab import autograd as ag
from dlnlab._validation import check_random_state
from dlnlab.autograd import Tensor, no_grad, parameter
from dlnlab.checkpoint import load_arrays, save_arrays
from dlnlab.exceptions import MissingDlnCheckpoint, ShapeMismatch
from dlnlab.dln import encode_pair, stage1_loss
from dlnlab.metrics import build_idf, corpus_report, score_triple
from dlnlab.optim import Adam
from dlnlab.text import MAX_CAPTION_LEN, TokenSeq, Vocabulary, as_tokens, truncate

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "L_LD", "L_DLN", "L_C", "total", "val_bleu", "val_meteor", "val_cider", "val_rouge"]


@dataclass(frozen=True)
class Stage2Config:
    dln_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_fc: float = 0.1
    lambda_mc: float = 0.01
    lambda_oc: float = 0.1
    lambda_ac: float = 0.01
    ramp_start: int = 3
    ramp_end: int = 10
    ramp_max: float = 1.0

    def __post_init__(self):
        lams = list(self.dln_weights) + [self.lambda_fc, self.lambda_mc, self.lambda_oc, self.lambda_ac, self.ramp_max]
        if len(self.dln_weights) != 3 or any(x < 0 for x in lams):
            raise ValueError("all loss weights must be non-negative (three surrogate weights)")
        if self.ramp_start > self.ramp_end:
            raise ValueError("ramp_start must not exceed ramp_end")

    def dln_weight(self, epoch: int) -> float:
        """Surrogate-loss multiplier for a 1-based epoch."""
        if epoch <= self.ramp_start:
            return 0.0
        if epoch >= self.ramp_end:
            return self.ramp_max
        return self.ramp_max * (epoch - self.ramp_start) / (self.ramp_end - self.ramp_start)


# -- loss terms ----------------------------------------------------------------


def psi(f: Tensor) -> Tensor:
    """Sum of absolute differences between consecutive frames.

    ``f`` is ``[B, N, ...]``; frames run along axis 1 and every other axis is
    summed over.
    """
    if f.ndim < 2 or f.shape[1] < 1:
        raise ShapeMismatch("psi", f.shape)
    if f.shape[1] < 2:
        return ag.Tensor(0.0)
    return ag.sum_(ag.abs_(ag.sub(f[:, 1:], f[:, :-1])))


def coherent_loss(app: Tensor, mot: Tensor, obj: Tensor, attn: Tensor, config: Stage2Config) -> Tensor:
    """Weighted coherence over projected streams ``[B, N, P]`` and attention ``[B, N, T]``.

    Every term is averaged over the batch; the feature terms are also
    averaged over the ``P`` projection units, so a width-1 stream with one
    gap ``g`` contributes exactly ``g``.
    """
    for name, t in (("appearance", app), ("motion", mot), ("object", obj), ("attention", attn)):
        if t.ndim != 3:
            raise ShapeMismatch(f"coherent_loss ({name})", t.shape)
    if not (app.shape[:2] == mot.shape[:2] == obj.shape[:2] == attn.shape[:2]):
        raise ShapeMismatch("coherent_loss", app.shape, mot.shape, obj.shape, attn.shape)
    B = app.shape[0]
    terms = [(app, config.lambda_fc), (mot, config.lambda_mc), (obj, config.lambda_oc)]
    total = ag.mul(psi(attn), config.lambda_ac / B)
    for f, lam in terms:
        total = ag.add(ag.mul(psi(f), lam / (B * f.shape[2])), total)
    return total


def xent_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Teacher-forced negative log-likelihood, averaged over real tokens."""
    return ag.cross_entropy(logits, targets, weights=mask)


def dln_loss(dln, distributions: Tensor, references, lengths, weights) -> tuple[Tensor, Tensor]:
    """``-(w_B t_BLEU + w_M t_METEOR + w_C t_CIDEr)`` averaged over the batch.

    Returns the loss and the predicted score tensor ``[B, 3]``.
    """
    scores = dln.forward_soft(distributions, references, lengths)
    w = np.asarray(weights, dtype=np.float64)
    return ag.mul(ag.mean(ag.sum_(ag.mul(scores, w), axis=1)), -1.0), scores


# -- batching -------------------------------------------------------------------


def stack_features(videos):
    app = np.stack([v.appearance for v in videos])
    mot = np.stack([v.motion for v in videos])
    obj = np.stack([v.objects for v in videos])
    return app, mot, obj


def teacher_batch(captions, vocab: Vocabulary, max_len: int):
    """Decoder inputs ``[BOS, w1..wT]``, targets ``[w1..wT, EOS]``, mask, word counts."""
    seqs = [vocab.encode(truncate(c, max_len)) for c in captions]
    T = max(len(s) for s in seqs) + 1
    B = len(seqs)
    inputs = np.full((B, T), Vocabulary.pad_id, dtype=np.int64)
    targets = np.full((B, T), Vocabulary.pad_id, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, s in enumerate(seqs):
        n = len(s)
        inputs[b, 0] = Vocabulary.bos_id
        inputs[b, 1:n + 1] = s
        targets[b, :n] = s
        targets[b, n] = Vocabulary.eos_id
        mask[b, :n + 1] = 1.0
    return inputs, targets, mask, np.array([len(s) for s in seqs])


class VideoCaptioner(BaseEstimator):
    """Encoder-decoder captioner; ``fit(videos, references)``, ``predict(videos)``.

    With ``with_dln=True`` a fitted surrogate must be passed as ``dln``. It
    never receives gradients from the captioning objective and is never
    called by ``predict``. With ``dln_trainable=True`` a private copy of it is
    refitted after every epoch on the captioner's own greedy outputs for
    ``harvest_size`` training videos, scored by the exact metrics, so that it
    keeps tracking the distribution it is asked to judge.
    """

    def __init__(
        self,
        vocabulary=None,
        proj_dim=64,
        hidden_dim=128,
        embed_dim=64,
        att_dim=32,
        max_len=MAX_CAPTION_LEN,
        learning_rate=1e-3,
        batch_size=32,
        epochs=15,
        with_dln=False,
        dln=None,
        dln_trainable=False,
        dln_weights=(1.0, 1.0, 1.0),
        ramp_start=3,
        ramp_end=10,
        ramp_max=1.0,
        lambda_fc=0.1,
        lambda_mc=0.01,
        lambda_oc=0.1,
        lambda_ac=0.01,
        clip_norm=5.0,
        harvest_every=0,
        harvest_size=100,
        random_state=0,
        verbose=False,
    ):
        self.vocabulary = vocabulary
        self.proj_dim = proj_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.att_dim = att_dim
        self.max_len = max_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.with_dln = with_dln
        self.dln = dln
        self.dln_trainable = dln_trainable
        self.dln_weights = dln_weights
        self.ramp_start = ramp_start
        self.ramp_end = ramp_end
        self.ramp_max = ramp_max
        self.lambda_fc = lambda_fc
        self.lambda_mc = lambda_mc
        self.lambda_oc = lambda_oc
        self.lambda_ac = lambda_ac
        self.clip_norm = clip_norm
        self.harvest_every = harvest_every
        self.harvest_size = harvest_size
        self.random_state = random_state
        self.verbose = verbose

    # -- parameters ------------------------------------------------------------

    def _config(self) -> Stage2Config:
        return Stage2Config(tuple(self.dln_weights), self.lambda_fc, self.lambda_mc, self.lambda_oc,
                            self.lambda_ac, self.ramp_start, self.ramp_end, self.ramp_max)

    def _init_params(self, rng, dims) -> dict[str, Tensor]:
        d_app, d_mot, d_obj = dims
        P, H, E, A, V = self.proj_dim, self.hidden_dim, self.embed_dim, self.att_dim, len(self.vocabulary_)

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        gate_bias = np.zeros(4 * H)
        gate_bias[H:2 * H] = 1.0  # forget gate
        p = {
            "proj_a.w": dense(d_app, P), "proj_a.b": np.zeros(P),
            "proj_m.w": dense(d_mot, P), "proj_m.b": np.zeros(P),
            "proj_o.w": dense(d_obj, P), "proj_o.b": np.zeros(P),
            "att.wf": dense(3 * P, A), "att.wh": dense(H, A), "att.b": np.zeros(A), "att.v": dense(A, 1),
            "init.wh": dense(3 * P, H), "init.bh": np.zeros(H),
            "init.wc": dense(3 * P, H), "init.bc": np.zeros(H),
            "word_emb": rng.normal(0.0, 0.1, size=(V, E)),
            "lstm.wx": dense(E + 3 * P, 4 * H), "lstm.wh": dense(H, 4 * H), "lstm.b": gate_bias,
            "out.w": dense(H, V), "out.b": np.zeros(V),
        }
        return {k: parameter(v, name=k) for k, v in p.items()}

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params_.values())

    # -- network ---------------------------------------------------------------

    def encode(self, app, mot, obj):
        """Project the three streams; returns ``(a_r, m_r, o_r, frames, att_keys, (h0, c0))``."""
        P = self.params_
        a_r = ag.tanh(ag.as_tensor(app) @ P["proj_a.w"] + P["proj_a.b"])
        m_r = ag.tanh(ag.as_tensor(mot) @ P["proj_m.w"] + P["proj_m.b"])
        o_r = ag.tanh(ag.as_tensor(obj) @ P["proj_o.w"] + P["proj_o.b"])
        frames = ag.concat([a_r, m_r, o_r], axis=2)
        keys = frames @ P["att.wf"]
        pooled = ag.mean(frames, axis=1)
        h0 = ag.tanh(pooled @ P["init.wh"] + P["init.bh"])
        c0 = pooled @ P["init.wc"] + P["init.bc"]
        return a_r, m_r, o_r, frames, keys, (h0, c0)

    def decode_step(self, frames: Tensor, keys: Tensor, state, prev_ids):
        """One decoder step: frame attention, context, LSTM cell, vocabulary logits.

        Returns ``((h, c), logits [B, V], alpha [B, N])``.
        """
        P = self.params_
        h_prev, c_prev = state
        H = self.hidden_dim
        if h_prev.shape[-1] != H:
            raise ShapeMismatch("decode_step", h_prev.shape, (frames.shape[0], H))
        B, N, _ = frames.shape
        e = ag.tanh(ag.add(keys, ag.reshape(h_prev @ P["att.wh"] + P["att.b"], (B, 1, self.att_dim))))
        alpha = ag.softmax(ag.reshape(e @ P["att.v"], (B, N)), axis=-1)
        context = ag.reshape(ag.reshape(alpha, (B, 1, N)) @ frames, (B, frames.shape[2]))
        x = ag.concat([ag.embedding(P["word_emb"], prev_ids), context], axis=1)
        gates = x @ P["lstm.wx"] + h_prev @ P["lstm.wh"] + P["lstm.b"]
        i = ag.sigmoid(gates[:, :H])
        f = ag.sigmoid(gates[:, H:2 * H])
        o = ag.sigmoid(gates[:, 2 * H:3 * H])
        g = ag.tanh(gates[:, 3 * H:])
        c = f * c_prev + i * g
        h = o * ag.tanh(c)
        logits = h @ P["out.w"] + P["out.b"]
        return (h, c), logits, alpha

    def teacher_forward(self, videos, inputs):
        """Teacher-forced pass; returns streams, logits ``[B, T, V]`` and attention ``[B, N, T]``."""
        a_r, m_r, o_r, frames, keys, state = self.encode(*stack_features(videos))
        logits, alphas = [], []
        for t in range(inputs.shape[1]):
            state, lg, alpha = self.decode_step(frames, keys, state, inputs[:, t])
            logits.append(lg)
            alphas.append(alpha)
        return a_r, m_r, o_r, ag.stack(logits, axis=1), ag.stack(alphas, axis=2)

    def total_loss(self, videos, captions, epoch: int, config: Stage2Config | None = None):
        """``L_LD + w(epoch) L_DLN + L_C`` for one batch, plus its logged parts."""
        config = config or self._config()
        inputs, targets, mask, lengths = teacher_batch(captions, self.vocabulary_, self.max_len)
        a_r, m_r, o_r, logits, attn = self.teacher_forward(videos, inputs)
        l_ld = xent_loss(logits, targets, mask)
        l_c = coherent_loss(a_r, m_r, o_r, attn, config)
        w = config.dln_weight(epoch) if self.with_dln else 0.0
        parts = {"L_LD": l_ld.item(), "L_C": l_c.item(), "dln_weight": w, "dln_raw": 0.0}
        total = ag.add(l_ld, l_c)
        if w > 0.0:
            dist = ag.softmax(logits[:, :-1], axis=-1)
            l_dln, _ = dln_loss(self.dln_, dist, [truncate(c, self.max_len) for c in captions],
                                lengths, config.dln_weights)
            parts["dln_raw"] = l_dln.item()
            term = ag.mul(l_dln, w)
            total = ag.add(total, term)
            parts["L_DLN"] = term.item()
        else:
            parts["L_DLN"] = 0.0
        parts["total"] = total.item()
        return total, parts

    # -- estimator API ---------------------------------------------------------

    def fit(self, videos, references=None, eval_set=None):
        """Train on ``videos``; every reference caption becomes one training example.

        ``references`` defaults to each video's own references. ``eval_set``
        (a list of videos) is greedily decoded and scored after every epoch,
        and the parameters of the epoch with the best validation CIDEr-D are
        kept.
        """
        if not videos:
            raise ValueError("no training videos")
        refs = [v.references for v in videos] if references is None else references
        if len(refs) != len(videos):
            raise ValueError("videos and references differ in length")
        refs = [[truncate(as_tokens(r), self.max_len) for r in rs] for rs in refs]
        if self.with_dln and self.dln is None:
            raise MissingDlnCheckpoint("with_dln=True needs a fitted surrogate network (dln=...)")
        config = self._config()
        rng = check_random_state(self.random_state)

        if self.vocabulary is None:
            self.vocabulary_ = Vocabulary.build([r for rs in refs for r in rs])
        else:
            self.vocabulary_ = self.vocabulary
        if self.with_dln:
            check_is_fitted(self.dln, "params_")
            if self.dln.vocabulary_ != self.vocabulary_:
                raise ValueError("captioner and surrogate must share one vocabulary")
            self.dln_ = copy.deepcopy(self.dln) if self.dln_trainable else self.dln
            self.dln_.set_trainable(False)
        dims = (videos[0].appearance.shape[1], videos[0].motion.shape[1], videos[0].objects.shape[1])
        self.params_ = self._init_params(rng, dims)
        self.feature_dims_ = dims

        examples = [(vi, r) for vi, rs in enumerate(refs) for r in rs]
        opt = Adam(self.parameters, lr=self.learning_rate, clip_norm=self.clip_norm)
        refresh = self.with_dln and self.dln_trainable
        if refresh:
            dln_opt = Adam(self.dln_.parameters, lr=self.dln_.learning_rate, clip_norm=self.dln_.clip_norm)
            train_idf = build_idf([r for rs in refs for r in rs])
        eval_idf = build_idf([r for v in eval_set for r in v.references]) if eval_set else None
        harvest_idx = rng.choice(len(videos), size=min(self.harvest_size, len(videos)), replace=False) \
            if self.harvest_every else None

        self.history_, self.batch_log_, self.harvest_ = [], [], []
        best_cider, best_state = -np.inf, None
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(examples))
            sums = dict(L_LD=0.0, L_DLN=0.0, L_C=0.0, total=0.0)
            n_batches = 0
            for lo in range(0, len(order), self.batch_size):
                batch = [examples[k] for k in order[lo:lo + self.batch_size]]
                opt.zero_grad()
                loss, parts = self.total_loss([videos[vi] for vi, _ in batch], [r for _, r in batch], epoch, config)
                ag.backward(loss)
                opt.step()
                parts["epoch"] = epoch
                self.batch_log_.append(parts)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
            row = {"epoch": epoch}
            row.update({k: v / n_batches for k, v in sums.items()})
            if eval_set:
                rep = self.evaluate(eval_set, idf=eval_idf)
                row.update({f"val_{k}": rep[k] for k in ("bleu", "meteor", "cider", "rouge")})
                if rep["cider"] > best_cider:
                    best_cider = rep["cider"]
                    best_state = {k: p.data.copy() for k, p in self.params_.items()}
                    self.best_epoch_ = epoch
            self.history_.append(row)
            if harvest_idx is not None and epoch % self.harvest_every == 0:
                sub = [videos[i] for i in harvest_idx]
                for i, pred in zip(harvest_idx, self.predict(sub)):
                    for ref in refs[i]:
                        self.harvest_.append((pred, ref, epoch))
            if refresh and epoch < self.epochs:
                idx = rng.choice(len(videos), size=min(self.harvest_size, len(videos)), replace=False)
                row["dln_refresh_loss"] = self._refresh_dln([videos[i] for i in idx], [refs[i] for i in idx],
                                                            train_idf, dln_opt, rng)
            if self.verbose:
                log.warning("captioner epoch %d: %s", epoch,
                            " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if best_state is not None:
            for k, p in self.params_.items():
                p.data = best_state[k]
        else:
            self.best_epoch_ = self.epochs
        if self.with_dln:
            self.dln_.set_trainable(False)
        return self

    def _refresh_dln(self, videos, refs, idf, opt, rng) -> float:
        """One stage-1 pass over scored (greedy output, reference) pairs."""
        pairs, truth = [], []
        for pred, rs in zip(self.predict(videos), refs):
            for ref in rs:
                pairs.append((pred, ref))
                truth.append(score_triple(pred, ref, idf).as_tuple())
        truth = np.asarray(truth)
        dln = self.dln_
        enc = [encode_pair(c, r, dln.vocabulary_, dln.max_pair_len) for c, r in pairs]
        order = rng.permutation(len(enc))
        dln.set_trainable(True)
        total = 0.0
        for lo in range(0, len(order), dln.batch_size):
            idx = order[lo:lo + dln.batch_size]
            opt.zero_grad()
            loss = stage1_loss(dln.forward_encoded([enc[i] for i in idx]), truth[idx], dln.loss_weights)
            ag.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        dln.set_trainable(False)
        return total / len(enc)

    def predict(self, videos) -> list[TokenSeq]:
        """Greedy decoding (ties go to the lowest id), at most ``max_len`` words."""
        check_is_fitted(self, "params_")
        out = []
        with no_grad():
            for lo in range(0, len(videos), 256):
                out.extend(self._greedy(videos[lo:lo + 256]))
        return out

    def _greedy(self, videos):
        _, _, _, frames, keys, state = self.encode(*stack_features(videos))
        B = len(videos)
        prev = np.full(B, Vocabulary.bos_id, dtype=np.int64)
        words = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(self.max_len + 1):
            state, logits, _ = self.decode_step(frames, keys, state, prev)
            prev = np.argmax(logits.data, axis=1)
            for b in range(B):
                if done[b]:
                    continue
                if prev[b] == Vocabulary.eos_id or len(words[b]) >= self.max_len:
                    done[b] = True
                else:
                    words[b].append(int(prev[b]))
            if done.all():
                break
        out = []
        for w in words:
            toks = [t for t in self.vocabulary_.decode(w) if t not in Vocabulary.RESERVED]
            out.append(TokenSeq(toks) if toks else TokenSeq([Vocabulary.UNK]))
        return out

    def evaluate(self, videos, idf=None) -> dict[str, float]:
        """Mean BLEU/METEOR/CIDEr-D/ROUGE-L of greedy captions against each
        video's references. IDF defaults to the references of ``videos``."""
        refs = [list(v.references) for v in videos]
        idf = idf or build_idf([r for rs in refs for r in rs])
        return corpus_report(self.predict(videos), refs, idf)

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.history_:
                w.writerow([row["epoch"]] + [f"{row.get(c, float('nan')):.6f}" for c in LOG_COLUMNS[1:]])

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        params = self.get_params(deep=False)
        for k in ("vocabulary", "dln"):
            params.pop(k)
        params["dln_weights"] = list(params["dln_weights"])
        meta = {"kind": "captioner", "params": params, "vocabulary": self.vocabulary_.itos,
                "feature_dims": list(self.feature_dims_), "history": self.history_}
        save_arrays(path, {k: p.data for k, p in self.params_.items()}, meta)

    @classmethod
    def load(cls, path) -> "VideoCaptioner":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "captioner":
            raise ValueError(f"{path} is not a captioner checkpoint")
        params = dict(meta["params"])
        params["dln_weights"] = tuple(params["dln_weights"])
        vocab = Vocabulary(meta["vocabulary"])
        model = cls(vocabulary=vocab, **params)
        model.vocabulary_ = vocab
        model.feature_dims_ = tuple(meta["feature_dims"])
        model.params_ = {k: parameter(v, name=k) for k, v in arrays.items()}
        model.history_ = meta.get("history", [])
        return model
