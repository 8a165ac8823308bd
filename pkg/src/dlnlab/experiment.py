"""End-to-end pipeline pieces shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from dlnlab.captioner import VideoCaptioner
from dlnlab.dln import DynamicLossNetwork
from dlnlab.metrics import build_idf
from dlnlab.pairgen import PerturbPolicy, generate_pairs, harvest_pairs
from dlnlab.synthetic import SyntheticConfig, caption_corpus, generate_synthetic_dataset
from dlnlab.text import DEFAULT_MIN_COUNT, Vocabulary

COMPONENTS = ("data", "pairgen", "dln", "captioner", "ablate", "harvest")
REPORT_METRICS = ("bleu", "meteor", "cider", "rouge")


def derive_seed(root: int, component: str, index: int = 0) -> int:
    """Independent 32-bit seed for one component (and replicate) of a run."""
    ss = np.random.SeedSequence([int(root), COMPONENTS.index(component), int(index)])
    return int(ss.generate_state(1)[0])


@dataclass
class Workspace:
    """A synthetic dataset with the vocabulary and IDF derived from its training captions."""

    config: SyntheticConfig
    seed: int
    train: list = field(repr=False)
    val: list = field(repr=False)
    test: list = field(repr=False)
    vocabulary: Vocabulary = field(repr=False)

    @property
    def corpus(self):
        return caption_corpus(self.train)

    @property
    def idf(self):
        return build_idf(self.corpus)


def make_workspace(config: SyntheticConfig | None = None, seed: int = 0) -> Workspace:
    config = config or SyntheticConfig()
    train, val, test = generate_synthetic_dataset(config, seed)
    vocab = Vocabulary.build(caption_corpus(train), DEFAULT_MIN_COUNT)
    return Workspace(config, seed, train, val, test, vocab)


def harvest_records(ws: Workspace, epochs: int, seed: int, size: int = 300, **captioner_params):
    """Strategy (ii): score a baseline captioner's greedy outputs after every epoch."""
    params = dict(vocabulary=ws.vocabulary, epochs=epochs, harvest_every=1, harvest_size=size, random_state=seed)
    params.update(captioner_params)
    cap = VideoCaptioner(**params).fit(ws.train)
    return harvest_pairs(cap.harvest_, ws.idf)


def stage1_records(ws: Workspace, count: int = 20_000, p: float = 0.25, ops=("delete", "swap"), seed: int = 0,
                   harvest_epochs: int = 0, n_jobs: int = 1):
    """Perturbed pairs from the training captions, plus harvested pairs when ``harvest_epochs`` > 0."""
    policy = PerturbPolicy(p, tuple(ops), seed)
    recs = list(generate_pairs(ws.corpus, policy, count, ws.idf, n_jobs=n_jobs))
    if harvest_epochs:
        recs += harvest_records(ws, harvest_epochs, seed)
    return recs


@dataclass(frozen=True)
class RunResult:
    seed: int
    with_dln: bool
    best_epoch: int
    test: dict
    history: list = field(repr=False)


def train_and_test(ws: Workspace, seed: int, dln: DynamicLossNetwork | None, **captioner_params) -> RunResult:
    params = dict(vocabulary=ws.vocabulary, random_state=seed, with_dln=dln is not None, dln=dln)
    params.update(captioner_params)
    cap = VideoCaptioner(**params).fit(ws.train, eval_set=ws.val)
    return RunResult(seed, dln is not None, cap.best_epoch_, cap.evaluate(ws.test), cap.history_)


def run_ablation(ws: Workspace, dln: DynamicLossNetwork, seeds, n_jobs: int = 1, **captioner_params):
    """Paired baseline / with-surrogate runs, one pair per seed.

    Returns ``(baseline_results, dln_results)`` in seed order.
    """
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("ablation seeds must be distinct")
    jobs = [(s, d) for s in seeds for d in (None, dln)]
    out = Parallel(n_jobs=n_jobs)(delayed(train_and_test)(ws, s, d, **captioner_params) for s, d in jobs)
    return out[0::2], out[1::2]


def summarize(results) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, sample standard deviation) of test scores."""
    out = {}
    for m in REPORT_METRICS:
        vals = np.array([r.test[m] for r in results])
        out[m] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else math.nan)
    return out


def config_dict(config: SyntheticConfig) -> dict:
    return asdict(config)
