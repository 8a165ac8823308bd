"""``dlnlab`` command line: metric scoring, pair generation, both training
stages, evaluation, seed-replicated ablation and curve export.

Settings come from an optional INI file (``--config``), then the
``DLNLAB_SEED`` environment variable for the root seed, then command-line
flags. Every random component draws its own seed from the root seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from dlnlab.captioner import LOG_COLUMNS, VideoCaptioner
from dlnlab.checkpoint import CheckpointError
from dlnlab.dln import METRICS, DynamicLossNetwork
from dlnlab.exceptions import (
    ConfigError,
    DatasetTooSmall,
    EmptyAfterTokenize,
    EmptyInput,
    MalformedRecord,
    MissingDlnCheckpoint,
    NotADistribution,
    ShapeMismatch,
)
from dlnlab.experiment import (
    REPORT_METRICS,
    derive_seed,
    harvest_records,
    make_workspace,
    run_ablation,
    summarize,
)
from dlnlab.metrics import build_idf, rouge_l, score_triple
from dlnlab.pairgen import PerturbPolicy, generate_pairs, read_records, records_to_xy, write_records
from dlnlab.synthetic import SyntheticConfig
from dlnlab.text import read_corpus, tokenize

log = logging.getLogger("dlnlab")

BUNDLED_CORPUS = Path(__file__).parent / "data" / "synthetic_captions.txt"

DEFAULTS = {
    "run": {"seed": 0},
    "data": {f.name: f.default for f in fields(SyntheticConfig)},
    "pairgen": {"count": 20_000, "p": 0.25, "ops": ("delete", "swap"), "harvest_epochs": 6, "jobs": 1},
    "dln": {"d_model": 64, "n_heads": 2, "n_layers": 2, "d_ff": 128, "head_hidden": 64, "learning_rate": 1e-4,
            "batch_size": 64, "epochs": 10, "loss_weights": (1.0, 1.0, 1.0)},
    "captioner": {"proj_dim": 64, "hidden_dim": 128, "embed_dim": 64, "att_dim": 32, "learning_rate": 1e-3,
                  "batch_size": 32, "epochs": 15, "dln_weights": (1.0, 1.0, 1.0), "ramp_start": 3, "ramp_end": 10,
                  "ramp_max": 1.0, "lambda_fc": 0.1, "lambda_mc": 0.01, "lambda_oc": 0.1, "lambda_ac": 0.01,
                  "dln_trainable": False},
    "paths": {"corpus": ""},
}


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(type(default[0])(x) for x in items)
        return type(default)(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def load_config(path=None) -> dict[str, dict]:
    """Defaults overlaid with an INI file; unknown sections or keys are errors."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc.message.splitlines()[0]}") from None
        for sec in parser.sections():
            if sec not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
                cfg[sec][key] = _convert(sec, key, raw, DEFAULTS[sec][key])
        for key, value in cfg["paths"].items():
            if value and not Path(value).exists():
                raise ConfigError(f"{path}: [paths] {key} does not exist: {value}")
    env = os.environ.get("DLNLAB_SEED")
    if env is not None:
        cfg["run"]["seed"] = _convert("run", "seed", env, 0)
    try:
        SyntheticConfig(**cfg["data"])
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from None
    return cfg


def _override(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


def _workspace(cfg):
    return make_workspace(SyntheticConfig(**cfg["data"]), derive_seed(cfg["run"]["seed"], "data"))


def _write_csv(path, header, rows) -> None:
    """Write via a temporary file so a failed run leaves no partial artifact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# -- subcommands ---------------------------------------------------------------


def cmd_score(args, cfg):
    if args.pairs:
        pairs = []
        with open(args.pairs, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 2:
                    raise MalformedRecord(lineno, "expected candidate<TAB>reference[<TAB>reference...]")
                pairs.append((tokenize(parts[0]), [tokenize(p) for p in parts[1:]]))
    elif args.candidate is not None and args.reference:
        pairs = [(tokenize(args.candidate), [tokenize(r) for r in args.reference])]
    else:
        raise ConfigError("score needs --pairs FILE or --candidate with at least one --reference")
    idf_path = args.idf_corpus or cfg["paths"]["corpus"] or BUNDLED_CORPUS
    idf = build_idf(read_corpus(idf_path))
    rows = []
    for cand, refs in pairs:
        t = score_triple(cand, refs, idf)
        rouge = max(rouge_l(cand, r) for r in refs)
        rows.append([_fmt(t.bleu), _fmt(t.meteor), _fmt(t.cider), _fmt(rouge)])
    if args.out:
        _write_csv(args.out, ["bleu", "meteor", "cider", "rouge"], rows)
    for r in rows:
        print(f"bleu={r[0]} meteor={r[1]} cider={r[2]} rouge={r[3]}")


def cmd_pairgen(args, cfg):
    _override(cfg, "pairgen", "count", args.count)
    _override(cfg, "pairgen", "p", args.p)
    _override(cfg, "pairgen", "ops", tuple(args.ops.split(",")) if args.ops else None)
    _override(cfg, "pairgen", "harvest_epochs", args.harvest_epochs)
    _override(cfg, "pairgen", "jobs", args.jobs)
    pg = cfg["pairgen"]
    root = cfg["run"]["seed"]
    seed = args.seed if args.seed is not None else derive_seed(root, "pairgen")
    ws = _workspace(cfg)
    corpus_path = args.corpus or cfg["paths"]["corpus"]
    if corpus_path:
        corpus = read_corpus(corpus_path)
        if not corpus:
            raise EmptyInput(f"{corpus_path}: no sentences")
    else:
        corpus = ws.corpus
    policy = PerturbPolicy(pg["p"], pg["ops"], seed)
    recs = list(generate_pairs(corpus, policy, pg["count"], build_idf(corpus), n_jobs=pg["jobs"]))
    if pg["harvest_epochs"]:
        recs += harvest_records(ws, pg["harvest_epochs"], derive_seed(root, "harvest"), **_captioner_arch(cfg))
    tmp = Path(str(args.out) + ".part")
    n = write_records(tmp, recs)
    os.replace(tmp, args.out)
    print(f"wrote {n} records to {args.out}")


def _captioner_arch(cfg):
    c = cfg["captioner"]
    return {k: c[k] for k in ("proj_dim", "hidden_dim", "embed_dim", "att_dim", "learning_rate", "batch_size")}


def _write_stage1_report(report, out: Path):
    rows = [[m, _fmt(report.pearson[m]), int(report.degenerate[m]), _fmt(report.mae[m])] for m in METRICS]
    _write_csv(out / "heldout_summary.csv", ["metric", "pearson", "degenerate", "mae"], rows)
    for m in METRICS:
        truth, pred = report.histograms[m]
        rows = [[f"{lo:.2f}", f"{hi:.2f}", int(t), int(p)]
                for lo, hi, t, p in zip(report.bin_edges[:-1], report.bin_edges[1:], truth, pred)]
        _write_csv(out / f"hist_{m}.csv", ["bin_lo", "bin_hi", "truth_count", "pred_count"], rows)


def cmd_dln_train(args, cfg):
    _override(cfg, "dln", "epochs", args.epochs)
    _override(cfg, "dln", "learning_rate", args.lr)
    d = cfg["dln"]
    X, y = records_to_xy(read_records(args.records))
    ws = _workspace(cfg)
    model = DynamicLossNetwork(vocabulary=ws.vocabulary, d_model=d["d_model"], n_heads=d["n_heads"],
                               n_layers=d["n_layers"], d_ff=d["d_ff"], head_hidden=d["head_hidden"],
                               learning_rate=d["learning_rate"], batch_size=d["batch_size"], epochs=d["epochs"],
                               loss_weights=d["loss_weights"], random_state=derive_seed(cfg["run"]["seed"], "dln"),
                               verbose=args.verbose)
    model.fit(X, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "checkpoint")
    cols = ["epoch", "train_loss", "heldout_loss", "r_bleu", "r_meteor", "r_cider", "mae_bleu", "mae_meteor",
            "mae_cider"]
    _write_csv(out / "stage1_log.csv", cols,
               [[row["epoch"]] + [_fmt(row[c]) for c in cols[1:]] for row in model.history_])
    hold = model.heldout_indices_
    report = model.evaluate([X[i] for i in hold], y[hold])
    _write_stage1_report(report, out)
    print("held-out pearson " + " ".join(f"{m}={report.pearson[m]:.4f}" for m in METRICS))


def cmd_dln_eval(args, cfg):
    model = DynamicLossNetwork.load(args.checkpoint)
    X, y = records_to_xy(read_records(args.records))
    report = model.evaluate(X, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_stage1_report(report, out)
    print("pearson " + " ".join(f"{m}={report.pearson[m]:.4f}" for m in METRICS))


def cmd_cap_train(args, cfg):
    _override(cfg, "captioner", "epochs", args.epochs)
    _override(cfg, "captioner", "learning_rate", args.lr)
    ws = _workspace(cfg)
    dln = None
    if args.dln:
        if not Path(args.dln).exists():
            raise MissingDlnCheckpoint(f"surrogate checkpoint not found: {args.dln}")
        dln = DynamicLossNetwork.load(args.dln)
    seed = args.seed if args.seed is not None else derive_seed(cfg["run"]["seed"], "captioner")
    model = VideoCaptioner(vocabulary=ws.vocabulary, with_dln=dln is not None, dln=dln, random_state=seed,
                           verbose=args.verbose, **cfg["captioner"])
    model.fit(ws.train, eval_set=ws.val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "checkpoint")
    _write_csv(out / "train_log.csv", LOG_COLUMNS, _log_rows(model.history_))
    print(f"best epoch {model.best_epoch_}: val cider {model.history_[model.best_epoch_ - 1]['val_cider']:.4f}")


def _log_rows(history, prefix=()):
    return [list(prefix) + [row["epoch"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]] for row in history]


def cmd_cap_eval(args, cfg):
    model = VideoCaptioner.load(args.checkpoint)
    ws = _workspace(cfg)
    videos = ws.test if args.split == "test" else ws.val
    before = DynamicLossNetwork.forward_calls
    report = model.evaluate(videos)
    calls = DynamicLossNetwork.forward_calls - before
    rows = [[m, _fmt(report[m])] for m in REPORT_METRICS] + [["dln_calls", calls]]
    if args.out:
        _write_csv(args.out, ["metric", "value"], rows)
    print(" ".join(f"{m}={v}" for m, v in rows))


def cmd_ablate(args, cfg):
    _override(cfg, "captioner", "epochs", args.epochs)
    if not Path(args.dln).exists():
        raise MissingDlnCheckpoint(f"surrogate checkpoint not found: {args.dln}")
    dln = DynamicLossNetwork.load(args.dln)
    ws = _workspace(cfg)
    root = cfg["run"]["seed"]
    seeds = [derive_seed(root, "ablate", k) for k in range(args.seeds)]
    base, with_dln = run_ablation(ws, dln, seeds, n_jobs=args.jobs, **cfg["captioner"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[r.seed, int(r.with_dln), r.best_epoch] + [_fmt(r.test[m]) for m in REPORT_METRICS]
            for pair in zip(base, with_dln) for r in pair]
    _write_csv(out / "runs.csv", ["seed", "with_dln", "best_epoch"] + list(REPORT_METRICS), rows)
    header = ["model"] + [f"{m}_{s}" for m in REPORT_METRICS for s in ("mean", "std")]
    table = []
    for name, results in (("baseline", base), ("+DLN", with_dln)):
        s = summarize(results)
        table.append([name] + [_fmt(v) for m in REPORT_METRICS for v in s[m]])
    _write_csv(out / "table.csv", header, table)
    _write_csv(out / "curves.csv", ["run", "with_dln"] + LOG_COLUMNS,
               [row for r in base + with_dln for row in _log_rows(r.history, (r.seed, int(r.with_dln)))])
    wins = sum(d.test["cider"] > b.test["cider"] for b, d in zip(base, with_dln))
    print(f"{'model':<10}" + "".join(f"{m:>18}" for m in REPORT_METRICS))
    for row in table:
        print(f"{row[0]:<10}" + "".join(f"{row[1 + 2 * k]:>9}±{row[2 + 2 * k]:<8}" for k in range(len(REPORT_METRICS))))
    print(f"CIDEr-D improved in {wins} of {len(seeds)} paired seeds")


def cmd_curves(args, cfg):
    rows = []
    for path in args.checkpoints:
        model = VideoCaptioner.load(path)
        p = Path(path).resolve()
        label = p.parent.name if p.name == "checkpoint" else p.name
        rows += _log_rows(model.history_, (label,))
    _write_csv(args.out, ["run"] + LOG_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlnlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="INI file with [run] [data] [pairgen] [dln] [captioner] [paths] sections")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="BLEU/METEOR/CIDEr-D/ROUGE-L for sentence pairs")
    p.add_argument("--candidate")
    p.add_argument("--reference", action="append", help="repeat for several references")
    p.add_argument("--pairs", help="file of candidate<TAB>reference[<TAB>reference...] lines")
    p.add_argument("--idf-corpus", help="one sentence per line (default: bundled synthetic captions)")
    p.add_argument("--out", help="also write the scores as CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pairgen", help="scored (candidate, reference) records for the surrogate")
    p.add_argument("--corpus", help="one sentence per line (default: the synthetic training captions)")
    p.add_argument("--count", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--ops", help="comma-separated subset of delete,swap")
    p.add_argument("--seed", type=int, help="perturbation seed (default: derived from the root seed)")
    p.add_argument("--harvest-epochs", type=int, help="epochs of baseline-captioner outputs to add (0 disables)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairgen)

    p = sub.add_parser("dln-train", help="stage 1: fit the surrogate on scored records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_dln_train)

    p = sub.add_parser("dln-eval", help="surrogate agreement report on scored records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dln_eval)

    p = sub.add_parser("cap-train", help="stage 2: train the captioner, with the surrogate if --dln is given")
    p.add_argument("--dln", help="surrogate checkpoint directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="captioner seed (default: derived from the root seed)")
    p.set_defaults(func=cmd_cap_train)

    p = sub.add_parser("cap-eval", help="greedy-decode a split and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_cap_eval)

    p = sub.add_parser("ablate", help="baseline vs +DLN over K seeds")
    p.add_argument("--dln", required=True, help="surrogate checkpoint directory")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curves", help="per-epoch losses and validation metrics of captioner checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)
    return parser


FAILURES = (
    ((ConfigError, MissingDlnCheckpoint), "config error", 2),
    ((CheckpointError, OSError), "I/O error", 3),
    ((ShapeMismatch, NotADistribution), "shape error", 4),
    ((DatasetTooSmall, MalformedRecord, EmptyInput, EmptyAfterTokenize), "dataset error", 5),
    ((ValueError,), "invalid value", 2),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    if not args.verbose:
        logging.getLogger("dlnlab").setLevel(logging.ERROR)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except Exception as exc:
        for types, label, code in FAILURES:
            if isinstance(exc, types):
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                print(f"dlnlab {args.command}: {label}: {msg}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
