"""Command-line runner: prepare, train, evaluate, cross-validate, oracle-check.

Every command writes ``manifest.json`` into its ``--out`` directory with the
resolved configuration, dataset checksum, seed, outputs and timestamps.
Resolution order is defaults, then ``--config`` (flat JSON), then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checks import run_suite
from .dataset import (
    DataError,
    FoldSplit,
    load_standard_folds_100k,
    make_folds,
    parse_1m,
    parse_100k,
)
from .evaluate import (
    FoldResult,
    baseline_report,
    cases_for,
    evaluate_split,
    format_table,
    mae,
    method_name,
    model_dims,
    rmse,
    run_cv,
    run_fold,
)
from .rbm import load_checkpoint, save_checkpoint
from .training import NumericalError, TrainConfig, train

log = logging.getLogger("lcrbm")

EXIT_OK = 0
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ORACLE = 5

DATASET_IDS = {"ml100k": "100K", "ml1m": "1M"}


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return str(path)


def load_dataset(kind, path):
    return parse_100k(path) if kind == "ml100k" else parse_1m(path)


def load_folds(kind, path, dataset, n_folds, fold_seed):
    """Standard u1..u5 splits for 100K, seeded random folds otherwise."""
    if kind == "ml100k" and n_folds == 5:
        return load_standard_folds_100k(path, dataset)
    return make_folds(dataset, n_folds, fold_seed)


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for key in ("variant", "seed", "threads", "epochs", "hidden_units"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "sparse", False):
        values["sparse"] = True
    return TrainConfig.from_dict(values)


def _select_folds(folds, wanted):
    if not wanted:
        return folds
    picked = [f for f in folds if f.fold_index in wanted]
    missing = sorted(set(wanted) - {f.fold_index for f in picked})
    if missing:
        raise DataError(f"no fold(s) {missing}; available 1..{len(folds)}")
    return picked


class Run:
    """Collects the manifest for one command invocation."""

    def __init__(self, args):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": args.command,
            "argv": sys.argv[1:],
            "version": __version__,
            "config_path": getattr(args, "config", None),
            "started": _now(),
            "outputs": {},
        }
        self._t0 = time.perf_counter()

    def dataset(self, kind, path, ds):
        self.manifest["dataset"] = {"kind": kind, "path": str(path), "checksum": ds.checksum(),
                                    **ds.summary()}

    def config(self, cfg):
        self.manifest["config"] = cfg.to_dict()
        self.manifest["seed"] = cfg.seed

    def output(self, name, path):
        self.manifest["outputs"][name] = str(path)

    def finish(self, status="ok", **extra):
        self.manifest.update(extra)
        self.manifest["status"] = status
        self.manifest["finished"] = _now()
        self.manifest["wall_time"] = time.perf_counter() - self._t0
        _write_json(self.out / "manifest.json", self.manifest)


# -- commands -------------------------------------------------------------------

def cmd_prepare(args, run):
    ds = load_dataset(args.dataset, args.data)
    run.dataset(args.dataset, args.data, ds)
    run.output("vocab", _write_json(run.out / "vocab.json", ds.vocabularies()))
    summary = ds.summary()
    for key in ("users", "items", "ratings", "genre_dim", "occupation_dim"):
        print(f"{key:>15s}: {summary[key]}")
    run.finish(summary=summary)
    return EXIT_OK


def _train_split(args, ds):
    if args.fold is None:
        return None
    folds = load_folds(args.dataset, args.data, ds, args.n_folds, args.fold_seed)
    return _select_folds(folds, [args.fold])[0]


def cmd_train(args, run):
    cfg = resolve_config(args)
    ds = load_dataset(args.dataset, args.data)
    run.dataset(args.dataset, args.data, ds)
    run.config(cfg)
    split = _train_split(args, ds)
    log_path = run.out / "train_log.jsonl"
    fh = open(log_path, "w")

    def on_epoch(rec):
        fh.write(json.dumps({"epoch": rec.epoch, "recon_error": rec.recon_error,
                             "mean_hidden_activation": rec.mean_hidden_activation,
                             "wall_time": rec.wall_time}) + "\n")
        fh.flush()
        log.info("epoch %d recon %.4f act %.4f", rec.epoch, rec.recon_error, rec.mean_hidden_activation)

    try:
        if split is None:
            full = FoldSplit(0, ds, ds.subset(np.zeros(0, dtype=np.int64)))
            params, labels, _ = train(cases_for(cfg, full), cfg, model_dims(cfg, ds), on_epoch)
        else:
            result, (params, labels, _) = run_fold(split, cfg, cfg.seed, on_epoch)
            print(f"fold {result.fold_index}: MAE {result.mae:.4f}  RMSE {result.rmse:.4f}")
    finally:
        fh.close()
    run.output("log", log_path)
    meta = {"dataset": args.dataset, "data": str(args.data), "fold": args.fold,
            "n_folds": args.n_folds, "fold_seed": args.fold_seed, "config": cfg.to_dict(),
            "dataset_checksum": ds.checksum()}
    ckpt = save_checkpoint(run.out / "model.npz", params, labels, seed=cfg.seed,
                           vocab=ds.vocabularies(), meta=meta)
    run.output("checkpoint", ckpt)
    run.finish()
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_evaluate(args, run):
    params, labels, header = load_checkpoint(args.checkpoint)
    meta = header["meta"]
    cfg = TrainConfig.from_dict(meta["config"])
    kind = args.dataset or meta["dataset"]
    data = args.data or meta["data"]
    ds = load_dataset(kind, data)
    run.dataset(kind, data, ds)
    run.config(cfg)
    if meta.get("dataset_checksum") not in (None, ds.checksum()):
        log.warning("dataset checksum differs from the one recorded at training time")
    fold = args.fold if args.fold is not None else meta.get("fold")
    if fold is None:
        raise DataError("evaluate needs --fold (the checkpoint was trained on the full dataset)")
    folds = load_folds(kind, data, ds, meta.get("n_folds", 5), meta.get("fold_seed", 0))
    split = _select_folds(folds, [fold])[0]
    start = time.perf_counter()
    expected, n_cold, n_global = evaluate_split(params, labels, cfg, split, cases_for(cfg, split))
    truth = split.test.ratings
    err = expected - truth
    result = FoldResult(split.fold_index, mae(expected, truth), rmse(expected, truth), truth.size,
                        cfg.seed, n_cold, n_global, float(abs(err).sum()), float((err ** 2).sum()),
                        time.perf_counter() - start)
    run.output("metrics", _write_json(run.out / "metrics.json", result.payload()))
    print(f"fold {result.fold_index}: MAE {result.mae:.4f}  RMSE {result.rmse:.4f}  (n={result.n_test})")
    run.finish(checkpoint=str(args.checkpoint))
    return EXIT_OK


def cmd_cross_validate(args, run):
    cfg = resolve_config(args)
    ds = load_dataset(args.dataset, args.data)
    run.dataset(args.dataset, args.data, ds)
    run.config(cfg)
    folds = _select_folds(load_folds(args.dataset, args.data, ds, args.n_folds, args.fold_seed),
                          args.folds)
    dataset_id = DATASET_IDS[args.dataset]

    def on_fold(res):
        print(f"fold {res.fold_index}: MAE {res.mae:.4f}  RMSE {res.rmse:.4f}  ({res.wall_time:.0f}s)",
              flush=True)

    report = run_cv(folds, cfg, dataset_id, on_fold)
    run.output("report", (run.out / "report.json"))
    (run.out / "report.json").write_text(report.payload_json() + "\n")
    reports = [report]
    if args.baseline:
        reports.append(baseline_report(folds, dataset_id))
    table = format_table(reports)
    (run.out / "report.txt").write_text(table)
    run.output("table", run.out / "report.txt")
    print(table, end="")
    run.finish(timing={"wall_time": report.wall_time, "folds": [f.wall_time for f in report.folds]},
               method=method_name(cfg))
    return EXIT_OK


def cmd_oracle_check(args, run):
    results = run_suite(draws=args.draws, max_dims=tuple(args.max_dims), seed=args.seed or 0,
                        gradient=not args.no_gradient, chains=args.chains, T=args.cd_steps,
                        scale=args.scale)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    lines = [{"name": r.name, "residual": r.residual, "tolerance": r.tolerance, "passed": r.passed}
             for r in results]
    run.output("checks", _write_json(run.out / "oracle_checks.json", lines))
    run.finish("ok" if not failed else "failed", failed=failed)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_ORACLE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _fold_list(text):
    return [int(v) for v in text.split(",") if v]


def build_parser():
    parser = argparse.ArgumentParser(prog="lcrbm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_opts(p, required=True):
        p.add_argument("--data", type=Path, required=required, help="dataset directory")
        p.add_argument("--dataset", choices=sorted(DATASET_IDS), default=None if not required else "ml100k")
        p.add_argument("--out", type=Path, default=Path("runs") / p.prog.split()[-1])

    def train_opts(p):
        p.add_argument("--config", help="flat JSON of TrainConfig fields")
        p.add_argument("--variant", choices=["plain", "item", "user"])
        p.add_argument("--sparse", action="store_true")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--hidden-units", dest="hidden_units", type=int)
        p.add_argument("--n-folds", dest="n_folds", type=int, default=5)
        p.add_argument("--fold-seed", dest="fold_seed", type=int, default=0,
                       help="seed for generated folds (ignored for the standard 100K splits)")

    p = sub.add_parser("prepare", help="parse and validate a dataset, write vocabularies")
    data_opts(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    data_opts(p)
    train_opts(p)
    p.add_argument("--fold", type=int, help="train on this fold's training part (default: all ratings)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a fold's test part")
    data_opts(p, required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cross-validate", help="train and evaluate on every fold")
    data_opts(p)
    train_opts(p)
    p.add_argument("--folds", type=_fold_list, help="comma-separated subset of folds, e.g. 1,3")
    p.add_argument("--baseline", action="store_true", help="add the item-mean baseline row")
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("oracle-check", help="closed forms versus brute-force enumeration")
    p.add_argument("--max-dims", dest="max_dims", type=int, nargs=3, default=[3, 3, 3],
                   metavar=("M", "K", "F"))
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--chains", type=int, default=100000)
    p.add_argument("--cd-steps", dest="cd_steps", type=int, default=50)
    p.add_argument("--no-gradient", dest="no_gradient", action="store_true")
    p.add_argument("--scale", type=float, default=1.0, help="std of random parameters (0 gives a zero model)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs") / "oracle-check")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args)
    try:
        return args.func(args, run)
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        run.finish("data-error", error=str(err))
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        run.finish("numerical-error", error=str(err))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
