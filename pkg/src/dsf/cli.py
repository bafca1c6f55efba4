"""``dsf`` command line.

Subcommands: table1, kappa-curves, theorem-check, gradcheck, train, eval,
compare. Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 acceptance check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from dsf import experiments
from dsf.bessel import ConvergenceError
from dsf.config import ConfigError, ExperimentConfig, check_budget_parity, from_dict, load_config
from dsf.evaluation import EmbeddingTable, EvaluationError, knn_eval, linear_probe
from dsf.gradcheck import gradcheck_suite
from dsf.training import TrainingDivergedError, dataset_from_config, load_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3

TABLE1_PUBLISHED = {
    1.0: (3.573, 6.319, 9.090),
    0.5: (1.738, 4.331, 7.091),
    0.2: (0.011, 0.170, 1.380),
    0.1: (0.000, 0.000, 0.0001),
}
GRAD_TOL = 1e-4
TANGENCY_TOL = 1e-6

log = logging.getLogger("dsf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _emit(text, out):
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)


def _csv_text(rows, header=None):
    buf = io.StringIO()
    writer = csv.writer(buf)
    if header:
        writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------


def cmd_table1(args):
    rows = experiments.table1()
    _emit(experiments.format_table(rows, fmt=args.format), args.out)
    worst = max(
        abs(v - ref)
        for tau, vals in rows
        for v, ref in zip(vals, TABLE1_PUBLISHED[tau])
    )
    return EXIT_OK if worst <= 1e-3 else EXIT_ACCEPTANCE


def cmd_kappa_curves(args):
    rows = experiments.kappa_curves(args.p, args.lambda_r, args.points)
    if args.format == "json":
        text = json.dumps([{"r_bar": r, "kappa_raw": a, "kappa_stabilized": s} for r, a, s in rows], indent=2) + "\n"
    else:
        text = _csv_text([(repr(r), repr(a), repr(s)) for r, a, s in rows], ["r_bar", "kappa_raw", "kappa_stabilized"])
    _emit(text, args.out)
    return EXIT_OK


def cmd_theorem_check(args):
    report = experiments.theorem_trials(seed=args.seed or 0, trials=args.trials)
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return EXIT_OK if report["max_abs_diff"] < experiments.THEOREM_TOL else EXIT_ACCEPTANCE


def cmd_gradcheck(args):
    results = gradcheck_suite(seed=args.seed or 0, trials=args.trials, n_coords=args.coords)
    ok = all(r["max_rel_error"] < GRAD_TOL and r["max_tangency"] < TANGENCY_TOL for r in results)
    if args.format == "json":
        text = json.dumps({"passed": ok, "results": results}, indent=2) + "\n"
    else:
        keys = list(results[0]) if results else []
        text = _csv_text([[r[k] for k in keys] for r in results], keys)
    _emit(text, args.out)
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_train(args):
    cfg = _config(args)
    out = args.out or cfg.out_dir
    result, _ = experiments.run_experiment(cfg, out)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_eval(args):
    if args.checkpoint:
        cfg = _config(args)
        state = load_checkpoint(args.checkpoint)
        if not args.config and state.config:
            cfg = from_dict(state.config)
        dataset = dataset_from_config(cfg)
        scores, _ = experiments.evaluate_encoder(cfg, state, dataset)
    elif args.train_csv and args.test_csv:
        train_tab = EmbeddingTable.from_csv(args.train_csv, "train")
        test_tab = EmbeddingTable.from_csv(args.test_csv, "test")
        scores = {
            "knn_accuracy": knn_eval(train_tab, test_tab, args.k),
            "linear_accuracy": linear_probe(train_tab, test_tab, seed=args.seed or 0),
        }
    else:
        raise ConfigError("eval", "give --checkpoint, or both --train-csv and --test-csv")
    text = json.dumps(scores, indent=2) + "\n"
    _emit(text, args.result)
    return EXIT_OK


def cmd_compare(args):
    if args.configs:
        configs = [load_config(p) for p in args.configs]
        check_budget_parity(configs)
    else:
        base = _config(args)
        configs = experiments.default_suite(base, budget=args.budget, views=tuple(args.views))
    seeds = args.seeds if args.seeds else [args.seed or 0]
    rows = experiments.compare(configs, seeds=seeds, out_dir=args.out)
    keys = ["name", "method", "views_per_group", "batch_size", "budget", "seed", "knn_accuracy", "linear_accuracy", "final_loss", "final_margin"]
    if args.format == "json":
        sys.stdout.write(json.dumps(rows, indent=2) + "\n")
    else:
        sys.stdout.write(_csv_text([[r[k] for k in keys] for r in rows], keys))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="dsf", description="Divergence-based similarity experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, formats=("text", "csv", "json"), default="text"):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=formats, default=default)

    p = sub.add_parser("table1", help="InfoNCE loss under optimal similarity")
    common(p)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("kappa-curves", help="raw vs stabilized concentration over r_bar")
    common(p, ("csv", "json"), "csv")
    p.add_argument("--p", type=int, default=128)
    p.add_argument("--lambda-r", type=float, default=0.95)
    p.add_argument("--points", type=int, default=101)
    p.set_defaults(func=cmd_kappa_curves)

    p = sub.add_parser("theorem-check", help="single-view equivalence with cosine InfoNCE")
    common(p, ("json",), "json")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_theorem_check)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    common(p, ("csv", "json"), "json")
    p.add_argument("--trials", type=int, default=6)
    p.add_argument("--coords", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="pretrain one configuration and evaluate it")
    common(p, ("json",), "json")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="kNN and linear probe on a checkpoint or embedding CSVs")
    common(p, ("json",), "json")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--train-csv", default=None)
    p.add_argument("--test-csv", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--result", default=None, help="write the JSON result here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="all methods under budget parity")
    common(p, ("csv", "json"), "csv")
    p.add_argument("--config", default=None, help="base config for the default suite")
    p.add_argument("--configs", nargs="*", default=None, help="explicit configs (must share B x M)")
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--views", type=int, nargs="*", default=[1, 2, 4])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
