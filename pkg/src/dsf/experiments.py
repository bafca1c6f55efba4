"""Reproducible experiment drivers behind the command line."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from dsf.bessel import approx_kappa
from dsf.config import ExperimentConfig, check_budget_parity, with_budget
from dsf.evaluation import EmbeddingTable, knn_eval, linear_probe
from dsf.losses import proposition_table, theorem_equivalence_check
from dsf.training import (
    _PROBE,
    component_rng,
    dataset_from_config,
    epoch_summary,
    save_checkpoint,
    train,
    write_csv,
)
from dsf.vmf import StabilizationPolicy, as_unit

log = logging.getLogger(__name__)

TABLE1_TAUS = (1.0, 0.5, 0.2, 0.1)
TABLE1_KS = (256, 4096, 65536)
THEOREM_TOL = 1e-8


def table1(taus=TABLE1_TAUS, ks=TABLE1_KS):
    return proposition_table(taus, ks)


def format_table(rows, ks=TABLE1_KS, fmt="text"):
    if fmt == "csv":
        lines = ["tau," + ",".join(f"K={k}" for k in ks)]
        lines += [f"{tau}," + ",".join(f"{v:.6f}" for v in vals) for tau, vals in rows]
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps(
            [{"tau": tau, **{f"K={k}": v for k, v in zip(ks, vals)}} for tau, vals in rows], indent=2
        ) + "\n"
    header = f"{'tau':>5} | " + "  ".join(f"{'K=' + str(k):>9}" for k in ks)
    lines = [header, "-" * len(header)]
    lines += [f"{tau:>5.1f} | " + "  ".join(f"{v:>9.4f}" for v in vals) for tau, vals in rows]
    return "\n".join(lines) + "\n"


def kappa_curves(p=128, lambda_r=0.95, n_points=101):
    """Rows ``(r_bar, kappa_raw, kappa_stabilized)`` on a uniform grid over ``[0, 1]``.

    At ``r_bar = 1`` the raw estimate has a pole and is reported as ``inf``.
    """
    policy = StabilizationPolicy(lambda_r=lambda_r)
    grid = np.linspace(0.0, 1.0, n_points)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(grid < 1.0, approx_kappa(p, np.minimum(grid, 1.0 - 1e-300)), np.inf)
    stab, _ = policy.kappa(grid, p)
    return [(float(r), float(a), float(s)) for r, a, s in zip(grid, raw, stab)]


def theorem_trials(seed=0, trials=100, dims=(3, 8, 64), taus=(0.2, 0.5, 1.0), max_negatives=16):
    """Randomised single-view equivalence checks between the two InfoNCE forms."""
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        p = int(rng.choice(dims))
        tau = float(rng.choice(taus))
        k = int(rng.integers(1, max_negatives + 1))
        vecs = as_unit(rng.standard_normal((k + 2, p)))
        rep = theorem_equivalence_check(vecs[0], vecs[1], vecs[2:], tau, p)
        out.append({"trial": t, "p": p, "tau": tau, "K": k, **{key: float(v) for key, v in rep.items()}})
    return {
        "seed": seed,
        "trials": trials,
        "max_abs_diff": max((r["abs_diff"] for r in out), default=0.0),
        "tolerance": THEOREM_TOL,
        "results": out,
    }


# ---------------------------------------------------------------------------
# training experiments


def evaluate_encoder(cfg, state, dataset):
    enc = state.encoder(cfg)
    train_idx, test_idx = dataset.train_test_split(cfg.dataset.test_fraction, cfg.seed)
    train_tab = EmbeddingTable(enc.embed(dataset.points[train_idx]), dataset.labels[train_idx], "train")
    test_tab = EmbeddingTable(enc.embed(dataset.points[test_idx]), dataset.labels[test_idx], "test")
    probe_seed = int(component_rng(cfg.seed, _PROBE).integers(2**31))
    return {
        "knn_accuracy": knn_eval(train_tab, test_tab, cfg.eval.knn_k),
        "linear_accuracy": linear_probe(
            train_tab, test_tab, cfg.eval.probe_epochs, cfg.eval.probe_lr, seed=probe_seed
        ),
    }, (train_tab, test_tab)


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset=None):
    """Train, evaluate and (optionally) write artefacts into ``out_dir``.

    Files: ``metrics.jsonl`` (one record per step), ``summary.csv``
    (per-epoch means), ``checkpoint.npz``, ``embeddings_{train,test}.csv``
    and ``result.json``.
    """
    dataset = dataset if dataset is not None else dataset_from_config(cfg)
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    state, records = train(cfg, dataset, metrics_path=metrics_path)
    scores, (train_tab, test_tab) = evaluate_encoder(cfg, state, dataset)
    last = records[-1] if records else {}
    result = {
        "name": cfg.label,
        "method": cfg.loss.method,
        "views_per_group": cfg.augmentation.views_per_group,
        "batch_size": cfg.optimizer.batch_size,
        "budget": cfg.budget,
        "seed": cfg.seed,
        "steps": state.step,
        "final_loss": last.get("loss"),
        "final_margin": last.get("margin"),
        **scores,
    }
    if out_dir is not None:
        write_csv(out_dir / "summary.csv", epoch_summary(records))
        save_checkpoint(out_dir / "checkpoint.npz", state)
        train_tab.to_csv(out_dir / "embeddings_train.csv")
        test_tab.to_csv(out_dir / "embeddings_test.csv")
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (out_dir / "result.json").write_text(json.dumps(result, indent=2))
    return result, records


def default_suite(base: ExperimentConfig, budget=None, views=(1, 2, 4)):
    """Method/view grid under a shared ``B x M`` budget.

    Plain cosine InfoNCE at ``m = 1``; DSF at every ``m``; the two
    averaging baselines at every ``m > 1`` (at ``m = 1`` they coincide
    with cosine InfoNCE).
    """
    budget = budget or base.budget
    configs = [with_budget(base, "cosine", 1, budget)]
    for m in views:
        if m > 1:
            configs.append(with_budget(base, "loss_avg", m, budget))
            configs.append(with_budget(base, "fea_avg", m, budget))
        configs.append(with_budget(base, "dsf", m, budget))
    return configs


def compare(configs, seeds=(0,), out_dir=None):
    """Run each config for each seed; rows are returned in config order."""
    configs = list(configs)
    check_budget_parity(configs)
    rows = []
    for cfg in configs:
        for seed in seeds:
            run_cfg = cfg.replace(seed=int(seed))
            sub = None if out_dir is None else Path(out_dir) / f"{run_cfg.label}_seed{seed}"
            result, _ = run_experiment(run_cfg, sub)
            log.info("%s seed=%s knn=%.4f linear=%.4f", run_cfg.label, seed,
                     result["knn_accuracy"], result["linear_accuracy"])
            rows.append(result)
    if out_dir is not None:
        write_csv(Path(out_dir) / "comparison.csv", rows)
    return rows
