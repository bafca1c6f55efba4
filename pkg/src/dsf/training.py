"""Desk-scale multi-view contrastive pretraining on synthetic sphere data.

Randomness is counter based: every random draw comes from a generator
seeded by ``(root_seed, component, counter...)``, so a run can be resumed
from a checkpoint holding only parameters, optimizer state, the negative
queue and the step counter, and reproduce the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dsf.config import ExperimentConfig
from dsf.losses import NegativeQueue, compute_loss
from dsf.vmf import StabilizationPolicy, as_unit, sample_around, _sample_cosines

log = logging.getLogger(__name__)

# component ids for seed derivation
_DATASET, _SPLIT, _INIT, _SHUFFLE, _AUGMENT, _PROBE = range(6)


def component_rng(root_seed, component, *counters):
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), component, *map(int, counters)]))


class DatasetError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    """Loss or gradient became non-finite; carries the offending step."""

    def __init__(self, message, step, record=None):
        super().__init__(message)
        self.step = step
        self.record = record


# ---------------------------------------------------------------------------
# data


@dataclass
class SyntheticDataset:
    points: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    kappa: np.ndarray
    seed: int

    @property
    def num_classes(self):
        return self.centers.shape[0]

    def train_test_split(self, test_fraction=0.2, seed=None):
        """Stratified split; returns ``(train_idx, test_idx)``."""
        rng = component_rng(self.seed if seed is None else seed, _SPLIT)
        train, test = [], []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            idx = rng.permutation(idx)
            n_test = int(round(test_fraction * idx.size))
            test.append(idx[:n_test])
            train.append(idx[n_test:])
        return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _class_centers(num_classes, d_in, min_separation_deg, rng, max_tries=10000):
    min_cos = math.cos(math.radians(min_separation_deg))
    centers = []
    tries = 0
    while len(centers) < num_classes:
        tries += 1
        if tries > max_tries:
            raise DatasetError(
                f"could not place {num_classes} centers in {d_in} dims "
                f"at least {min_separation_deg} degrees apart"
            )
        c = as_unit(rng.standard_normal(d_in))
        if all(c @ other <= min_cos for other in centers):
            centers.append(c)
    return np.stack(centers)


def generate_dataset(num_classes=10, n_points=5000, d_in=16, kappa=30.0, min_separation_deg=45.0, seed=0):
    """Balanced vMF mixture on the sphere in ``R^d_in``.

    ``kappa`` is a scalar or one concentration per class.
    """
    if num_classes < 2:
        raise DatasetError("need at least two classes")
    kappas = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (num_classes,)).copy()
    if np.any(kappas <= 0):
        raise DatasetError("per-class kappa must be positive")
    rng = component_rng(seed, _DATASET)
    centers = _class_centers(num_classes, d_in, min_separation_deg, rng)
    labels = np.arange(n_points) % num_classes
    points = np.empty((n_points, d_in))
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        points[idx] = sample_around(centers[c], kappas[c], idx.size, rng)
    order = rng.permutation(n_points)
    return SyntheticDataset(points[order], labels[order], centers, kappas, seed)


def dataset_from_config(cfg: ExperimentConfig):
    d = cfg.dataset
    return generate_dataset(d.num_classes, d.n_points, d.d_in, d.kappa, d.min_separation_deg, cfg.seed)


# ---------------------------------------------------------------------------
# augmentation


def batch_views(x, noise_kappa, views_per_group, dropout_prob, rng):
    """``2m`` perturbed copies of every row of ``x``: shape ``(n, 2m, d)``.

    Each view is a vMF draw centred on the row's direction (concentration
    ``noise_kappa``; infinite means no noise), then each coordinate is
    zeroed with probability ``dropout_prob``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    n_views = 2 * views_per_group
    base = np.repeat(x[:, None, :], n_views, axis=1)
    if math.isfinite(noise_kappa):
        mu = as_unit(base.reshape(-1, d))
        w, one_minus_w = _sample_cosines(float(noise_kappa), d, mu.shape[0], rng)
        v = rng.standard_normal(mu.shape)
        v -= np.sum(v * mu, axis=1, keepdims=True) * mu
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        sin = np.sqrt(one_minus_w * (1.0 + w))
        scale = np.linalg.norm(base.reshape(-1, d), axis=1, keepdims=True)
        base = (scale * (w[:, None] * mu + sin[:, None] * v)).reshape(n, n_views, d)
    if dropout_prob > 0:
        keep = rng.uniform(size=base.shape) >= dropout_prob
        base = base * keep
    return base


def make_views(x, spec, seed):
    """Views of a single input vector; deterministic per ``(x, seed)``.

    ``spec`` is an :class:`~dsf.config.AugmentationConfig`.
    """
    rng = np.random.default_rng(seed)
    return batch_views(
        np.asarray(x)[None], spec.noise_kappa, spec.views_per_group, spec.dropout_prob, rng
    )[0]


# ---------------------------------------------------------------------------
# encoder


class Encoder:
    """Feed-forward network ``d_in -> hidden... -> p``; ``embed`` renormalizes."""

    def __init__(self, d_in, hidden, p, activation="tanh", seed=0, params=None):
        self.sizes = [int(d_in), *map(int, hidden), int(p)]
        self.activation = activation
        if params is None:
            rng = component_rng(seed, _INIT)
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                gain = 1.0 if activation == "tanh" else math.sqrt(2.0)
                params.append(rng.standard_normal((fan_in, fan_out)) * gain / math.sqrt(fan_in))
                params.append(np.zeros(fan_out))
        self.params = [np.asarray(a, dtype=np.float64) for a in params]

    @property
    def p(self):
        return self.sizes[-1]

    def _act(self, a):
        return np.tanh(a) if self.activation == "tanh" else np.maximum(a, 0.0)

    def _act_grad(self, a, h):
        return 1.0 - h * h if self.activation == "tanh" else (a > 0).astype(np.float64)

    def forward(self, x):
        """Raw (unnormalized) outputs and the cache needed by :meth:`backward`."""
        h = np.asarray(x, dtype=np.float64)
        cache = []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            a = h @ w + b
            last = i == n_layers - 1
            out = a if last else self._act(a)
            cache.append((h, a, out))
            h = out
        return h, cache

    def backward(self, cache, g_out):
        grads = [None] * len(self.params)
        g = g_out
        n_layers = len(cache)
        for i in reversed(range(n_layers)):
            h_in, a, out = cache[i]
            if i != n_layers - 1:
                g = g * self._act_grad(a, out)
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads

    def embed(self, x):
        out, _ = self.forward(x)
        return as_unit(out)


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    params: list
    velocity: list
    step: int = 0
    queue_mu: np.ndarray | None = None
    queue_kappa: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def encoder(self, cfg: ExperimentConfig):
        e = cfg.encoder
        return Encoder(cfg.dataset.d_in, e.hidden, e.p, e.activation, params=self.params)


def save_checkpoint(path, state: TrainState):
    arrays = {f"param_{i}": a for i, a in enumerate(state.params)}
    arrays.update({f"velocity_{i}": a for i, a in enumerate(state.velocity)})
    if state.queue_mu is not None:
        arrays["queue_mu"] = state.queue_mu
    if state.queue_kappa is not None:
        arrays["queue_kappa"] = state.queue_kappa
    meta = {"step": state.step, "n_params": len(state.params), "config": state.config}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        n = meta["n_params"]
        return TrainState(
            params=[data[f"param_{i}"].copy() for i in range(n)],
            velocity=[data[f"velocity_{i}"].copy() for i in range(n)],
            step=int(meta["step"]),
            queue_mu=data["queue_mu"].copy() if "queue_mu" in data else None,
            queue_kappa=data["queue_kappa"].copy() if "queue_kappa" in data else None,
            config=meta["config"],
        )


# ---------------------------------------------------------------------------
# training loop


def steps_per_epoch(n_train, batch_size):
    if n_train < batch_size:
        raise ValueError(f"batch_size {batch_size} exceeds the {n_train} training points")
    return n_train // batch_size


def policy_from_config(cfg: ExperimentConfig):
    l = cfg.loss
    if not l.stabilize:
        return StabilizationPolicy.disabled()
    return StabilizationPolicy(lambda_r=l.lambda_r, normalize_by_dim=l.normalize_by_dim)


METRIC_FIELDS = ("step", "epoch", "loss", "margin_pos", "margin_neg", "margin", "mean_kappa", "skipped")


def train(cfg: ExperimentConfig, dataset=None, state=None, max_steps=None, metrics_path=None):
    """Run minibatch momentum SGD on ``cfg``.

    Parameters
    ----------
    dataset : SyntheticDataset, optional
        Generated from ``cfg`` when omitted.
    state : TrainState, optional
        Resume from this state instead of a fresh initialisation.
    max_steps : int, optional
        Stop once the global step counter reaches this value.
    metrics_path : path, optional
        Append one JSON object per step.

    Returns
    -------
    (TrainState, list of dict)
        Final state and the per-step metric records produced by this call.

    Raises
    ------
    TrainingDivergedError
        If the loss or the gradient becomes non-finite.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else dataset_from_config(cfg)
    train_idx, _ = dataset.train_test_split(cfg.dataset.test_fraction, cfg.seed)
    x_train = dataset.points[train_idx]

    opt, aug, lcfg = cfg.optimizer, cfg.augmentation, cfg.loss
    b = opt.batch_size
    per_epoch = steps_per_epoch(len(train_idx), b)
    total = per_epoch * opt.epochs
    if max_steps is not None:
        total = min(total, int(max_steps))

    if state is None:
        enc = Encoder(cfg.dataset.d_in, cfg.encoder.hidden, cfg.encoder.p, cfg.encoder.activation, seed=cfg.seed)
        state = TrainState(
            params=enc.params,
            velocity=[np.zeros_like(a) for a in enc.params],
            config=cfg.to_dict(),
        )
    else:
        enc = state.encoder(cfg)
        state.params = enc.params

    queue = None
    if lcfg.negatives == "queue":
        queue = NegativeQueue(lcfg.queue_size, with_kappa=lcfg.method == "dsf")
        queue.load_state({"mu": state.queue_mu, "kappa": state.queue_kappa})

    policy = policy_from_config(cfg)
    tau = lcfg.temperature()
    n_views = cfg.views_per_instance
    records = []
    metrics_fh = open(metrics_path, "a") if metrics_path else None
    perm_epoch, perm = None, None
    t0 = time.perf_counter()
    try:
        while state.step < total:
            step = state.step
            epoch, j = divmod(step, per_epoch)
            if epoch != perm_epoch:
                perm = component_rng(cfg.seed, _SHUFFLE, epoch).permutation(len(train_idx))
                perm_epoch = epoch
            idx = perm[j * b:(j + 1) * b]
            views = batch_views(
                x_train[idx], aug.noise_kappa, aug.views_per_group, aug.dropout_prob,
                component_rng(cfg.seed, _AUGMENT, step),
            )
            out_raw, cache = enc.forward(views.reshape(b * n_views, -1))
            negatives = queue.negatives() if queue is not None else None
            result = compute_loss(lcfg.method, out_raw.reshape(b, n_views, -1), negatives, tau, policy)
            record = {
                "step": step,
                "epoch": epoch,
                "loss": result.loss,
                "margin_pos": result.margin_pos,
                "margin_neg": result.margin_neg,
                "margin": result.margin,
                "mean_kappa": result.mean_kappa if lcfg.method == "dsf" else None,
                "skipped": len(result.skipped),
            }
            grads = enc.backward(cache, result.grad_features.reshape(b * n_views, -1))
            if not math.isfinite(result.loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at step {step} (loss={result.loss})", step, record
                )
            for i, g in enumerate(grads):
                if opt.weight_decay:
                    g = g + opt.weight_decay * state.params[i]
                state.velocity[i] = opt.momentum * state.velocity[i] + g
                state.params[i] -= opt.lr * state.velocity[i]
            if queue is not None:
                queue.enqueue(result.keys)
                state.queue_mu, state.queue_kappa = queue.mu, queue.kappa
            state.step += 1
            record["wall_clock"] = time.perf_counter() - t0
            records.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state, records


def epoch_summary(records):
    """Per-epoch means of the step metrics."""
    rows = []
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r)
    for epoch in sorted(by_epoch):
        rs = by_epoch[epoch]
        row = {"epoch": epoch, "steps": len(rs)}
        for key in ("loss", "margin_pos", "margin_neg", "margin", "mean_kappa"):
            vals = [r[key] for r in rs if r[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
