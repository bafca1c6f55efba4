"""Central finite-difference checks for the batch losses."""

from __future__ import annotations

import numpy as np

from dsf.losses import NegativeSet, dsf_loss, fea_avg, loss_avg
from dsf.vmf import StabilizationPolicy, as_unit

#: gradient entries below this magnitude are compared in absolute terms
GRAD_FLOOR = 1e-6


def finite_difference_check(loss_fn, features, n_coords=100, h=1e-5, rng=None):
    """Compare ``loss_fn(features).grad_features`` with central differences.

    Returns ``(max_rel_error, max_tangency)`` over ``n_coords`` random
    coordinates; tangency is ``max |<grad_row, feature_row>|``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    f = np.array(features, dtype=np.float64)
    out = loss_fn(f)
    g = out.grad_features
    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(rng.integers(0, s)) for s in f.shape)
        fp = f.copy()
        fm = f.copy()
        fp[idx] += h
        fm[idx] -= h
        num = (loss_fn(fp).loss - loss_fn(fm).loss) / (2.0 * h)
        denom = max(abs(num), abs(g[idx]), GRAD_FLOOR)
        worst = max(worst, abs(num - g[idx]) / denom)
    unit = as_unit(f)
    tangency = float(np.max(np.abs(np.sum(g * unit, axis=-1))))
    return worst, tangency


def random_batch(rng, b, m, p, spread=0.6):
    """Unit features clustered per group so that resultant lengths are moderate."""
    centres = as_unit(rng.standard_normal((b, 2, 1, p)))
    noise = rng.standard_normal((b, 2, m, p))
    return as_unit((centres + spread * noise).reshape(b, 2 * m, p))


def random_negatives(rng, k, p, with_kappa=True):
    mu = as_unit(rng.standard_normal((k, p)))
    kappa = rng.uniform(0.2, 8.0, size=k) if with_kappa else None
    return NegativeSet(mu=mu, kappa=kappa)


def gradcheck_suite(seed=0, trials=6, n_coords=100):
    """Randomised FD checks of ``dsf_loss``, ``loss_avg`` and ``fea_avg``.

    Returns a list of per-case dicts with ``loss``, ``mode``, ``B``, ``m``,
    ``p``, ``max_rel_error`` and ``max_tangency``.
    """
    rng = np.random.default_rng(seed)
    results = []
    for t in range(trials):
        b = int(rng.integers(2, 5))
        m = int(rng.integers(1, 5))
        p = int(rng.choice([3, 8, 16]))
        tau = float(rng.choice([0.2, 0.5, 1.0]))
        feats = random_batch(rng, b, m, p)
        for mode in ("in_batch", "queue"):
            neg = random_negatives(rng, 12, p) if mode == "queue" else None
            cases = {
                "dsf": lambda x, neg=neg: dsf_loss(x, neg, StabilizationPolicy(), 1.0),
                "loss_avg": lambda x, neg=neg: loss_avg(x, neg, tau),
                "fea_avg": lambda x, neg=neg: fea_avg(x, neg, tau),
            }
            for name, fn in cases.items():
                err, tang = finite_difference_check(fn, feats, n_coords, rng=rng)
                results.append(
                    {"loss": name, "mode": mode, "B": b, "m": m, "p": p, "tau": tau,
                     "max_rel_error": err, "max_tangency": tang}
                )
    return results
