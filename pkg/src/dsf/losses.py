"""Contrastive losses over multi-view batches, with analytic gradients.

A batch is an array of shape ``(B, 2m, p)``: for instance ``i`` rows
``0..m-1`` form the query group and rows ``m..2m-1`` the key group.
Feature rows are normalized inside each loss, and the returned gradient is
taken with respect to the features exactly as passed in. For unit-norm
rows this is the gradient projected onto the tangent space of the sphere.

Reported similarities (``margin_pos``, ``margin_neg``) are the InfoNCE
logits, i.e. similarities already divided by the temperature.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dsf.bessel import ConvergenceError, bessel_ratio, bessel_ratio_dkappa, log_bessel_i
from dsf.vmf import (
    StabilizationPolicy,
    VmfDistribution,
    kl_divergence,
    resultant,
)

log = logging.getLogger(__name__)

METHODS = ("cosine", "loss_avg", "fea_avg", "dsf")


class DegenerateBatchError(ValueError):
    """No instance of the batch survived the degenerate-direction check."""


@dataclass(frozen=True)
class NegativeSet:
    """Fixed negatives: ``K`` directions, plus concentrations for DSF."""

    mu: np.ndarray
    kappa: np.ndarray | None = None
    source: str = "queue"

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "mu", mu)
        if mu.shape[0] < 1:
            raise ValueError("a negative set needs K >= 1 entries")
        if self.kappa is not None:
            kappa = np.asarray(self.kappa, dtype=np.float64).ravel()
            if kappa.shape[0] != mu.shape[0]:
                raise ValueError("mu and kappa must have the same number of rows")
            object.__setattr__(self, "kappa", kappa)

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def from_distributions(cls, dists):
        dists = list(dists)
        return cls(
            mu=np.stack([d.mu for d in dists]),
            kappa=np.array([d.kappa for d in dists]),
        )


class NegativeQueue:
    """FIFO of past keys. Single writer: the training loop owns it."""

    def __init__(self, capacity=4096, with_kappa=False):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = int(capacity)
        self.with_kappa = with_kappa
        self.mu = None
        self.kappa = None

    def __len__(self):
        return 0 if self.mu is None else self.mu.shape[0]

    def enqueue(self, keys):
        mu = keys.mu
        kappa = keys.kappa
        if self.mu is None:
            self.mu = mu[-self.capacity:].copy()
            self.kappa = None if not self.with_kappa else kappa[-self.capacity:].copy()
            return
        self.mu = np.concatenate([self.mu, mu])[-self.capacity:]
        if self.with_kappa:
            self.kappa = np.concatenate([self.kappa, kappa])[-self.capacity:]

    def negatives(self):
        if not len(self):
            return None
        return NegativeSet(mu=self.mu, kappa=self.kappa if self.with_kappa else None)

    def state(self):
        return {"mu": self.mu, "kappa": self.kappa}

    def load_state(self, state):
        self.mu = None if state.get("mu") is None else np.array(state["mu"])
        self.kappa = None if state.get("kappa") is None else np.array(state["kappa"])


@dataclass
class LossOutput:
    loss: float
    grad_features: np.ndarray
    margin_pos: float
    margin_neg: float
    keys: NegativeSet | None = None
    mean_kappa: float = float("nan")
    skipped: tuple = field(default_factory=tuple)

    @property
    def margin(self):
        return self.margin_pos - self.margin_neg


# ---------------------------------------------------------------------------
# scalar similarity / loss API


def sim_cos(zi, zj):
    zi = np.asarray(zi, dtype=np.float64)
    zj = np.asarray(zj, dtype=np.float64)
    if zi.shape != zj.shape:
        raise ValueError(f"dimension mismatch: {zi.shape} vs {zj.shape}")
    return float(zi @ zj)


def sim_div(di: VmfDistribution, dj: VmfDistribution) -> float:
    """Negative KL divergence, query distribution first."""
    return -kl_divergence(di, dj)


def _logsumexp(x, axis=-1):
    mx = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


def info_nce(sim_pos, sim_negs, tau=1.0):
    """``-log(exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau)))``."""
    sims = np.concatenate([[sim_pos], np.ravel(np.asarray(sim_negs, dtype=np.float64))])
    if sims.size < 2:
        raise ValueError("InfoNCE needs at least one negative")
    if not np.all(np.isfinite(sims)):
        raise ValueError("non-finite similarity")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    logits = sims / tau
    return float(_logsumexp(logits) - logits[0])


def _nce_rows(pos_logit, neg_logits):
    """Per-row InfoNCE and its gradient w.r.t. the logits."""
    logits = np.concatenate([pos_logit[:, None], neg_logits], axis=1)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite similarity in InfoNCE")
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    total = e.sum(axis=1, keepdims=True)
    loss = mx[:, 0] + np.log(total[:, 0]) - logits[:, 0]
    prob = e / total
    return loss, prob[:, 0] - 1.0, prob[:, 1:]


def _infonce_from_sims(pos, neg_batch, neg_queue, tau):
    """InfoNCE averaged over rows.

    ``pos`` (n,) positive similarities; ``neg_batch`` an (n, n) in-batch
    similarity matrix whose diagonal is ignored, or None; ``neg_queue`` an
    (n, K) matrix, or None. Exactly one negative source is used.

    Returns ``(loss, g_pos, g_batch, g_queue, margin_pos, margin_neg)`` with
    gradients of the mean loss w.r.t. the raw (pre-temperature) similarities.
    """
    n = pos.shape[0]
    if neg_queue is not None:
        neg = neg_queue
    else:
        if n < 2:
            raise ValueError("in-batch negatives need at least two instances")
        off = ~np.eye(n, dtype=bool)
        neg = neg_batch[off].reshape(n, n - 1)
    rows, g_pos, g_neg = _nce_rows(pos / tau, neg / tau)
    scale = 1.0 / (n * tau)
    g_pos = g_pos * scale
    g_neg = g_neg * scale
    g_batch = g_queue = None
    if neg_queue is not None:
        g_queue = g_neg
    else:
        g_batch = np.zeros((n, n))
        g_batch[off] = g_neg.ravel()
    margin_pos = float(np.mean(pos / tau))
    margin_neg = float(np.mean(neg.mean(axis=1) / tau))
    return float(rows.mean()), g_pos, g_batch, g_queue, margin_pos, margin_neg


# ---------------------------------------------------------------------------
# batch helpers


def _split(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or f.shape[1] % 2 or f.shape[1] < 2:
        raise ValueError(f"expected features of shape (B, 2m, p), got {f.shape}")
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    z = f / norms
    m = f.shape[1] // 2
    return z, norms, m


def _through_normalization(z, norms, g_z):
    # d(f/|f|)/df applied to g_z
    radial = np.sum(g_z * z, axis=-1, keepdims=True)
    return (g_z - radial * z) / norms


def _use_queue(negatives):
    return negatives is not None and len(negatives) > 0


# ---------------------------------------------------------------------------
# cosine-based losses


def loss_avg(features, negatives=None, tau=0.2):
    """Mean of the ``m^2`` pairwise cosine InfoNCE losses between groups.

    Negatives for pair ``(l, l')`` are the key view ``l'`` of the other
    instances (in-batch), or the rows of ``negatives`` (queue).
    """
    z, norms, m = _split(features)
    n = z.shape[0]
    g_z = np.zeros_like(z)
    queue = negatives.mu if _use_queue(negatives) else None
    total = mpos = mneg = 0.0
    for lq in range(m):
        q = z[:, lq]
        for lk in range(m):
            k = z[:, m + lk]
            pos = np.sum(q * k, axis=1)
            if queue is None:
                sims = q @ k.T
                loss, g_pos, g_b, _, sp, sn = _infonce_from_sims(pos, sims, None, tau)
                g_b = g_b + np.diag(g_pos)
                g_z[:, lq] += g_b @ k
                g_z[:, m + lk] += g_b.T @ q
            else:
                sims = q @ queue.T
                loss, g_pos, _, g_q, sp, sn = _infonce_from_sims(pos, None, sims, tau)
                g_z[:, lq] += g_pos[:, None] * k + g_q @ queue
                g_z[:, m + lk] += g_pos[:, None] * q
            total += loss
            mpos += sp
            mneg += sn
    pairs = m * m
    g_z /= pairs
    return LossOutput(
        loss=total / pairs,
        grad_features=_through_normalization(z, norms, g_z),
        margin_pos=mpos / pairs,
        margin_neg=mneg / pairs,
        keys=NegativeSet(mu=z[:, m].copy(), source="in_batch"),
    )


def cosine_loss(features, negatives=None, tau=0.2):
    """Plain two-view cosine InfoNCE (``m = 1``)."""
    if np.shape(features)[1] != 2:
        raise ValueError("plain cosine InfoNCE takes exactly two views per instance")
    return loss_avg(features, negatives, tau)


def fea_avg(features, negatives=None, tau=0.2):
    """Cosine InfoNCE between the per-group mean features.

    The means are deliberately left unnormalized, so their inner product is
    the average of all ``m^2`` pairwise cosines.
    """
    z, norms, m = _split(features)
    a = z[:, :m].mean(axis=1)
    b = z[:, m:].mean(axis=1)
    pos = np.sum(a * b, axis=1)
    if _use_queue(negatives):
        queue = negatives.mu
        loss, g_pos, _, g_q, sp, sn = _infonce_from_sims(pos, None, a @ queue.T, tau)
        g_a = g_pos[:, None] * b + g_q @ queue
        g_b = g_pos[:, None] * a
    else:
        loss, g_pos, g_bt, _, sp, sn = _infonce_from_sims(pos, a @ b.T, None, tau)
        g_bt = g_bt + np.diag(g_pos)
        g_a = g_bt @ b
        g_b = g_bt.T @ a
    g_z = np.concatenate(
        [np.repeat(g_a[:, None] / m, m, axis=1), np.repeat(g_b[:, None] / m, m, axis=1)],
        axis=1,
    )
    return LossOutput(
        loss=loss,
        grad_features=_through_normalization(z, norms, g_z),
        margin_pos=sp,
        margin_neg=sn,
        keys=NegativeSet(mu=b.copy(), source="in_batch"),
    )


# ---------------------------------------------------------------------------
# divergence-based loss


def _kl_partials(p, kq, aq, daq, lq, kk, ak, lk, cos):
    """KL(q || k) and its partial derivatives, broadcasting over (q, k)."""
    nu = p / 2.0 - 1.0
    kl = nu * (np.log(kq) - np.log(kk)) + (lk - lq) + aq * (kq - kk * cos)
    d_kq = daq * (kq - kk * cos)
    d_kk = ak - aq * cos
    d_cos = -aq * kk
    return kl, d_kq, d_kk, d_cos


def _group_backward(views, z_bar_r, mu, dkappa_dr, g_mu, g_kappa):
    """Push gradients on (mu, kappa) of each group back onto its views."""
    m = views.shape[1]
    g_r = g_kappa * dkappa_dr
    tang = g_mu - np.sum(g_mu * mu, axis=1, keepdims=True) * mu
    g_zbar = tang / z_bar_r[:, None] + g_r[:, None] * mu
    return np.repeat(g_zbar[:, None] / m, m, axis=1)


def dsf_loss(features, negatives=None, policy=None, tau=1.0):
    """InfoNCE with the divergence-based similarity between view groups.

    For each instance a vMF is estimated from the query group and from the
    key group; the positive similarity is ``-KL(D_i || D_i+)``. Negatives
    are the key distributions of the other instances (``negatives=None``),
    or the fixed ``(mu, kappa)`` rows of a :class:`NegativeSet`.

    Instances where either group's resultant length falls below the
    policy floor are skipped and logged; the loss averages the survivors.
    """
    policy = policy or StabilizationPolicy()
    z, norms, m = _split(features)
    n_all, _, p = z.shape
    nu = p / 2.0 - 1.0

    _, r_q, mu_q = resultant(z[:, :m])
    _, r_k, mu_k = resultant(z[:, m:])
    valid = (r_q >= policy.r_bar_floor) & (r_k >= policy.r_bar_floor)
    skipped = tuple(int(i) for i in np.flatnonzero(~valid))
    if skipped:
        log.warning("dsf_loss: skipping degenerate instances %s", skipped)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise DegenerateBatchError("every instance in the batch is degenerate")
    r_q, mu_q, r_k, mu_k = r_q[idx], mu_q[idx], r_k[idx], mu_k[idx]

    kq, dkq_dr = policy.kappa(r_q, p)
    kk, dkk_dr = policy.kappa(r_k, p)
    aq = bessel_ratio(p, kq)
    daq = bessel_ratio_dkappa(p, kq)
    ak = bessel_ratio(p, kk)
    lq = log_bessel_i(nu, kq)
    lk = log_bessel_i(nu, kk)

    use_queue = _use_queue(negatives)
    if use_queue:
        if negatives.kappa is None:
            raise ValueError("DSF negatives need concentrations")
        cos_pos = np.sum(mu_q * mu_k, axis=1)
        kl_pos, dq_pos, dk_pos, dc_pos = _kl_partials(p, kq, aq, daq, lq, kk, ak, lk, cos_pos)
        qk, qmu = negatives.kappa, negatives.mu
        cos_neg = mu_q @ qmu.T
        kl_neg, dq_neg, _, dc_neg = _kl_partials(
            p, kq[:, None], aq[:, None], daq[:, None], lq[:, None],
            qk[None, :], bessel_ratio(p, qk)[None, :], log_bessel_i(nu, qk)[None, :],
            cos_neg,
        )
        loss, g_pos, _, g_q, sp, sn = _infonce_from_sims(-kl_pos, None, -kl_neg, tau)
        h_pos = -g_pos
        h_neg = -g_q
        g_kq = h_pos * dq_pos + np.sum(h_neg * dq_neg, axis=1)
        g_kk = h_pos * dk_pos
        g_muq = (h_pos * dc_pos)[:, None] * mu_k + (h_neg * dc_neg) @ qmu
        g_muk = (h_pos * dc_pos)[:, None] * mu_q
    else:
        cos = mu_q @ mu_k.T
        kl, d_q, d_k, d_c = _kl_partials(
            p, kq[:, None], aq[:, None], daq[:, None], lq[:, None],
            kk[None, :], ak[None, :], lk[None, :], cos,
        )
        loss, g_pos, g_b, _, sp, sn = _infonce_from_sims(-np.diag(kl).copy(), -kl, None, tau)
        h = -(g_b + np.diag(g_pos))
        g_kq = np.sum(h * d_q, axis=1)
        g_kk = np.sum(h * d_k, axis=0)
        hc = h * d_c
        g_muq = hc @ mu_k
        g_muk = hc.T @ mu_q

    g_z = np.zeros_like(z)
    g_z[idx, :m] = _group_backward(z[idx, :m], r_q, mu_q, dkq_dr, g_muq, g_kq)
    g_z[idx, m:] = _group_backward(z[idx, m:], r_k, mu_k, dkk_dr, g_muk, g_kk)
    return LossOutput(
        loss=loss,
        grad_features=_through_normalization(z, norms, g_z),
        margin_pos=sp,
        margin_neg=sn,
        keys=NegativeSet(mu=mu_k.copy(), kappa=kk.copy(), source="in_batch"),
        mean_kappa=float(np.mean(np.concatenate([kq, kk]))),
        skipped=skipped,
    )


def compute_loss(method, features, negatives=None, tau=1.0, policy=None):
    """Dispatch on method name: ``cosine``, ``loss_avg``, ``fea_avg`` or ``dsf``."""
    if method == "dsf":
        return dsf_loss(features, negatives, policy, tau)
    if method == "cosine":
        return cosine_loss(features, negatives, tau)
    if method == "loss_avg":
        return loss_avg(features, negatives, tau)
    if method == "fea_avg":
        return fea_avg(features, negatives, tau)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# equivalence with cosine InfoNCE, optimal-similarity loss table


def kappa_for_temperature(p, tau, tol=1e-14, max_iter=100):
    """Unique ``kappa`` with ``A_p(kappa) * kappa = 1 / tau``.

    ``kappa A_p(kappa)`` increases strictly from 0 to infinity, so a
    safeguarded Newton iteration on a bracket always converges.
    """
    target = 1.0 / tau
    lo, hi = 0.0, target + p
    while bessel_ratio(p, hi) * hi < target:
        hi *= 2.0
    kappa = min(max(target + (p - 1.0) / 2.0, math.sqrt(p * target)), hi)
    resid = math.nan
    for _ in range(max_iter):
        a = bessel_ratio(p, kappa)
        resid = a * kappa - target
        if abs(resid) <= tol * target:
            return kappa
        if resid > 0:
            hi = kappa
        else:
            lo = kappa
        slope = bessel_ratio_dkappa(p, kappa) * kappa + a
        nxt = kappa - resid / slope
        kappa = nxt if lo < nxt < hi else 0.5 * (lo + hi)
    raise ConvergenceError(
        f"no root of kappa A_{p}(kappa) = {target}", last_iterate=kappa, residual=resid
    )


def theorem_equivalence_check(zi, z_pos, z_negs, tau, p=None):
    """Compare divergence-based and cosine InfoNCE for single-view groups.

    Every vector gets the shared concentration solving ``A_p(k) k = 1/tau``;
    the divergence loss is then evaluated at temperature 1 and the cosine
    loss at ``tau``. Returns ``{"kappa", "l_div", "l_cos", "abs_diff"}``.
    """
    zi = np.asarray(zi, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    z_negs = np.atleast_2d(np.asarray(z_negs, dtype=np.float64))
    p = zi.shape[0] if p is None else int(p)
    if zi.shape[0] != p:
        raise ValueError("p does not match the vector dimension")
    kappa = kappa_for_temperature(p, tau)
    di = VmfDistribution(zi, kappa)
    dpos = VmfDistribution(z_pos, kappa)
    dnegs = [VmfDistribution(z, kappa) for z in z_negs]
    l_div = info_nce(sim_div(di, dpos), [sim_div(di, d) for d in dnegs], 1.0)
    l_cos = info_nce(
        sim_cos(di.mu, dpos.mu), [sim_cos(di.mu, d.mu) for d in dnegs], tau
    )
    return {"kappa": kappa, "l_div": l_div, "l_cos": l_cos, "abs_diff": abs(l_div - l_cos)}


def optimal_loss(tau, k):
    """InfoNCE at ``s+ = 1``, ``s- = -1`` with ``k`` negatives: ``log(1 + k e^{-2/tau})``."""
    return math.log1p(k * math.exp(-2.0 / tau))


def proposition_table(taus=(1.0, 0.5, 0.2, 0.1), ks=(256, 4096, 65536)):
    """Rows ``(tau, [loss for each k])``."""
    for tau in taus:
        if not tau > 0:
            raise ValueError("temperatures must be positive")
    for k in ks:
        if k < 1:
            raise ValueError("K must be >= 1")
    return [(float(tau), [optimal_loss(tau, k) for k in ks]) for tau in taus]
