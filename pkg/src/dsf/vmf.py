"""von Mises-Fisher distributions estimated from groups of view features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from dsf.bessel import (
    approx_kappa,
    approx_kappa_dr,
    bessel_order,
    bessel_ratio,
    log_bessel_i,
)

LOG_2PI = float(np.log(2.0 * np.pi))

#: hard ceiling on the effective mean resultant length, keeps the estimator off its pole
R_BAR_CEILING = 1.0 - 1e-9


class DegenerateDirectionError(ValueError):
    """Mean resultant length too small for the mean direction to be defined."""


class DimensionMismatchError(ValueError):
    pass


def as_unit(x, axis=-1):
    """Renormalize ``x`` to unit length along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


@dataclass(frozen=True)
class StabilizationPolicy:
    """How raw mean resultant lengths are turned into a concentration.

    With ``enabled`` the resultant length is multiplied by ``lambda_r``
    before the closed-form estimate, and the result is divided by ``p`` if
    ``normalize_by_dim``. Disabled, the raw estimate is used.
    """

    lambda_r: float = 0.95
    normalize_by_dim: bool = True
    r_bar_floor: float = 1e-8
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.lambda_r < 1.0:
            raise ValueError(f"lambda_r must lie in (0, 1), got {self.lambda_r}")
        if not self.r_bar_floor > 0.0:
            raise ValueError("r_bar_floor must be positive")

    @classmethod
    def disabled(cls, r_bar_floor=1e-8):
        return cls(r_bar_floor=r_bar_floor, enabled=False)

    def effective_r_bar(self, r_bar):
        """Effective resultant length and its derivative w.r.t. the raw one."""
        r_bar = np.asarray(r_bar, dtype=np.float64)
        scale = self.lambda_r if self.enabled else 1.0
        scaled = scale * r_bar
        clipped = np.clip(scaled, self.r_bar_floor, R_BAR_CEILING)
        slope = np.where(clipped == scaled, scale, 0.0)
        return clipped, slope

    def kappa(self, r_bar, p):
        """Concentration for raw resultant length(s) ``r_bar`` and its derivative."""
        r_eff, slope = self.effective_r_bar(r_bar)
        denom = p if (self.enabled and self.normalize_by_dim) else 1.0
        kappa = approx_kappa(p, r_eff) / denom
        dkappa = approx_kappa_dr(p, r_eff) * slope / denom
        return kappa, dkappa

    def kappa_ceiling(self, p):
        """Largest concentration this policy can produce in dimension ``p``."""
        if not self.enabled:
            return float("inf")
        kappa, _ = self.kappa(1.0, p)
        return float(kappa)


@dataclass(frozen=True)
class VmfDistribution:
    """A vMF distribution ``(mu, kappa)`` on the unit sphere in ``R^p``.

    ``r_bar_raw`` records the resultant length the distribution was
    estimated from, before stabilization (NaN when built directly).
    """

    mu: np.ndarray
    kappa: float
    r_bar_raw: float = float("nan")
    p: int = field(init=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        norm = np.linalg.norm(mu)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("mean direction must be a nonzero finite vector")
        mu = mu / norm
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p", mu.shape[0])
        bessel_order(self.p)
        kappa = float(self.kappa)
        if not (np.isfinite(kappa) and kappa > 0.0):
            raise ValueError(f"kappa must be positive and finite, got {kappa}")
        object.__setattr__(self, "kappa", kappa)

    @property
    def nu(self):
        return self.p / 2.0 - 1.0

    def log_normalizer(self):
        """``log C_p(kappa)`` with ``C_p = kappa^nu / ((2 pi)^(p/2) I_nu(kappa))``."""
        return log_normalizer(self.p, self.kappa)

    def mean_resultant_length(self):
        return bessel_ratio(self.p, self.kappa)

    def to_dict(self):
        return {"mu": self.mu.tolist(), "kappa": self.kappa, "p": self.p}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        d = cls(mu=np.asarray(data["mu"], dtype=np.float64), kappa=data["kappa"])
        if "p" in data and int(data["p"]) != d.p:
            raise DimensionMismatchError(f"p={data['p']} but mu has {d.p} components")
        return d

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, VmfDistribution):
            return NotImplemented
        return self.kappa == other.kappa and np.array_equal(self.mu, other.mu)

    def __hash__(self):
        return hash((self.kappa, self.mu.tobytes()))


def log_normalizer(p, kappa):
    nu = p / 2.0 - 1.0
    kappa = np.asarray(kappa, dtype=np.float64)
    out = nu * np.log(kappa) - 0.5 * p * LOG_2PI - log_bessel_i(nu, kappa)
    return float(out) if np.ndim(out) == 0 else out


def resultant(views):
    """Mean vector, its length and direction for view groups.

    ``views`` has shape ``(..., m, p)``; returns ``(z_bar, r_bar, mu)`` with
    the group axis reduced. ``mu`` is NaN where ``r_bar`` is zero.
    """
    views = np.asarray(views, dtype=np.float64)
    z_bar = views.mean(axis=-2)
    r_bar = np.linalg.norm(z_bar, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = z_bar / r_bar[..., None]
    return z_bar, r_bar, mu


def estimate(views, policy=None):
    """Estimate a vMF from ``m`` unit vectors, the rows of ``views``.

    Parameters
    ----------
    views : array_like, shape (m, p)
        Feature vectors of the views in one group. Rows are renormalized.
    policy : StabilizationPolicy, optional
        Defaults to ``StabilizationPolicy()`` (``lambda_r = 0.95``, divide by ``p``).

    Raises
    ------
    DegenerateDirectionError
        If the resultant length is below ``policy.r_bar_floor``.
    """
    policy = policy or StabilizationPolicy()
    views = np.atleast_2d(np.asarray(views, dtype=np.float64))
    if views.shape[0] < 1:
        raise ValueError("need at least one view")
    views = as_unit(views)
    _, r_bar, mu = resultant(views)
    r_bar = float(r_bar)
    if not r_bar >= policy.r_bar_floor:
        raise DegenerateDirectionError(
            f"mean resultant length {r_bar:.3g} below floor {policy.r_bar_floor:.3g}"
        )
    kappa, _ = policy.kappa(r_bar, views.shape[1])
    return VmfDistribution(mu=mu, kappa=float(kappa), r_bar_raw=min(r_bar, 1.0))


def log_pdf(d, x):
    """Log density of ``d`` at unit vector(s) ``x`` (shape ``(p,)`` or ``(n, p)``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d.p:
        raise DimensionMismatchError(f"x has dimension {x.shape[-1]}, distribution has {d.p}")
    out = d.log_normalizer() + d.kappa * (x @ d.mu)
    return float(out) if np.ndim(out) == 0 else out


def _sample_cosines(kappa, p, n, rng):
    # Wood (1994) rejection sampler for w = mu^T x; returns (w, 1 - w).
    dim = p - 1.0
    b = dim / (2.0 * kappa + np.sqrt(4.0 * kappa * kappa + dim * dim))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * np.log1p(-x0 * x0)
    w = np.empty(n)
    one_minus_w = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        k = todo.size
        z = rng.beta(dim / 2.0, dim / 2.0, size=k)
        u = rng.uniform(size=k)
        denom = 1.0 - (1.0 - b) * z
        cand = (1.0 - (1.0 + b) * z) / denom
        cand_1m = 2.0 * b * z / denom
        ok = kappa * cand + dim * np.log(1.0 - x0 * cand) - c >= np.log(u)
        w[todo[ok]] = cand[ok]
        one_minus_w[todo[ok]] = cand_1m[ok]
        todo = todo[~ok]
    return w, one_minus_w


def sample_around(mu, kappa, n, rng):
    """Draw ``n`` samples from vMF(``mu``, ``kappa``) using generator ``rng``."""
    mu = as_unit(mu)
    p = mu.shape[0]
    w, one_minus_w = _sample_cosines(float(kappa), p, n, rng)
    v = rng.standard_normal((n, p))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sin = np.sqrt(one_minus_w * (1.0 + w))
    return as_unit(w[:, None] * mu + sin[:, None] * v)


def sample(d, n, seed=None):
    """``n`` i.i.d. draws from ``d``, deterministic for a given ``seed``.

    Returns an ``(n, p)`` array of unit vectors.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_around(d.mu, d.kappa, n, rng)


def kl_divergence(di, dj):
    """``KL(di || dj)`` in closed form.

    ``nu log(k_i / k_j) + log I_nu(k_j) - log I_nu(k_i) + A_p(k_i) (k_i - k_j mu_i^T mu_j)``
    """
    if di.p != dj.p:
        raise DimensionMismatchError(f"dimensions differ: {di.p} vs {dj.p}")
    return float(kl_terms(di.p, di.kappa, dj.kappa, float(di.mu @ dj.mu)))


def kl_terms(p, kappa_i, kappa_j, cos_ij, log_i_i=None, log_i_j=None, a_i=None):
    """Broadcasting KL kernel. Precomputed Bessel terms may be passed in."""
    nu = p / 2.0 - 1.0
    kappa_i = np.asarray(kappa_i, dtype=np.float64)
    kappa_j = np.asarray(kappa_j, dtype=np.float64)
    if log_i_i is None:
        log_i_i = log_bessel_i(nu, kappa_i)
    if log_i_j is None:
        log_i_j = log_bessel_i(nu, kappa_j)
    if a_i is None:
        a_i = bessel_ratio(p, kappa_i)
    return (
        nu * (np.log(kappa_i) - np.log(kappa_j))
        + (log_i_j - log_i_i)
        + a_i * (kappa_i - kappa_j * cos_ij)
    )
