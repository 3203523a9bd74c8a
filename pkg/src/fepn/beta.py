"""Beta evidential posterior over the inlier probability.

A cell's posterior is Beta(alpha, beta) with alpha collecting inlier
evidence and beta outlier evidence.  Both are built as ``1 + evidence`` so
the flat Beta(1, 1) is the no-evidence state.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import special
from .errors import DegenerateInputError, DomainError, ShapeError

__all__ = [
    "BetaParams",
    "BetaField",
    "CONTEXTUAL_EPS",
    "beta_from_logits",
    "beta_from_log_densities",
    "evidence_from_log_densities",
    "beta_from_budget",
    "expected_inlier",
    "expected_inlier_from_densities",
    "predict_label",
    "beta_variance",
    "beta_diff_entropy",
    "variance_gap",
    "variance_grad",
]

MAX_VARIANCE = 1.0 / 12.0
CONTEXTUAL_EPS = 1e-6
BETA_MODES = ("softplus", "contextual")


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise DomainError("Beta parameters must be finite")
        if self.alpha < 1.0 or self.beta < 1.0:
            raise DomainError(
                f"Beta parameters must be >= 1, got ({self.alpha}, {self.beta})"
            )


@dataclass(frozen=True, eq=False)
class BetaField:
    """H x W grid of Beta posteriors stored as two float arrays."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64)
        b = np.array(self.beta, dtype=np.float64)
        if a.ndim != 2 or a.shape != b.shape:
            raise ShapeError(f"alpha {a.shape} and beta {b.shape} must be equal 2-d")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DomainError("BetaField entries must be finite")
        if np.any(a < 1.0) or np.any(b < 1.0):
            raise DomainError("BetaField entries must be >= 1")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def height(self):
        return self.alpha.shape[0]

    @property
    def width(self):
        return self.alpha.shape[1]

    @property
    def shape(self):
        return self.alpha.shape

    def __getitem__(self, rc):
        r, c = rc
        return BetaParams(float(self.alpha[r, c]), float(self.beta[r, c]))

    def to_csv(self, path):
        """Write ``row,col,alpha,beta`` in row-major order, 17 significant digits."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "alpha", "beta"])
            for r in range(self.height):
                for c in range(self.width):
                    w.writerow(
                        [r, c, f"{self.alpha[r, c]:.17g}", f"{self.beta[r, c]:.17g}"]
                    )

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        h = max(int(r["row"]) for r in rows) + 1
        w = max(int(r["col"]) for r in rows) + 1
        a = np.empty((h, w))
        b = np.empty((h, w))
        for r in rows:
            i, j = int(r["row"]), int(r["col"])
            a[i, j] = float(r["alpha"])
            b[i, j] = float(r["beta"])
        return cls(a, b)


def _finite(*xs):
    for x in xs:
        if not math.isfinite(x):
            raise DomainError(f"non-finite input {x!r}")


def beta_from_logits(z_in, z_out):
    """alpha = 1 + softplus(z_in), beta = 1 + softplus(z_out)."""
    _finite(z_in, z_out)
    return BetaParams(1.0 + special.softplus(z_in), 1.0 + special.softplus(z_out))


def evidence_from_log_densities(log_p_in, log_p_out, mode="softplus"):
    """Differentiable excess evidence (alpha - 1, beta - 1) from per-cell
    log-densities.

    ``softplus`` uses softplus(log p).  ``contextual`` uses log p literally,
    clamped from below at CONTEXTUAL_EPS so that alpha, beta > 1.
    Keeping the excess rather than alpha itself avoids losing its low bits
    when the evidence is tiny.
    """
    if mode == "softplus":
        return ad.softplus(log_p_in), ad.softplus(log_p_out)
    if mode == "contextual":
        e_in, e_out = ad.as_var(log_p_in), ad.as_var(log_p_out)
        return (
            ad.where(e_in.value > CONTEXTUAL_EPS, e_in, CONTEXTUAL_EPS),
            ad.where(e_out.value > CONTEXTUAL_EPS, e_out, CONTEXTUAL_EPS),
        )
    raise DomainError(f"unknown beta mode {mode!r}; expected one of {BETA_MODES}")


def beta_from_log_densities(log_p_in, log_p_out, mode="softplus"):
    """alpha, beta as tape Vars; see ``evidence_from_log_densities``."""
    e_in, e_out = evidence_from_log_densities(log_p_in, log_p_out, mode)
    return 1.0 + e_in, 1.0 + e_out


def beta_from_budget(p_class, p_z, beta_prior, n_budget):
    """Certainty-budget evidence: prior + N * P(c | z) * P(z)."""
    if not 0.0 <= p_class <= 1.0:
        raise DomainError("p_class must be a probability")
    if p_z < 0 or n_budget < 0:
        raise DomainError("density and budget must be non-negative")
    if beta_prior <= 0:
        raise DomainError("beta_prior must be positive")
    return beta_prior + n_budget * p_class * p_z


def expected_inlier(p):
    return p.alpha / (p.alpha + p.beta)


def expected_inlier_from_densities(p_in, p_out):
    if p_in < 0 or p_out < 0:
        raise DomainError("densities must be non-negative")
    if p_in + p_out <= 0:
        raise DegenerateInputError("both densities are zero")
    return p_in / (p_in + p_out)


def predict_label(p, tau=0.5):
    """1 (inlier) when the posterior mean reaches ``tau``, else 0."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError("tau must lie in [0, 1]")
    return 1 if expected_inlier(p) >= tau else 0


def _variance(a, b):
    s = a + b
    return a * b / (s * s * (s + 1.0))


def _variance_np(a, b):
    direct = _variance(a, b)
    # Near (1, 1) the direct quotient can round above 1/12; the gap form
    # cannot, and it is accurate there because 1 - gap does not cancel.
    gap = _variance_gap(a - 1.0, b - 1.0)
    return np.where(gap < 0.5, (1.0 - gap) / 12.0, direct)


def _variance_gap(p, q):
    """1 - 12 Var(1 + p, 1 + q) without cancellation near p = q = 0.

    With r = p + q and s = 2 + r, s^2 (s + 1) - 12 (1 + p)(1 + q) expands to
    4r + 7p^2 + 2pq + 7q^2 + r^3, every term non-negative.
    """
    r = p + q
    s = 2.0 + r
    num = 4.0 * r + 7.0 * (p * p) + 2.0 * (p * q) + 7.0 * (q * q) + r * r * r
    return num / (s * s * (s + 1.0))


def _diff_entropy(a, b, p=None, q=None, psi=None):
    # p, q: exact excess evidence a - 1, b - 1; psi: (psi(a), psi(b), psi(a+b))
    p = a - 1.0 if p is None else p
    q = b - 1.0 if q is None else q
    s = a + b
    psi_a, psi_b, psi_s = psi or (ad.digamma(a), ad.digamma(b), ad.digamma(s))
    log_b = ad.log_gamma(a) + ad.log_gamma(b) - ad.log_gamma(s)
    return log_b - p * psi_a - q * psi_b + (p + q) * psi_s


def variance_gap(p):
    """1 - 12 Var, computed without cancellation: 0 only at Beta(1, 1) and
    positive everywhere else, even where Var itself rounds to 1/12."""
    if isinstance(p, BetaField):
        return _variance_gap(p.alpha - 1.0, p.beta - 1.0)
    return float(_variance_gap(p.alpha - 1.0, p.beta - 1.0))


def beta_variance(p):
    """Variance of Beta(alpha, beta).  Accepts BetaParams or a BetaField."""
    if isinstance(p, BetaField):
        return _variance_np(p.alpha, p.beta)
    return float(_variance_np(p.alpha, p.beta))


def beta_diff_entropy(p):
    """Differential entropy of Beta(alpha, beta); 0 at (1, 1), negative when
    the distribution is more concentrated than uniform."""
    if isinstance(p, BetaField):
        return _diff_entropy(ad.Var(p.alpha), ad.Var(p.beta)).value
    a, b = p.alpha, p.beta
    # order-independent sum so that H(a, b) == H(b, a) bit for bit
    ta = (a - 1.0) * special.digamma(a)
    tb = (b - 1.0) * special.digamma(b)
    s = a + b
    return (
        special.log_beta(a, b)
        - (min(ta, tb) + max(ta, tb))
        + (s - 2.0) * special.digamma(s)
    )


def variance_grad(p):
    """Analytic (dVar/dalpha, dVar/dbeta)."""
    a, b = p.alpha, p.beta
    s = a + b
    denom = s**3 * (s + 1.0) ** 2
    # d/da [ab / (s^2 (s+1))] = b (s(s+1) - a(3s + 2)) / (s^3 (s+1)^2)
    da = b * (s * (s + 1.0) - a * (3.0 * s + 2.0)) / denom
    db = a * (s * (s + 1.0) - b * (3.0 * s + 2.0)) / denom
    return da, db
