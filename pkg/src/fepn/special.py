"""Scalar special functions: log-gamma, digamma, trigamma, log-beta, softplus.

All functions accept a float or an array and return the same kind.  The
``_unchecked`` variants skip domain validation and are used on hot paths
where the caller already guarantees positive finite input.
"""

import math

import numpy as np

from .errors import DomainError

__all__ = ["log_gamma", "digamma", "trigamma", "log_beta", "softplus"]

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Bernoulli-number coefficients of the asymptotic expansions, applied in
# powers of 1/x^2.
_DIGAMMA_ASYM = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_TRIGAMMA_ASYM = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)
_ASYM_CUTOFF = 10.0


def _float(x):
    """Array view of x; float64 unless x already has a wider float type."""
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.dtype.itemsize < 8:
        arr = arr.astype(np.float64)
    return arr


def _as_float_array(x):
    arr = _float(x)
    return arr, arr.ndim == 0


def _check_positive(arr, name):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: argument must be finite")
    if np.any(arr <= 0.0):
        raise DomainError(f"{name}: argument must be > 0")


def _ret(arr, scalar):
    return float(arr) if scalar else arr


def _log_gamma_unchecked(x):
    x = _float(x)
    # Lanczos is accurate for x >= 0.5; shift smaller arguments up by one.
    small = x < 0.5
    z = np.where(small, x + 1.0, x) - 1.0
    series = np.full_like(z, _LANCZOS_COEF[0])
    for k, c in enumerate(_LANCZOS_COEF[1:], start=1):
        series = series + c / (z + k)
    t = z + _LANCZOS_G + 0.5
    out = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)
    out = np.where(small, out - np.log(np.where(small, x, 1.0)), out)
    # ln Gamma(1) = ln Gamma(2) = 0 exactly
    return np.where((x == 1.0) | (x == 2.0), 0.0, out)


# Stirling remainder ln Gamma(x) - [(x - 1/2) ln x - x + ln sqrt(2 pi)], x >= 10.
_STIRLING = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _stirling_corr(x):
    inv = 1.0 / x
    inv2 = inv * inv
    poly = np.zeros_like(x)
    for c in reversed(_STIRLING):
        poly = poly * inv2 + c
    return inv * poly


def _log_beta_unchecked(a, b):
    # p <= q makes the result bitwise symmetric.  When q is large the
    # difference ln Gamma(q) - ln Gamma(p + q) is taken analytically instead
    # of by subtracting two huge numbers.
    p, q = np.minimum(a, b), np.maximum(a, b)
    s = p + q
    big_q = q >= _ASYM_CUTOFF
    big_p = p >= _ASYM_CUTOFF
    qs = np.where(big_q, q, _ASYM_CUTOFF)
    ps = np.where(big_p, p, _ASYM_CUTOFF)
    ss = np.where(big_q, s, _ASYM_CUTOFF)
    ratio = np.log1p(-p / ss)
    both = (
        -0.5 * np.log(qs)
        + _HALF_LOG_2PI
        + (_stirling_corr(ps) + _stirling_corr(qs) - _stirling_corr(ss))
        + (ps - 0.5) * np.log(ps / ss)
        + qs * ratio
    )
    lg_p = _log_gamma_unchecked(p)
    one = lg_p + (_stirling_corr(qs) - _stirling_corr(ss)) + p - p * np.log(ss) + (qs - 0.5) * ratio
    neither = lg_p + _log_gamma_unchecked(q) - _log_gamma_unchecked(s)
    return np.where(big_p, both, np.where(big_q, one, neither))


def _digamma_unchecked(x):
    x = _float(x)
    # psi(x) = psi(x + n) - sum_{k<n} 1/(x + k), with x + n past the cutoff
    n = int(max(0.0, np.ceil(_ASYM_CUTOFF - np.min(x)))) if x.size else 0
    acc = np.zeros_like(x)
    for k in range(n):
        acc = acc - 1.0 / (x + k)
    x = x + n
    inv2 = 1.0 / (x * x)
    poly = np.zeros_like(x)
    for c in reversed(_DIGAMMA_ASYM):
        poly = poly * inv2 + c
    return acc + np.log(x) - 0.5 / x - inv2 * poly


def _trigamma_unchecked(x):
    x = _float(x)
    n = int(max(0.0, np.ceil(_ASYM_CUTOFF - np.min(x)))) if x.size else 0
    acc = np.zeros_like(x)
    for k in range(n):
        xk = x + k
        acc = acc + 1.0 / (xk * xk)
    x = x + n
    inv = 1.0 / x
    inv2 = inv * inv
    poly = np.zeros_like(x)
    for c in reversed(_TRIGAMMA_ASYM):
        poly = poly * inv2 + c
    return acc + inv + 0.5 * inv2 + inv * inv2 * poly


def _softplus_unchecked(x):
    x = _float(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_gamma(x):
    """Natural log of the gamma function for x > 0."""
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "log_gamma")
    return _ret(_log_gamma_unchecked(arr), scalar)


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x) for x > 0.

    Uses the recurrence psi(x) = psi(x + 1) - 1/x to push the argument past
    10, then the asymptotic Bernoulli series.  Works in the input's float
    precision, so ``np.longdouble`` arrays stay extended.
    """
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "digamma")
    return _ret(_digamma_unchecked(arr), scalar)


def trigamma(x):
    """Derivative of the digamma function for x > 0."""
    arr, scalar = _as_float_array(x)
    _check_positive(arr, "trigamma")
    return _ret(_trigamma_unchecked(arr), scalar)


def log_beta(a, b):
    """ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b)."""
    a_arr, a_scalar = _as_float_array(a)
    b_arr, b_scalar = _as_float_array(b)
    _check_positive(a_arr, "log_beta")
    _check_positive(b_arr, "log_beta")
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    return _ret(_log_beta_unchecked(a_arr, b_arr), a_scalar and b_scalar)


def softplus(x):
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    arr, scalar = _as_float_array(x)
    if not np.all(np.isfinite(arr)):
        raise DomainError("softplus: argument must be finite")
    return _ret(_softplus_unchecked(arr), scalar)
