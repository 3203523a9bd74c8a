import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fepn import (
    BetaField,
    BetaParams,
    DegenerateInputError,
    DomainError,
    ShapeError,
    beta_diff_entropy,
    beta_from_budget,
    beta_from_logits,
    beta_variance,
    expected_inlier,
    expected_inlier_from_densities,
    predict_label,
    variance_gap,
    variance_grad,
)

mpmath.mp.dps = 30
ENTROPY_GRID = [(a, b) for a in (1.0, 1.5, 2.0, 5.0, 20.0) for b in (1.0, 2.5, 7.0, 40.0)]


def quad_entropy(a, b):
    """-int_0^1 f ln f for the Beta(a, b) density, by mpmath quadrature."""
    a, b = mpmath.mpf(a), mpmath.mpf(b)
    log_norm = mpmath.log(mpmath.beta(a, b))

    def integrand(x):
        lf = (a - 1) * mpmath.log(x) + (b - 1) * mpmath.log1p(-x) - log_norm
        return -mpmath.exp(lf) * lf

    mode = (a - 1) / (a + b - 2) if a + b > 2 else mpmath.mpf(0.5)
    pts = sorted({mpmath.mpf(0), mode, mpmath.mpf(1)})
    return float(mpmath.quad(integrand, pts))


param = st.floats(1.0, 100.0)


def test_beta_params_validation():
    with pytest.raises(DomainError):
        BetaParams(0.5, 1.0)
    with pytest.raises(DomainError):
        BetaParams(1.0, float("inf"))
    assert BetaParams(1.0, 1.0).alpha == 1.0


def test_beta_from_logits_examples():
    p = beta_from_logits(0.0, 0.0)
    assert p.alpha == pytest.approx(1.6931471806, abs=1e-10)
    assert p.alpha == p.beta
    p = beta_from_logits(-50.0, -50.0)
    assert abs(p.alpha - 1.0) <= 1e-12 and abs(p.beta - 1.0) <= 1e-12
    p = beta_from_logits(1.0, -1.0)
    assert p.alpha == pytest.approx(float(1 + mpmath.log1p(mpmath.e)), abs=1e-12)
    assert p.beta == pytest.approx(float(1 + mpmath.log1p(mpmath.exp(-1))), abs=1e-12)
    assert p.alpha == pytest.approx(2.3132616875, abs=1e-10)
    with pytest.raises(DomainError):
        beta_from_logits(float("nan"), 0.0)


def test_beta_from_budget_examples():
    assert beta_from_budget(0.5, 1.0, 1.0, 0) == 1.0
    assert beta_from_budget(1.0, 2.0, 1.0, 10) == 21.0
    assert beta_from_budget(0.25, 0.5, 0.5, 8) == 1.5
    with pytest.raises(DomainError):
        beta_from_budget(-0.1, 1.0, 1.0, 1)
    with pytest.raises(DomainError):
        beta_from_budget(0.5, -1.0, 1.0, 1)


def test_expected_inlier_examples():
    assert expected_inlier(BetaParams(3, 1)) == 0.75
    assert expected_inlier(BetaParams(1, 1)) == 0.5
    assert expected_inlier(BetaParams(1.6931, 1.6931)) == 0.5


def test_expected_inlier_from_densities():
    assert expected_inlier_from_densities(2, 2) == 0.5
    assert expected_inlier_from_densities(1, 0) == 1.0
    assert expected_inlier_from_densities(0.3, 0.1) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        expected_inlier_from_densities(0, 0)
    with pytest.raises(DomainError):
        expected_inlier_from_densities(-1, 2)


def test_predict_label_examples():
    assert predict_label(BetaParams(3, 1), 0.5) == 1
    assert predict_label(BetaParams(1, 3), 0.5) == 0
    assert predict_label(BetaParams(1, 1), 0.5) == 1
    with pytest.raises(DomainError):
        predict_label(BetaParams(1, 1), 1.5)


def test_variance_examples():
    assert beta_variance(BetaParams(1, 1)) == pytest.approx(1 / 12, abs=1e-16)
    assert beta_variance(BetaParams(2, 2)) == pytest.approx(0.05, abs=1e-16)
    assert beta_variance(BetaParams(3, 1)) == pytest.approx(0.0375, abs=1e-16)


def test_diff_entropy_examples():
    assert beta_diff_entropy(BetaParams(1, 1)) == pytest.approx(0.0, abs=1e-14)
    # closed form: ln B(2,2) - 2 psi(2) + 2 psi(4) = 5/3 - ln 6
    assert beta_diff_entropy(BetaParams(2, 2)) == pytest.approx(5 / 3 - math.log(6), abs=1e-12)
    # ln B(5,1) - 4 psi(5) + 4 psi(6) = 4/5 - ln 5
    assert beta_diff_entropy(BetaParams(5, 1)) == pytest.approx(0.8 - math.log(5), abs=1e-12)
    assert beta_diff_entropy(BetaParams(5, 1)) == pytest.approx(quad_entropy(5, 1), abs=1e-9)


@pytest.mark.parametrize("a,b", ENTROPY_GRID)
def test_diff_entropy_matches_quadrature(a, b):
    assert beta_diff_entropy(BetaParams(a, b)) == pytest.approx(quad_entropy(a, b), abs=1e-6)


@pytest.mark.parametrize("a,b", [(1.0, 1.0), (4.0, 2.0), (1.5, 9.0)])
def test_variance_grad_matches_central_difference(a, b):
    h = 1e-5
    da, db = variance_grad(BetaParams(a, b))

    def v(x, y):
        return x * y / ((x + y) ** 2 * (x + y + 1))

    fd_a = (v(a + h, b) - v(a - h, b)) / (2 * h)
    fd_b = (v(a, b + h) - v(a, b - h)) / (2 * h)
    assert abs(da - fd_a) <= 1e-7 and abs(db - fd_b) <= 1e-7


def test_variance_grad_symmetric_at_origin():
    da, db = variance_grad(BetaParams(1, 1))
    assert da == db


def test_variance_range_sweep(rng):
    a = rng.uniform(1, 100, 10_000)
    b = rng.uniform(1, 100, 10_000)
    v = beta_variance(BetaField(a.reshape(100, 100), b.reshape(100, 100)))
    assert np.all(v > 0) and np.all(v < 1 / 12)
    assert beta_variance(BetaParams(1, 1)) == 1 / 12
    assert variance_gap(BetaParams(1, 1)) == 0.0


def test_variance_gap_matches_definition(rng):
    a = rng.uniform(1, 50, 1000)
    b = rng.uniform(1, 50, 1000)
    f = BetaField(a.reshape(10, 100), b.reshape(10, 100))
    direct = 1 - 12 * a * b / ((a + b) ** 2 * (a + b + 1))
    assert np.max(np.abs(variance_gap(f).reshape(-1) - direct)) <= 1e-13


@given(param, param)
def test_variance_bound(a, b):
    v = beta_variance(BetaParams(a, b))
    assert 0 < v <= 1 / 12
    if (a, b) != (1.0, 1.0):
        # exact gap is positive off (1, 1); Var itself can only round to
        # 1/12 when the gap is below float resolution
        assert variance_gap(BetaParams(a, b)) > 0
        if a + b - 2 > 1e-12:
            assert v < 1 / 12


@given(param, param)
def test_symmetry(a, b):
    assert beta_variance(BetaParams(a, b)) == beta_variance(BetaParams(b, a))
    assert beta_diff_entropy(BetaParams(a, b)) == beta_diff_entropy(BetaParams(b, a))
    s = expected_inlier(BetaParams(a, b)) + expected_inlier(BetaParams(b, a))
    assert abs(s - 1.0) <= 1e-12


def test_monotone_concentration():
    t = np.linspace(1, 100, 500)
    v = [beta_variance(BetaParams(x, x)) for x in t]
    h = [beta_diff_entropy(BetaParams(x, x)) for x in t]
    assert np.all(np.diff(v) < 0)
    assert np.all(np.diff(h) < 0)


def test_field_scores_match_scalar_path(rng):
    a = rng.uniform(1, 30, (5, 7))
    b = rng.uniform(1, 30, (5, 7))
    f = BetaField(a, b)
    v = beta_variance(f)
    h = beta_diff_entropy(f)
    for r in range(5):
        for c in range(7):
            assert v[r, c] == pytest.approx(beta_variance(f[r, c]), rel=1e-14)
            assert h[r, c] == pytest.approx(beta_diff_entropy(f[r, c]), abs=1e-12)


def test_field_validation():
    with pytest.raises(ShapeError):
        BetaField(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(DomainError):
        BetaField(np.full((2, 2), 0.5), np.ones((2, 2)))
    f = BetaField(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        f.alpha[0, 0] = 3.0


def test_field_csv_roundtrip(tmp_path, rng):
    f = BetaField(rng.uniform(1, 5, (3, 4)), rng.uniform(1, 5, (3, 4)))
    path = tmp_path / "field.csv"
    f.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "row,col,alpha,beta"
    assert lines[1].startswith("0,0,") and lines[5].startswith("1,0,")
    g = BetaField.from_csv(path)
    assert np.array_equal(f.alpha, g.alpha) and np.array_equal(f.beta, g.beta)
