import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fepn import (
    BetaField,
    DegenerateInputError,
    DomainError,
    MetricsReport,
    ScoreField,
    ShapeError,
    auprc,
    auroc,
    average_precision,
    diff_entropy_score,
    energy_score,
    fpr_at_tpr,
    shannon_entropy_score,
    variance_score,
)
from fepn.metrics import evaluate_scores, read_metrics_csv, write_metrics_csv


# brute-force oracles in exact rational arithmetic


def oracle_auroc(s, y):
    pos = [a for a, t in zip(s, y) if t == 1]
    neg = [a for a, t in zip(s, y) if t == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _thresholds(s, y):
    """(tp, fp) for every candidate threshold 'score >= t', highest first."""
    out = []
    for t in sorted(set(s), reverse=True):
        tp = sum(1 for a, b in zip(s, y) if a >= t and b == 1)
        fp = sum(1 for a, b in zip(s, y) if a >= t and b == 0)
        out.append((tp, fp))
    return out


def oracle_auprc(s, y):
    n_pos = sum(y)
    area, prev_tp = Fraction(0), 0
    for tp, fp in _thresholds(s, y):
        area += Fraction(tp - prev_tp, n_pos) * Fraction(tp, tp + fp)
        prev_tp = tp
    return area


def oracle_fpr(s, y, target=Fraction(95, 100)):
    n_pos, n_neg = sum(y), len(y) - sum(y)
    for tp, fp in _thresholds(s, y):
        if Fraction(tp, n_pos) >= target:
            return Fraction(fp, n_neg)
    raise AssertionError


def random_instances(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[rng.integers(n)] = 1
        y[rng.integers(n)] ^= 1 if y.sum() == n else 0
        if y.sum() in (0, n):
            y[0], y[1] = 1, 0
        # coarse scores force plenty of ties
        levels = int(rng.integers(2, 12))
        s = rng.integers(0, levels, n) / levels + (rng.normal(0, 1, n) if rng.random() < 0.3 else 0)
        yield s.tolist(), y.tolist()


def test_exact_agreement_with_brute_force_on_500_instances():
    for s, y in random_instances(500, 2024):
        assert auroc(s, y) == float(oracle_auroc(s, y))
        assert fpr_at_tpr(s, y) == float(oracle_fpr(s, y))
        assert auprc(s, y) == float(oracle_auprc(s, y))


def test_examples():
    s, y = [0.9, 0.8, 0.7, 0.3], [1, 0, 1, 0]
    assert auroc(s, y) == 0.75
    assert auprc(s, y) == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-15)
    assert average_precision(s, y) == auprc(s, y)
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auprc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert fpr_at_tpr([1, 2, 3, 4], [0, 0, 1, 1]) == 0.0
    assert fpr_at_tpr([3, 4, 1, 2], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_degenerate_and_invalid_inputs():
    with pytest.raises(DegenerateInputError):
        auroc([1, 2], [1, 1])
    with pytest.raises(DegenerateInputError):
        fpr_at_tpr([1, 2], [0, 0])
    with pytest.raises(ShapeError):
        auprc([1, 2, 3], [0, 1])
    with pytest.raises(DomainError):
        auroc([1, math.nan], [0, 1])
    with pytest.raises(DomainError):
        auroc([1, 2], [0, 2])


@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=40))
def test_monotone_transform_invariance(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([int(p[1]) for p in pairs])
    if y.sum() in (0, len(y)):
        return
    for f in (lambda v: np.exp(v / 7), lambda v: v**3 + 5 * v, lambda v: np.arctan(v) * 100 - 3):
        t = f(s)
        assert auroc(t, y) == auroc(s, y)
        assert auprc(t, y) == auprc(s, y)
        assert fpr_at_tpr(t, y) == fpr_at_tpr(s, y)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True), st.randoms())
def test_auroc_complement_without_ties(scores, rnd):
    y = [rnd.randint(0, 1) for _ in scores]
    y[0], y[-1] = 0, 1
    assert auroc([-v for v in scores], y) == pytest.approx(1 - auroc(scores, y), abs=1e-15)


# ---------------------------------------------------------------------------
# scores


def test_shannon_entropy_examples():
    assert shannon_entropy_score([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    assert shannon_entropy_score([1.0, 0.0]) <= 1e-11
    assert shannon_entropy_score([0.9, 0.1]) == pytest.approx(0.3250829734, abs=1e-10)
    with pytest.raises(DomainError):
        shannon_entropy_score([0.6, 0.6])
    sf = shannon_entropy_score(np.full((3, 4, 2), 0.5))
    assert isinstance(sf, ScoreField) and sf.shape == (3, 4)


def test_energy_examples():
    assert energy_score([0.0, 0.0]) == pytest.approx(-math.log(2), abs=1e-15)
    assert energy_score([3.0, 1.0]) == pytest.approx(-(3 + math.log1p(math.exp(-2))), abs=1e-15)
    assert energy_score([3.0, 1.0]) == pytest.approx(-3.1269280110, abs=1e-10)
    assert energy_score([1000.0, 1000.0]) == pytest.approx(-1000 - math.log(2), abs=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=5), st.integers(-64, 64))
def test_energy_shift(z, c):
    # integer shifts keep z + c exact, so the identity holds to rounding of
    # the final addition only
    z = np.array(z)
    assert energy_score(z + c) == pytest.approx(energy_score(z) - c, abs=1e-12)


def test_beta_scores():
    f = BetaField(np.ones((2, 3)), np.ones((2, 3)))
    assert np.all(variance_score(f).values == 1 / 12)
    assert np.all(diff_entropy_score(f).values == 0.0)
    g = BetaField(np.array([[5.0, 1.0]]), np.array([[5.0, 1.0]]))
    v, h = variance_score(g).values, diff_entropy_score(g).values
    assert v[0, 0] < v[0, 1] and h[0, 0] < h[0, 1]
    with pytest.raises(DomainError):
        variance_score(np.ones((2, 2)))


def test_score_field_validation():
    with pytest.raises(DomainError):
        ScoreField(np.array([[1.0, np.inf]]))
    with pytest.raises(ShapeError):
        ScoreField(np.ones(3))


def test_pgm_export(tmp_path):
    v = np.arange(64 * 64, dtype=float).reshape(64, 64)
    ScoreField(v).to_pgm(tmp_path / "a.pgm")
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n64 64\n255\n")
    pix = np.frombuffer(data[len(b"P5\n64 64\n255\n") :], dtype=np.uint8)
    assert pix.size == 4096 and pix[0] == 0 and pix[-1] == 255
    ScoreField(np.full((3, 5), 2.5)).to_pgm(tmp_path / "c.pgm")
    data = (tmp_path / "c.pgm").read_bytes()
    assert data.startswith(b"P5\n5 3\n255\n") and set(data[len(b"P5\n5 3\n255\n") :]) == {0}


def test_report_csv_roundtrip(tmp_path):
    s, y = [0.9, 0.8, 0.7, 0.3], [1, 0, 1, 0]
    r = evaluate_scores("variance", s, y)
    assert (r.n_pos, r.n_neg) == (2, 2)
    path = tmp_path / "m.csv"
    write_metrics_csv([r], path)
    write_metrics_csv([evaluate_scores("se", s[::-1], y)], path, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "method,fpr95,auroc,auprc,n_pos,n_neg" and len(lines) == 3
    back = read_metrics_csv(path)
    assert back[0] == r
    with pytest.raises(DomainError):
        MetricsReport("x", 1.5, 0.5, 0.5, 1, 1)


@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(1, 10**6)), min_size=1, max_size=30))
def test_rounded_sum_is_correctly_rounded(pairs):
    from fepn.metrics import _rounded_sum

    assert _rounded_sum(pairs) == float(sum(Fraction(n, d) for n, d in pairs))


def test_rounded_sum_hard_cases():
    from fepn.metrics import _rounded_sum

    assert _rounded_sum([(1, 3)] * 3) == 1.0
    # exact value a hair above a rounding midpoint of 1.0
    tiny = 2**-53
    pairs = [(1, 1), (1, 2**53), (1, 2**120)]
    assert _rounded_sum(pairs) == float(Fraction(1) + Fraction(1, 2**53) + Fraction(1, 2**120))
    assert _rounded_sum(pairs) == 1.0 + 2 * tiny
