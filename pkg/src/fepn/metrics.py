"""Anomaly scores and OoD-detection metrics.

Every score is oriented so that higher means more anomalous.  Metrics treat
label 1 as the positive (OoD) class, i.e. they take the OoD mask, not the
inlier labels.

The rank metrics are computed by one descending sweep over distinct score
values.  Counts stay integral and every metric is the correctly rounded
value of an exact rational, so the results agree bit for bit with
brute-force pair and threshold enumeration.
"""

import csv
import math
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .beta import BetaField, beta_diff_entropy, beta_variance
from .errors import DegenerateInputError, DomainError, ShapeError

__all__ = [
    "ScoreField",
    "MetricsReport",
    "METRICS_HEADER",
    "shannon_entropy_score",
    "energy_score",
    "variance_score",
    "diff_entropy_score",
    "auroc",
    "auprc",
    "average_precision",
    "fpr_at_tpr",
    "evaluate_scores",
    "write_metrics_csv",
    "read_metrics_csv",
]

PROB_EPS = 1e-12
METRICS_HEADER = ("method", "fpr95", "auroc", "auprc", "n_pos", "n_neg")


@dataclass(frozen=True, eq=False)
class ScoreField:
    """H x W map of finite anomaly scores (higher = more anomalous)."""

    values: np.ndarray
    method: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"score field must be 2-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("score field entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path):
        """``row,col,score`` in row-major order."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "score"])
            for (r, c), s in np.ndenumerate(self.values):
                w.writerow([r, c, f"{s:.17g}"])

    def to_pgm(self, path):
        """8-bit binary PGM (P5), min-max normalized; a constant map is all 0."""
        v = self.values
        lo, hi = float(v.min()), float(v.max())
        if hi > lo:
            pix = np.rint((v - lo) / (hi - lo) * 255.0)
        else:
            pix = np.zeros_like(v)
        h, w = v.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pix.astype(np.uint8).tobytes())


def _grid_or_array(values, method, grid):
    if grid:
        return ScoreField(values, method)
    return float(values) if np.ndim(values) == 0 else values


def shannon_entropy_score(prob):
    """-sum_c p_c ln p_c over the last axis.

    A single vector gives a float, an H x W x C stack a ScoreField, any other
    batch an array.  Vectors must be non-negative and sum to 1 within 1e-6.
    """
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim == 0:
        raise ShapeError("expected probability vectors")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise DomainError("each cell must hold a probability vector")
    h = -(p * np.log(np.clip(p, PROB_EPS, 1.0))).sum(axis=-1)
    return _grid_or_array(h, "se", p.ndim == 3)


def energy_score(logits):
    """Negative log-sum-exp of the class logits (last axis)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0:
        raise ShapeError("expected logit vectors")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    m = z.max(axis=-1, keepdims=True)
    lse = np.squeeze(m, -1) + np.log(np.exp(z - m).sum(axis=-1))
    return _grid_or_array(-lse, "energy", z.ndim == 3)


def variance_score(field):
    """Beta variance per cell; the flat Beta(1, 1) scores the maximum 1/12."""
    if not isinstance(field, BetaField):
        raise DomainError("variance_score expects a BetaField")
    return ScoreField(beta_variance(field), "variance")


def diff_entropy_score(field):
    """Beta differential entropy per cell (0 at Beta(1, 1), lower when
    concentrated)."""
    if not isinstance(field, BetaField):
        raise DomainError("diff_entropy_score expects a BetaField")
    return ScoreField(beta_diff_entropy(field), "diff_entropy")


# ---------------------------------------------------------------------------
# rank metrics


def _prepare(scores, labels):
    s = np.asarray(scores.values if isinstance(scores, ScoreField) else scores, dtype=np.float64)
    y = np.asarray(labels)
    s, y = s.reshape(-1), y.reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise DomainError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("need at least one positive and one negative")
    return s, y, n_pos, n_neg


def _sweep(s, y):
    """Per distinct score, highest first: (#positives, #negatives) in the
    tie group, as int64 arrays."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    pos = np.add.reduceat(y_sorted, starts)
    size = np.diff(np.r_[starts, s.size])
    return pos, size - pos


def auroc(scores, labels):
    """P(score of a random positive > score of a random negative), ties
    counted as one half."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    pos, neg = _sweep(s, y)
    # negatives strictly below each tie group
    neg_below = n_neg - np.cumsum(neg)
    twice = int(np.sum(2 * pos * neg_below + pos * neg))
    return twice / (2 * n_pos * n_neg)


def _rounded_sum(pairs):
    """sum(n / d) over integer pairs, correctly rounded to the nearest float.

    Each term is split as hi + lo with hi = fl(n / d) and lo the rounded
    exact remainder; fsum of all of them is then correctly rounded unless
    the true sum sits within the accumulated error of a rounding boundary,
    in which case the sum is redone in exact rationals.
    """
    exact = [Fraction(n, d) for n, d in pairs]
    hi = [n / d for n, d in pairs]
    lo = [float(q - Fraction(h)) for q, h in zip(exact, hi)]
    total = math.fsum(hi + lo)
    resid = math.fsum(hi + lo + [-total])
    err = math.fsum(abs(v) for v in lo) * 2.0**-52 + math.ulp(resid)
    gap = min(math.ulp(total), total - math.nextafter(total, -math.inf)) / 2
    if abs(resid) + err < gap:
        return total
    return float(sum(exact, Fraction(0)))


def auprc(scores, labels):
    """Area under the precision-recall curve by step integration:
    sum over thresholds of (recall gain) x (precision at that threshold),
    one threshold per distinct score, highest first.  The sum is exact up
    to one final rounding."""
    s, y, n_pos, _ = _prepare(scores, labels)
    pos, neg = _sweep(s, y)
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    return _rounded_sum(
        [
            (int(dp) * int(t), n_pos * (int(t) + int(f)))
            for dp, t, f in zip(pos, tp, fp)
            if dp
        ]
    )


average_precision = auprc
"""Average precision; identical to ``auprc`` under step integration."""


def fpr_at_tpr(scores, labels, tpr_target=0.95):
    """False-positive rate at the first threshold (sweeping from the highest
    score down) whose true-positive rate reaches ``tpr_target``.  A threshold
    admits its whole tie group."""
    if not 0.0 < tpr_target <= 1.0:
        raise DomainError("tpr_target must lie in (0, 1]")
    s, y, n_pos, n_neg = _prepare(scores, labels)
    pos, neg = _sweep(s, y)
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    for t, f in zip(tp, fp):
        if int(t) / n_pos >= tpr_target:
            return int(f) / n_neg
    return 1.0  # unreachable: the last group always has TPR 1


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricsReport:
    method: str
    fpr95: float
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int

    def __post_init__(self):
        for name in ("fpr95", "auroc", "auprc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} = {v} outside [0, 1]")
        if self.n_pos < 0 or self.n_neg < 0:
            raise DomainError("counts must be non-negative")

    def as_row(self):
        return [
            self.method,
            f"{self.fpr95:.17g}",
            f"{self.auroc:.17g}",
            f"{self.auprc:.17g}",
            str(self.n_pos),
            str(self.n_neg),
        ]


def evaluate_scores(method, scores, labels):
    """MetricsReport for one score map (or flat score vector) against the
    OoD mask."""
    _, _, n_pos, n_neg = _prepare(scores, labels)
    return MetricsReport(
        method,
        fpr_at_tpr(scores, labels),
        auroc(scores, labels),
        auprc(scores, labels),
        n_pos,
        n_neg,
    )


def write_metrics_csv(reports, path, append=False):
    """Write (or append) report rows; the header is written once."""
    fresh = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "w" if fresh else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(METRICS_HEADER)
        for r in reports:
            w.writerow(r.as_row())


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [
            MetricsReport(
                r["method"],
                float(r["fpr95"]),
                float(r["auroc"]),
                float(r["auprc"]),
                int(r["n_pos"]),
                int(r["n_neg"]),
            )
            for r in csv.DictReader(fh)
        ]
