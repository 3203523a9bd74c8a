"""BUCE objective: cross-entropy, Beta uncertainty cross-entropy, variance
consistency and the outlier-variance term, with tape gradients through the
flows.

Label conventions: ``labels`` (y) is 1 on inlier cells; ``mask`` (m) is
1 on OoD cells, m = 1 - y.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .beta import _diff_entropy, _variance, _variance_gap, evidence_from_log_densities
from .errors import DomainError, ShapeError
from .flow import _log_prob
from .head import _logits

__all__ = [
    "PROB_EPS",
    "OUT_MODES",
    "LossConfig",
    "LossBreakdown",
    "ce_loss",
    "uce_loss",
    "var_consistency_loss",
    "out_loss",
    "buce_total",
    "model_params",
    "buce_terms",
    "evaluate_losses",
    "loss_gradients",
]

PROB_EPS = 1e-12
OUT_MODES = ("hinge", "literal", "off")
TERMS = ("ce", "uce", "var", "out", "total")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_reg: float = 0.01
    uce_scale: float = 1e-7
    out_mode: str = "hinge"
    beta_mode: str = "softplus"
    var_normalize: bool = True

    def __post_init__(self):
        if self.out_mode not in OUT_MODES:
            raise DomainError(f"out_mode must be one of {OUT_MODES}")
        if self.lambda_reg < 0:
            raise DomainError("lambda_reg must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    uce: float
    var: float
    out: float
    total: float

    def as_row(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# tape-level terms


def _ce(logits, classes):
    """Mean cross-entropy of softmax(logits) against one-hot ``classes`` over
    the cells whose class is >= 0."""
    keep = np.flatnonzero(classes >= 0)
    if keep.size == 0:
        return ad.Var(0.0)
    n_cls = logits.shape[1]
    target = np.zeros((keep.size, n_cls))
    target[np.arange(keep.size), classes[keep]] = 1.0
    z = ad.take_rows(logits, keep)
    log_p = z - ad.logsumexp(z, axis=1).reshape(-1, 1)
    return -(log_p * target).sum() / float(keep.size)


def _uce(p, q, y, lambda_reg, scale):
    a, b = 1.0 + p, 1.0 + q
    psi = (ad.digamma(a), ad.digamma(b), ad.digamma(a + b))
    per_cell = y * (psi[2] - psi[0] - psi[1])
    if lambda_reg:
        per_cell = per_cell - lambda_reg * _diff_entropy(a, b, p, q, psi)
    return scale * per_cell.sum()


def _var_bce(p, q, m, normalize):
    if normalize:
        # 12 Var = 1 - gap; both logs are taken from the gap directly
        gap = ad.clip(_variance_gap(p, q), PROB_EPS, 1.0 - PROB_EPS)
        bce = -(m * ad.log1p(-gap) + (1.0 - m) * ad.log(gap))
    else:
        v = ad.clip(_variance(1.0 + p, 1.0 + q), PROB_EPS, 1.0 - PROB_EPS)
        bce = -(m * ad.log(v) + (1.0 - m) * ad.log1p(-v))
    return bce.mean()


def _out(p, q, m, mode):
    if mode == "literal":
        return ad.relu(-(m * _variance(1.0 + p, 1.0 + q))).sum()
    if mode == "hinge":
        # 1/12 - Var = gap / 12
        return (m * _variance_gap(p, q)).sum() / 12.0
    return ad.Var(0.0)


def _field_vars(field):
    # alpha - 1 is exact in floating point for alpha in [1, 2]
    return ad.Var(field.alpha - 1.0), ad.Var(field.beta - 1.0)


def _check_same(field, arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != field.shape:
        raise ShapeError(f"{name} shape {arr.shape} differs from field {field.shape}")
    return arr


# ---------------------------------------------------------------------------
# public numpy API


def ce_loss(pred, target):
    """-sum_c target_c ln pred_c; rows of a batch are averaged."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError("pred and target shapes differ")
    for name, a in (("pred", p), ("target", t)):
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-6):
            raise DomainError(f"{name} must be a probability vector")
    per_row = -(t * np.log(np.clip(p, PROB_EPS, 1.0))).sum(axis=-1)
    return float(np.mean(per_row))


def uce_loss(field, labels, lambda_reg=0.0, scale=1e-7):
    """scale * sum_i [y_i (psi(a+b) - psi(a) - psi(b)) - lambda_reg H(a, b)]."""
    if lambda_reg < 0:
        raise DomainError("lambda_reg must be non-negative")
    y = _check_same(field, labels, "labels")
    a, b = _field_vars(field)
    return float(_uce(a, b, y, lambda_reg, scale).value)


def var_consistency_loss(field, mask, normalize=True):
    """Mean BCE between (12 x) the Beta variance and the OoD mask."""
    m = _check_same(field, mask, "mask")
    a, b = _field_vars(field)
    return float(_var_bce(a, b, m, normalize).value)


def out_loss(field, mask, mode="hinge"):
    """Outlier-variance term.

    ``literal``: sum max(-m Var, 0), which is zero for every valid input.
    ``hinge``: sum m (1/12 - Var), smallest when masked cells reach the
    maximal variance of Beta(1, 1).
    """
    if mode not in ("hinge", "literal"):
        raise DomainError("mode must be 'hinge' or 'literal'")
    m = _check_same(field, mask, "mask")
    a, b = _field_vars(field)
    return float(_out(a, b, m, mode).value)


def buce_total(ce, uce, var, lambda1, lambda2):
    vals = (ce, uce, var, lambda1, lambda2)
    if not all(math.isfinite(v) for v in vals):
        raise DomainError("non-finite loss component")
    return ce + lambda1 * uce + lambda2 * var


# ---------------------------------------------------------------------------
# whole-model objective


def model_params(flows, head, requires_grad=False):
    """Name -> Var over flow (``in.``/``out.``) and head (``res.``) parameters."""
    P = {k: ad.Var(v, requires_grad) for k, v in flows.params().items()}
    P.update({"res." + k: ad.Var(v, requires_grad) for k, v in head.params().items()})
    return P


def _terms(lp_in, lp_out, logits, grid, config):
    y = grid.labels.reshape(-1).astype(np.float64)
    m = 1.0 - y
    p, q = evidence_from_log_densities(lp_in, lp_out, config.beta_mode)
    ce = _ce(logits, grid.classes.reshape(-1))
    uce = _uce(p, q, y, config.lambda_reg, config.uce_scale)
    var = _var_bce(p, q, m, config.var_normalize)
    out = _out(p, q, m, config.out_mode)
    total = ce + config.lambda1 * uce + config.lambda2 * var
    if config.out_mode != "off":
        total = total + out
    return {"ce": ce, "uce": uce, "var": var, "out": out, "total": total}


def _flat_features(flows, head, grid):
    h, w, d = grid.features.shape
    if d != flows.dim or d != head.dim:
        raise ShapeError("grid feature dimension does not match the model")
    return ad.Var(grid.features.reshape(h * w, d))


def buce_terms(flows, head, grid, config, P):
    """All loss terms as tape Vars, keyed ce/uce/var/out/total."""
    feats = _flat_features(flows, head, grid)
    lp_in = _log_prob(flows.flow_in, P, feats, prefix="in.")
    lp_out = _log_prob(flows.flow_out, P, feats, prefix="out.")
    return _terms(lp_in, lp_out, _logits(P, feats), grid, config)


def _breakdown(terms):
    return LossBreakdown(**{k: float(v.value) for k, v in terms.items()})


def evaluate_losses(flows, head, grid, config):
    return _breakdown(buce_terms(flows, head, grid, config, model_params(flows, head)))


def loss_gradients(flows, head, grid, config, term="total"):
    """(LossBreakdown, {param name: gradient of ``term``})."""
    P = model_params(flows, head, requires_grad=True)
    terms = buce_terms(flows, head, grid, config, P)
    return _breakdown(terms), ad.gradients(terms[term], P)
