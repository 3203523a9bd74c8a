"""Finite-difference verification of the tape gradients.

The reference loss below is a straight numpy transcription of the model and
the BUCE terms.  It shares no code with the tape (only the special
functions, which are checked against mpmath on their own) and runs in
``np.longdouble`` by default: with h = 1e-5, float64 round-off alone puts
about 1e-11 of noise on each central difference, which swamps the 1e-8
relative floor for small gradients.
"""

import math

import numpy as np

from . import special
from .flow import SCALE_BOUND
from .losses import PROB_EPS, TERMS, loss_gradients, model_params

__all__ = ["reference_losses", "grad_check"]

_LOG_2PI = math.log(2.0 * math.pi)


# Every reference function below also accepts parameters with one extra
# leading "bump" axis of size B; outputs then carry that axis too.


def _param(P, name, base_ndim):
    """Parameter ``name``; batched vectors get a unit cell axis so they
    broadcast against (B, N, k) activations."""
    v = P[name]
    if v.ndim > base_ndim and base_ndim == 1:
        return v[:, None, :]
    return v


def _mlp(P, prefix, x):
    h = np.tanh(x @ P[prefix + "W1"] + _param(P, prefix + "b1", 1))
    return h @ P[prefix + "W2"] + _param(P, prefix + "b2", 1)


def _batch_of(P, prefix):
    for k, v in P.items():
        if k.startswith(prefix) and v.ndim > (2 if k.endswith(("W1", "W2")) else 1):
            return v.shape[:1]
    return ()


def _ref_states(model, P, prefix, x):
    """Per-block (input u, log_det so far, scale out, shift out), unbatched."""
    states, u, log_det = [], x, np.zeros(x.shape[0], dtype=x.dtype)
    for i, block in enumerate(model.blocks):
        pre = f"{prefix}blocks.{i}."
        xc = u[:, block.cond]
        s = SCALE_BOUND * np.tanh(_mlp(P, pre + "scale.", xc) / SCALE_BOUND)
        t = _mlp(P, pre + "shift.", xc)
        states.append((u, log_det, s, t))
        u = u.copy()
        u[:, block.trans] = u[:, block.trans] * np.exp(s) + t
        log_det = log_det + s.sum(axis=1)
    states.append((u, log_det, None, None))
    return states


def _ref_log_prob(model, P, prefix, x, states=None, changed=None):
    """Log density of every row of ``x``.

    With cached ``states`` and the name of the one parameter that differs
    from them, blocks before the changed one are reused, as is the untouched
    sibling net of the changed block.
    """
    d = model.dim
    batch = _batch_of(P, prefix)
    first, keep = 0, None
    if states is not None and changed is not None:
        parts = changed[len(prefix) :].split(".")
        first = int(parts[1]) if parts[0] == "blocks" else len(model.blocks)
        keep = parts[2] if parts[0] == "blocks" else None
    elif states is not None:
        first = len(model.blocks)
    u0, log_det, _, _ = states[first] if states is not None else (x, 0, None, None)
    u = np.broadcast_to(u0, batch + u0.shape).copy()
    for i in range(first, len(model.blocks)):
        block = model.blocks[i]
        pre = f"{prefix}blocks.{i}."
        xc = u[..., block.cond]
        if keep == "shift" and i == first:
            s = states[i][2]
        else:
            s = SCALE_BOUND * np.tanh(_mlp(P, pre + "scale.", xc) / SCALE_BOUND)
        if keep == "scale" and i == first:
            t = states[i][3]
        else:
            t = _mlp(P, pre + "shift.", xc)
        u[..., block.trans] = u[..., block.trans] * np.exp(s) + t
        log_det = log_det + s.sum(axis=-1)
    log_diag = P[prefix + "head.log_diag"]
    U = np.zeros(batch + (d, d), dtype=x.dtype)
    di, dj = np.diag_indices(d)
    li, lj = np.tril_indices(d, -1)
    U[..., di, dj] = np.exp(log_diag)
    U[..., li, lj] = P[prefix + "head.lower"]
    r = (u - _param(P, prefix + "head.mu", 1)) @ np.swapaxes(U, -1, -2)
    return (
        log_diag.sum(axis=-1, keepdims=True)
        - 0.5 * (r * r).sum(axis=-1)
        - 0.5 * d * _LOG_2PI
        + log_det
    )


def _ref_terms(lp_in, lp_out, logits, grid, config):
    y = grid.labels.reshape(-1).astype(lp_in.dtype)
    m = 1 - y
    if config.beta_mode == "softplus":
        p, q = special._softplus_unchecked(lp_in), special._softplus_unchecked(lp_out)
    else:
        p = np.maximum(lp_in, 1e-6)
        q = np.maximum(lp_out, 1e-6)
    a, b = 1 + p, 1 + q
    s = a + b
    psi_a, psi_b, psi_s = (special._digamma_unchecked(v) for v in (a, b, s))
    H = (
        special._log_gamma_unchecked(a)
        + special._log_gamma_unchecked(b)
        - special._log_gamma_unchecked(s)
        - p * psi_a
        - q * psi_b
        + (p + q) * psi_s
    )
    uce = config.uce_scale * np.sum(y * (psi_s - psi_a - psi_b) - config.lambda_reg * H, axis=-1)

    var = a * b / (s * s * (s + 1))
    r = p + q
    gap = (4 * r + 7 * p * p + 2 * p * q + 7 * q * q + r**3) / (s * s * (s + 1))
    if config.var_normalize:
        g = np.clip(gap, PROB_EPS, 1 - PROB_EPS)
        bce = -(m * np.log1p(-g) + (1 - m) * np.log(g))
    else:
        v = np.clip(var, PROB_EPS, 1 - PROB_EPS)
        bce = -(m * np.log(v) + (1 - m) * np.log1p(-v))
    var_term = bce.mean(axis=-1)

    if config.out_mode == "hinge":
        out = np.sum(m * gap, axis=-1) / 12
    elif config.out_mode == "literal":
        out = np.sum(np.maximum(-m * var, 0), axis=-1)
    else:
        out = lp_in.dtype.type(0)

    classes = grid.classes.reshape(-1)
    keep = classes >= 0
    if keep.any():
        z = logits[..., keep, :]
        zmax = z.max(axis=-1, keepdims=True)
        lse = zmax[..., 0] + np.log(np.exp(z - zmax).sum(axis=-1))
        ce = np.mean(lse - z[..., np.arange(z.shape[-2]), classes[keep]], axis=-1)
    else:
        ce = lp_in.dtype.type(0)

    total = ce + config.lambda1 * uce + config.lambda2 * var_term
    if config.out_mode != "off":
        total = total + out
    return {"ce": ce, "uce": uce, "var": var_term, "out": out, "total": total}


def reference_losses(flows, head, grid, config, dtype=np.longdouble, params=None):
    """All loss terms from the plain-numpy reference, in ``dtype``."""
    P = params or _cast(flows, head, dtype)
    x = grid.features.reshape(-1, grid.dim).astype(dtype)
    lp_in = _ref_log_prob(flows.flow_in, P, "in.", x)
    lp_out = _ref_log_prob(flows.flow_out, P, "out.", x)
    logits = _mlp(P, "res.", x)
    return _ref_terms(lp_in, lp_out, logits, grid, config)


def _cast(flows, head, dtype):
    return {k: v.value.astype(dtype) for k, v in model_params(flows, head).items()}


def grad_check(flows, head, grid, config, terms=TERMS, h=1e-5, dtype=np.longdouble, chunk=256):
    """Max relative error between tape and central-difference gradients.

    For every parameter entry, err = |g - fd| / max(|g|, |fd|, 1e-8), with g
    from the tape (float64) and fd from the reference loss.  The +h and -h
    bumps of all entries of one parameter array are evaluated together along
    a leading batch axis, and only the sub-model that owns the array is
    re-evaluated from the first block it touches.  Returns ``{term: max error}``.
    """
    analytic = {t: loss_gradients(flows, head, grid, config, t)[1] for t in terms}
    P = _cast(flows, head, dtype)
    x = grid.features.reshape(-1, grid.dim).astype(dtype)
    models = {"in.": flows.flow_in, "out.": flows.flow_out}
    states = {k: _ref_states(m, P, k, x) for k, m in models.items()}
    base = {k: _ref_log_prob(m, P, k, x) for k, m in models.items()}
    base["res."] = _mlp(P, "res.", x)
    step = dtype(h)

    worst = dict.fromkeys(terms, 0.0)
    for name, value in P.items():
        owner = name[: name.index(".") + 1]
        entries = list(np.ndindex(value.shape))
        for lo in range(0, len(entries), chunk):
            block = entries[lo : lo + chunk]
            n = len(block)
            bumped = np.broadcast_to(value, (2 * n,) + value.shape).copy()
            for j, idx in enumerate(block):
                bumped[(j,) + idx] += step
                bumped[(n + j,) + idx] -= step
            Q = dict(P)
            Q[name] = bumped
            cur = dict(base)
            if owner == "res.":
                cur[owner] = _mlp(Q, "res.", x)
            else:
                cur[owner] = _ref_log_prob(models[owner], Q, owner, x, states[owner], name)
            vals = _ref_terms(cur["in."], cur["out."], cur["res."], grid, config)
            for term in terms:
                v = np.broadcast_to(vals[term], (2 * n,))
                fd = ((v[:n] - v[n:]) / (2 * step)).astype(np.float64)
                g = np.array([analytic[term][name][idx] for idx in block])
                err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
                worst[term] = max(worst[term], float(err.max()))
    return worst
