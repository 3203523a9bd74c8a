"""Affine coupling flow with a Gaussian free-energy head.

A ``FlowModel`` maps a feature vector x to a latent u through a stack of
affine coupling blocks and scores u under a Gaussian whose inverse
covariance is U^T U, U lower triangular with positive diagonal.  The
log-density of x is the Gaussian log-density of u plus the summed
log-Jacobian of the blocks; its negative is the free energy.

Parameters live in plain numpy arrays.  ``FlowModel.params()`` flattens
them into an ordered name -> array dict, which is what the trainer and the
checkpoint writer work with.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .beta import BetaField, beta_from_log_densities
from .errors import DegenerateInputError, DomainError, ShapeError

__all__ = [
    "CouplingBlock",
    "GaussianHead",
    "FlowModel",
    "ClassConditionalFlows",
    "SCALE_BOUND",
    "make_flow",
    "perturb",
    "forward",
    "inverse",
    "gaussian_log_density",
    "log_prob",
    "free_energy",
    "class_posterior",
    "beta_field_from_flows",
]

SCALE_BOUND = 5.0
_LOG_2PI = math.log(2.0 * math.pi)
_NET_KEYS = ("W1", "b1", "W2", "b2")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CouplingBlock:
    """One affine coupling layer.

    ``mask`` is True on the conditioning dimensions, which pass through
    unchanged; the others are scaled by exp(s) and shifted by t, where s and
    t are one-hidden-layer tanh nets of the conditioning dimensions.  Each of
    ``scale_params`` / ``shift_params`` is a tuple (W1, b1, W2, b2).
    """

    mask: np.ndarray
    scale_params: tuple
    shift_params: tuple

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 1 or mask.all() or not mask.any():
            raise DomainError("coupling mask must be 1-d and neither all-true nor all-false")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "scale_params", tuple(map(_frozen, self.scale_params)))
        object.__setattr__(self, "shift_params", tuple(map(_frozen, self.shift_params)))

    @property
    def cond(self):
        return np.flatnonzero(self.mask)

    @property
    def trans(self):
        return np.flatnonzero(~self.mask)


@dataclass(frozen=True, eq=False)
class GaussianHead:
    mu: np.ndarray
    log_diag: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        for name in ("mu", "log_diag", "lower"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        d = self.mu.shape[0]
        if self.log_diag.shape != (d,) or self.lower.shape != (d * (d - 1) // 2,):
            raise ShapeError("Gaussian head parameter shapes disagree")

    @property
    def dim(self):
        return self.mu.shape[0]

    def cholesky(self):
        """The lower-triangular factor U with diag(U) = exp(log_diag)."""
        d = self.dim
        u = np.zeros((d, d))
        u[np.diag_indices(d)] = np.exp(self.log_diag)
        u[np.tril_indices(d, -1)] = self.lower
        return u


@dataclass(frozen=True, eq=False)
class FlowModel:
    blocks: tuple
    head: GaussianHead

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for b in self.blocks:
            if b.mask.shape != (self.head.dim,):
                raise ShapeError("block dimension differs from head dimension")

    @property
    def dim(self):
        return self.head.dim

    @property
    def hidden(self):
        return self.blocks[0].scale_params[0].shape[1] if self.blocks else 0

    def params(self):
        out = {}
        for i, b in enumerate(self.blocks):
            for net, ps in (("scale", b.scale_params), ("shift", b.shift_params)):
                for key, arr in zip(_NET_KEYS, ps):
                    out[f"blocks.{i}.{net}.{key}"] = arr
        out["head.mu"] = self.head.mu
        out["head.log_diag"] = self.head.log_diag
        out["head.lower"] = self.head.lower
        return out

    def with_params(self, params):
        """A new model with the same structure and the given parameter values."""
        blocks = []
        for i, b in enumerate(self.blocks):
            nets = [
                tuple(params[f"blocks.{i}.{net}.{key}"] for key in _NET_KEYS)
                for net in ("scale", "shift")
            ]
            for new, old in zip(nets[0] + nets[1], b.scale_params + b.shift_params):
                if np.shape(new) != old.shape:
                    raise ShapeError("parameter shape mismatch")
            blocks.append(CouplingBlock(b.mask, nets[0], nets[1]))
        head = GaussianHead(params["head.mu"], params["head.log_diag"], params["head.lower"])
        return FlowModel(tuple(blocks), head)


@dataclass(frozen=True, eq=False)
class ClassConditionalFlows:
    """Inlier density P and outlier density Q with the inlier prior."""

    flow_in: FlowModel
    flow_out: FlowModel
    prior_in: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.prior_in < 1.0:
            raise DomainError("prior_in must lie strictly between 0 and 1")
        if self.flow_in.dim != self.flow_out.dim:
            raise ShapeError("inlier and outlier flows differ in dimension")

    @property
    def dim(self):
        return self.flow_in.dim

    def params(self):
        out = {f"in.{k}": v for k, v in self.flow_in.params().items()}
        out.update({f"out.{k}": v for k, v in self.flow_out.params().items()})
        return out

    def with_params(self, params):
        def sub(prefix):
            n = len(prefix)
            return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}

        return ClassConditionalFlows(
            self.flow_in.with_params(sub("in.")),
            self.flow_out.with_params(sub("out.")),
            self.prior_in,
        )


def make_flow(dim, n_blocks=3, hidden=32, seed=0):
    """Identity-initialized flow: output layers of every coupling net are zero
    and the head is the standard normal.  First-layer weights are random
    (seeded) so that the blocks can break symmetry once training starts."""
    if dim < 2:
        raise DomainError("coupling flows need dim >= 2")
    rng = np.random.default_rng(seed)
    blocks = []
    for k in range(n_blocks):
        mask = (np.arange(dim) % 2) == (k % 2)
        n_c, n_t = int(mask.sum()), int((~mask).sum())
        nets = []
        for _ in range(2):
            w1 = rng.normal(0.0, 1.0 / math.sqrt(n_c), size=(n_c, hidden))
            nets.append((w1, np.zeros(hidden), np.zeros((hidden, n_t)), np.zeros(n_t)))
        blocks.append(CouplingBlock(mask, nets[0], nets[1]))
    head = GaussianHead(np.zeros(dim), np.zeros(dim), np.zeros(dim * (dim - 1) // 2))
    return FlowModel(tuple(blocks), head)


def perturb(model, scale=0.1, seed=0):
    """Copy of ``model`` with Gaussian noise of std ``scale`` on every parameter."""
    rng = np.random.default_rng(seed)
    return model.with_params(
        {k: v + rng.normal(0.0, scale, size=v.shape) for k, v in model.params().items()}
    )


# ---------------------------------------------------------------------------
# tape-level forward passes; ``P`` maps parameter names to Vars


def _net(P, prefix, x):
    return ad.tanh_mlp(x, *(P[prefix + k] for k in _NET_KEYS))


def _block_forward(block, P, prefix, x):
    cond, trans = block.cond, block.trans
    xc, xt = ad.take(x, cond), ad.take(x, trans)
    s = SCALE_BOUND * ad.tanh(_net(P, prefix + "scale.", xc) / SCALE_BOUND)
    t = _net(P, prefix + "shift.", xc)
    ut = xt * ad.exp(s) + t
    return ad.assemble((xc, ut), (cond, trans), x.shape[1]), s.sum(axis=1)


def _flow_forward(model, P, x, prefix=""):
    u = x
    log_det = ad.Var(np.zeros(x.shape[0]))
    for i, block in enumerate(model.blocks):
        u, ld = _block_forward(block, P, f"{prefix}blocks.{i}.", u)
        log_det = log_det + ld
    return u, log_det


def _head_log_density(dim, P, u, prefix="", include_const=True):
    diag = np.diag_indices(dim)
    rows, cols = np.tril_indices(dim, -1)
    # U^T built directly so that r = (u - mu) U^T has rows U (u_n - mu)
    ut = ad.scatter(ad.exp(P[prefix + "head.log_diag"]), diag, (dim, dim)) + ad.scatter(
        P[prefix + "head.lower"], (cols, rows), (dim, dim)
    )
    r = (u - P[prefix + "head.mu"]) @ ut
    out = P[prefix + "head.log_diag"].sum() - 0.5 * (r * r).sum(axis=1)
    if include_const:
        out = out - 0.5 * dim * _LOG_2PI
    return out


def _log_prob(model, P, x, prefix="", include_const=True):
    u, log_det = _flow_forward(model, P, x, prefix)
    return _head_log_density(model.dim, P, u, prefix, include_const) + log_det


def const_params(model, prefix=""):
    return {prefix + k: ad.Var(v) for k, v in model.params().items()}


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ShapeError(f"expected vectors of length {dim}, got shape {x.shape}")
    return xb, single


# ---------------------------------------------------------------------------
# public numpy API; accepts one vector (D,) or a batch (N, D)


def forward(model, x):
    """Map x to latent u.  Returns (u, log|det J|)."""
    xb, single = _as_batch(x, model.dim)
    u, ld = _flow_forward(model, const_params(model), ad.Var(xb))
    if single:
        return u.value[0], float(ld.value[0])
    return u.value, ld.value


def _np_net(params, x):
    w1, b1, w2, b2 = params
    return np.tanh(x @ w1 + b1) @ w2 + b2


def inverse(model, u):
    """Map latent u back to feature space."""
    ub, single = _as_batch(u, model.dim)
    x = ub.copy()
    for block in reversed(model.blocks):
        cond, trans = block.cond, block.trans
        xc = x[:, cond]
        s = SCALE_BOUND * np.tanh(_np_net(block.scale_params, xc) / SCALE_BOUND)
        t = _np_net(block.shift_params, xc)
        x[:, trans] = (x[:, trans] - t) * np.exp(-s)
    return x[0] if single else x


def gaussian_log_density(head, u, include_const=True):
    """sum(log diag U) - |U (u - mu)|^2 / 2, minus (D/2) ln 2 pi by default."""
    ub, single = _as_batch(u, head.dim)
    P = {
        "head.mu": ad.Var(head.mu),
        "head.log_diag": ad.Var(head.log_diag),
        "head.lower": ad.Var(head.lower),
    }
    out = _head_log_density(head.dim, P, ad.Var(ub), include_const=include_const).value
    return float(out[0]) if single else out


def log_prob(model, x, include_const=True):
    xb, single = _as_batch(x, model.dim)
    out = _log_prob(model, const_params(model), ad.Var(xb), include_const=include_const).value
    return float(out[0]) if single else out


def free_energy(model, x):
    """Negative log-likelihood; low energy means a familiar input."""
    lp = log_prob(model, x)
    return -lp


def class_posterior(flows, x):
    """Bayes posterior (p_in, p_out) of the inlier/outlier class, in log space."""
    lp_in = np.asarray(log_prob(flows.flow_in, x))
    lp_out = np.asarray(log_prob(flows.flow_out, x))
    return _posterior_from_log(lp_in, lp_out, flows.prior_in)


def _posterior_from_log(lp_in, lp_out, prior_in):
    a = lp_in + math.log(prior_in)
    b = lp_out + math.log1p(-prior_in)
    m = np.maximum(a, b)
    if np.any(~np.isfinite(m)):
        raise DegenerateInputError("both class likelihoods are zero or non-finite")
    ea, eb = np.exp(a - m), np.exp(b - m)
    z = ea + eb
    p_in, p_out = ea / z, eb / z
    if p_in.ndim == 0:
        return float(p_in), float(p_out)
    return p_in, p_out


def _cell_log_probs(flows, P, feats):
    lp_in = _log_prob(flows.flow_in, P, feats, prefix="in.")
    lp_out = _log_prob(flows.flow_out, P, feats, prefix="out.")
    return lp_in, lp_out


def beta_field_from_flows(flows, grid, mode="softplus"):
    """Per-cell Beta posterior from the two flows' log-densities.

    ``mode`` is ``softplus`` (1 + softplus(log p)) or ``contextual``
    (1 + log p clamped at 1 + 1e-6).
    """
    feats = grid.features
    h, w, d = feats.shape
    if d != flows.dim:
        raise ShapeError(f"grid features have dim {d}, flows expect {flows.dim}")
    P = {k: ad.Var(v) for k, v in flows.params().items()}
    lp_in, lp_out = _cell_log_probs(flows, P, ad.Var(feats.reshape(h * w, d)))
    a, b = beta_from_log_densities(lp_in, lp_out, mode)
    return BetaField(a.value.reshape(h, w), b.value.reshape(h, w))
