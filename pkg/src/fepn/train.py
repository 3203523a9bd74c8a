"""Two-phase training: fit the inlier/outlier flows by maximum likelihood,
then fine-tune the residual head (and, by default, the flows) on BUCE.

Every step draws a fresh mixed scene whose seed is a pure function of the
run seed, the phase and the step index, so a run is reproducible bit for bit
and a resumed run sees the same data as an uninterrupted one.
"""

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .data import FrozenBackbone, make_scene
from .errors import DomainError, ShapeError, TrainingError
from .flow import ClassConditionalFlows, _log_prob, make_flow
from .head import make_head
from .losses import OUT_MODES, LossConfig, buce_terms, model_params
from .beta import BETA_MODES

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "scene_seed",
    "scene_stream",
    "init_models",
    "fit_flows",
    "fit_buce",
    "HISTORY_FIELDS",
]

PHASE_FLOWS = "flows"
PHASE_BUCE = "buce"
_PHASE_TAG = {PHASE_FLOWS: 1, PHASE_BUCE: 2, "eval": 3}
HISTORY_FIELDS = ("phase", "step", "updated", "nll_in", "nll_out", "ce", "uce", "var", "out", "total")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_reg: float = 0.01
    uce_scale: float = 1e-7
    out_mode: str = "hinge"
    beta_mode: str = "softplus"
    var_normalize: bool = True
    seed: int = 0
    height: int = 64
    width: int = 64
    outlier_fraction: float = 0.25
    dim: int = 8
    backbone_seed: int = 0
    n_blocks: int = 3
    hidden: int = 32
    head_hidden: int = 16
    prior_in: float = 0.5
    update_flows: bool = True
    joint: bool = False
    early_stop_window: int = 50

    def __post_init__(self):
        checks = [
            (isinstance(self.steps, int) and self.steps >= 0, "steps must be a non-negative integer"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0 < self.beta1 < 1 and 0 < self.beta2 < 1, "adam betas must lie in (0, 1)"),
            (self.eps > 0, "eps must be > 0"),
            (self.lambda_reg >= 0, "lambda_reg must be >= 0"),
            (self.out_mode in OUT_MODES, f"out_mode must be one of {OUT_MODES}"),
            (self.beta_mode in BETA_MODES, f"beta_mode must be one of {BETA_MODES}"),
            (self.height > 0 and self.width > 0, "grid dimensions must be positive"),
            (0.0 <= self.outlier_fraction <= 1.0, "outlier_fraction must lie in [0, 1]"),
            (self.dim >= 2, "dim must be >= 2"),
            (self.n_blocks >= 1 and self.hidden >= 1 and self.head_hidden >= 1, "layer sizes must be positive"),
            (0.0 < self.prior_in < 1.0, "prior_in must lie in (0, 1)"),
            (self.early_stop_window >= 0, "early_stop_window must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DomainError(msg)

    def loss_config(self):
        return LossConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda_reg=self.lambda_reg,
            uce_scale=self.uce_scale,
            out_mode=self.out_mode,
            beta_mode=self.beta_mode,
            var_normalize=self.var_normalize,
        )

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DomainError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamState:
    t: int
    m: dict
    v: dict


def adam_init(params):
    return AdamState(
        0,
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.  Pure: returns (params', state')."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("params, grads and optimizer state name different tensors")
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {np.shape(p)}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# data and initialization


def scene_seed(seed, phase, step):
    """Scene seed for (run seed, phase, step); phases never share scenes."""
    ss = np.random.SeedSequence([int(seed), _PHASE_TAG[phase], int(step)])
    return int(ss.generate_state(1)[0])


def scene_stream(config, phase, backbone=None):
    """step -> embedded training scene for ``phase``."""
    bb = backbone or FrozenBackbone.from_seed(config.backbone_seed, config.dim)

    def draw(step):
        s = scene_seed(config.seed, phase, step)
        return make_scene(config.height, config.width, config.outlier_fraction, s, bb)

    return draw


def init_models(config):
    """Identity-initialized flows and a head with a zero output layer."""
    ss = np.random.SeedSequence([int(config.seed), 0x1A17])
    s_in, s_out, s_head = (int(x) for x in ss.generate_state(3))
    flows = ClassConditionalFlows(
        make_flow(config.dim, config.n_blocks, config.hidden, s_in),
        make_flow(config.dim, config.n_blocks, config.hidden, s_out),
        config.prior_in,
    )
    head = make_head(config.dim, config.head_hidden, 2, s_head)
    return flows, head


def _as_stream(data):
    return data if callable(data) else (lambda step: data)


def _adam_hyper(config):
    return dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def _check_finite(values, step):
    for term, v in values.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite {term} loss at step {step}", step=step, term=term)


class _WindowGuard:
    """Early-stop guard: once the mean loss of a ``window``-step block rises
    above the mean of the block before it, hands back the parameters saved
    at the end of the better block."""

    def __init__(self, window):
        self.window = window
        self.buf = []
        self.prev_mean = None
        self.saved = None

    def update(self, loss, params):
        if not self.window:
            return None
        self.buf.append(loss)
        if len(self.buf) < self.window:
            return None
        mean = math.fsum(self.buf) / len(self.buf)
        self.buf = []
        if self.prev_mean is not None and mean > self.prev_mean:
            return self.saved
        self.prev_mean, self.saved = mean, params
        return None


# ---------------------------------------------------------------------------
# phase 1: density fit


def _nll_terms(flows, P, grid):
    """Mean free energy of the inlier flow on inlier cells and of the outlier
    flow on outlier cells (a missing class contributes 0)."""
    x = grid.features.reshape(-1, grid.dim)
    lab = grid.labels.reshape(-1)
    out = {}
    for prefix, model, rows in (
        ("in.", flows.flow_in, lab == 1),
        ("out.", flows.flow_out, lab == 0),
    ):
        if rows.any():
            lp = _log_prob(model, P, ad.Var(x[rows]), prefix=prefix)
            out[prefix] = -lp.mean()
        else:
            out[prefix] = ad.Var(0.0)
    return out["in."], out["out."]


def fit_flows(config, data=None, flows=None, history=None, start_step=0, state=None):
    """Maximum-likelihood fit of both flows.

    ``data`` is a LabeledGrid used at every step or a callable step -> grid
    (default: fresh mixed scenes).  Each step takes one Adam step on
    mean NLL_in(inlier cells) + mean NLL_out(outlier cells).

    If the early-stop guard fires, the parameters roll back to the end of
    the last improving window and stay frozen; the remaining steps still
    log the loss of the frozen model (``updated`` = 0) so that the history
    always has one row per step.
    """
    flows = flows if flows is not None else init_models(config)[0]
    return _fit_flows(config, data, flows, history, start_step, state)[0]


def _fit_flows(config, data, flows, history, start_step=0, state=None):
    draw = _as_stream(data if data is not None else scene_stream(config, PHASE_FLOWS))
    params = dict(flows.params())
    state = state or adam_init(params)
    guard = _WindowGuard(config.early_stop_window)
    hyper = _adam_hyper(config)
    frozen = False
    for step in range(start_step, config.steps):
        grid = draw(step)
        if grid.dim != flows.dim:
            raise ShapeError(f"scene dim {grid.dim} differs from flow dim {flows.dim}")
        P = {k: ad.Var(v, not frozen) for k, v in params.items()}
        nll_in, nll_out = _nll_terms(flows, P, grid)
        total = nll_in + nll_out
        row = {"nll_in": float(nll_in.value), "nll_out": float(nll_out.value), "total": float(total.value)}
        _check_finite(row, step)
        if not frozen:
            grads = ad.gradients(total, P)
            params, state = adam_step(params, grads, state, **hyper)
        if history is not None:
            history.append({"phase": PHASE_FLOWS, "step": step, "updated": int(not frozen), **row})
        if not frozen:
            best = guard.update(row["total"], params)
            if best is not None:
                params, frozen = best, True
    return flows.with_params(params), state


# ---------------------------------------------------------------------------
# phase 2: BUCE fine-tuning


def fit_buce(config, flows, head, data=None, history=None, start_step=0, state=None):
    """Adam on the BUCE total.  Returns (flows', head', history).

    The head always trains; the flows train too unless ``update_flows`` is
    off.  Gradients reach the flows through the Beta parameters, so with
    lambda1 = lambda2 = 0 and the outlier term off or literal they are
    exactly zero and the flows stay put.
    """
    history = [] if history is None else history
    flows, head, _ = _fit_buce(config, flows, head, data, history, start_step, state)
    return flows, head, history


def _fit_buce(config, flows, head, data, history, start_step=0, state=None):
    draw = _as_stream(data if data is not None else scene_stream(config, PHASE_BUCE))
    lcfg = config.loss_config()
    every = {k: v.value for k, v in model_params(flows, head).items()}
    train_keys = [k for k in every if config.update_flows or k.startswith("res.")]
    params = {k: every[k] for k in train_keys}
    state = state or adam_init(params)
    hyper = _adam_hyper(config)
    for step in range(start_step, config.steps):
        grid = draw(step)
        P = {k: ad.Var(v, k in params) for k, v in every.items()}
        terms = buce_terms(flows, head, grid, lcfg, P)
        row = {k: float(v.value) for k, v in terms.items()}
        _check_finite(row, step)
        grads = ad.gradients(terms["total"], {k: P[k] for k in train_keys})
        params, state = adam_step(params, grads, state, **hyper)
        every.update(params)
        if history is not None:
            history.append({"phase": PHASE_BUCE, "step": step, "updated": 1, **row})
    flows, head = _split(flows, head, every)
    return flows, head, state


def _split(flows, head, every):
    fp = {k: v for k, v in every.items() if not k.startswith("res.")}
    hp = {k[4:]: v for k, v in every.items() if k.startswith("res.")}
    return flows.with_params(fp), head.with_params(hp)
