"""End-to-end run: configuration, training schedule, held-out evaluation and
score maps.  The CLI is a thin shell around these functions."""

import csv
from dataclasses import dataclass, fields

import numpy as np

from .data import FrozenBackbone, make_scene
from .errors import DomainError, ShapeError
from .flow import beta_field_from_flows
from .metrics import (
    diff_entropy_score,
    energy_score,
    evaluate_scores,
    shannon_entropy_score,
    variance_score,
)
from .train import (
    HISTORY_FIELDS,
    PHASE_BUCE,
    TrainConfig,
    _fit_buce,
    _fit_flows,
    init_models,
    scene_seed,
)

__all__ = [
    "RunConfig",
    "METHODS",
    "TrainResult",
    "train",
    "eval_scenes",
    "score_maps",
    "evaluate",
    "write_history_csv",
    "masked_mean_variance",
    "history_rows",
]

METHODS = ("se", "energy", "variance", "diff_entropy")
EXPORT_FORMATS = ("csv", "pgm")


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    """TrainConfig plus evaluation and output settings."""

    eval_scenes: int = 4
    out_dir: str = "fepn-out"
    formats: tuple = EXPORT_FORMATS

    def __post_init__(self):
        super().__post_init__()
        if self.eval_scenes < 1:
            raise DomainError("eval_scenes must be >= 1")
        fmts = tuple(self.formats)
        if not set(fmts) <= set(EXPORT_FORMATS):
            raise DomainError(f"formats must be drawn from {EXPORT_FORMATS}")
        object.__setattr__(self, "formats", fmts)

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})


@dataclass
class TrainResult:
    flows_fit: object  # after the density fit, before BUCE
    flows: object
    head: object
    history: list


def train(config, flows=None, head=None):
    """Density fit followed by BUCE fine-tuning.

    With ``joint`` set the density fit is skipped and BUCE starts from the
    initial flows.  ``flows``/``head`` override the identity initialization
    (used to resume from a checkpoint).
    """
    tc = config.train_config() if isinstance(config, RunConfig) else config
    f0, h0 = init_models(tc)
    flows = f0 if flows is None else flows
    head = h0 if head is None else head
    if flows.dim != tc.dim or head.dim != tc.dim:
        raise ShapeError(f"model dim {flows.dim} differs from config dim {tc.dim}")
    history = []
    if not tc.joint:
        flows, _ = _fit_flows(tc, None, flows, history)
    fitted = flows
    flows, head, _ = _fit_buce(tc, flows, head, None, history)
    return TrainResult(fitted, flows, head, history)


def write_history_csv(history, path):
    """One row per optimizer step of either phase; terms a phase does not
    compute are left empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            out = []
            for k in HISTORY_FIELDS:
                v = row.get(k, "")
                out.append(f"{v:.17g}" if isinstance(v, float) else v)
            w.writerow(out)


def eval_scenes(config, backbone=None):
    """Held-out scenes; their seeds never coincide with training scenes."""
    bb = backbone or FrozenBackbone.from_seed(config.backbone_seed, config.dim)
    return [
        make_scene(
            config.height,
            config.width,
            config.outlier_fraction,
            scene_seed(config.seed, "eval", k),
            bb,
        )
        for k in range(config.eval_scenes)
    ]


def score_maps(flows, head, grid, beta_mode="softplus"):
    """ScoreField per method for one scene, plus the BetaField behind the
    evidential maps."""
    if grid.dim != flows.dim:
        raise ShapeError(f"scene dim {grid.dim} differs from model dim {flows.dim}")
    field = beta_field_from_flows(flows, grid, beta_mode)
    return {
        "se": shannon_entropy_score(head.probs(grid.features)),
        "energy": energy_score(head.logits(grid.features)),
        "variance": variance_score(field),
        "diff_entropy": diff_entropy_score(field),
    }, field


def evaluate(flows, head, grids, beta_mode="softplus"):
    """MetricsReport per method over the pooled cells of ``grids``."""
    scores = {m: [] for m in METHODS}
    masks = []
    for g in grids:
        maps, _ = score_maps(flows, head, g, beta_mode)
        for m in METHODS:
            scores[m].append(maps[m].values.reshape(-1))
        masks.append(g.mask.reshape(-1))
    mask = np.concatenate(masks)
    return [evaluate_scores(m, np.concatenate(scores[m]), mask) for m in METHODS]


def masked_mean_variance(flows, grids, beta_mode="softplus"):
    """Mean Beta variance over the OoD cells of ``grids``."""
    vals = []
    for g in grids:
        f = beta_field_from_flows(flows, g, beta_mode)
        v = variance_score(f).values
        vals.append(v[g.mask == 1])
    return float(np.mean(np.concatenate(vals)))


def history_rows(history, phase=PHASE_BUCE):
    return [r for r in history if r["phase"] == phase]

