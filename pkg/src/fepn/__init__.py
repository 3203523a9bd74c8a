"""Free-energy posterior network: coupling-flow densities feeding a per-cell
Beta posterior, trained with the BUCE objective, plus OoD metrics and a
synthetic two-moons/ring benchmark."""

from .beta import (
    BetaField,
    BetaParams,
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
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FrozenBackbone, LabeledGrid, embed, make_inliers, make_outliers, make_scene, mix_scene
from .errors import (
    CheckpointError,
    DegenerateInputError,
    DomainError,
    FEPNError,
    ShapeError,
    TrainingError,
)
from .flow import (
    ClassConditionalFlows,
    CouplingBlock,
    FlowModel,
    GaussianHead,
    beta_field_from_flows,
    class_posterior,
    forward,
    free_energy,
    gaussian_log_density,
    inverse,
    log_prob,
    make_flow,
)
from .gradcheck import grad_check
from .head import ResidualHead, make_head
from .losses import (
    LossBreakdown,
    LossConfig,
    buce_total,
    ce_loss,
    out_loss,
    uce_loss,
    var_consistency_loss,
)
from .metrics import (
    MetricsReport,
    ScoreField,
    auprc,
    auroc,
    average_precision,
    diff_entropy_score,
    energy_score,
    fpr_at_tpr,
    shannon_entropy_score,
    variance_score,
)
from .pipeline import RunConfig
from .special import digamma, log_beta, log_gamma, softplus, trigamma
from .train import TrainConfig, adam_step, fit_buce, fit_flows

__version__ = "0.1.0"
