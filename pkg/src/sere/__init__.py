"""Hierarchy of shared conditioned bijectors between the generative and
inference passes, conditional masked autoregressive flows, warm-up training
schedules, and a linear-Gaussian oracle that verifies the posterior
factorization numerically."""

from . import kernels
from .bijectors import AffineDiagRank1, BatchNormBijector, Chain, ConditionedBijector
from .distributions import (
    BernoulliLogits,
    GaussianDiag,
    GaussianDiagRank1,
    kl_diag_diag,
    raw_from_scale,
    scale_from_raw,
)
from .hierarchy import (
    ElboParts,
    EvalReport,
    HierarchySpec,
    LayerState,
    SereModel,
    install_linear_model,
    linear_hierarchy_spec,
)
from .made import ConditionalMade, MadeDegrees, MafStack, ResidualParamHead, build_degrees, build_masks
from .oracle import (
    GaussianJoint,
    LinearGaussianModel,
    build_joint,
    exact_log_marginal,
    grad_check,
    verify_factorization,
)
from .tensor import ParameterStore, ShapeError, Tape, Tensor, new_rng
from .training import (
    Adam,
    LrSchedule,
    NumericError,
    TrainConfig,
    WarmupSchedule,
    dynamic_binarize,
    free_bits_objective,
    train,
    warmup_beta,
)

__version__ = "0.1.0"
