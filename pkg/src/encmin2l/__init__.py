"""Feature-space diffusion OOD detection with a calibrated two-level min-gate.

Per-encoder score-based density models (VP-SDE, probability-flow-ODE
log-likelihoods) feed an ECDF p-value pipeline: within-encoder fork minimum,
re-CDF correction, cross-encoder minimum, and an alpha-quantile threshold.
"""

from .calibration import (
    CalibrationBundle,
    DetectionReport,
    EcdfTable,
    adjust_threshold,
    calibrate,
    detect,
    ecdf_eval,
    level1_min,
    min_gate_power_check,
)
from .diagnostics import DiagnosticProfile, delta_mu, eta_squared, screen_encoders, spearman_rho
from .errors import (
    Error,
    FormatError,
    StiffIntegrationError,
    TrainingDivergedError,
    ValidationError,
)
from .features import (
    FeatureSet,
    ForkStats,
    Meta,
    SyntheticScenario,
    apply_fork,
    fit_fork_stats,
    gen_synthetic,
    get_scenario,
    read_fvec,
    write_fvec,
)
from .likelihood import (
    AnalyticGaussianScore,
    LikelihoodConfig,
    divergence,
    log_likelihood,
    log_likelihood_batch,
    pf_drift,
)
from .metrics import ScoredPair, auroc, fpr_at_tpr, ks_uniform
from .scorenet import (
    ScoreModel,
    ScoreNetParams,
    backward_params,
    forward,
    init_params,
    jvp_input,
    load_model,
    param_count,
    save_model,
)
from .sde import VpSchedule, int_beta, marginal
from .train import NetConfig, TrainConfig, dsm_loss, train

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
