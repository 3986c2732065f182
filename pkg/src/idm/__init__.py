"""Implicit delta method for uncertainty in evaluations of maximum-likelihood fits."""
from .errors import (
    CapabilityError,
    DegenerateFitError,
    FitFailureError,
    IDMError,
    InvalidArgumentError,
    NumericFailureError,
    ReplicateFailureError,
    SingularFisherError,
    WrongFamilyError,
)
from .estimators import (
    CovMatrix,
    EvalFn,
    Interval,
    VarEstimate,
    auto_lambda,
    combined_variance,
    confidence_interval,
    default_lambda,
    eval_set_variance,
    fdidm,
    fdidm_sse,
    fisher_inverse_idm,
    fit_mle,
    fit_regularized,
    mv_fdidm,
    norm_ppf,
    psd_project,
    sg_fdidm,
)
from .models import (
    Dataset,
    Family,
    LikelihoodModel,
    PredictorSpec,
    grad_log_likelihood,
    hessian_log_likelihood,
    linear_model,
    log_likelihood,
    mlp_model,
    predict,
    sigma2_hat,
)
from .optim import FitResult, OptimizerConfig, maximize, maximize_stochastic, nelder_mead

__version__ = "0.1.0"
