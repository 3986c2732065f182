"""Reference variance estimates: explicit delta method, bootstrap, simulation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import models as M
from .errors import IDMError, InvalidArgumentError, ReplicateFailureError, SingularFisherError
from .estimators import CovMatrix, EvalFn, fit_objective, psd_project
from .models import Dataset, LikelihoodModel
from .optim import FitResult, OptimizerConfig
from .rng import SplitMix64, derive_seed
from .synthdata import DGPSpec, generate

log = logging.getLogger(__name__)

__all__ = [
    "BootstrapConfig",
    "DGPOracleConfig",
    "bootstrap_variance",
    "delta_method_variance",
    "psd_project",
    "true_sampling_variance",
]


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 50
    seed: int = 0
    resample_mode: str = "iid_rows"
    warm_start: bool = True
    max_failure_rate: float = 0.10

    def __post_init__(self):
        if self.B < 2:
            raise InvalidArgumentError("bootstrap needs B >= 2")
        if self.resample_mode != "iid_rows":
            raise InvalidArgumentError("only iid_rows resampling is supported")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DGPOracleConfig:
    R: int = 50
    seed: int = 0
    max_failure_rate: float = 0.10

    def __post_init__(self):
        if self.R < 2:
            raise InvalidArgumentError("simulation needs R >= 2")

    def to_dict(self):
        return asdict(self)


def delta_method_variance(model: LikelihoodModel, data: Dataset, theta_hat, psi: EvalFn,
                          max_params: int = M.HESSIAN_MAX_PARAMS, cutoff: float = 1e-10,
                          mass_tol: float = 1e-6) -> CovMatrix:
    """``J (-H)^+ J'`` with ``H`` the log-likelihood Hessian at ``theta_hat``.

    Equivalent to ``(1/n) J I^{-1} J'`` with ``I = -H/n``. The inverse is a
    pseudo-inverse over eigenvalues above ``cutoff * max_eigenvalue``; an
    evaluation gradient with relative mass above ``mass_tol`` in the dropped
    subspace raises :class:`SingularFisherError`.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    h = M.hessian_log_likelihood(model, theta_hat, data, max_params=max_params)
    scale = M.likelihood_scale(model, theta_hat, data)
    info = -h / scale  # observed information on the log-likelihood scale
    w, v = np.linalg.eigh(info)
    wmax = float(w.max()) if w.size else 0.0
    if wmax <= 0:
        raise SingularFisherError("observed information has no positive eigenvalue", float(w.min()))
    keep = w > cutoff * wmax
    jac = psi.jacobian(theta_hat)
    if not np.all(keep):
        dropped = jac @ v[:, ~keep]
        mass = np.linalg.norm(dropped, axis=1) / np.maximum(np.linalg.norm(jac, axis=1), 1e-300)
        if np.any(mass > mass_tol):
            raise SingularFisherError(
                f"evaluation gradient has mass {float(mass.max()):.3g} in the singular subspace "
                f"(min eigenvalue {float(w.min()):.3g})",
                float(w.min()),
            )
    proj = jac @ v[:, keep]
    cov = (proj / w[keep]) @ proj.T
    cov = 0.5 * (cov + cov.T)
    meta = {"method": "delta", "min_eigenvalue": float(w.min()), "rank": int(keep.sum())}
    return CovMatrix(cov, True, False, cov.copy(), 0, meta)


def _sample_cov(values: np.ndarray) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    centered = vals - vals.mean(axis=0)
    return centered.T @ centered / (vals.shape[0] - 1)


def _collect(n_rep, make_fit, psi, max_failure_rate, label):
    vals, failures = [], 0
    for r in range(n_rep):
        try:
            fit = make_fit(r)
        except IDMError as exc:
            failures += 1
            log.warning("%s replicate %d failed: %s", label, r, exc)
            continue
        vals.append(psi(fit.theta))
    if failures > max_failure_rate * n_rep or len(vals) < 2:
        raise ReplicateFailureError(f"{failures}/{n_rep} {label} replicates failed", failures, n_rep)
    return np.array(vals), failures


def bootstrap_variance(model: LikelihoodModel, data: Dataset, psi: EvalFn, fit_config: OptimizerConfig,
                       boot_config: BootstrapConfig, theta_hat=None) -> CovMatrix:
    """Sample covariance (denominator B - 1) of ``psi`` over B row-resampled refits.

    Refits warm-start from ``theta_hat`` (fitted here if absent) unless
    ``boot_config.warm_start`` is off, in which case each replicate starts from
    the model's initialiser.
    """
    if theta_hat is None:
        theta_hat = fit_objective(model, data, fit_config,
                                  model.init_params(data.n_features, fit_config.seed)).theta
    theta_hat = np.asarray(theta_hat, dtype=float)
    n = data.n

    def make_fit(b):
        rng = SplitMix64(derive_seed(boot_config.seed, b))
        sample = data.subset(rng.integers(n, n))
        init = theta_hat if boot_config.warm_start else model.init_params(data.n_features, fit_config.seed)
        return fit_objective(model, sample, fit_config, init)

    vals, failures = _collect(boot_config.B, make_fit, psi, boot_config.max_failure_rate, "bootstrap")
    cov = _sample_cov(vals)
    meta = {"method": "bootstrap", "failures": failures,
            "start_mode": "warm" if boot_config.warm_start else "cold"}
    return CovMatrix(cov, True, False, cov.copy(), boot_config.B, meta)


def true_sampling_variance(dgp: DGPSpec, n: int, model: LikelihoodModel, psi: EvalFn,
                           fit_config: OptimizerConfig, oracle_config: DGPOracleConfig,
                           init=None) -> CovMatrix:
    """Sample covariance of ``psi`` over R fits on fresh datasets from the DGP.

    Replicate ``r`` uses dataset seed ``derive_seed(oracle_config.seed, r)``.
    Fits start from ``init`` when given, else from the model's initialiser.
    """

    def make_fit(r):
        spec = dgp.with_(n=n, seed=derive_seed(oracle_config.seed, r))
        sample = generate(spec)
        start = init if init is not None else model.init_params(sample.n_features, fit_config.seed)
        return fit_objective(model, sample, fit_config, start)

    vals, failures = _collect(oracle_config.R, make_fit, psi, oracle_config.max_failure_rate, "simulation")
    cov = _sample_cov(vals)
    meta = {"method": "simulation", "failures": failures, "mean": vals.mean(axis=0).tolist()}
    return CovMatrix(cov, True, False, cov.copy(), oracle_config.R, meta)


def fit_result_for(model: LikelihoodModel, data: Dataset, theta) -> FitResult:
    """Wrap a known parameter (e.g. a closed-form MLE) as a converged fit."""
    theta = np.asarray(theta, dtype=float)
    return FitResult(theta, M.log_likelihood(model, theta, data), 0, True,
                     float(np.linalg.norm(M.grad_log_likelihood(model, theta, data))))
