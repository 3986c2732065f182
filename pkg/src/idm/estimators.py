"""Implicit delta method: variance of an evaluation from regularised refits.

The variance of ``psi(theta_hat)`` is read off how far ``psi`` moves when the
maximum-likelihood objective is tilted by ``+lam * psi``:

    V = (psi(theta_hat(lam)) - psi(theta_hat)) / lam

Everything here works on the log-likelihood scale. For the ``gaussian_sse``
family (objective ``-SSE/2``) the tilt is multiplied by the residual variance
at the fit, which is the same as tilting the Gaussian log-likelihood by
``lam * psi``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models as M
from .errors import (
    CapabilityError,
    DegenerateFitError,
    FitFailureError,
    IDMError,
    InvalidArgumentError,
    WrongFamilyError,
)
from .models import Dataset, LikelihoodModel
from .optim import FitResult, OptimizerConfig, StochasticAscent, maximize, maximize_stochastic, nelder_mead
from .rng import SplitMix64

FISHER_MAX_PARAMS = 50


# --------------------------------------------------------------------------- #
# Value types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class EvalFn:
    """An evaluation ``psi: theta -> R^K``.

    ``fn`` returns a length-K array. ``gradient`` (optional) returns the
    ``(K, d)`` Jacobian; without it regularised fits fall back to Nelder-Mead.
    ``unit_form`` (optional, K=1) returns the per-unit values ``h(w_j; theta)``
    on ``eval_data`` whose mean is ``psi``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    k: int = 1
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    unit_form: Callable[[np.ndarray], np.ndarray] | None = None
    eval_data: Dataset | None = None
    name: str = "psi"

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("evaluation arity must be >= 1")
        if self.unit_form is not None and self.k != 1:
            raise InvalidArgumentError("unit_form needs a scalar evaluation")

    def __call__(self, theta) -> np.ndarray:
        return np.asarray(self.fn(theta), dtype=float).reshape(self.k)

    def scalar(self, theta) -> float:
        return float(self(theta)[0])

    @property
    def differentiable(self) -> bool:
        return self.gradient is not None

    @property
    def m(self) -> int:
        return 0 if self.eval_data is None else self.eval_data.n

    def jacobian(self, theta) -> np.ndarray:
        if self.gradient is None:
            raise InvalidArgumentError(f"evaluation {self.name!r} has no gradient")
        return np.atleast_2d(np.asarray(self.gradient(theta), dtype=float))

    def component(self, i: int) -> "EvalFn":
        if self.k == 1:
            return self
        if not 0 <= i < self.k:
            raise InvalidArgumentError(f"component {i} out of range for K={self.k}")
        grad = None
        if self.gradient is not None:
            def grad(theta, _g=self.gradient, _i=i):
                return np.atleast_2d(_g(theta))[_i:_i + 1]
        return EvalFn(lambda theta, _f=self.fn, _i=i: np.asarray(_f(theta)).reshape(-1)[_i:_i + 1],
                      1, grad, None, None, f"{self.name}[{i}]")


@dataclass
class VarEstimate:
    """Finite-difference variance of ``psi(theta_hat)``.

    ``value == (psi_reg - psi_base) / lambda_used`` for the forward difference;
    with ``psi_minus`` set (central difference) it is
    ``(psi_reg - psi_minus) / (2 * lambda_used)``.
    """

    value: float
    lambda_used: float
    psi_base: float
    psi_reg: float
    psi_minus: float | None = None
    raw_negative: bool = False
    fit_iters: tuple = ()
    displacement: float = 0.0
    fit_count: int = 1

    @property
    def clamped(self) -> float:
        return max(self.value, 0.0)


@dataclass
class CovMatrix:
    values: np.ndarray
    symmetrized: bool = False
    psd_projected: bool = False
    raw: np.ndarray | None = None
    fit_count: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.raw is None:
            self.raw = self.values.copy()

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def projected(self) -> "CovMatrix":
        return CovMatrix(psd_project(self.values), True, True, self.raw, self.fit_count, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "values": [float(v) for v in self.values.ravel()],
            "raw": [float(v) for v in self.raw.ravel()],
            "symmetrized": self.symmetrized,
            "psd_projected": self.psd_projected,
            "fit_count": self.fit_count,
        }


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    beta: float
    center: float
    variance: float = float("nan")
    clamped: bool = False

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {"lo": self.lower, "hi": self.upper, "beta": self.beta}


def psd_project(m) -> np.ndarray:
    """Symmetrise, then rebuild from the eigenpairs with positive eigenvalues."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"psd_project needs a square matrix, got {m.shape}")
    s = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(s)
    keep = w > 0
    p = (v[:, keep] * w[keep]) @ v[:, keep].T
    return 0.5 * (p + p.T)


# --------------------------------------------------------------------------- #
# Normal quantile
# --------------------------------------------------------------------------- #

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def norm_ppf(p: float) -> float:
    """Standard normal quantile: Acklam's rational approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"quantile level must be in (0, 1), got {p}")
    if p > 0.5:
        # 1 - p is exact here; refining in the lower tail keeps erfc accurate
        return -norm_ppf(1.0 - p)
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    # Halley refinement against the exact cdf
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def z_multiplier(beta: float) -> float:
    if not 0.0 < beta < 1.0:
        raise InvalidArgumentError(f"confidence level must be in (0, 1), got {beta}")
    return norm_ppf((1.0 + beta) / 2.0)


# --------------------------------------------------------------------------- #
# Fitting
# --------------------------------------------------------------------------- #


def _batch_objective(model, data, psi, weight, scale_rows=True):
    n = data.n

    def obj(theta, idx):
        sub = data if len(idx) == n else data.subset(idx)
        v, g = M.value_and_grad(model, theta, sub)
        if len(idx) != n:
            s = n / len(idx)
            v, g = v * s, g * s
        if psi is not None and weight != 0.0:
            v = v + weight * psi.scalar(theta)
            g = g + weight * psi.jacobian(theta)[0]
        return v, g
    return obj


def fit_objective(model: LikelihoodModel, data: Dataset, config: OptimizerConfig, init,
                  psi: EvalFn | None = None, weight: float = 0.0) -> FitResult:
    """Maximise ``log L(theta) + weight * psi(theta)`` from ``init``.

    Gradient methods are used when available; an evaluation without a
    gradient forces Nelder-Mead.
    """
    if psi is not None and psi.k != 1:
        raise InvalidArgumentError("regularised fits take a scalar evaluation; use psi.component(i)")
    init = np.asarray(init, dtype=float)
    model.unpack(init, data.n_features)  # validates length
    use_nm = config.method == "nelder_mead" or (psi is not None and weight != 0.0 and not psi.differentiable)
    if use_nm:
        def objective(theta):
            v = float(np.sum(M.log_likelihood_rows(model, theta, data)))
            if psi is not None and weight != 0.0:
                v += weight * psi.scalar(theta)
            return v
        cfg = config if config.method == "nelder_mead" else config.with_(method="nelder_mead")
        return nelder_mead(objective, init, cfg)

    if config.method == "adaptive_stochastic":
        return maximize_stochastic(_batch_objective(model, data, psi, weight), data.n, init, config)

    def vg(theta):
        v, g = M.value_and_grad(model, theta, data)
        if psi is not None and weight != 0.0:
            v = v + weight * psi.scalar(theta)
            g = g + weight * psi.jacobian(theta)[0]
        return v, g

    return maximize(lambda t: vg(t)[0], lambda t: vg(t)[1], init, config, value_and_grad=vg)


def fit_mle(model: LikelihoodModel, data: Dataset, config: OptimizerConfig, init=None) -> FitResult:
    """Unregularised maximum-likelihood fit (cold start from the model's initialiser)."""
    M._check_data(model, data)
    if init is None:
        init = model.init_params(data.n_features, seed=config.seed)
    return fit_objective(model, data, config, init)


def _require_converged_warm(warm: FitResult):
    if warm is None:
        raise InvalidArgumentError("a warm-start fit is required")


def _regularized_fit(model, data, psi, weight, warm, config, context, start=None) -> FitResult:
    try:
        return fit_objective(model, data, config, warm.theta if start is None else start, psi, weight)
    except IDMError as exc:
        raise FitFailureError(f"regularised fit failed ({context}): {exc}", context) from exc


def fit_regularized(model: LikelihoodModel, data: Dataset, psi: EvalFn, lam: float, warm: FitResult,
                    config: OptimizerConfig) -> FitResult:
    """``argmax log L + lam * psi``, warm-started at the MLE fit ``warm``.

    ``lam`` is on the log-likelihood scale (see module docstring).
    """
    if lam < 0:
        raise InvalidArgumentError("lambda must be >= 0")
    _require_converged_warm(warm)
    if lam == 0:
        return warm
    scale = M.likelihood_scale(model, warm.theta, data)
    return _regularized_fit(model, data, psi, scale * lam, warm, config, {"lambda": lam, "psi": psi.name})


def _negative_tol(psi_hat: float) -> float:
    return 1e-6 * (1.0 + abs(psi_hat))


def _fdidm_core(model, data, psi, lam, warm, config, scale, central, start=None) -> VarEstimate:
    if not lam > 0:
        raise InvalidArgumentError("lambda must be > 0")
    _require_converged_warm(warm)
    base = psi.scalar(warm.theta)
    ctx = {"lambda": lam, "psi": psi.name}
    plus = _regularized_fit(model, data, psi, scale * lam, warm, config, ctx, start)
    psi_reg = psi.scalar(plus.theta)
    disp = float(np.linalg.norm(plus.theta - warm.theta))
    if central:
        minus = _regularized_fit(model, data, psi, -scale * lam, warm, config, {**ctx, "lambda": -lam}, start)
        psi_minus = psi.scalar(minus.theta)
        value = (psi_reg - psi_minus) / (2.0 * lam)
        iters = (warm.iterations, plus.iterations, minus.iterations)
        count = 2
    else:
        psi_minus = None
        value = (psi_reg - base) / lam
        iters = (warm.iterations, plus.iterations)
        count = 1
    return VarEstimate(value, lam, base, psi_reg, psi_minus, value < -_negative_tol(base), iters, disp, count)


def fdidm(model: LikelihoodModel, data: Dataset, psi: EvalFn, lam: float, warm: FitResult,
          config: OptimizerConfig, central: bool = False, start=None) -> VarEstimate:
    """Finite-difference implicit-delta variance of a scalar evaluation.

    Regularised fits warm-start at ``warm.theta`` unless ``start`` is given.
    Passing the initial point of the base fit replays the whole training run
    on the tilted objective, which is the right comparison when the base fit
    is stopped before convergence.
    """
    if model.family.name == "gaussian_sse":
        raise WrongFamilyError("fdidm does not apply to gaussian_sse; use fdidm_sse")
    if psi.k != 1:
        raise InvalidArgumentError("fdidm takes a scalar evaluation; use mv_fdidm")
    return _fdidm_core(model, data, psi, lam, warm, config, 1.0, central, start)


def fdidm_sse(model: LikelihoodModel, data: Dataset, psi: EvalFn, lam: float, warm: FitResult,
              config: OptimizerConfig, central: bool = False, start=None) -> VarEstimate:
    """Variance for a squared-error fit.

    Maximises ``-SSE/2 + s2 * lam * psi`` with ``s2`` the mean squared
    residual at ``warm``; the result is on the Gaussian likelihood scale.
    """
    if model.family.name != "gaussian_sse":
        raise WrongFamilyError("fdidm_sse needs the gaussian_sse family")
    if psi.k != 1:
        raise InvalidArgumentError("fdidm_sse takes a scalar evaluation")
    s2 = M.sigma2_hat(model, warm.theta, data)
    if _interpolates(s2, data):
        raise DegenerateFitError("residual variance is zero; the fit interpolates the data")
    return _fdidm_core(model, data, psi, lam, warm, config, s2, central, start)


def variance(model, data, psi, lam, warm, config, central=False, start=None) -> VarEstimate:
    """Dispatch to ``fdidm`` or ``fdidm_sse`` by family."""
    if model.family.name == "gaussian_sse":
        return fdidm_sse(model, data, psi, lam, warm, config, central, start)
    return fdidm(model, data, psi, lam, warm, config, central, start)


def _interpolates(s2, data):
    # residual variance at rounding level counts as an exact fit
    return s2 <= 1e-24 * (1.0 + float(np.mean(np.square(data.y))))


def _sse_scale(model, data, warm):
    s2 = M.likelihood_scale(model, warm.theta, data)
    if _interpolates(s2, data):
        raise DegenerateFitError("residual variance is zero; the fit interpolates the data")
    return s2


def mv_fdidm(model: LikelihoodModel, data: Dataset, psi: EvalFn, lam: float, warm: FitResult,
             config: OptimizerConfig, project: bool = False, max_workers: int | None = None) -> CovMatrix:
    """K x K covariance from K regularised fits, one per component.

    Entry ``(i, j)`` is ``(psi_i(theta(lam; psi_j)) - psi_i(theta_hat)) / lam``.
    The raw matrix is kept in ``.raw``; ``.values`` is its symmetrisation, or
    its PSD projection when ``project`` is set.
    """
    if not lam > 0:
        raise InvalidArgumentError("lambda must be > 0")
    _require_converged_warm(warm)
    scale = _sse_scale(model, data, warm)
    base = psi(warm.theta)

    def one(j):
        try:
            fit = fit_objective(model, data, config, warm.theta, psi.component(j), scale * lam)
        except IDMError as exc:
            raise FitFailureError(f"regularised fit for component {j} failed: {exc}",
                                  {"component": j, "lambda": lam}) from exc
        return fit

    if max_workers and max_workers > 1 and psi.k > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            fits = list(pool.map(one, range(psi.k)))
    else:
        fits = [one(j) for j in range(psi.k)]
    raw = np.empty((psi.k, psi.k))
    for j, fit in enumerate(fits):
        raw[:, j] = (psi(fit.theta) - base) / lam
    sym = 0.5 * (raw + raw.T)
    values = psd_project(sym) if project else sym
    meta = {"lambda": lam, "psi_base": base.tolist(), "fit_iters": [f.iterations for f in fits]}
    return CovMatrix(values, True, bool(project), raw, len(fits), meta)


def confidence_interval(psi_hat: float, var, beta: float = 0.95) -> Interval:
    """``psi_hat +/- z_{(1+beta)/2} * sqrt(V)``; negative V is clamped to 0 and flagged."""
    v = var.value if isinstance(var, VarEstimate) else float(var)
    z = z_multiplier(beta)
    clamped = v < 0
    half = z * math.sqrt(max(v, 0.0))
    return Interval(psi_hat - half, psi_hat + half, beta, psi_hat, v, clamped)


def sg_fdidm(model: LikelihoodModel, data: Dataset, psi: EvalFn, lam: float, config: OptimizerConfig,
             S: int = 1, beta: float = 0.95, init=None) -> Interval:
    """Stochastic-gradient variant returning an interval directly.

    Ascend the MLE objective from a Uniform(-0.1, 0.1) start until windowed
    convergence, average ``psi`` over the next ``S`` iterates, switch to the
    regularised objective on the same trajectory, converge again and average
    ``S`` more. The interval is centred on the first average.
    """
    if S < 1:
        raise InvalidArgumentError("S must be >= 1")
    if config.method != "adaptive_stochastic":
        raise InvalidArgumentError("sg_fdidm needs method='adaptive_stochastic'")
    if not lam > 0:
        raise InvalidArgumentError("lambda must be > 0")
    M._check_data(model, data)
    if init is None:
        init = SplitMix64(config.seed).uniform_range(-0.1, 0.1, model.n_params(data.n_features))
    runner = StochasticAscent(data.n, init, config)
    try:
        obj = _batch_objective(model, data, None, 0.0)
        runner.run(obj)
        psi0 = []
        for _ in range(S):
            psi0.append(psi.scalar(runner.theta))
            runner.step(obj)
        weight = lam * _sse_scale(model, data, FitResult(runner.theta, 0.0, 0, True, 0.0))
        reg = _batch_objective(model, data, psi, weight)
        if config.regularized_learning_rate is not None:
            runner.rate = config.regularized_learning_rate
        runner.run(reg)
        psil = []
        for _ in range(S):
            psil.append(psi.scalar(runner.theta))
            runner.step(reg)
    except IDMError as exc:
        raise FitFailureError(f"stochastic ascent failed: {exc}", {"lambda": lam, "psi": psi.name}) from exc
    c0 = float(np.mean(psi0))
    cl = float(np.mean(psil))
    return confidence_interval(c0, (cl - c0) / lam, beta)


def fisher_inverse_idm(model: LikelihoodModel, data: Dataset, warm: FitResult, lam: float,
                       config: OptimizerConfig, max_params: int = FISHER_MAX_PARAMS) -> np.ndarray:
    """Inverse per-observation Fisher information from ``d`` coordinate-tilted refits.

    Column ``i`` is ``n * (theta_hat(lam; theta_i) - theta_hat) / lam``.
    """
    _require_converged_warm(warm)
    theta = np.asarray(warm.theta, dtype=float)
    d = theta.shape[0]
    if d > max_params:
        raise CapabilityError(f"Fisher extraction requested for d={d} > cap {max_params}")
    if not lam > 0:
        raise InvalidArgumentError("lambda must be > 0")
    scale = _sse_scale(model, data, warm)
    out = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        coord = EvalFn(lambda t, _i=i: np.asarray([t[_i]]), 1, lambda t, _e=e: _e[None, :], name=f"theta[{i}]")
        fit = _regularized_fit(model, data, coord, scale * lam, warm, config, {"lambda": lam, "psi": coord.name})
        out[:, i] = data.n * (fit.theta - theta) / lam
    return 0.5 * (out + out.T)


def eval_set_variance(psi: EvalFn, theta) -> float:
    """Squared standard error of ``psi`` due to the finite evaluation set."""
    if psi.unit_form is None:
        raise InvalidArgumentError("evaluation has no per-unit form")
    h = np.asarray(psi.unit_form(theta), dtype=float).reshape(-1)
    m = h.shape[0]
    if m < 2:
        raise InvalidArgumentError("need at least two evaluation units")
    center = psi.scalar(theta)
    return float(np.sum((h - center) ** 2) / ((m - 1) * m))


def combined_variance(var_fit: float, var_eval: float, independent: bool = True) -> float:
    """Training plus evaluation-set variance.

    Independent sets add; otherwise ``(sqrt(a) + sqrt(b))^2`` bounds the
    variance from above.
    """
    if var_fit < 0 or var_eval < 0:
        raise InvalidArgumentError("variances must be nonnegative")
    if independent:
        return var_fit + var_eval
    return (math.sqrt(var_fit) + math.sqrt(var_eval)) ** 2


def default_lambda(objective_value_at_mle: float) -> float:
    """One percent of the MLE objective's magnitude, floored at 1e-3."""
    if not math.isfinite(objective_value_at_mle):
        raise InvalidArgumentError("objective must be finite")
    return max(0.01 * abs(objective_value_at_mle), 1e-3)


def loglik_scale_objective(model: LikelihoodModel, data: Dataset, fit: FitResult) -> float:
    """MLE objective on the log-likelihood scale.

    For ``gaussian_sse`` this is the profile Gaussian log-likelihood
    ``-n/2 * (log(2 pi s2) + 1)``; other families return the fit objective.
    """
    if model.family.name == "gaussian_sse":
        s2 = M.sigma2_hat(model, fit.theta, data)
        if s2 <= 0:
            raise DegenerateFitError("residual variance is zero")
        return -0.5 * data.n * (math.log(2 * math.pi * s2) + 1.0)
    return float(M.log_likelihood(model, fit.theta, data))


def auto_lambda(model: LikelihoodModel, data: Dataset, fit: FitResult) -> float:
    return default_lambda(loglik_scale_objective(model, data, fit))
