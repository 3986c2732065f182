"""Seeded synthetic data-generating processes and evaluation functions.

Draw order is part of the contract: features are drawn first as one block
(row-major), then the noise block, then any label uniforms. Evaluation sets
for the newsvendor task come from a child stream (``spawn(1)``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtr

from . import models as M
from .errors import InvalidArgumentError
from .estimators import EvalFn
from .models import Dataset, LikelihoodModel
from .rng import SplitMix64

KINDS = ("quadratic", "sin", "logistic_class", "newsvendor", "gaussian_mean")
SIN_RANGES = ((-1.5, -0.7), (0.35, 1.15))


@dataclass(frozen=True)
class DGPSpec:
    """Configuration of one synthetic task.

    ``noise`` is the response noise scale (quadratic/sin: 0.1, newsvendor
    demand: 0.5, gaussian_mean: 1.0). ``d`` is the logistic parameter count
    (intercept plus ``d - 1`` features). ``m`` is the newsvendor evaluation
    set size, ``None`` meaning ``m = n``.
    """

    kind: str = "quadratic"
    n: int = 25
    seed: int = 0
    noise: float | None = None
    design: str = "random_normal"
    theta0: tuple | None = None
    d: int = 3
    m: int | None = None
    mean: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown dgp kind {self.kind!r}")
        if self.n < 1:
            raise InvalidArgumentError("n must be >= 1")
        if self.design not in ("random_normal", "fixed_grid"):
            raise InvalidArgumentError(f"unknown input design {self.design!r}")
        if self.theta0 is not None:
            object.__setattr__(self, "theta0", tuple(float(t) for t in self.theta0))

    @property
    def noise_scale(self) -> float:
        if self.noise is not None:
            return float(self.noise)
        return {"quadratic": 0.1, "sin": 0.1, "newsvendor": 0.5, "gaussian_mean": 1.0}.get(self.kind, 0.0)

    def with_(self, **kw) -> "DGPSpec":
        doc = asdict(self)
        doc.update(kw)
        return DGPSpec(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        if doc["theta0"] is not None:
            doc["theta0"] = list(doc["theta0"])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DGPSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown dgp keys: {sorted(unknown)}")
        return cls(**doc)


# --------------------------------------------------------------------------- #
# Mean curves
# --------------------------------------------------------------------------- #


def quadratic_mean(x):
    x = np.asarray(x, dtype=float)
    return 0.1 * x * x - 0.5 * x + 5.0


def sin_mean(x):
    return -np.sin(3.0 * np.asarray(x, dtype=float) - 0.3)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------- #
# Generators
# --------------------------------------------------------------------------- #


def _inputs(spec: DGPSpec, rng: SplitMix64) -> np.ndarray:
    if spec.design == "fixed_grid":
        return np.linspace(-3.0, 3.0, spec.n)
    return rng.normal(spec.n)


def gen_quadratic(spec: DGPSpec) -> Dataset:
    """``y = 0.1 x^2 - 0.5 x + 5 + noise * eps`` with ``x ~ N(0, 1)``."""
    rng = SplitMix64(spec.seed)
    x = _inputs(spec, rng)
    y = quadratic_mean(x) + spec.noise_scale * rng.normal(spec.n)
    return Dataset(x[:, None], y)


def sin_inputs(n: int) -> np.ndarray:
    if n % 2:
        raise InvalidArgumentError("sin task needs an even n (split across two ranges)")
    half = n // 2
    return np.concatenate([np.linspace(a, b, half, endpoint=False) for a, b in SIN_RANGES])


def gen_sin(spec: DGPSpec) -> Dataset:
    """Evenly spaced inputs over two disjoint ranges; ``y = -sin(3x - 0.3) + noise * eps``."""
    x = sin_inputs(spec.n)
    rng = SplitMix64(spec.seed)
    y = sin_mean(x) + spec.noise_scale * rng.normal(spec.n)
    return Dataset(x[:, None], y)


def default_logistic_theta0(d: int) -> np.ndarray:
    """Fixed truth for the logistic task: intercept 0.5, slopes alternating +/-1 shrinking."""
    t = np.empty(d)
    t[0] = 0.5
    for j in range(1, d):
        t[j] = (1.0 if j % 2 else -1.0) / math.sqrt(j)
    return t


def gen_logistic_class(spec: DGPSpec) -> Dataset:
    """``x ~ N(0, I)`` with ``d - 1`` features, ``y ~ Bernoulli(sigmoid(theta0 . [1, x]))``."""
    theta0 = np.asarray(spec.theta0 if spec.theta0 is not None else default_logistic_theta0(spec.d))
    if not np.all(np.isfinite(theta0)):
        raise InvalidArgumentError("theta0 must be finite")
    p = theta0.shape[0] - 1
    if p < 1:
        raise InvalidArgumentError("logistic task needs at least one feature")
    rng = SplitMix64(spec.seed)
    x = rng.normal(spec.n * p).reshape(spec.n, p)
    prob = _sigmoid(theta0[0] + x @ theta0[1:])
    y = (rng.uniform(spec.n) < prob).astype(float)
    return Dataset(x, y)


def gen_gaussian_mean(spec: DGPSpec) -> Dataset:
    """``y ~ N(mean, noise^2)`` with no features (pairs with the constant predictor)."""
    rng = SplitMix64(spec.seed)
    y = spec.mean + spec.noise_scale * rng.normal(spec.n)
    return Dataset(np.zeros((spec.n, 0)), y)


def _newsvendor_draw(n: int, sd: float, rng: SplitMix64) -> Dataset:
    x = rng.normal(n)
    demand = np.maximum(2.0 + x + sd * rng.normal(n), 0.0)
    return Dataset(x[:, None], demand)


def gen_newsvendor(spec: DGPSpec, model: LikelihoodModel | None = None):
    """Demand task: ``d | x ~ N(2 + x, sd^2)`` censored at 0.

    Returns ``(train, psi, eval_data)`` where ``psi`` is the average unmet
    demand ``mean(max(d - g(x), 0))`` over an independent evaluation set of
    size ``m`` (default ``n``). ``psi`` has no gradient.
    """
    model = model or newsvendor_model(spec)
    rng = SplitMix64(spec.seed)
    train = _newsvendor_draw(spec.n, spec.noise_scale, rng)
    eval_data = _newsvendor_draw(spec.m or spec.n, spec.noise_scale, rng.spawn(1))
    psi = make_eval_fn("avg_unmet_demand", model, eval_data=eval_data)
    return train, psi, eval_data


def newsvendor_model(spec: DGPSpec | None = None) -> LikelihoodModel:
    sd = 0.5 if spec is None else spec.noise_scale
    return M.linear_model("gaussian_known_var", sigma2=sd * sd)


def newsvendor_theta0(sd: float = 0.5, nodes: int = 80) -> np.ndarray:
    """Population least-squares coefficients of the censored demand on ``[1, x]``.

    ``E[max(D, 0) | x] = mu Phi(mu/sd) + sd phi(mu/sd)`` with ``mu = 2 + x``;
    projecting onto ``[1, x]`` under ``x ~ N(0, 1)`` gives ``(E[m], E[x m])``.
    """
    z, w = hermegauss(nodes)
    w = w / w.sum()
    m = _positive_part_mean(2.0 + z, sd)
    return np.array([np.sum(w * m), np.sum(w * z * m)])


def _positive_part_mean(mu, sd):
    """``E[max(mu + sd * Z, 0)]`` for standard normal ``Z``."""
    r = mu / sd
    return mu * ndtr(r) + sd * np.exp(-0.5 * r * r) / math.sqrt(2 * math.pi)


def newsvendor_expected_unmet(theta, sd: float = 0.5, nodes: int = 120) -> float:
    """Population average unmet demand ``E[max(D - g(x), 0)]`` for a linear order rule.

    With ``D = max(mu + sd * Z, 0)`` and order ``c = theta . [1, x]``:
    ``c >= 0`` gives ``E[(mu - c + sd Z)+]``; ``c < 0`` gives ``E[D] - c``.
    The outer expectation over ``x ~ N(0, 1)`` is Gauss-Hermite.
    """
    theta = np.asarray(theta, dtype=float)
    z, w = hermegauss(nodes)
    w = w / w.sum()
    mu = 2.0 + z
    c = theta[0] + theta[1] * z
    inner = np.where(c >= 0, _positive_part_mean(mu - c, sd), _positive_part_mean(mu, sd) - c)
    return float(np.sum(w * inner))


def generate(spec: DGPSpec) -> Dataset:
    """Training data for any kind (newsvendor returns only its training set)."""
    if spec.kind == "quadratic":
        return gen_quadratic(spec)
    if spec.kind == "sin":
        return gen_sin(spec)
    if spec.kind == "logistic_class":
        return gen_logistic_class(spec)
    if spec.kind == "newsvendor":
        return gen_newsvendor(spec)[0]
    return gen_gaussian_mean(spec)


def regression_truth(spec: DGPSpec, x) -> np.ndarray:
    """True regression function at ``x`` for the regression tasks."""
    if spec.kind == "quadratic":
        return quadratic_mean(x)
    if spec.kind == "sin":
        return sin_mean(x)
    if spec.kind == "gaussian_mean":
        return np.full(np.shape(x)[0] if np.ndim(x) else 1, spec.mean, dtype=float)
    raise InvalidArgumentError(f"no regression truth for {spec.kind}")


def logistic_population_fisher(theta0, nodes: int = 40) -> np.ndarray:
    """``E[p(1 - p) x1 x1']`` under ``x ~ N(0, I)`` by tensor Gauss-Hermite quadrature."""
    theta0 = np.asarray(theta0, dtype=float)
    p = theta0.shape[0] - 1
    if p > 3:
        raise InvalidArgumentError("quadrature oracle supports up to 3 features")
    z, w = hermegauss(nodes)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * p), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.ones(pts.shape[0])
    for wg in np.meshgrid(*([w] * p), indexing="ij"):
        wts = wts * wg.ravel()
    x1 = np.hstack([np.ones((pts.shape[0], 1)), pts])
    pr = _sigmoid(x1 @ theta0)
    return (x1.T * (wts * pr * (1 - pr))) @ x1


# --------------------------------------------------------------------------- #
# Evaluation functions
# --------------------------------------------------------------------------- #


def _response(model, eta):
    return model.family.mean(eta)


def make_eval_fn(kind: str, model: LikelihoodModel, *, x0=None, points=None, eval_data: Dataset | None = None,
                 output: int = 0, response: bool = True) -> EvalFn:
    """Build one of the standard evaluations.

    ``point_prediction`` and ``prediction_grid`` evaluate the predictor's
    mean (inverse link applied when ``response``) at given inputs;
    ``holdout_avg_cross_entropy`` is the mean negative log density on
    ``eval_data``; ``avg_unmet_demand`` is ``mean(max(d - g(x), 0))``.
    """
    if kind in ("point_prediction", "prediction_grid"):
        if kind == "point_prediction":
            if x0 is None:
                raise InvalidArgumentError("point_prediction needs x0")
            pts = np.atleast_1d(np.asarray(x0, dtype=float))[None, :]
        else:
            if points is None or len(points) == 0:
                raise InvalidArgumentError("prediction_grid needs points")
            pts = np.asarray(points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
        k = pts.shape[0]

        def fn(theta):
            out = M.forward(model, theta, pts)
            vals = _response(model, out) if response else out
            return vals[:, output]

        def grad(theta):
            return M.output_jacobian(model, theta, pts, output=output, response=response)

        return EvalFn(fn, k, grad, name=f"{kind}")

    if eval_data is None or eval_data.n == 0:
        raise InvalidArgumentError(f"{kind} needs a nonempty evaluation set")

    if kind == "holdout_avg_cross_entropy":
        m = eval_data.n

        def units(theta):
            return -M.log_likelihood_rows(model, theta, eval_data)

        def fn(theta):
            return np.array([np.mean(units(theta))])

        def grad(theta):
            _, g = M.value_and_grad(model, theta, eval_data)
            return (-g / m)[None, :]

        return EvalFn(fn, 1, grad, units, eval_data, kind)

    if kind == "avg_unmet_demand":
        def units(theta):
            g = M.forward(model, theta, eval_data.x)[:, 0]
            return np.maximum(eval_data.y - g, 0.0)

        def fn(theta):
            return np.array([np.mean(units(theta))])

        return EvalFn(fn, 1, None, units, eval_data, kind)

    raise InvalidArgumentError(f"unknown evaluation kind {kind!r}")


def holdout_split(data: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded partition into ``(train, eval)`` with ``ceil(fraction * n)`` eval rows."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError("fraction must be in (0, 1)")
    n = data.n
    n_eval = math.ceil(fraction * n - 1e-12)
    if n < 2 or n_eval < 1 or n_eval >= n:
        raise InvalidArgumentError(f"degenerate split of n={n} at fraction {fraction}")
    perm = SplitMix64(seed).permutation(n)
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    return data.subset(train_idx), data.subset(eval_idx)
