"""Maximisers: full-batch gradient ascent, RMSProp-style minibatch ascent, Nelder-Mead.

All routines *maximise*. They are deterministic given their inputs; the only
randomness (minibatch order) comes from the seeded stream in the config.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from .errors import CapabilityError, InvalidArgumentError, NumericFailureError
from .rng import SplitMix64

METHODS = ("full_gradient", "adaptive_stochastic", "nelder_mead")
LINE_SEARCHES = ("bb", "backtrack", "none")


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for one fit.

    ``learning_rate`` and ``decay`` define the schedule
    ``rate(i) = learning_rate / (1 + decay * i)``. For gradient methods the
    stopping rule is ``|grad| <= convergence_tol * (1 + |objective|)``; for
    Nelder-Mead it is simplex diameter ``< convergence_tol``.

    ``line_search`` (full_gradient only): ``"bb"`` tries a Barzilai-Borwein
    step and halves it until sufficient increase (estimated from the slopes
    once the objective is flat to rounding), ``"backtrack"`` starts from
    the schedule rate instead, ``"none"`` takes plain schedule steps.
    ``regularized_learning_rate`` optionally replaces the rate for the
    second (regularised) phase of the stochastic routine.
    """

    method: str = "full_gradient"
    learning_rate: float = 0.01
    decay: float = 0.0
    max_iters: int = 10_000
    convergence_tol: float = 1e-6
    minibatch_size: int = 128
    seed: int = 0
    line_search: str = "bb"
    max_halvings: int = 30
    adaptive: bool = True
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    window: int = 50
    window_tol: float = 1e-5
    regularized_learning_rate: float | None = None
    max_params_nelder_mead: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown optimizer method {self.method!r}")
        if self.line_search not in LINE_SEARCHES:
            raise InvalidArgumentError(f"unknown line search {self.line_search!r}")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("initial learning rate must be > 0")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if not self.convergence_tol > 0:
            raise InvalidArgumentError("convergence_tol must be > 0")
        if self.minibatch_size < 1:
            raise InvalidArgumentError("minibatch_size must be >= 1")

    def rate(self, i: int) -> float:
        return self.learning_rate / (1.0 + self.decay * i)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "OptimizerConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **kw) -> "OptimizerConfig":
        return replace(self, **kw)


@dataclass
class FitResult:
    theta: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    grad_norm_final: float
    method: str = "full_gradient"


def _stop_threshold(config: OptimizerConfig, f: float) -> float:
    return config.convergence_tol * (1.0 + abs(f))


def maximize(objective: Callable, gradient: Callable, init, config: OptimizerConfig,
             value_and_grad: Callable | None = None) -> FitResult:
    """Full-batch gradient ascent.

    ``value_and_grad`` may be supplied to share work between the objective and
    the gradient; it must agree with the two separate callables.
    """
    if config.method == "nelder_mead":
        raise InvalidArgumentError("maximize needs a gradient-based method; use nelder_mead()")
    if value_and_grad is None:
        def value_and_grad(t):
            return objective(t), gradient(t)

    theta = np.array(init, dtype=float).reshape(-1)
    f, g = value_and_grad(theta)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericFailureError("objective not finite at the initial point", last_theta=theta)
    gn = float(np.linalg.norm(g))
    it = 0
    step = config.rate(0)
    prev = None  # (theta, g) of the previous accepted iterate, for BB steps
    while it < config.max_iters:
        if gn <= _stop_threshold(config, f):
            return FitResult(theta, f, it, True, gn, config.method)
        if config.line_search == "none":
            cand = theta + config.rate(it) * g
            fc, gc = _safe_eval(value_and_grad, cand)
            if fc is None:
                raise NumericFailureError(f"objective became non-finite at iteration {it + 1}", last_theta=theta)
        else:
            if config.line_search == "bb" and prev is not None:
                s = theta - prev[0]
                yv = g - prev[1]
                sy = float(s @ yv)
                if sy < 0:
                    step = min(-float(s @ s) / sy, 1e12)
                else:
                    step = 2.0 * step
            elif config.line_search == "backtrack":
                step = config.rate(it)
            accepted = False
            for _ in range(config.max_halvings + 1):
                cand = theta + step * g
                fc, gc = _safe_eval(value_and_grad, cand)
                if fc is not None and _sufficient_increase(f, fc, step, g, gn, gc):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                # no ascent possible at working precision
                return FitResult(theta, f, it, gn <= _stop_threshold(config, f), gn, config.method)
        prev = (theta, g)
        theta, f, g = cand, fc, gc
        gn = float(np.linalg.norm(g))
        it += 1
    return FitResult(theta, f, it, gn <= _stop_threshold(config, f), gn, config.method)


def _sufficient_increase(f, fc, step, g, gn, gc) -> bool:
    gain = fc - f
    if abs(gain) <= 8 * np.finfo(float).eps * (1.0 + abs(f)):
        # difference lost to rounding: trapezoid estimate from the directional slopes
        gain = 0.5 * step * (gn * gn + float(gc @ g))
    return gain >= 1e-4 * step * gn * gn


def _safe_eval(value_and_grad, theta):
    try:
        with np.errstate(all="ignore"):
            f, g = value_and_grad(theta)
    except (NumericFailureError, FloatingPointError, OverflowError):
        return None, None
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return None, None
    return float(f), g


# --------------------------------------------------------------------------- #
# Stochastic ascent
# --------------------------------------------------------------------------- #


class StochasticAscent:
    """Stateful minibatch ascent (RMSProp scaling when ``config.adaptive``).

    Minibatches step through a seeded shuffle of the rows in blocks of
    ``minibatch_size``; the data are reshuffled each epoch. With a batch as
    large as the data the natural row order is used so that the update is
    bit-identical to full-batch ascent. The iteration counter, accumulator and
    batch cursor persist across calls so that successive phases continue the
    same trajectory.
    """

    def __init__(self, n: int, init, config: OptimizerConfig):
        if config.method != "adaptive_stochastic":
            raise InvalidArgumentError("StochasticAscent needs method='adaptive_stochastic'")
        if not 1 <= config.minibatch_size:
            raise InvalidArgumentError("minibatch_size must be >= 1")
        self.n = int(n)
        self.config = config
        self.batch = min(config.minibatch_size, self.n)
        self.theta = np.array(init, dtype=float).reshape(-1)
        self.sq = np.zeros_like(self.theta)
        self.i = 0
        self.rate = config.learning_rate
        self._rng = SplitMix64(config.seed)
        self._order = None
        self._cursor = 0
        self.last_value = float("nan")
        self.last_grad_norm = float("nan")

    def next_batch(self) -> np.ndarray:
        if self.batch >= self.n:
            return np.arange(self.n)
        if self._order is None or self._cursor >= self.n:
            self._order = self._rng.permutation(self.n)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + self.batch]
        self._cursor += self.batch
        return idx

    def step(self, objective_batch: Callable) -> float:
        """One update; ``objective_batch(theta, idx) -> (value, grad)`` on full-data scale."""
        idx = self.next_batch()
        val, g = objective_batch(self.theta, idx)
        if not math.isfinite(val) or not np.all(np.isfinite(g)):
            raise NumericFailureError(f"objective became non-finite at iteration {self.i}", last_theta=self.theta)
        lr = self.rate / (1.0 + self.config.decay * self.i)
        if self.config.adaptive:
            rho = self.config.rms_decay
            self.sq = rho * self.sq + (1.0 - rho) * g * g
            self.theta = self.theta + lr * g / (np.sqrt(self.sq) + self.config.rms_eps)
        else:
            self.theta = self.theta + lr * g
        self.i += 1
        self.last_value = float(val)
        self.last_grad_norm = float(np.linalg.norm(g))
        return self.last_value

    def run(self, objective_batch: Callable, max_iters: int | None = None) -> FitResult:
        """Iterate until two consecutive windows of objective values agree."""
        cfg = self.config
        max_iters = cfg.max_iters if max_iters is None else max_iters
        w = cfg.window
        values: list[float] = []
        prev_mean = None
        converged = False
        for _ in range(max_iters):
            values.append(self.step(objective_batch))
            if len(values) == w:
                mean = float(np.mean(values))
                values.clear()
                if prev_mean is not None and abs(mean - prev_mean) <= cfg.window_tol * abs(prev_mean):
                    converged = True
                    break
                prev_mean = mean
        return FitResult(self.theta.copy(), self.last_value, self.i, converged, self.last_grad_norm,
                         "adaptive_stochastic")


def maximize_stochastic(objective_batch: Callable, n: int, init, config: OptimizerConfig) -> FitResult:
    """Minibatch ascent from ``init`` until windowed convergence or ``max_iters``.

    ``n`` is the number of rows; ``objective_batch(theta, idx)`` returns an
    unbiased full-data-scale estimate of the objective and its gradient using
    rows ``idx``.
    """
    if config.method != "adaptive_stochastic":
        raise InvalidArgumentError("maximize_stochastic needs method='adaptive_stochastic'")
    return StochasticAscent(n, init, config).run(objective_batch)


# --------------------------------------------------------------------------- #
# Nelder-Mead
# --------------------------------------------------------------------------- #


def nelder_mead(objective: Callable, init, config: OptimizerConfig) -> FitResult:
    """Derivative-free simplex search maximising ``objective``.

    Standard coefficients (reflect 1, expand 2, contract 0.5, shrink 0.5).
    The initial simplex adds ``0.05 * (1 + |theta_j|)`` to each coordinate in
    turn. Vertices are ordered by value with ties broken by vertex index.
    """
    x0 = np.array(init, dtype=float).reshape(-1)
    d = x0.shape[0]
    if d > config.max_params_nelder_mead:
        raise CapabilityError(f"Nelder-Mead requested for d={d} > cap {config.max_params_nelder_mead}")

    def loss(x):
        v = objective(x)
        if not math.isfinite(v):
            raise NumericFailureError("objective not finite during Nelder-Mead", last_theta=x)
        return -float(v)

    simplex = [x0]
    for j in range(d):
        v = x0.copy()
        v[j] += 0.05 * (1.0 + abs(x0[j]))
        simplex.append(v)
    simplex = np.array(simplex)
    vals = np.array([loss(v) for v in simplex])

    it = 0
    converged = False
    while True:
        order = np.lexsort((np.arange(d + 1), vals))
        simplex, vals = simplex[order], vals[order]
        diam = float(np.max(np.linalg.norm(simplex[1:] - simplex[0], axis=1))) if d else 0.0
        if diam < config.convergence_tol:
            converged = True
            break
        if it >= config.max_iters:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = loss(xr)
        if fr < vals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = loss(xe)
            if fe < fr:
                simplex[-1], vals[-1] = xe, fe
            else:
                simplex[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-2]:
            simplex[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = loss(xc)
            if fc <= fr:
                simplex[-1], vals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = loss(xc)
            if fc < vals[-1]:
                simplex[-1], vals[-1] = xc, fc
                continue
        best = simplex[0]
        for k in range(1, d + 1):
            simplex[k] = best + 0.5 * (simplex[k] - best)
            vals[k] = loss(simplex[k])
    return FitResult(simplex[0].copy(), -float(vals[0]), it, converged, float("nan"), "nelder_mead")
