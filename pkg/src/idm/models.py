"""Parametric predictors, likelihood families and their derivatives.

A model is a predictor ``h_theta(x)`` (linear or tanh MLP) composed with a
likelihood family ``g(y; eta)``; the log-likelihood of a dataset is the plain
(unnormalised) sum of per-row log densities.

Parameters are stored layer by layer. Each layer owns a ``(fan_in + 1, fan_out)``
block whose first row is the bias, so a linear predictor with one output is
``theta @ [1, x]``. Blocks are flattened row-major and concatenated.
"""
from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import gammaln

from .errors import CapabilityError, InvalidArgumentError, NumericFailureError
from .rng import SplitMix64

try:
    from . import _fastmlp
except ImportError:  # numba missing: numpy path only
    _fastmlp = None

HESSIAN_MAX_PARAMS = 10_000


# --------------------------------------------------------------------------- #
# Data
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Dataset:
    """Observations ``z_i = (x_i, y_i)``; ``x`` is ``(n, p_x)``, ``y`` is ``(n,)``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.ndim != 2:
            raise InvalidArgumentError(f"features must be 2-d, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise InvalidArgumentError(f"{x.shape[0]} feature rows but {y.shape[0]} responses")
        if y.shape[0] < 1:
            raise InvalidArgumentError("dataset must have at least one row")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx])


def load_csv(path) -> Dataset:
    """Headerless CSV: feature columns then the response column."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(v) for v in row])
    if not rows:
        raise InvalidArgumentError(f"{path}: empty csv")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or widths.pop() < 2:
        raise InvalidArgumentError(f"{path}: rows need equal width >= 2")
    arr = np.array(rows)
    return Dataset(arr[:, :-1], arr[:, -1])


def save_csv(data: Dataset, path, integer_response: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for xi, yi in zip(data.x, data.y):
            resp = str(int(yi)) if integer_response else repr(float(yi))
            writer.writerow([repr(float(v)) for v in xi] + [resp])


# --------------------------------------------------------------------------- #
# Likelihood families
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Family:
    """Per-row log density ``log g(y; eta)`` and its derivative in ``eta``.

    ``eta`` is the raw predictor output of shape ``(n, n_outputs)``.
    """

    name: str = "gaussian_known_var"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise InvalidArgumentError(f"unknown family {self.name!r}; choose from {sorted(FAMILIES)}")
        if self.name == "gaussian_known_var":
            s2 = float(self.params.get("sigma2", 1.0))
            if not s2 > 0 or not math.isfinite(s2):
                raise InvalidArgumentError(f"gaussian_known_var needs sigma2 > 0, got {s2}")
        if self.name == "categorical_softmax":
            c = int(self.params.get("n_classes", 0))
            if c < 2:
                raise InvalidArgumentError("categorical_softmax needs n_classes >= 2")

    @property
    def sigma2(self) -> float:
        return float(self.params.get("sigma2", 1.0))

    @property
    def n_outputs(self) -> int:
        if self.name == "categorical_softmax":
            return int(self.params["n_classes"])
        return 1

    def check_response(self, y: np.ndarray) -> None:
        if self.name == "bernoulli_logit" and not np.all((y == 0) | (y == 1)):
            raise InvalidArgumentError("bernoulli_logit responses must be 0/1")
        if self.name == "categorical_softmax":
            c = self.n_outputs
            if not np.all((y == np.floor(y)) & (y >= 0) & (y < c)):
                raise InvalidArgumentError(f"class indices must lie in [0, {c})")
        if self.name == "poisson_log" and not np.all((y >= 0) & (y == np.floor(y))):
            raise InvalidArgumentError("poisson_log responses must be nonnegative integers")

    def log_density(self, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
        name = self.name
        if name == "gaussian_known_var":
            s2 = self.sigma2
            r = y - eta[:, 0]
            return -0.5 * math.log(2 * math.pi * s2) - 0.5 * r * r / s2
        if name == "gaussian_sse":
            r = y - eta[:, 0]
            return -0.5 * r * r
        if name == "bernoulli_logit":
            e = eta[:, 0]
            return y * e - np.logaddexp(0.0, e)
        if name == "categorical_softmax":
            lse = _logsumexp_rows(eta)
            return eta[np.arange(eta.shape[0]), y.astype(np.int64)] - lse
        if name == "poisson_log":
            e = eta[:, 0]
            return y * e - np.exp(e) - gammaln(y + 1.0)
        raise AssertionError(name)

    def d_eta(self, y: np.ndarray, eta: np.ndarray) -> np.ndarray:
        name = self.name
        if name == "gaussian_known_var":
            return ((y - eta[:, 0]) / self.sigma2)[:, None]
        if name == "gaussian_sse":
            return (y - eta[:, 0])[:, None]
        if name == "bernoulli_logit":
            return (y - _sigmoid(eta[:, 0]))[:, None]
        if name == "categorical_softmax":
            p = _softmax_rows(eta)
            p[np.arange(eta.shape[0]), y.astype(np.int64)] -= 1.0
            return -p
        if name == "poisson_log":
            return (y - np.exp(eta[:, 0]))[:, None]
        raise AssertionError(name)

    def curvature(self, eta: np.ndarray) -> np.ndarray | None:
        """``-d2 log g / d eta2`` per row for scalar-output families, else None."""
        name = self.name
        if name == "gaussian_known_var":
            return np.full(eta.shape[0], 1.0 / self.sigma2)
        if name == "gaussian_sse":
            return np.ones(eta.shape[0])
        if name == "bernoulli_logit":
            p = _sigmoid(eta[:, 0])
            return p * (1.0 - p)
        if name == "poisson_log":
            return np.exp(eta[:, 0])
        return None

    def mean(self, eta: np.ndarray) -> np.ndarray:
        """Response-scale mean (inverse link)."""
        if self.name == "bernoulli_logit":
            return _sigmoid(eta)
        if self.name == "poisson_log":
            return np.exp(eta)
        if self.name == "categorical_softmax":
            return _softmax_rows(eta)
        return eta

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


FAMILIES = ("gaussian_known_var", "gaussian_sse", "bernoulli_logit", "categorical_softmax", "poisson_log")


def _sigmoid(z):
    # tanh form avoids overflow warnings for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------- #
# Predictors
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class PredictorSpec:
    kind: str = "linear"
    hidden: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise InvalidArgumentError(f"predictor kind must be linear or mlp, got {self.kind!r}")
        hidden = tuple(int(h) for h in self.hidden)
        if self.kind == "linear" and hidden:
            raise InvalidArgumentError("linear predictor takes no hidden layers")
        if self.kind == "mlp" and not hidden:
            raise InvalidArgumentError("mlp predictor needs at least one hidden layer")
        if any(h < 1 for h in hidden):
            raise InvalidArgumentError("hidden widths must be positive")
        if self.activation != "tanh":
            raise InvalidArgumentError("only tanh activations are supported")
        object.__setattr__(self, "hidden", hidden)

    def layer_sizes(self, n_features: int, n_outputs: int) -> list[int]:
        return [n_features, *self.hidden, n_outputs]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden": list(self.hidden), "activation": self.activation}


@dataclass(frozen=True)
class LikelihoodModel:
    predictor: PredictorSpec
    family: Family

    def layer_sizes(self, n_features: int) -> list[int]:
        return self.predictor.layer_sizes(n_features, self.family.n_outputs)

    def n_params(self, n_features: int) -> int:
        sizes = self.layer_sizes(n_features)
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    def unpack(self, theta: np.ndarray, n_features: int) -> list[np.ndarray]:
        """Views of ``theta`` as per-layer ``(fan_in + 1, fan_out)`` blocks."""
        theta = _as_param(theta)
        layout = _layout(tuple(self.layer_sizes(n_features)))
        d = layout[-1][0] + layout[-1][1] * layout[-1][2]
        if theta.shape[0] != d:
            raise InvalidArgumentError(
                f"parameter vector has length {theta.shape[0]}, model expects {d} for {n_features} features"
            )
        return [theta[o:o + r * c].reshape(r, c) for o, r, c in layout]

    def init_params(self, n_features: int, seed: int = 0) -> np.ndarray:
        """Zeros for linear predictors; Uniform(-0.1, 0.1) for MLPs."""
        d = self.n_params(n_features)
        if self.predictor.kind == "linear":
            return np.zeros(d)
        return SplitMix64(seed).uniform_range(-0.1, 0.1, d)

    def to_dict(self) -> dict:
        return {"predictor": self.predictor.to_dict(), "family": self.family.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "LikelihoodModel":
        pred = doc.get("predictor", {})
        fam = doc.get("family", {})
        return cls(
            PredictorSpec(
                kind=pred.get("kind", "linear"),
                hidden=tuple(pred.get("hidden", ())),
                activation=pred.get("activation", "tanh"),
            ),
            Family(fam.get("name", "gaussian_known_var"), dict(fam.get("params", {}))),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LikelihoodModel":
        return cls.from_dict(json.loads(text))


def linear_model(family: str = "gaussian_known_var", **params) -> LikelihoodModel:
    return LikelihoodModel(PredictorSpec("linear"), Family(family, params))


def mlp_model(hidden=(50,), family: str = "gaussian_sse", **params) -> LikelihoodModel:
    return LikelihoodModel(PredictorSpec("mlp", tuple(hidden)), Family(family, params))


def load_model(path) -> LikelihoodModel:
    return LikelihoodModel.from_json(Path(path).read_text())


@functools.lru_cache(maxsize=64)
def _layout(sizes: tuple) -> tuple:
    out, off = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        out.append((off, a + 1, b))
        off += (a + 1) * b
    return tuple(out)


def _as_param(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return theta


# --------------------------------------------------------------------------- #
# Forward / backward passes
# --------------------------------------------------------------------------- #


def _forward(blocks, x):
    """Return the output and the list of layer inputs (activations)."""
    acts = [x]
    a = x
    last = len(blocks) - 1
    for l, blk in enumerate(blocks):
        z = a @ blk[1:] + blk[0]
        a = z if l == last else np.tanh(z)
        acts.append(a)
    return a, acts


def _backward(blocks, acts, delta):
    """Gradient of ``sum(delta * output)`` wrt the flat parameter vector."""
    d = sum(b.size for b in blocks)
    flat = np.empty(d)
    off = d
    for l in range(len(blocks) - 1, -1, -1):
        blk = blocks[l]
        off -= blk.size
        g = flat[off:off + blk.size].reshape(blk.shape)
        g[0] = delta.sum(axis=0)
        np.matmul(acts[l].T, delta, out=g[1:])
        if l > 0:
            delta = (delta @ blk[1:].T) * (1.0 - acts[l] * acts[l])
    return flat


def _backward_rows(blocks, acts, delta):
    """Per-row gradients, shape ``(n, d)``."""
    n = delta.shape[0]
    d = sum(b.size for b in blocks)
    out = np.empty((n, d))
    off = d
    for l in range(len(blocks) - 1, -1, -1):
        blk = blocks[l]
        off -= blk.size
        g = out[:, off:off + blk.size].reshape(n, blk.shape[0], blk.shape[1])
        g[:, 0, :] = delta
        g[:, 1:, :] = acts[l][:, :, None] * delta[:, None, :]
        if l > 0:
            delta = (delta @ blk[1:].T) * (1.0 - acts[l] * acts[l])
    return out


def _fast_hidden(model: LikelihoodModel) -> int:
    """Hidden width if the compiled one-hidden-layer kernels apply, else 0."""
    pred = model.predictor
    if _fastmlp is None or pred.kind != "mlp" or len(pred.hidden) != 1 or model.family.n_outputs != 1:
        return 0
    return pred.hidden[0]


def forward(model: LikelihoodModel, theta, x: np.ndarray) -> np.ndarray:
    """Raw predictor outputs ``(n, p)`` for a feature matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    blocks = model.unpack(theta, x.shape[1])
    h = _fast_hidden(model)
    if h:
        return _fastmlp.forward(_as_param(theta), x, h)[:, None]
    out, _ = _forward(blocks, x)
    return out


def predict(model: LikelihoodModel, theta, x) -> np.ndarray:
    """Forward pass ``h_theta(x)`` for a single feature vector; returns shape ``(p,)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise InvalidArgumentError("predict takes a single feature vector")
    return forward(model, theta, x[None, :])[0]


def output_jacobian(model: LikelihoodModel, theta, x: np.ndarray, output: int = 0,
                    response: bool = False) -> np.ndarray:
    """Rows ``d h_theta(x_j)[output] / d theta`` as an ``(m, d)`` array.

    With ``response=True`` the derivative is of the inverse-link mean instead
    of the raw output.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    blocks = model.unpack(theta, x.shape[1])
    h = _fast_hidden(model)
    if h and (not response or model.family.name in ("gaussian_known_var", "gaussian_sse")):
        return _fastmlp.jacobian(_as_param(theta), x, h)
    out, acts = _forward(blocks, x)
    delta = np.zeros_like(out)
    delta[:, output] = 1.0
    if response:
        fam = model.family.name
        if fam == "bernoulli_logit":
            p = _sigmoid(out[:, output])
            delta[:, output] = p * (1 - p)
        elif fam == "poisson_log":
            delta[:, output] = np.exp(out[:, output])
        elif fam == "categorical_softmax":
            p = _softmax_rows(out)
            delta = -p * p[:, [output]]
            delta[:, output] += p[:, output]
    return _backward_rows(blocks, acts, delta)


def _check_data(model: LikelihoodModel, data: Dataset):
    if not isinstance(data, Dataset):
        raise InvalidArgumentError("data must be a Dataset")
    model.family.check_response(data.y)


def log_likelihood_rows(model: LikelihoodModel, theta, data: Dataset) -> np.ndarray:
    blocks = model.unpack(theta, data.n_features)
    eta, _ = _forward(blocks, data.x)
    with np.errstate(over="ignore", invalid="ignore"):
        return model.family.log_density(data.y, eta)


def log_likelihood(model: LikelihoodModel, theta, data: Dataset) -> float:
    """Summed log density; for ``gaussian_sse`` this is ``-SSE / 2``."""
    _check_data(model, data)
    rows = log_likelihood_rows(model, theta, data)
    total = float(np.sum(rows))
    if not math.isfinite(total):
        raise NumericFailureError("log-likelihood is not finite")
    return total


def grad_log_likelihood(model: LikelihoodModel, theta, data: Dataset) -> np.ndarray:
    _check_data(model, data)
    _, g = value_and_grad(model, theta, data)
    if not np.all(np.isfinite(g)):
        raise NumericFailureError("gradient is not finite")
    return g


def value_and_grad(model: LikelihoodModel, theta, data: Dataset) -> tuple[float, np.ndarray]:
    """Log-likelihood and its gradient from one forward pass (no response checks)."""
    blocks = model.unpack(theta, data.n_features)
    h = _fast_hidden(model)
    code = _fastmlp.CODES.get(model.family.name) if h else None
    if code is not None:
        return _fastmlp.value_and_grad(_as_param(theta), data.x, data.y, h, code, model.family.sigma2)
    eta, acts = _forward(blocks, data.x)
    with np.errstate(over="ignore", invalid="ignore"):
        val = float(np.sum(model.family.log_density(data.y, eta)))
        delta = model.family.d_eta(data.y, eta)
    g = _backward(blocks, acts, delta)
    return val, g


def hessian_log_likelihood(model: LikelihoodModel, theta, data: Dataset,
                           max_params: int = HESSIAN_MAX_PARAMS) -> np.ndarray:
    """Symmetric ``d x d`` Hessian of the summed log-likelihood.

    Linear predictors with scalar-output families use the closed form
    ``-X1' diag(w) X1``; everything else central-differences the analytic
    gradient with step ``1e-6 * (1 + |theta_j|)``.
    """
    _check_data(model, data)
    theta = _as_param(theta)
    d = model.n_params(data.n_features)
    if d > max_params:
        raise CapabilityError(f"Hessian requested for d={d} > cap {max_params}")
    if theta.shape[0] != d:
        raise InvalidArgumentError(f"parameter vector has length {theta.shape[0]}, model expects {d}")
    if model.predictor.kind == "linear" and model.family.n_outputs == 1:
        x1 = np.hstack([np.ones((data.n, 1)), data.x])
        eta = x1 @ theta[:, None]
        w = model.family.curvature(eta)
        h = -(x1.T * w) @ x1
    else:
        h = np.empty((d, d))
        for j in range(d):
            step = 1e-6 * (1.0 + abs(theta[j]))
            tp = theta.copy()
            tm = theta.copy()
            tp[j] += step
            tm[j] -= step
            h[:, j] = (grad_log_likelihood(model, tp, data) - grad_log_likelihood(model, tm, data)) / (2 * step)
    h = 0.5 * (h + h.T)
    if not np.all(np.isfinite(h)):
        raise NumericFailureError("Hessian is not finite")
    return h


def sigma2_hat(model: LikelihoodModel, theta_hat, data: Dataset) -> float:
    """Mean squared residual ``(1/n) sum (y - g(x))^2`` at a fitted parameter."""
    if model.family.name != "gaussian_sse":
        raise InvalidArgumentError("sigma2_hat is defined for the gaussian_sse family")
    if data.n == 0:
        raise InvalidArgumentError("empty dataset")
    r = data.y - forward(model, theta_hat, data.x)[:, 0]
    return float(np.mean(r * r))


def likelihood_scale(model: LikelihoodModel, theta_hat, data: Dataset) -> float:
    """Factor turning the stored objective into a log-likelihood-scale one.

    ``gaussian_sse`` stores ``-SSE/2``; dividing by the residual variance gives
    the Gaussian log-likelihood up to a constant. Other families return 1.
    """
    if model.family.name == "gaussian_sse":
        return sigma2_hat(model, theta_hat, data)
    return 1.0


def model_from_config(doc: dict[str, Any]) -> LikelihoodModel:
    return LikelihoodModel.from_dict(doc)
