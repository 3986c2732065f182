"""Config-driven experiments: intervals, coverage sweeps, lambda sweeps, runtime, Fisher extraction.

Every runner takes an :class:`ExperimentConfig` and returns a report dict
whose ``"config"`` entry is the resolved configuration. Writing files is left
to :func:`write_report` so the runners stay testable in memory.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone

import numpy as np

from . import models as M
from . import synthdata as sd
from .baselines import (
    BootstrapConfig,
    DGPOracleConfig,
    bootstrap_variance,
    delta_method_variance,
    true_sampling_variance,
)
from .errors import IDMError, InvalidArgumentError, ReplicateFailureError
from .estimators import (
    EvalFn,
    auto_lambda,
    combined_variance,
    confidence_interval,
    eval_set_variance,
    fisher_inverse_idm,
    fit_mle,
    mv_fdidm,
    sg_fdidm,
    variance,
)
from .models import Dataset, LikelihoodModel
from .optim import FitResult, OptimizerConfig
from .rng import derive_seed

log = logging.getLogger(__name__)

EXPERIMENTS = ("interval", "coverage", "convergence", "runtime", "fisher")


def _strict(cls, doc, label):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgumentError(f"unknown {label} keys: {sorted(unknown)}")
    return cls(**doc)


@dataclass(frozen=True)
class IDMSettings:
    """``lam`` is a number or ``"auto"`` (JSON key ``lambda``).

    ``regularized`` holds optimizer overrides applied to the regularised fits
    only (e.g. a different ``max_iters``). ``restart`` picks where those fits
    start: ``"warm"`` (the base fit) or ``"init"`` (the base fit's own
    starting point, replaying training on the tilted objective).
    """

    lam: float | str = "auto"
    beta: float = 0.95
    central_diff: bool = False
    S: int = 1
    eval_set: bool = True
    independent_eval: bool = True
    regularized: dict = field(default_factory=dict)
    restart: str = "warm"

    def __post_init__(self):
        if self.restart not in ("warm", "init"):
            raise InvalidArgumentError("idm.restart must be 'warm' or 'init'")
        if not (self.lam == "auto" or (isinstance(self.lam, (int, float)) and self.lam > 0)):
            raise InvalidArgumentError("idm.lambda must be a positive number or 'auto'")
        if not 0.0 < self.beta < 1.0:
            raise InvalidArgumentError("idm.beta must be in (0, 1)")
        if self.S < 1:
            raise InvalidArgumentError("idm.S must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return _strict(cls, doc, "idm")

    def to_dict(self):
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc


@dataclass(frozen=True)
class EvalSettings:
    """Which evaluation to study.

    ``kind`` is one of the :func:`idm.synthdata.make_eval_fn` kinds.
    ``holdout_fraction`` splits the generated data for
    ``holdout_avg_cross_entropy``; ``avg_unmet_demand`` uses the newsvendor
    task's own evaluation set.
    """

    kind: str = "point_prediction"
    x0: list | None = None
    points: list | None = None
    response: bool = True
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class BaselineSettings:
    delta: bool = False
    bootstrap: BootstrapConfig | None = None
    simulation: DGPOracleConfig | None = None

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        unknown = set(doc) - {"delta", "bootstrap", "simulation"}
        if unknown:
            raise InvalidArgumentError(f"unknown baselines keys: {sorted(unknown)}")
        boot = doc.get("bootstrap")
        sim = doc.get("simulation")
        return cls(
            bool(doc.get("delta", False)),
            _strict(BootstrapConfig, boot, "bootstrap") if boot is not None else None,
            _strict(DGPOracleConfig, sim, "simulation") if sim is not None else None,
        )

    def to_dict(self):
        return {
            "delta": self.delta,
            "bootstrap": self.bootstrap.to_dict() if self.bootstrap else None,
            "simulation": self.simulation.to_dict() if self.simulation else None,
        }


@dataclass(frozen=True)
class SweepSettings:
    """Replicate settings for coverage and convergence runs.

    ``grid`` lists evaluation points for coverage (one interval per point per
    replicate). ``target`` chooses the coverage target for the newsvendor
    task: ``"sample"`` is the evaluation-set average at the true order rule,
    ``"population"`` its expectation (the interval then adds the
    evaluation-set variance).
    """

    R: int = 50
    grid: list | None = None
    n_values: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    max_failure_rate: float = 0.05
    target: str = "sample"

    def __post_init__(self):
        if self.R < 2:
            raise InvalidArgumentError("sweep.R must be >= 2")
        if self.target not in ("sample", "population"):
            raise InvalidArgumentError("sweep.target must be 'sample' or 'population'")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "interval"
    dgp: sd.DGPSpec = field(default_factory=sd.DGPSpec)
    model: LikelihoodModel | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    idm: IDMSettings = field(default_factory=IDMSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    baselines: BaselineSettings = field(default_factory=BaselineSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    output: str = "idm_result"
    root_seed: int = 0
    data_csv: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidArgumentError(f"unknown experiment {self.experiment!r}")
        if self.model is None:
            object.__setattr__(self, "model", default_model(self.dgp))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        dgp = sd.DGPSpec.from_dict(doc.get("dgp") or {})
        model = LikelihoodModel.from_dict(doc["model"]) if doc.get("model") else None
        return cls(
            experiment=doc.get("experiment", "interval"),
            dgp=dgp,
            model=model,
            optimizer=OptimizerConfig.from_dict(doc.get("optimizer")),
            idm=IDMSettings.from_dict(doc.get("idm")),
            eval=_strict(EvalSettings, doc.get("eval"), "eval"),
            baselines=BaselineSettings.from_dict(doc.get("baselines")),
            sweep=_strict(SweepSettings, doc.get("sweep"), "sweep"),
            output=doc.get("output", "idm_result"),
            root_seed=int(doc.get("root_seed", 0)),
            data_csv=doc.get("data_csv"),
        )

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "dgp": self.dgp.to_dict(),
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "idm": self.idm.to_dict(),
            "eval": asdict(self.eval),
            "baselines": self.baselines.to_dict(),
            "sweep": asdict(self.sweep),
            "output": self.output,
            "root_seed": self.root_seed,
            "data_csv": self.data_csv,
        }

    def reg_optimizer(self) -> OptimizerConfig:
        return self.optimizer.with_(**self.idm.regularized) if self.idm.regularized else self.optimizer

    def reg_start(self, data: Dataset):
        """Starting point for regularised fits (``None`` means warm start)."""
        if self.idm.restart == "warm":
            return None
        return self.model.init_params(data.n_features, self.optimizer.seed)


def default_model(dgp: sd.DGPSpec) -> LikelihoodModel:
    """The model each task is paired with when a config does not name one."""
    if dgp.kind in ("quadratic", "sin"):
        return M.mlp_model((50,), "gaussian_sse")
    if dgp.kind == "logistic_class":
        return M.linear_model("bernoulli_logit")
    if dgp.kind == "newsvendor":
        return sd.newsvendor_model(dgp)
    return M.linear_model("gaussian_known_var", sigma2=dgp.noise_scale ** 2)


# --------------------------------------------------------------------------- #
# Config documents
# --------------------------------------------------------------------------- #


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON when they can."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise InvalidArgumentError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            if node.get(k) is None:
                node[k] = {}
            node = node[k]
            if not isinstance(node, dict):
                raise InvalidArgumentError(f"override path {path!r} crosses a non-object value")
        node[keys[-1]] = _parse_value(raw)
    return doc


def load_config(path: str | None = None, overrides=(), doc: dict | None = None) -> ExperimentConfig:
    if doc is None:
        with open(path) as fh:
            doc = json.load(fh)
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))


# --------------------------------------------------------------------------- #
# Task construction
# --------------------------------------------------------------------------- #


@dataclass
class Task:
    """One replicate's training data, evaluation and coverage targets."""

    train: Dataset
    psi: EvalFn
    targets: np.ndarray | None  # psi_0 per component, when known
    population: float | None = None


def _targets(cfg: ExperimentConfig, psi: EvalFn, pts) -> np.ndarray | None:
    dgp = cfg.dgp
    if dgp.kind in ("quadratic", "sin", "gaussian_mean"):
        if dgp.kind == "gaussian_mean":
            return np.full(psi.k, dgp.mean)
        return sd.regression_truth(dgp, np.asarray(pts, dtype=float).reshape(-1))
    if dgp.kind == "logistic_class":
        theta0 = np.asarray(dgp.theta0 if dgp.theta0 is not None else sd.default_logistic_theta0(dgp.d))
        try:
            return psi(theta0)
        except IDMError:
            return None
    return None


def build_task(cfg: ExperimentConfig, seed: int, n: int | None = None) -> Task:
    dgp = cfg.dgp.with_(seed=seed, n=n or cfg.dgp.n)
    ev = cfg.eval
    model = cfg.model
    if dgp.kind == "newsvendor":
        train, psi, eval_data = sd.gen_newsvendor(dgp, model)
        theta0 = sd.newsvendor_theta0(dgp.noise_scale)
        return Task(train, psi, np.array([psi.scalar(theta0)]),
                    sd.newsvendor_expected_unmet(theta0, dgp.noise_scale))
    data = load_dataset(cfg) if cfg.data_csv else sd.generate(dgp)
    if ev.kind == "holdout_avg_cross_entropy":
        train, held = sd.holdout_split(data, ev.holdout_fraction, derive_seed(seed, 1))
        return Task(train, sd.make_eval_fn(ev.kind, model, eval_data=held), None)
    if ev.kind == "point_prediction":
        x0 = ev.x0 if ev.x0 is not None else [0.0] * data.n_features
        psi = sd.make_eval_fn(ev.kind, model, x0=x0, response=ev.response)
        pts = [x0]
    elif ev.kind == "prediction_grid":
        pts = ev.points if ev.points is not None else cfg.sweep.grid
        psi = sd.make_eval_fn(ev.kind, model, points=pts, response=ev.response)
    else:
        raise InvalidArgumentError(f"evaluation {ev.kind!r} is not available for dgp {dgp.kind!r}")
    targets = None if cfg.data_csv else _targets(cfg, psi, pts)
    return Task(data, psi, targets)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return M.load_csv(cfg.data_csv)


def resolve_lambda(cfg: ExperimentConfig, data: Dataset, fit: FitResult) -> float:
    if cfg.idm.lam == "auto":
        return auto_lambda(cfg.model, data, fit)
    return float(cfg.idm.lam)


def worker_count() -> int:
    env = os.environ.get("IDM_THREADS")
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if env:
        try:
            return max(1, min(int(env), avail))
        except ValueError:
            raise InvalidArgumentError(f"IDM_THREADS must be an integer, got {env!r}") from None
    return avail


def _map(fn, items, workers=None):
    """Ordered map over replicates, optionally on a thread pool."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _cov_json(cov) -> dict:
    doc = cov.to_dict()
    doc["fit_count"] = cov.fit_count
    return doc


# --------------------------------------------------------------------------- #
# interval
# --------------------------------------------------------------------------- #


def _idm_block(cfg, task, fit, lam):
    """FDIDM result for one task; returns (json block, per-component variance, diagnostics)."""
    model, data, psi = cfg.model, task.train, task.psi
    reg_cfg = cfg.reg_optimizer()
    beta = cfg.idm.beta
    diags = []
    if psi.k > 1:
        cov = mv_fdidm(model, data, psi, lam, fit, reg_cfg, max_workers=worker_count())
        psi_hat = psi(fit.theta)
        var = np.diag(cov.values).copy()
        ivs = [confidence_interval(float(psi_hat[i]), float(var[i]), beta) for i in range(psi.k)]
        if np.any(var < 0):
            diags.append("raw_negative")
        block = {
            "psi_hat": psi_hat.tolist(),
            "lambda": lam,
            "var_fdidm": var.tolist(),
            "covariance": _cov_json(cov),
            "interval": [iv.to_dict() for iv in ivs],
            "diagnostics": {"raw_negative": bool(np.any(var < 0)), "fit_iters": cov.meta["fit_iters"]},
            "fit_count": cov.fit_count + 1,
        }
        return block, var, diags
    est = variance(model, data, psi, lam, fit, reg_cfg, central=cfg.idm.central_diff, start=cfg.reg_start(data))
    v_eval = None
    total = est.clamped
    if cfg.idm.eval_set and psi.unit_form is not None:
        v_eval = eval_set_variance(psi, fit.theta)
        total = combined_variance(est.clamped, v_eval, cfg.idm.independent_eval)
    iv = confidence_interval(est.psi_base, total, beta)
    iv = replace(iv, clamped=est.value < 0)
    if est.raw_negative:
        diags.append("raw_negative")
    block = {
        "psi_hat": est.psi_base,
        "lambda": lam,
        "var_fdidm": est.value,
        "var_eval_set": v_eval,
        "interval": iv.to_dict(),
        "diagnostics": {"raw_negative": bool(est.raw_negative), "fit_iters": list(est.fit_iters),
                        "displacement": est.displacement},
        "fit_count": est.fit_count + 1,
    }
    return block, np.array([est.value]), diags


def _baseline_block(cov, psi_hat, beta, fit_count):
    var = np.diag(cov.values)
    ivs = [confidence_interval(float(psi_hat[i]), float(var[i]), beta).to_dict() for i in range(var.shape[0])]
    return {
        "method": cov.meta["method"],
        "psi_hat": psi_hat.tolist() if psi_hat.shape[0] > 1 else float(psi_hat[0]),
        "variance": var.tolist() if var.shape[0] > 1 else float(var[0]),
        "covariance": _cov_json(cov),
        "interval": ivs if len(ivs) > 1 else ivs[0],
        "fit_count": fit_count,
    }


def run_interval(cfg: ExperimentConfig) -> dict:
    """Fit, then FDIDM plus any enabled baselines on one dataset."""
    task = build_task(cfg, cfg.dgp.seed)
    model, data, psi = cfg.model, task.train, task.psi
    stage = "fit"
    diags = []
    try:
        if cfg.optimizer.method == "adaptive_stochastic" and psi.k == 1 and psi.differentiable:
            stage = "sg_fdidm"
            lam = float(cfg.idm.lam) if cfg.idm.lam != "auto" else None
            if lam is None:
                fit = fit_mle(model, data, cfg.optimizer)
                lam = resolve_lambda(cfg, data, fit)
            iv = sg_fdidm(model, data, psi, lam, cfg.optimizer, cfg.idm.S, cfg.idm.beta)
            methods = {"fdidm": {"psi_hat": iv.center, "lambda": lam, "var_fdidm": iv.variance,
                                 "var_eval_set": None, "interval": iv.to_dict(),
                                 "diagnostics": {"raw_negative": iv.clamped, "S": cfg.idm.S}, "fit_count": 2}}
            if iv.clamped:
                diags.append("raw_negative")
            fit = fit_mle(model, data, cfg.optimizer) if cfg.baselines.delta or cfg.baselines.bootstrap else None
        else:
            fit = fit_mle(model, data, cfg.optimizer)
            stage = "lambda"
            lam = resolve_lambda(cfg, data, fit)
            stage = "fdidm"
            block, _, d = _idm_block(cfg, task, fit, lam)
            diags += d
            methods = {"fdidm": block}
        psi_hat = psi(fit.theta) if fit is not None else None
        if cfg.baselines.delta:
            stage = "delta"
            cov = delta_method_variance(model, data, fit.theta, psi)
            methods["delta"] = _baseline_block(cov, psi_hat, cfg.idm.beta, 0)
        if cfg.baselines.bootstrap is not None:
            stage = "bootstrap"
            cov = bootstrap_variance(model, data, psi, cfg.optimizer, cfg.baselines.bootstrap, fit.theta)
            methods["bootstrap"] = _baseline_block(cov, psi_hat, cfg.idm.beta, cov.fit_count)
            if cov.meta["failures"]:
                diags.append("replicate_failures")
        if cfg.baselines.simulation is not None:
            stage = "simulation"
            if cfg.dgp.kind == "newsvendor" or cfg.data_csv:
                raise InvalidArgumentError("simulation needs a synthetic task with a fixed evaluation")
            cov = true_sampling_variance(cfg.dgp, data.n, model, psi, cfg.optimizer, cfg.baselines.simulation)
            methods["simulation"] = _baseline_block(cov, psi_hat if psi_hat is not None else psi(fit.theta),
                                                    cfg.idm.beta, cov.fit_count)
            if cov.meta["failures"]:
                diags.append("replicate_failures")
    except IDMError as exc:
        exc.stage = stage
        raise
    resolved = cfg.to_dict()
    resolved["idm"]["lambda"] = lam
    rows = []
    for name, b in methods.items():
        var = b.get("var_fdidm", b.get("variance"))
        ivs = b["interval"] if isinstance(b["interval"], list) else [b["interval"]]
        vals = var if isinstance(var, list) else [var]
        ph = b["psi_hat"] if isinstance(b["psi_hat"], list) else [b["psi_hat"]]
        for i, (v, iv) in enumerate(zip(vals, ivs)):
            rows.append({"method": name, "component": i, "psi_hat": ph[i], "variance": v,
                         "lo": iv["lo"], "hi": iv["hi"], "beta": iv["beta"], "fit_count": b["fit_count"]})
    return {"config": resolved, "methods": methods, "rows": rows, "diagnostics": sorted(set(diags))}


# --------------------------------------------------------------------------- #
# coverage
# --------------------------------------------------------------------------- #


def _coverage_points(cfg: ExperimentConfig):
    if cfg.eval.kind in ("point_prediction", "prediction_grid") and cfg.sweep.grid is not None:
        return [list(np.atleast_1d(np.asarray(p, dtype=float))) for p in cfg.sweep.grid]
    return [None]


def run_coverage(cfg: ExperimentConfig) -> dict:
    """R replicate datasets; one FDIDM interval per target per replicate; hit test."""
    if cfg.data_csv:
        raise InvalidArgumentError("coverage needs a synthetic task")
    points = _coverage_points(cfg)
    R = cfg.sweep.R
    beta = cfg.idm.beta
    reg_cfg = cfg.reg_optimizer()
    population = cfg.dgp.kind == "newsvendor" and cfg.sweep.target == "population"

    def replicate(r):
        seed = derive_seed(cfg.root_seed, r)
        out = []
        try:
            fit = None
            for p in points:
                pcfg = cfg if p is None else _with_eval(cfg, EvalSettings("point_prediction", p, None,
                                                                        cfg.eval.response))
                task = build_task(pcfg, seed)
                if task.targets is None:
                    raise InvalidArgumentError(f"no known coverage target for dgp {cfg.dgp.kind!r}")
                if fit is None:
                    fit = fit_mle(cfg.model, task.train, cfg.optimizer)
                    lam = resolve_lambda(cfg, task.train, fit)
                est = variance(cfg.model, task.train, task.psi, lam, fit, reg_cfg,
                               central=cfg.idm.central_diff, start=cfg.reg_start(task.train))
                v = est.clamped
                target = float(task.targets[0])
                if population:
                    v = combined_variance(v, eval_set_variance(task.psi, fit.theta), cfg.idm.independent_eval)
                    target = task.population
                iv = confidence_interval(est.psi_base, v, beta)
                hit = iv.contains(target)
                out.append({"psi0": target, "psi_hat": est.psi_base, "var": est.value, "hit": hit,
                            "width": iv.width, "raw_negative": est.raw_negative, "lambda": lam})
        except IDMError as exc:
            log.warning("coverage replicate %d failed: %s", r, exc)
            return None
        return out

    results = _map(replicate, range(R))
    failures = sum(1 for res in results if res is None)
    if failures > cfg.sweep.max_failure_rate * R:
        raise ReplicateFailureError(f"{failures}/{R} coverage replicates failed", failures, R)
    good = [res for res in results if res is not None]
    rows = []
    for j, p in enumerate(points):
        hits = sum(res[j]["hit"] for res in good)
        reps = len(good)
        psi0 = [res[j]["psi0"] for res in good]
        fixed = len(set(psi0)) == 1
        rows.append({
            "target": j if p is None else ",".join(f"{v:g}" for v in p),
            "psi0": psi0[0] if fixed else float(np.mean(psi0)),
            "psi0_mode": "fixed" if fixed else "per_replicate_mean",
            "replicates": reps,
            "hits": int(hits),
            "coverage": hits / reps,
            "mean_width": float(np.mean([res[j]["width"] for res in good])),
            "mean_var": float(np.mean([res[j]["var"] for res in good])),
        })
    total_hits = sum(r["hits"] for r in rows)
    total = sum(r["replicates"] for r in rows)
    negatives = sum(res[j]["raw_negative"] for res in good for j in range(len(points)))
    all_var = np.array([res[j]["var"] for res in good for j in range(len(points))], dtype=float)
    lams = sorted({round(res[0]["lambda"], 12) for res in good})
    diags = []
    if negatives:
        diags.append("raw_negative")
    if failures:
        diags.append("replicate_failures")
    resolved = cfg.to_dict()
    resolved["idm"]["lambda"] = cfg.idm.lam if cfg.idm.lam != "auto" else {"auto": lams[:1] + lams[-1:]}
    return {
        "config": resolved,
        "rows": rows,
        "aggregate": {"hits": total_hits, "replicates": total, "coverage": total_hits / total,
                      "failures": failures, "raw_negative": int(negatives),
                      "min_var": float(np.min(all_var)), "nonfinite_var": int(np.sum(~np.isfinite(all_var)))},
        "diagnostics": diags,
    }


def _with_eval(cfg: ExperimentConfig, ev: EvalSettings) -> ExperimentConfig:
    out = copy.copy(cfg)
    object.__setattr__(out, "eval", ev)
    return out


# --------------------------------------------------------------------------- #
# convergence (lambda sweep)
# --------------------------------------------------------------------------- #


def run_convergence(cfg: ExperimentConfig) -> dict:
    """Squared error of FDIDM against the sampling variance, per (n, lambda).

    For each ``n`` the same ``R`` datasets are used for every lambda (common
    random numbers). The sampling variance at ``n`` is the sample variance
    of ``psi(theta_hat)`` over those ``R`` fits, so the replicates double as
    the simulation oracle. Squared errors are rescaled by ``n^2``.
    """
    sw = cfg.sweep
    if not sw.n_values or not sw.lambdas:
        raise InvalidArgumentError("convergence needs sweep.n_values and sweep.lambdas")
    reg_cfg = cfg.reg_optimizer()
    rows = []
    diags = set()
    for n in sw.n_values:
        n = int(n)

        def replicate(r, n=n):
            task = build_task(cfg, derive_seed(cfg.root_seed, n, r), n)
            if task.psi.k != 1:
                raise InvalidArgumentError("convergence sweeps take a scalar evaluation")
            try:
                fit = fit_mle(cfg.model, task.train, cfg.optimizer)
                psi_hat = task.psi.scalar(fit.theta)
                vals, neg = [], False
                for lam in sw.lambdas:
                    est = variance(cfg.model, task.train, task.psi, float(lam), fit, reg_cfg,
                                   central=cfg.idm.central_diff, start=cfg.reg_start(task.train))
                    vals.append(est.value)
                    neg = neg or est.raw_negative
                dm = float("nan")
                if cfg.baselines.delta:
                    dm = float(delta_method_variance(cfg.model, task.train, fit.theta, task.psi).values[0, 0])
            except IDMError as exc:
                log.warning("convergence replicate n=%d r=%d failed: %s", n, r, exc)
                return None
            return psi_hat, vals, dm, neg

        results = _map(replicate, range(sw.R))
        failures = sum(res is None for res in results)
        if failures > sw.max_failure_rate * sw.R:
            raise ReplicateFailureError(f"{failures}/{sw.R} replicates failed at n={n}", failures, sw.R)
        if failures:
            diags.add("replicate_failures")
        good = [res for res in results if res is not None]
        psi_hats = np.array([g[0] for g in good])
        true_var = float(np.var(psi_hats, ddof=1))
        est = np.array([g[1] for g in good])
        if any(g[3] for g in good):
            diags.add("raw_negative")
        methods = [("fdidm", float(lam), est[:, i]) for i, lam in enumerate(sw.lambdas)]
        if cfg.baselines.delta:
            methods.append(("delta", None, np.array([g[2] for g in good])))
        for name, lam, v in methods:
            se2 = n * n * (v - true_var) ** 2
            rows.append({
                "n": n, "method": name, "lambda": lam, "replicates": len(good), "true_var": true_var,
                "mean_var": float(np.mean(v)), "mse_n2": float(np.mean(se2)),
                "se_n2": float(np.std(se2, ddof=1) / math.sqrt(len(se2))),
            })
    return {"config": cfg.to_dict(), "rows": rows, "diagnostics": sorted(diags)}


# --------------------------------------------------------------------------- #
# runtime
# --------------------------------------------------------------------------- #


def run_runtime(cfg: ExperimentConfig) -> dict:
    """Wall-clock and fit counts: IDM (base fit + regularised fits) vs bootstrap refits."""
    if cfg.baselines.bootstrap is None:
        raise InvalidArgumentError("runtime comparison needs baselines.bootstrap")
    task = build_task(cfg, cfg.dgp.seed)
    model, data, psi = cfg.model, task.train, task.psi
    t0 = time.perf_counter()
    fit = fit_mle(model, data, cfg.optimizer)
    lam = resolve_lambda(cfg, data, fit)
    if psi.k > 1:
        cov = mv_fdidm(model, data, psi, lam, fit, cfg.reg_optimizer())
        idm_fits = cov.fit_count + 1
    else:
        est = variance(model, data, psi, lam, fit, cfg.reg_optimizer(), central=cfg.idm.central_diff,
                       start=cfg.reg_start(data))
        idm_fits = est.fit_count + 1
    t_idm = time.perf_counter() - t0
    t0 = time.perf_counter()
    boot = bootstrap_variance(model, data, psi, cfg.optimizer, cfg.baselines.bootstrap, fit.theta)
    t_boot = time.perf_counter() - t0
    rows = [
        {"method": "fdidm", "fit_count": idm_fits, "seconds": t_idm},
        {"method": "bootstrap", "fit_count": boot.fit_count, "seconds": t_boot},
    ]
    resolved = cfg.to_dict()
    resolved["idm"]["lambda"] = lam
    diags = ["replicate_failures"] if boot.meta["failures"] else []
    return {"config": resolved, "rows": rows, "diagnostics": diags}


# --------------------------------------------------------------------------- #
# fisher
# --------------------------------------------------------------------------- #


def run_fisher(cfg: ExperimentConfig) -> dict:
    """Inverse Fisher information from coordinate-tilted refits vs direct Hessian inversion."""
    task = build_task(cfg, cfg.dgp.seed)
    model, data = cfg.model, task.train
    fit = fit_mle(model, data, cfg.optimizer)
    lam = 1.0 if cfg.idm.lam == "auto" else float(cfg.idm.lam)
    est = fisher_inverse_idm(model, data, fit, lam, cfg.reg_optimizer())
    direct = direct_fisher_inverse(model, data, fit.theta)
    rel = float(np.linalg.norm(est - direct) / np.linalg.norm(direct))
    resolved = cfg.to_dict()
    resolved["idm"]["lambda"] = lam
    return {
        "config": resolved,
        "fisher_inverse_idm": est.tolist(),
        "fisher_inverse_direct": direct.tolist(),
        "frobenius_rel_error": rel,
        "fit_count": est.shape[0] + 1,
        "diagnostics": [],
    }


def direct_fisher_inverse(model: LikelihoodModel, data: Dataset, theta) -> np.ndarray:
    """``(-H / (n * scale))^{-1}`` from the log-likelihood Hessian."""
    h = M.hessian_log_likelihood(model, theta, data)
    scale = M.likelihood_scale(model, theta, data)
    return np.linalg.inv(-h / (data.n * scale))


RUNNERS = {
    "interval": run_interval,
    "coverage": run_coverage,
    "convergence": run_convergence,
    "runtime": run_runtime,
    "fisher": run_fisher,
}


def run(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.experiment](cfg)


# --------------------------------------------------------------------------- #
# Output
# --------------------------------------------------------------------------- #


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    cols = list(rows[0])
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float)
                             else row.get(k)) for k in cols})
    return buf.getvalue()


def write_report(report: dict, prefix: str, started: float, finished: float) -> list[str]:
    """Write ``prefix.json``, ``prefix.csv`` (when the report has rows) and ``prefix.meta.json``."""
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    paths = []
    with open(prefix + ".json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(prefix + ".json")
    if report.get("rows"):
        with open(prefix + ".csv", "w") as fh:
            fh.write(rows_to_csv(report["rows"]))
        paths.append(prefix + ".csv")
    meta = {
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.fromtimestamp(finished, timezone.utc).isoformat(),
        "elapsed_seconds": finished - started,
        "workers": worker_count(),
    }
    with open(prefix + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    paths.append(prefix + ".meta.json")
    return paths
