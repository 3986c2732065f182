"""End-to-end acceptance checks; each test records one PASS/FAIL line shown in the terminal summary."""
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from acceptance_log import record
from idm import harness
from idm import synthdata as sd
from idm.estimators import fdidm, fit_mle, mv_fdidm
from idm.models import Dataset, linear_model
from idm.optim import OptimizerConfig
from idm.rng import SplitMix64, derive_seed
from oracles import linear_prediction_cov

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
TIGHT = OptimizerConfig(convergence_tol=1e-12, max_iters=100_000)


def config(name, **overrides):
    sets = [f"{k}={v}" for k, v in overrides.items()]
    return harness.load_config(os.path.join(CONFIGS, name), sets)


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def rel(a, b):
    return abs(a - b) / abs(b)


# ----------------------------------------------------------------------------- 1


def test_criterion_1_quadratic_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for n in (50, 500):
        for d in (1, 3, 8):
            rng = SplitMix64(derive_seed(1, n, d))
            x = rng.normal(n * (d - 1)).reshape(n, d - 1)
            y = 0.5 + x @ np.linspace(-1, 1, d - 1) + 0.3 * rng.normal(n)
            m = linear_model("gaussian_known_var", sigma2=0.09)
            data = Dataset(x, y)
            fit = fit_mle(m, data, TIGHT)
            x0 = np.linspace(0.5, -0.5, d - 1)
            psi = sd.make_eval_fn("point_prediction", m, x0=x0)
            exact = linear_prediction_cov(x, [x0], 0.09)[0, 0]
            for lam in (0.01, 0.1, 1.0, 10.0):
                worst = max(worst, rel(fdidm(m, data, psi, lam, fit, TIGHT).value, exact))
    elapsed = time.perf_counter() - t0
    ok = record(1, worst <= 1e-6 and elapsed < 5.0,
                f"max relative error {worst:.2e} (tol 1e-6), {elapsed:.2f}s (< 5s)")
    assert ok


# ----------------------------------------------------------------------------- 2


def test_criterion_2_cross_oracle_quadrangle():
    report, elapsed = timed(harness.run, config("interval_logistic.json"))
    var = {row["method"]: row["variance"] for row in report["rows"]}
    names = ["fdidm", "delta", "bootstrap", "simulation"]
    worst = max(max(var[a], var[b]) / min(var[a], var[b]) - 1 for a in names for b in names if a < b)
    detail = ", ".join(f"{k} {var[k]:.3e}" for k in names)
    ok = record(2, worst <= 0.25 and elapsed < 120,
                f"{detail}; worst pairwise ratio - 1 = {worst:.3f} (tol 0.25), {elapsed:.0f}s (< 120s)")
    assert ok


# ----------------------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_coverage_calibration():
    main, t_main = timed(harness.run, config("coverage_quadratic.json"))
    aux, t_aux = timed(harness.run, config("coverage_gaussian_mean.json"))
    cov = main["aggregate"]["coverage"]
    cov_half = aux["aggregate"]["coverage"]
    ok = (0.88 <= cov <= 0.99 and t_main < 600 and 0.40 <= cov_half <= 0.60 and t_aux < 60)
    record(3, ok, f"quadratic MLP coverage {cov:.3f} in [0.88, 0.99] ({t_main:.0f}s < 600s); "
                  f"Gaussian-mean beta=0.5 coverage {cov_half:.3f} in [0.40, 0.60] ({t_aux:.1f}s < 60s)")
    assert ok


# ----------------------------------------------------------------------------- 4


def test_criterion_4_lambda_robustness():
    report, elapsed = timed(harness.run, config("convergence_quadratic.json"))
    cells = {(r["n"], r["method"], r["lambda"]): r["mse_n2"] for r in report["rows"]}
    small, mid, ref = cells[(400, "fdidm", 0.001)], cells[(400, "fdidm", 0.1)], cells[(400, "delta", None)]
    ratio = max(mid / ref, ref / mid)
    ok = record(4, ratio <= 3.0 and small > mid and elapsed < 600,
                f"n=400 n^2-scaled MSE: lambda=0.1 {mid:.3e}, delta {ref:.3e} (ratio {ratio:.2f} <= 3), "
                f"lambda=0.001 {small:.3e} > lambda=0.1; {elapsed:.0f}s (< 600s)")
    assert ok


# ----------------------------------------------------------------------------- 5


def _consistency_cell(n, seed, psi, v0):
    data = sd.gen_logistic_class(sd.DGPSpec("logistic_class", n=n, d=3, seed=seed))
    m = linear_model("bernoulli_logit")
    cfg = OptimizerConfig(convergence_tol=1e-10)
    fit = fit_mle(m, data, cfg)
    return abs(n * fdidm(m, data, psi, 1.0, fit, cfg).value - v0)


def test_criterion_5_consistency_trend():
    t0 = time.perf_counter()
    m = linear_model("bernoulli_logit")
    psi = sd.make_eval_fn("point_prediction", m, x0=[0.5, -0.5])
    theta0 = sd.default_logistic_theta0(3)
    g = psi.jacobian(theta0)[0]
    v0 = float(g @ np.linalg.solve(sd.logistic_population_fisher(theta0), g))
    medians, mads = [], []
    for n in (500, 1000, 2000, 4000):
        errs = np.array([_consistency_cell(n, derive_seed(5, n, s), psi, v0) for s in range(20)])
        med = float(np.median(errs))
        medians.append(med)
        mads.append(float(np.median(np.abs(errs - med))))
    elapsed = time.perf_counter() - t0
    rises = [i for i in range(3) if medians[i + 1] > medians[i]]
    within = all(medians[i + 1] - medians[i] <= mads[i + 1] for i in rises)
    ok = record(5, len(rises) <= 1 and within and elapsed < 300,
                "median |n V - V0| over n=500..4000: " + ", ".join(f"{v:.2e}" for v in medians)
                + f" (V0 {v0:.3e}, {len(rises)} inversion(s) within 1 MAD: {within}), {elapsed:.0f}s (< 300s)")
    assert ok


# ----------------------------------------------------------------------------- 6


def test_criterion_6_multivariate():
    t0 = time.perf_counter()
    rng = SplitMix64(6)
    x = rng.normal(200).reshape(100, 2)
    m = linear_model("gaussian_known_var", sigma2=0.5)
    data = Dataset(x, 1 + x @ [0.3, -0.7] + math.sqrt(0.5) * rng.normal(100))
    fit = fit_mle(m, data, TIGHT)
    pts = [[-1.0, 0.0], [0.0, 0.0], [0.5, 1.0], [2.0, -1.0]]
    psi = sd.make_eval_fn("prediction_grid", m, points=pts)
    cov = mv_fdidm(m, data, psi, 0.5, fit, TIGHT)
    entry = float(np.max(np.abs(cov.values - linear_prediction_cov(x, pts, 0.5))))
    diag = max(abs(cov.values[i, i] - fdidm(m, data, psi.component(i), 0.5, fit, TIGHT).value) for i in range(4))
    elapsed = time.perf_counter() - t0
    ok = record(6, entry <= 1e-6 and cov.fit_count == 4 and diag <= 1e-10 and elapsed < 10,
                f"max entry error {entry:.1e} (<= 1e-6), fits {cov.fit_count} (= 4), "
                f"diagonal gap {diag:.1e} (<= 1e-10), {elapsed:.2f}s (< 10s)")
    assert ok


# ----------------------------------------------------------------------------- 7


def test_criterion_7_fisher_inverse():
    report, elapsed = timed(harness.run, config("fisher_logistic.json"))
    err = report["frobenius_rel_error"]
    ok = record(7, err <= 0.01 and elapsed < 30,
                f"Frobenius relative error {err:.2e} (<= 1e-2), {elapsed:.1f}s (< 30s)")
    assert ok


# ----------------------------------------------------------------------------- 8


def test_criterion_8_nondifferentiable_newsvendor():
    report, elapsed = timed(harness.run, config("coverage_newsvendor.json"))
    agg = report["aggregate"]
    finite_nonneg = agg["nonfinite_var"] == 0 and agg["min_var"] >= 0 and agg["failures"] == 0
    ok = record(8, finite_nonneg and 0.88 <= agg["coverage"] <= 0.99 and elapsed < 900,
                f"{agg['replicates']} replicates, min variance {agg['min_var']:.2e}, "
                f"non-finite {agg['nonfinite_var']}, coverage {agg['coverage']:.3f} in [0.88, 0.99], "
                f"{elapsed:.0f}s (< 900s)")
    assert ok


# ----------------------------------------------------------------------------- 9


def test_criterion_9_cost_asymmetry():
    rows = {r["method"]: r for r in harness.run(config("runtime_logistic.json"))["rows"]}
    idm, boot = rows["fdidm"], rows["bootstrap"]
    ok = record(9, idm["fit_count"] == 2 and boot["fit_count"] == 50 and idm["seconds"] < boot["seconds"],
                f"fits IDM {idm['fit_count']} vs bootstrap {boot['fit_count']}; "
                f"wall-clock {idm['seconds']:.3f}s < {boot['seconds']:.3f}s")
    assert ok


# ----------------------------------------------------------------------------- 10

PROPERTY_TESTS = [
    "tests/test_models.py::test_gradient_matches_finite_differences",
    "tests/test_models.py::test_gradient_property",
    "tests/test_models.py::test_mlp_1x5_gradient_componentwise",
    "tests/test_estimators.py::test_nonnegative_at_exact_optima",
    "tests/test_estimators.py::test_tilted_evaluation_monotone_in_lambda",
    "tests/test_estimators.py::test_psd_project_idempotent",
    "tests/test_baselines.py::test_psd_project_properties",
    "tests/test_optim.py::test_determinism_bitwise",
    "tests/test_optim.py::test_stochastic_determinism",
    "tests/test_harness.py::test_cli_writes_byte_identical_outputs",
]


def test_criterion_10_property_suites_standalone():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = record(10, proc.returncode == 0 and elapsed < 120, f"{summary} ({elapsed:.0f}s < 120s)")
    assert ok, proc.stdout[-3000:]
