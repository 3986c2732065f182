"""Run the bundled experiment configs and print a one-line summary for each.

    python scripts/run_experiments.py                   # every config in configs/
    python scripts/run_experiments.py coverage_quadratic interval_logistic --out results
"""
import argparse
import glob
import os
import sys
import time

from idm import harness

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def summarize(report: dict) -> str:
    kind = report["config"]["experiment"]
    if kind == "coverage":
        agg = report["aggregate"]
        return f"coverage {agg['coverage']:.3f} ({agg['hits']}/{agg['replicates']})"
    if kind == "fisher":
        return f"Frobenius relative error {report['frobenius_rel_error']:.2e}"
    if kind == "convergence":
        n_max = max(r["n"] for r in report["rows"])
        cells = [f"{r['method']}:{r['lambda']}={r['mse_n2']:.2e}" for r in report["rows"] if r["n"] == n_max]
        return f"n={n_max} " + " ".join(cells)
    if kind == "runtime":
        return " ".join(f"{r['method']} {r['fit_count']} fits {r['seconds']:.3f}s" for r in report["rows"])
    return " ".join(f"{r['method']} {r['variance']:.3e}" for r in report["rows"])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help="config names without .json (default: all)")
    p.add_argument("--configs", default=os.path.join(ROOT, "configs"))
    p.add_argument("--out", default=os.path.join(ROOT, "results"))
    p.add_argument("--set", action="append", default=[], dest="sets", metavar="KEY=VALUE")
    args = p.parse_args(argv)

    paths = ([os.path.join(args.configs, f"{n}.json") for n in args.names]
             or sorted(glob.glob(os.path.join(args.configs, "*.json"))))
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        cfg = harness.load_config(path, args.sets)
        started = time.time()
        report = harness.run(cfg)
        finished = time.time()
        harness.write_report(report, os.path.join(args.out, name), started, finished)
        print(f"{name:28s} {finished - started:7.1f}s  {summarize(report)}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
