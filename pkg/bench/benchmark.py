"""Compare the compiled and pure-Python kernel backends.

Usage: python3 bench/benchmark.py [--repeat N] [--json out.json]

Times the single-column kernels (likelihood evaluation, GLS solve, response
statistics, a full REML fit) and a complete bootstrap run on simulated data
from each study setting, under both backends.
"""
import argparse
import json
import time

import numpy as np

from lmmboot import _backend
from lmmboot.bootstrap import BootstrapConfig, run_bootstrap
from lmmboot.estimation import RemlConfig, design_of, fit_response, floors, reml_fit
from lmmboot.rng import stream
from lmmboot.simulation import DgpConfig, generate_dgp


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(setting, repeat):
    data, _, target = generate_dgp(DgpConfig(setting=setting), stream(2024, 99, 0))
    design = design_of(data)
    resp = design.response(data.y)
    fit = reml_fit(data)
    se2, su2 = fit.delta_hat.as_tuple()
    cfg = RemlConfig()
    y_var = float(np.var(data.y, ddof=1))
    fe, fu = floors(y_var, cfg)
    inner = 200
    return {
        "neg_loglik x200": lambda: [design.neg_loglik(resp, se2, su2) for _ in range(inner)],
        "gls_solve x200": lambda: [design.gls(resp, se2, su2) for _ in range(inner)],
        "response_stats x200": lambda: [design.response(data.y) for _ in range(inner)],
        "reml fit x20": lambda: [fit_response(design, resp, cfg, fe, fu, y_var) for _ in range(20)],
        "bootstrap B=100": lambda: run_bootstrap(data, fit, target, BootstrapConfig(b_outer=100, seed=1)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write timings to this file")
    ap.add_argument("--settings", default="s1,s2,s3")
    args = ap.parse_args()
    if "compiled" not in _backend.available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    results = []
    print(f"{'setting':8} {'case':22} {'compiled [ms]':>14} {'python [ms]':>12} {'speedup':>8}")
    for setting in args.settings.split(","):
        timings = {}
        for be in ("compiled", "python"):
            with _backend.using(be):
                fns = cases(setting, args.repeat)
                timings[be] = {name: best_of(fn, args.repeat) for name, fn in fns.items()}
        for name in timings["compiled"]:
            c, p = timings["compiled"][name], timings["python"][name]
            results.append({"setting": setting, "case": name, "compiled_s": c, "python_s": p})
            print(f"{setting:8} {name:22} {1e3 * c:14.2f} {1e3 * p:12.2f} {p / c:8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
