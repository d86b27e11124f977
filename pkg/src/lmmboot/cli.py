"""Command-line interface: ``lmmboot {fit,intervals,simulate,test}``.

Every subcommand accepts ``--config`` pointing at a YAML or JSON file whose
keys mirror the long options (with underscores).  Options given on the
command line win over the file.  Unknown keys are rejected.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .bootstrap import BootstrapConfig, BootstrapFailure, reference_sigma2, run_bootstrap, save_distribution
from .estimation import RemlConfig, predict_theta, reml_fit
from .inference import asymptotic_intervals, bootstrap_intervals, hypothesis_test
from .model import (
    ClusteredDataset,
    ConvergenceError,
    DataValidationError,
    MixedEffectTarget,
    build_random_intercept,
)
from .simulation import PRESETS, StudyFailure, format_report, run_preset
from .variability import SIGMA_CHOICES

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class InputIOError(OSError):
    pass


# -- option schema --------------------------------------------------------------

def _list(v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    if isinstance(v, (list, tuple)):
        return [str(s) for s in v]
    raise ConfigError(f"expected a list, got {v!r}")


def _int(v):
    if isinstance(v, bool) or not isinstance(v, (int, str)):
        raise ConfigError(f"expected an integer, got {v!r}")
    return int(v)


COMMON = {
    "cluster_column": (str, "cluster"),
    "response_column": (str, "y"),
    "covariates": (_list, None),
    "likelihood": (str, "reml"),
    "optimizer": (str, "nelder_mead_log_scale"),
    "max_iterations": (_int, 200),
    "rel_tolerance": (float, 1e-9),
    "output": (str, None),
}
BOOT = {
    "alpha": (float, 0.05),
    "seed": (_int, None),
    "b_outer": (_int, 1000),
    "c_inner": (_int, 1),
    "sigma_choice": (str, "g1"),
    "scaling_mode": (str, "scalar_moment_match"),
    "studentize_at": (str, "delta_star"),
    "workers": (_int, 1),
}
SCHEMAS = {
    "fit": dict(COMMON),
    "intervals": {**COMMON, **BOOT, "methods": (_list, ["semiparametric"]), "dump": (str, None)},
    "test": {**COMMON, **BOOT, "scheme": (str, "semiparametric"), "contrasts": (str, None)},
    "simulate": {
        "preset": (str, "smoke"), "s_runs": (_int, None), "b_boot": (_int, None), "seed": (_int, None),
        "alpha": (float, 0.05), "workers": (_int, 1), "sigma_choices": (_list, None),
        "settings": (_list, None), "output_dir": (str, "."),
    },
}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path}: top level must be a mapping")
    return data


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and command-line options, validating keys and types."""
    schema = SCHEMAS[command]
    file_opts = _load_config(getattr(args, "config", None))
    unknown = sorted(set(file_opts) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    opts = {}
    for key, (conv, default) in schema.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_opts.get(key, default)
        if value is not None:
            try:
                value = conv(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"option '{key}': {exc}") from None
        opts[key] = value
    return opts


# -- CSV input --------------------------------------------------------------------

def _number(text: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataValidationError(f"line {line}: column '{column}': cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataValidationError(f"line {line}: column '{column}': value {text!r} is not finite")
    return v


def read_dataset(path: str, cluster_column: str = "cluster", response_column: str = "y",
                 covariates: list[str] | None = None) -> tuple[ClusteredDataset, list[str]]:
    """Random-intercept dataset from a CSV file with a header row.

    Without ``covariates`` every column other than the cluster and response
    columns is used, in file order.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        for col in (cluster_column, response_column):
            if col not in header:
                raise DataValidationError(f"line 1: missing required column '{col}'")
        if covariates is None:
            covariates = [h for h in header if h not in (cluster_column, response_column)]
        missing = [c for c in covariates if c not in header]
        if missing:
            raise DataValidationError(f"line 1: missing covariate column(s) {', '.join(missing)}")
        ic = header.index(cluster_column)
        iy = header.index(response_column)
        ix = [header.index(c) for c in covariates]
        rows = []
        for rec in reader:
            line = reader.line_num
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise DataValidationError(f"line {line}: expected {len(header)} fields, got {len(rec)}")
            cid = rec[ic].strip()
            if not cid:
                raise DataValidationError(f"line {line}: empty cluster id")
            rows.append((cid, _number(rec[iy].strip(), line, response_column),
                         [_number(rec[i].strip(), line, header[i]) for i in ix]))
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    return build_random_intercept(rows), list(covariates)


def read_contrasts(path: str, cluster_ids) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Contrast matrix from a CSV with columns ``label``, ``c`` and one column per cluster id.

    Clusters without a column get weight 0.
    """
    ids = [str(c) for c in cluster_ids]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty contrast file") from None
        if "c" not in header:
            raise DataValidationError(f"{path} line 1: missing column 'c'")
        cols = [h for h in header if h not in ("label", "c")]
        unknown = [h for h in cols if h not in ids]
        if unknown:
            raise DataValidationError(f"{path} line 1: unknown cluster id(s) {', '.join(unknown)}")
        rows, cs, labels = [], [], []
        for rec in reader:
            line = reader.line_num
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise DataValidationError(f"{path} line {line}: expected {len(header)} fields, got {len(rec)}")
            row = np.zeros(len(ids))
            for h, v in zip(header, rec):
                if h == "label":
                    continue
                if h == "c":
                    cs.append(_number(v.strip(), line, "c"))
                else:
                    row[ids.index(h)] = _number(v.strip(), line, h)
            labels.append(rec[header.index("label")].strip() if "label" in header else f"H{len(rows) + 1}")
            rows.append(row)
    if not rows:
        raise DataValidationError(f"{path}: no contrast rows")
    return np.array(rows), np.array(cs), labels


# -- output helpers -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def _write_csv(path: str | None, header, rows) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc.strerror}") from None


def _reml_config(opts) -> RemlConfig:
    try:
        return RemlConfig(max_iterations=opts["max_iterations"], rel_tolerance=opts["rel_tolerance"],
                          optimizer=opts["optimizer"], likelihood=opts["likelihood"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _boot_config(opts, scheme, sigma_choice=None) -> BootstrapConfig:
    if opts["seed"] is None:
        raise ConfigError("a --seed is required for bootstrap commands")
    try:
        return BootstrapConfig(b_outer=opts["b_outer"], c_inner=opts["c_inner"], alpha=opts["alpha"],
                               scheme=scheme, sigma_choice=sigma_choice or opts["sigma_choice"],
                               seed=opts["seed"], scaling_mode=opts["scaling_mode"],
                               studentize_at=opts["studentize_at"], workers=opts["workers"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load(args, opts):
    data, covs = read_dataset(args.data, opts["cluster_column"], opts["response_column"], opts["covariates"])
    return data, covs


# -- commands ---------------------------------------------------------------------

def cmd_fit(args) -> int:
    opts = resolve_options("fit", args)
    data, covs = _load(args, opts)
    fit = reml_fit(data, _reml_config(opts))
    report = {
        "m": data.m, "n": data.n,
        "fixed_effects": dict(zip(["intercept"] + covs, map(float, fit.beta_hat))),
        "sigma_e2": fit.delta_hat.sigma_e2, "sigma_u2": fit.delta_hat.sigma_u2,
        "log_likelihood": fit.reml_loglik, "likelihood": fit.likelihood,
        "boundary": fit.boundary_flag, "iterations": fit.iterations,
        "random_effects": {str(cid): float(u[0]) for cid, u in zip(data.cluster_ids, fit.u_hat)},
    }
    out = opts["output"]
    if out and out.endswith(".csv"):
        rows = [("beta", name, v) for name, v in report["fixed_effects"].items()]
        rows += [("delta", "sigma_e2", report["sigma_e2"]), ("delta", "sigma_u2", report["sigma_u2"]),
                 ("fit", "log_likelihood", report["log_likelihood"]), ("fit", "boundary", report["boundary"]),
                 ("fit", "m", data.m)]
        rows += [("u", cid, v) for cid, v in report["random_effects"].items()]
        _write_csv(out, ["kind", "name", "value"], rows)
    else:
        _write_text(out, json.dumps(report, indent=2) + "\n")
    return EXIT_OK


INTERVAL_HEADER = ["method", "kind", "cluster", "center", "sigma", "critical", "lower", "upper",
                   "sigma_choice", "replicates", "failed_replicates"]


def cmd_intervals(args) -> int:
    opts = resolve_options("intervals", args)
    methods = opts["methods"]
    for m in methods:
        if m not in ("asymptotic", "semiparametric", "parametric"):
            raise ConfigError(f"unknown method {m!r}")
    data, _ = _load(args, opts)
    reml = _reml_config(opts)
    fit = reml_fit(data, reml)
    target = MixedEffectTarget.cluster_means(data)
    center = predict_theta(fit, target)
    rows = []
    ids = [str(c) for c in data.cluster_ids]
    for method in methods:
        if method == "asymptotic":
            choice = opts["sigma_choice"]
            if choice not in ("g1", "mse_l"):
                raise ConfigError("asymptotic intervals need sigma_choice g1 or mse_l")
            s2, _ = reference_sigma2(choice, None, data, fit, target, reml.likelihood)
            pair = asymptotic_intervals(center, target, np.sqrt(s2), opts["alpha"])
            B, failed = 0, 0
        else:
            boot = run_bootstrap(data, fit, target, _boot_config(opts, method), reml)
            if opts["dump"]:
                try:
                    save_distribution(opts["dump"].replace("{method}", method), boot)
                except OSError as exc:
                    raise InputIOError(f"cannot write dump: {exc.strerror}") from None
            pair = bootstrap_intervals(center, target, boot, opts["alpha"])
            B, failed = boot.B, boot.n_failed
        for iv in pair:
            for j in range(data.m):
                rows.append((iv.method, iv.kind, ids[j], iv.center[j], iv.sigma[j], iv.critical[j],
                             iv.lower[j], iv.upper[j], opts["sigma_choice"], B, failed))
    _write_csv(opts["output"], INTERVAL_HEADER, rows)
    return EXIT_OK


def cmd_test(args) -> int:
    opts = resolve_options("test", args)
    contrasts = opts["contrasts"]
    if not contrasts:
        raise ConfigError("a contrast file is required")
    data, _ = _load(args, opts)
    A, c, labels = read_contrasts(contrasts, data.cluster_ids)
    reml = _reml_config(opts)
    fit = reml_fit(data, reml)
    target = MixedEffectTarget.cluster_means(data)
    if opts["scheme"] not in ("semiparametric", "parametric"):
        raise ConfigError("scheme must be semiparametric or parametric")
    boot = run_bootstrap(data, fit, target, _boot_config(opts, opts["scheme"]), reml)
    res = hypothesis_test(predict_theta(fit, target), target, boot, A, c, opts["alpha"])
    rows = [(labels[i], res.c[i], res.statistic[i], res.critical[i], res.reject[i], "individual")
            for i in range(len(labels))]
    rows.append(("global", "", res.max_statistic, res.critical_global, res.reject_global, "multiple"))
    _write_csv(opts["output"], ["contrast", "c", "statistic", "critical", "reject", "test"], rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    opts = resolve_options("simulate", args)
    if opts["seed"] is None:
        raise ConfigError("simulate requires --seed")
    if opts["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {opts['preset']!r}; have {', '.join(sorted(PRESETS))}")
    choices = opts["sigma_choices"]
    if choices:
        bad = [c for c in choices if c not in SIGMA_CHOICES]
        if bad:
            raise ConfigError(f"unknown sigma choice(s) {', '.join(bad)}")
    t0 = time.time()

    def progress(cfg):
        print(f"[{time.time() - t0:7.1f}s] {cfg.error_dist}({cfg.error_var:g}) / "
              f"{cfg.raneff_dist}({cfg.raneff_var:g}) {cfg.setting} done", file=sys.stderr)

    try:
        report = run_preset(opts["preset"], s_runs=opts["s_runs"], b_boot=opts["b_boot"], seed=opts["seed"],
                            workers=opts["workers"], alpha=opts["alpha"], sigma_choices=choices,
                            settings=opts["settings"], progress=None if args.quiet else progress)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(opts["output_dir"])
    name = opts["preset"]
    kinds = {"individual": ["individual"], "simultaneous": ["simultaneous"],
             "both": ["individual", "simultaneous"]}[PRESETS[name]["kind"]]
    for choice in dict.fromkeys(r.sigma_choice for r in report.rows):
        text = "".join(format_report(report, "markdown", kind, choice) + "\n" for kind in kinds)
        _write_text(str(out / f"{name}_{choice}.md"), text)
    _write_text(str(out / f"{name}.csv"), format_report(report, "csv"))
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def _add_common(p, boot=False):
    p.add_argument("--config", help="YAML or JSON file with options")
    p.add_argument("--cluster-column", dest="cluster_column")
    p.add_argument("--response-column", dest="response_column")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    p.add_argument("--likelihood", choices=("reml", "ml"))
    p.add_argument("--optimizer", choices=("nelder_mead_log_scale", "golden_section_on_ratio"))
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--rel-tolerance", dest="rel_tolerance", type=float)
    p.add_argument("-o", "--output", help="output file (default: stdout)")
    if boot:
        p.add_argument("--alpha", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("-B", "--b-outer", dest="b_outer", type=int)
        p.add_argument("--c-inner", dest="c_inner", type=int)
        p.add_argument("--sigma-choice", dest="sigma_choice", choices=SIGMA_CHOICES)
        p.add_argument("--scaling-mode", dest="scaling_mode", choices=("scalar_moment_match", "matrix_symmetrized"))
        p.add_argument("--studentize-at", dest="studentize_at", choices=("delta_star", "delta_hat"))
        p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmmboot", description="Bootstrap inference for linear mixed effects.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the random-intercept model by REML")
    p.add_argument("data", help="CSV file")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("intervals", help="individual and simultaneous intervals for the mixed effects")
    p.add_argument("data", help="CSV file")
    _add_common(p, boot=True)
    p.add_argument("--methods", help="comma-separated: asymptotic, semiparametric, parametric")
    p.add_argument("--dump", help="write replicates to this .npz ('{method}' is substituted)")
    p.set_defaults(func=cmd_intervals)

    p = sub.add_parser("test", help="bootstrap tests of linear contrasts of the mixed effects")
    p.add_argument("data", help="CSV file")
    p.add_argument("contrasts", nargs="?", help="contrast CSV (label, c, one column per cluster)")
    _add_common(p, boot=True)
    p.add_argument("--scheme", choices=("semiparametric", "parametric"))
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="run a Monte Carlo coverage study")
    p.add_argument("--config", help="YAML or JSON file with options")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int)
    p.add_argument("-S", "--s-runs", dest="s_runs", type=int)
    p.add_argument("-B", "--b-boot", dest="b_boot", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--sigma-choices", dest="sigma_choices")
    p.add_argument("--settings", help="comma-separated subset of s1,s2,s3")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputIOError as exc:
        print(f"lmmboot: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DataValidationError) as exc:
        print(f"lmmboot: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, BootstrapFailure, StudyFailure, np.linalg.LinAlgError) as exc:
        print(f"lmmboot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
