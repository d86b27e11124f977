"""Monte Carlo coverage study for the interval methods.

Data follow a random-intercept model with one uniform covariate.  Errors and
random effects are drawn from one of ``DISTRIBUTIONS``, centred and
rescaled to the requested variances.  Each run fits the model once and
builds intervals by every requested method for each sigma choice.
"""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from multiprocessing import get_context

import numpy as np

from . import rng as rngmod
from .bootstrap import BootstrapConfig, BootstrapFailure, reference_sigma2, run_bootstrap, studentize
from .estimation import RemlConfig, predict_theta, reml_fit
from .inference import asymptotic_intervals, individual_intervals, simultaneous_intervals
from .model import ClusteredDataset, ConvergenceError, DataValidationError, MixedEffectTarget
from .variability import ANALYTIC_CHOICES, SIGMA_CHOICES

SETTINGS = {"s1": (25, 5), "s2": (50, 10), "s3": (75, 15)}
DISTRIBUTIONS = ("normal", "student_t6", "chi_square5")
METHODS = ("asymptotic", "semiparametric", "parametric")
METHOD_LABELS = {"asymptotic": "A", "semiparametric": "S", "parametric": "P"}
_DIST_LABELS = {"normal": "N", "student_t6": "t6", "chi_square5": "chi2_5"}


class StudyFailure(RuntimeError):
    """Too many simulation runs had to be regenerated."""


@dataclass(frozen=True)
class DgpConfig:
    """One data-generating scenario and its Monte Carlo sizes."""

    setting: str = "s1"
    error_dist: str = "normal"
    raneff_dist: str = "normal"
    error_var: float = 1.0
    raneff_var: float = 0.5
    beta: tuple = (1.0, 1.0)
    s_runs: int = 1000
    b_boot: int = 1000
    alpha: float = 0.05
    seed: int = 0
    c_inner: int = 1
    max_attempts: int = 10
    failure_budget: float = 0.02

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {tuple(SETTINGS)}")
        for d in (self.error_dist, self.raneff_dist):
            if d not in DISTRIBUTIONS:
                raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if not (self.error_var > 0 and self.raneff_var > 0):
            raise ValueError("variances must be positive")
        if len(self.beta) != 2:
            raise ValueError("beta must have two entries (intercept, slope)")
        if self.s_runs < 1 or self.b_boot < 1:
            raise ValueError("s_runs and b_boot must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def m(self) -> int:
        return SETTINGS[self.setting][0]

    @property
    def n_j(self) -> int:
        return SETTINGS[self.setting][1]


def draw_centered_scaled(dist: str, target_var: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draws standardised to mean 0 and variance ``target_var``."""
    if not target_var > 0:
        raise ValueError("target_var must be positive")
    if dist == "normal":
        z = rng.standard_normal(count)
    elif dist == "student_t6":
        z = rng.standard_t(6, count) / math.sqrt(1.5)
    elif dist == "chi_square5":
        z = (rng.chisquare(5, count) - 5.0) / math.sqrt(10.0)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return z * math.sqrt(target_var)


def generate_dgp(config: DgpConfig, rng: np.random.Generator):
    """Simulated dataset, true mixed effects and the target (k_j = (1, mean x_j), l_j = 1)."""
    m, nj = config.m, config.n_j
    n = m * nj
    x = rng.uniform(size=n)
    u = draw_centered_scaled(config.raneff_dist, config.raneff_var, m, rng)
    e = draw_centered_scaled(config.error_dist, config.error_var, n, rng)
    ids = np.repeat(np.arange(m), nj)
    b0, b1 = config.beta
    y = b0 + b1 * x + u[ids] + e
    X = np.column_stack([np.ones(n), x])
    data = ClusteredDataset.from_arrays(ids, y, X)
    target = MixedEffectTarget.cluster_means(data)
    theta = target.k @ np.asarray(config.beta) + u
    return data, theta, target


@dataclass(frozen=True, eq=False)
class RunTally:
    """Per-run outcome for one interval family."""

    ind_hit: np.ndarray
    sim_hit: np.ndarray
    ind_width: np.ndarray
    sim_width: np.ndarray
    floored: int = 0


def evaluate_run(intervals, theta_true, simultaneous=None) -> dict:
    """Hit indicators and widths 2 q sigma_j of one run.

    ``intervals`` may be a single :class:`IntervalSet` or an
    (individual, simultaneous) pair.
    """
    if simultaneous is None and isinstance(intervals, tuple):
        intervals, simultaneous = intervals
    hit = intervals.contains(theta_true)
    out = {"hit": hit, "all_hit": bool(np.all(hit)), "width": intervals.width}
    if simultaneous is not None:
        s_hit = simultaneous.contains(theta_true)
        out.update(sim_hit=s_hit, sim_all_hit=bool(np.all(s_hit)), sim_width=simultaneous.width)
    return out


@dataclass(frozen=True)
class ReportRow:
    error_dist: str
    error_var: float
    raneff_dist: str
    raneff_var: float
    method: str
    setting: str
    sigma_choice: str
    cov_ind: float
    cov_sim: float
    width_ind: float
    var_width_ind: float
    width_sim: float
    var_width_sim: float
    min_cluster_cov_sim: float
    s_runs: int
    b_boot: int
    alpha: float = 0.05
    regenerated_runs: int = 0
    floored: int = 0

    @property
    def key(self):
        return (self.error_dist, self.error_var, self.raneff_dist, self.raneff_var,
                self.method, self.setting, self.sigma_choice)


@dataclass(frozen=True)
class SimulationReport:
    rows: tuple = field(default_factory=tuple)

    def __add__(self, other: "SimulationReport") -> "SimulationReport":
        return SimulationReport(self.rows + other.rows)

    def get(self, **match) -> ReportRow:
        found = [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]
        if len(found) != 1:
            raise KeyError(f"{len(found)} rows match {match}")
        return found[0]


# -- study driver ---------------------------------------------------------------

class _Study:
    def __init__(self, config: DgpConfig, methods, sigma_choices, reml_config, studentize_at):
        self.config = config
        self.methods = tuple(methods)
        self.choices = tuple(sigma_choices)
        self.reml = reml_config or RemlConfig()
        self.studentize_at = studentize_at

    def families(self):
        for method in self.methods:
            for choice in self.choices:
                if method == "asymptotic" and choice not in ANALYTIC_CHOICES:
                    continue
                yield method, choice

    def run(self, s: int):
        cfg = self.config
        for attempt in range(cfg.max_attempts):
            rng = rngmod.stream(cfg.seed, rngmod.STUDY_RUN, s, attempt)
            data, theta, target = generate_dgp(cfg, rng)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    return attempt, self._evaluate(data, theta, target, s, attempt)
            except (ConvergenceError, BootstrapFailure, DataValidationError, np.linalg.LinAlgError):
                continue
        return cfg.max_attempts, None

    def _evaluate(self, data, theta, target, s, attempt):
        cfg = self.config
        fit = reml_fit(data, self.reml)
        center = predict_theta(fit, target)
        out = {}
        sigma2_cache = {}
        for method in self.methods:
            if method == "asymptotic":
                for choice in self.choices:
                    if choice not in ANALYTIC_CHOICES:
                        continue
                    if choice not in sigma2_cache:
                        sigma2_cache[choice] = reference_sigma2(choice, None, data, fit, target,
                                                                self.reml.likelihood)[0]
                    ind, sim = asymptotic_intervals(center, target, np.sqrt(sigma2_cache[choice]), cfg.alpha)
                    out[(method, choice)] = _tally(ind, sim, theta, 0)
                continue
            bcfg = BootstrapConfig(b_outer=cfg.b_boot, c_inner=cfg.c_inner, alpha=cfg.alpha, scheme=method,
                                   seed=rngmod.derived_seed(cfg.seed, rngmod.BOOT_SEED, s, attempt),
                                   studentize_at=self.studentize_at)
            boot = run_bootstrap(data, fit, target, bcfg, self.reml, double="mse_bc" in self.choices,
                                 record_mse_l="mse_l" in self.choices and self.studentize_at == "delta_star")
            for choice in self.choices:
                sigma2 = sigma2_cache.get(choice) if choice in ANALYTIC_CHOICES else None
                st = studentize(boot, choice, data, fit, target, self.studentize_at,
                                self.reml.likelihood, sigma2_hat=sigma2)
                if choice in ANALYTIC_CHOICES:
                    sigma2_cache[choice] = st.sigma_hat ** 2
                q_j, q = st.critical_values(cfg.alpha)
                ind = individual_intervals(center, target, st.sigma_hat, q_j, method, cfg.alpha)
                sim = simultaneous_intervals(center, target, st.sigma_hat, q, method, cfg.alpha)
                out[(method, choice)] = _tally(ind, sim, theta, st.floored)
        return out


def _tally(ind, sim, theta, floored):
    return RunTally(ind.contains(theta), sim.contains(theta), ind.width, sim.width, floored)


_WORKER_STUDY: _Study | None = None


def _init_worker(study):
    global _WORKER_STUDY
    _WORKER_STUDY = study


def _run_chunk(bounds):
    lo, hi = bounds
    return [_WORKER_STUDY.run(s) for s in range(lo, hi)]


def _var_width(w: np.ndarray) -> float:
    S, m = w.shape
    if S < 2:
        return 0.0
    d = w - w.mean(axis=0)
    return float(np.sum(d * d) / (m * (S - 1)))


def _aggregate(study: _Study, results) -> SimulationReport:
    cfg = study.config
    regenerated = sum(a for a, _ in results)
    failed = [s for s, (_, r) in enumerate(results) if r is None]
    if failed or regenerated > cfg.failure_budget * cfg.s_runs:
        raise StudyFailure(f"{regenerated} regenerated runs and {len(failed)} unrecoverable runs "
                           f"out of {cfg.s_runs} (budget {cfg.failure_budget:.0%})")
    rows = []
    for method, choice in study.families():
        tallies = [r[(method, choice)] for _, r in results]
        ind_hit = np.array([t.ind_hit for t in tallies])
        sim_hit = np.array([t.sim_hit for t in tallies])
        ind_w = np.array([t.ind_width for t in tallies])
        sim_w = np.array([t.sim_width for t in tallies])
        rows.append(ReportRow(
            error_dist=cfg.error_dist, error_var=cfg.error_var, raneff_dist=cfg.raneff_dist,
            raneff_var=cfg.raneff_var, method=method, setting=cfg.setting, sigma_choice=choice,
            cov_ind=float(ind_hit.mean()), cov_sim=float(sim_hit.all(axis=1).mean()),
            width_ind=float(ind_w.mean()), var_width_ind=_var_width(ind_w),
            width_sim=float(sim_w.mean()), var_width_sim=_var_width(sim_w),
            min_cluster_cov_sim=float(sim_hit.mean(axis=0).min()),
            s_runs=cfg.s_runs, b_boot=cfg.b_boot, alpha=cfg.alpha, regenerated_runs=int(regenerated),
            floored=int(sum(t.floored for t in tallies))))
    return SimulationReport(tuple(rows))


def run_study(config: DgpConfig, methods=METHODS, sigma_choices=("g1",), workers: int = 1,
              reml_config: RemlConfig | None = None, studentize_at: str = "delta_star") -> SimulationReport:
    """Coverage and width summaries of every (method, sigma choice) over ``config.s_runs`` runs.

    Run ``s`` draws its data from stream ``(seed, s, attempt)``; a run whose
    fit or bootstrap fails is regenerated with the next attempt counter.
    The asymptotic method is only paired with analytic sigma choices.

    Raises
    ------
    StudyFailure
        If regenerated runs exceed ``config.failure_budget`` of the runs.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    for c in sigma_choices:
        if c not in SIGMA_CHOICES:
            raise ValueError(f"unknown sigma choice {c!r}")
    study = _Study(config, methods, sigma_choices, reml_config, studentize_at)
    S = config.s_runs
    if workers <= 1 or S < 2:
        results = [study.run(s) for s in range(S)]
    else:
        nchunks = min(S, workers * 4)
        edges = np.linspace(0, S, nchunks + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        ctx = get_context("fork") if os.name == "posix" else None
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_init_worker, initargs=(study,)) as pool:
            results = [r for part in pool.map(_run_chunk, chunks) for r in part]
    return _aggregate(study, results)


# -- presets ----------------------------------------------------------------------

# (error_dist, error_var, raneff_dist, raneff_var) pairs in table order
TABLE_PAIRS = (
    ("normal", 1.0, "normal", 0.5),
    ("student_t6", 0.5, "student_t6", 1.0),
    ("chi_square5", 0.5, "chi_square5", 1.0),
    ("chi_square5", 0.5, "student_t6", 1.0),
    ("student_t6", 1.0, "chi_square5", 0.5),
)

PRESETS = {
    "table1": dict(kind="individual", pairs=TABLE_PAIRS, settings=("s1", "s2", "s3"),
                   methods=METHODS, sigma_choices=("g1",)),
    "table2": dict(kind="simultaneous", pairs=TABLE_PAIRS, settings=("s1", "s2", "s3"),
                   methods=METHODS, sigma_choices=("g1",)),
    "smoke": dict(kind="both", pairs=(TABLE_PAIRS[0],), settings=("s1",),
                  methods=METHODS, sigma_choices=("g1",), s_runs=2, b_boot=10),
}


def run_preset(name: str, s_runs: int | None = None, b_boot: int | None = None, seed: int = 0,
               workers: int = 1, alpha: float = 0.05, sigma_choices=None, settings=None,
               progress=None) -> SimulationReport:
    """Run a named preset over its distribution pairs and settings."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    p = PRESETS[name]
    s_runs = s_runs or p.get("s_runs", 1000)
    b_boot = b_boot or p.get("b_boot", 1000)
    report = SimulationReport()
    for i, (ed, ev, rd, rv) in enumerate(p["pairs"]):
        for setting in settings or p["settings"]:
            cfg = DgpConfig(setting=setting, error_dist=ed, error_var=ev, raneff_dist=rd, raneff_var=rv,
                            s_runs=s_runs, b_boot=b_boot, alpha=alpha,
                            seed=rngmod.derived_seed(seed, rngmod.STUDY_RUN, 2**32 + i, int(setting[1:])))
            report = report + run_study(cfg, p["methods"], sigma_choices or p["sigma_choices"], workers)
            if progress:
                progress(cfg)
    return report


# -- formatting ------------------------------------------------------------------

def _num(v: float) -> str:
    return f"{v:g}"


def dist_label(dist: str, var: float) -> str:
    """Table label such as ``N(1)`` or ``chi2_5(0.5)``."""
    return f"{_DIST_LABELS[dist]}({_num(var)})"


def _x1000(v: float) -> str:
    return str(int(round(v * 1000.0)))


def format_report(report: SimulationReport, style: str = "markdown", kind: str = "individual",
                  sigma_choice: str | None = None) -> str:
    """Render ``report`` as a markdown coverage table (entries x 1000) or raw CSV.

    >>> _x1000(0.954), _x1000(1.558)
    ('954', '1558')
    """
    if not report.rows:
        raise ValueError("empty report")
    if style == "csv":
        buf = io.StringIO()
        names = [f.name for f in fields(ReportRow)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in report.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])
        return buf.getvalue()
    if style != "markdown":
        raise ValueError("style must be 'markdown' or 'csv'")
    if kind not in ("individual", "simultaneous"):
        raise ValueError("kind must be 'individual' or 'simultaneous'")
    rows = [r for r in report.rows if sigma_choice is None or r.sigma_choice == sigma_choice]
    choices = list(dict.fromkeys(r.sigma_choice for r in rows))
    settings = sorted({r.setting for r in rows})
    out = []
    for choice in choices:
        sub = [r for r in rows if r.sigma_choice == choice]
        cells = {}
        order = []
        for r in sub:
            key = (r.error_dist, r.error_var, r.raneff_dist, r.raneff_var, r.method)
            if key not in cells:
                order.append(key)
                cells[key] = {}
            cells[key][r.setting] = r
        s_names = [s.upper() for s in settings]
        head = (["e", "u", "M"] + [f"Cov {s}" for s in s_names] + [f"Width {s}" for s in s_names]
                + [f"VarWidth {s}" for s in s_names])
        out.append(f"{kind.capitalize()} intervals, sigma^2 = {choice}, alpha = {_num(sub[0].alpha)}")
        out.append("")
        out.append("| " + " | ".join(head) + " |")
        out.append("|" + "---|" * len(head))
        for key in order:
            ed, ev, rd, rv, method = key
            vals = []
            for attr in (("cov_ind", "width_ind", "var_width_ind") if kind == "individual"
                         else ("cov_sim", "width_sim", "var_width_sim")):
                for s in settings:
                    r = cells[key].get(s)
                    vals.append("" if r is None else _x1000(getattr(r, attr)))
            out.append("| " + " | ".join([dist_label(ed, ev), dist_label(rd, rv), METHOD_LABELS[method]] + vals) + " |")
        out.append("")
    out.append("All numerical entries are multiplied by 1000.")
    return "\n".join(out) + "\n"


def parse_report_csv(text: str) -> SimulationReport:
    """Inverse of ``format_report(style="csv")``."""
    reader = csv.DictReader(io.StringIO(text))
    types = {f.name: f.type for f in fields(ReportRow)}
    rows = []
    for rec in reader:
        kw = {}
        for name, value in rec.items():
            t = types[name]
            kw[name] = float(value) if t == "float" else int(value) if t == "int" else value
        rows.append(ReportRow(**kw))
    return SimulationReport(tuple(rows))


__all__ = [
    "DISTRIBUTIONS", "DgpConfig", "METHODS", "PRESETS", "ReportRow", "RunTally", "SETTINGS",
    "SimulationReport", "StudyFailure", "TABLE_PAIRS", "draw_centered_scaled", "evaluate_run",
    "format_report", "generate_dgp", "parse_report_csv", "run_preset", "run_study",
]
