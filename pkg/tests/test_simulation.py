import math
import time

import numpy as np
import pytest

from lmmboot.inference import individual_intervals, simultaneous_intervals
from lmmboot.simulation import (
    DgpConfig,
    ReportRow,
    RunTally,
    SimulationReport,
    _aggregate,
    _Study,
    draw_centered_scaled,
    evaluate_run,
    format_report,
    generate_dgp,
    parse_report_csv,
    run_preset,
    run_study,
)


def test_normal_draws_are_standard_normal():
    a = draw_centered_scaled("normal", 1.0, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(a, np.random.default_rng(0).standard_normal(5))


def test_chi_square_constants():
    # chi2 with k degrees of freedom has mean k and variance 2k
    raw = np.random.default_rng(1).chisquare(5, 7)
    got = draw_centered_scaled("chi_square5", 1.0, 7, np.random.default_rng(1))
    np.testing.assert_allclose(got, (raw - 5) / math.sqrt(2 * 5))


@pytest.mark.parametrize("dist", ["normal", "student_t6", "chi_square5"])
def test_scaled_draw_moments(dist):
    z = draw_centered_scaled(dist, 0.5, 10**6, np.random.default_rng(2))
    assert abs(z.mean()) < 5 * math.sqrt(0.5 / 10**6)
    assert z.var() == pytest.approx(0.5, rel=0.01)


def test_draw_rejects_bad_input():
    with pytest.raises(ValueError):
        draw_centered_scaled("cauchy", 1.0, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        draw_centered_scaled("normal", 0.0, 3, np.random.default_rng(0))


def test_dgp_reproducible_and_shaped():
    cfg = DgpConfig(setting="s2")
    a = generate_dgp(cfg, np.random.default_rng(3))
    b = generate_dgp(cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0].y, b[0].y)
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].m == 50 and a[0].n == 500
    np.testing.assert_allclose(a[2].k[:, 1], [c.X[:, 1].mean() for c in a[0].clusters])


def test_dgp_small_random_effect_limit():
    cfg = DgpConfig(raneff_var=1e-14)
    data, theta, target = generate_dgp(cfg, np.random.default_rng(4))
    np.testing.assert_allclose(theta, target.k @ np.array(cfg.beta), atol=1e-6)


def test_dgp_ols_recovers_beta():
    cfg = DgpConfig(setting="s3", beta=(2.0, -1.0), error_dist="chi_square5", raneff_dist="student_t6")
    X, y = [], []
    rng = np.random.default_rng(5)
    for _ in range(40):
        data, _, _ = generate_dgp(cfg, rng)
        X.append(data.X)
        y.append(data.y)
    X, y = np.vstack(X), np.concatenate(y)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * resid.var())
    # random intercepts inflate the intercept's error; allow for the design effect
    assert np.all(np.abs(beta - cfg.beta) < 4 * se * math.sqrt(1 + 14 * 0.5 / 1.5))


def test_evaluate_run_tallies():
    theta = np.array([0.0, 0.0])
    ind = individual_intervals(np.array([0.5, 3.0]), None, np.ones(2), 1.0)
    sim = simultaneous_intervals(np.array([0.5, 0.2]), None, np.ones(2), 1.0)
    out = evaluate_run(ind, theta, sim)
    np.testing.assert_array_equal(out["hit"], [True, False])
    assert not out["all_hit"]
    assert out["sim_all_hit"]
    np.testing.assert_array_equal(out["width"], [2.0, 2.0])
    assert evaluate_run((sim, sim), theta)["all_hit"]


def test_hand_built_metrics():
    """2 runs x 2 clusters, metrics by direct arithmetic."""
    cfg = DgpConfig(s_runs=2, b_boot=1)
    study = _Study(cfg, ("semiparametric",), ("g1",), None, "delta_star")
    t1 = RunTally(np.array([True, True]), np.array([True, True]), np.array([1.0, 2.0]), np.array([3.0, 3.0]))
    t2 = RunTally(np.array([True, False]), np.array([True, False]), np.array([3.0, 4.0]), np.array([5.0, 3.0]))
    row = _aggregate(study, [(0, {("semiparametric", "g1"): t1}), (0, {("semiparametric", "g1"): t2})]).rows[0]
    assert row.cov_ind == 0.75 and row.cov_sim == 0.5
    assert row.width_ind == 2.5 and row.width_sim == 3.5
    # per-cluster sample variances (2 and 2) averaged over clusters
    assert row.var_width_ind == pytest.approx(2.0)
    assert row.var_width_sim == pytest.approx((2.0 + 0.0) / 2)
    assert row.min_cluster_cov_sim == 0.5


def _row(**kw):
    base = dict(error_dist="normal", error_var=1.0, raneff_dist="normal", raneff_var=0.5, method="semiparametric",
                setting="s1", sigma_choice="g1", cov_ind=0.954, cov_sim=0.9, width_ind=1.558, var_width_ind=0.1,
                width_sim=2.0, var_width_sim=0.2, min_cluster_cov_sim=0.93, s_runs=10, b_boot=5)
    base.update(kw)
    return ReportRow(**base)


def test_markdown_layout():
    text = format_report(SimulationReport((_row(), _row(setting="s2", cov_ind=0.947))))
    assert "| N(1) | N(0.5) | S | 954 | 947 | 1558 | 1558 |" in text
    assert "multiplied by 1000" in text
    sim = format_report(SimulationReport((_row(),)), kind="simultaneous")
    assert "| 900 | 2000 | 200 |" in sim


def test_csv_round_trip():
    rows = (_row(cov_ind=1 / 3), _row(method="asymptotic", width_sim=math.pi, floored=2))
    report = SimulationReport(rows)
    assert parse_report_csv(format_report(report, "csv")) == report


def test_smoke_study_is_fast_and_deterministic():
    t0 = time.perf_counter()
    a = run_preset("smoke", seed=3)
    assert time.perf_counter() - t0 < 10.0
    b = run_preset("smoke", seed=3)
    assert format_report(a, "csv") == format_report(b, "csv")
    assert {r.method for r in a.rows} == {"asymptotic", "semiparametric", "parametric"}


def test_study_invariants():
    cfg = DgpConfig(setting="s1", s_runs=6, b_boot=30, seed=8)
    report = run_study(cfg)
    for r in report.rows:
        assert 0 <= r.cov_sim <= r.min_cluster_cov_sim <= 1
        assert 0 <= r.cov_ind <= 1
    asym = report.get(method="asymptotic")
    assert asym.width_sim > asym.width_ind


def test_study_determinism_across_workers():
    cfg = DgpConfig(setting="s1", s_runs=8, b_boot=20, seed=9)
    texts = {w: format_report(run_study(cfg, workers=w), "csv") for w in (1, 4, 8)}
    assert texts[1] == texts[4] == texts[8]


@pytest.mark.parametrize("kwargs", [dict(setting="s9"), dict(error_dist="gamma"), dict(error_var=0.0),
                                    dict(beta=(1.0,)), dict(s_runs=0), dict(alpha=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DgpConfig(**kwargs)


def test_unknown_preset_and_method():
    with pytest.raises(ValueError):
        run_preset("table9")
    with pytest.raises(ValueError):
        run_study(DgpConfig(s_runs=1, b_boot=1), methods=("jackknife",))
