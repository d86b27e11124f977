import contextlib
import math
from types import SimpleNamespace

import numpy as np
import pytest

from lmmboot import rng as rngmod
from lmmboot.bootstrap import (
    BootstrapConfig,
    BootstrapFailure,
    _Engine,
    draw_parametric,
    draw_semiparametric,
    load_distribution,
    order_index,
    quantile_columns,
    quantile_order_stat,
    run_bootstrap,
    run_double_bootstrap,
    save_distribution,
    scale_center_residuals,
    studentize,
)
from lmmboot.estimation import RemlConfig, reml_fit
from lmmboot.model import FitResult, MixedEffectTarget, VarianceParams, build_random_intercept
from lmmboot.variability import g1 as g1_fn, mse_b1, mse_b2_inner, mse_3t

from conftest import make_intercept_data


# -- quantile rule --------------------------------------------------------------

def test_order_index_reference_example():
    assert order_index(1000, 0.05) == 951
    assert quantile_order_stat(np.arange(1, 1001)[::-1], 0.05) == 951
    assert order_index(19, 0.05) == 19


@pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1])
def test_order_index_exhaustive(alpha):
    for B in range(1, 101):
        # integer arithmetic oracle: floor((1 - alpha) B) with alpha = a / 100
        a = round(alpha * 100)
        expected = min((100 - a) * B // 100 + 1, B)
        assert order_index(B, alpha) == expected, B
        values = np.random.default_rng(B).permutation(B).astype(float)
        assert quantile_order_stat(values, alpha) == expected - 1


def test_quantile_monotone_in_alpha():
    v = np.random.default_rng(0).normal(size=257)
    qs = [quantile_order_stat(v, a) for a in (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)]
    assert all(x >= y for x, y in zip(qs, qs[1:]))


def test_quantile_columns_match_scalar_rule():
    v = np.random.default_rng(1).normal(size=(77, 4))
    np.testing.assert_array_equal(quantile_columns(v, 0.1), [quantile_order_stat(v[:, j], 0.1) for j in range(4)])
    with pytest.raises(ValueError):
        quantile_order_stat([], 0.05)
    with pytest.raises(ValueError):
        quantile_order_stat([1.0], 1.5)


# -- residual pools ---------------------------------------------------------------

def test_pool_example_from_docs():
    d = build_random_intercept([("a", 1.0, []), ("a", 3.0, []), ("b", -1.0, []), ("b", -3.0, [])])
    fit = FitResult(np.zeros(1), VarianceParams(1.0, 1.0), (np.array([1.0]), np.array([-1.0])),
                    np.eye(1), 0.0, False, 0)
    pools = scale_center_residuals(d, fit)
    np.testing.assert_allclose(pools.u_scaled.ravel(), [1.0, -1.0])
    np.testing.assert_allclose(pools.u_scaled_centered.ravel(), [1.0, -1.0])


def test_pool_fuzz_suite():
    rng = np.random.default_rng(2024)
    checked = 0
    for i in range(200):
        m = int(rng.integers(4, 15))
        nj = int(rng.integers(2, 7))
        data = make_intercept_data(rng, m=m, nj=nj, su2=float(rng.choice([0.0, 0.3, 1.0])))
        fit = reml_fit(data)
        with pytest.warns(RuntimeWarning) if fit.boundary_flag else contextlib.nullcontext():
            pools = scale_center_residuals(data, fit)
        se2, su2 = fit.delta_hat.as_tuple()
        assert abs(pools.e_scaled_centered.mean()) < 1e-12
        assert np.all(np.abs(pools.u_scaled_centered.mean(axis=0)) < 1e-12)
        assert np.mean(pools.e_scaled ** 2) == pytest.approx(se2, rel=1e-8)
        # second moment after centring equals sigma_e2 minus the squared mean
        assert np.mean(pools.e_scaled_centered ** 2) == pytest.approx(se2 - pools.e_scaled.mean() ** 2, rel=1e-8)
        if not pools.degenerate_u:
            assert np.mean(pools.u_scaled ** 2) == pytest.approx(su2, rel=1e-8)
            checked += 1
        else:
            assert not np.any(pools.u_scaled)
    assert checked > 100


def test_matrix_mode_pools_are_centred(small_problem):
    data, fit, _ = small_problem
    pools = scale_center_residuals(data, fit, "matrix_symmetrized")
    assert abs(pools.e_scaled_centered.mean()) < 1e-12
    assert abs(pools.u_scaled_centered.mean()) < 1e-12
    with pytest.raises(ValueError):
        scale_center_residuals(data, fit, "nope")


# -- sample generation ---------------------------------------------------------------

def _constant_pools(data, fit, v):
    pools = scale_center_residuals(data, fit)
    return SimpleNamespace(u_scaled_centered=np.full_like(pools.u_scaled_centered, v),
                           e_scaled_centered=np.full_like(pools.e_scaled_centered, v))


def test_constant_pools_give_deterministic_sample(small_problem):
    data, fit, _ = small_problem
    s = draw_semiparametric(_constant_pools(data, fit, 0.25), fit, data, np.random.default_rng(0))
    np.testing.assert_allclose(s.y, data.X @ fit.beta_hat + 0.5)


def test_semiparametric_draw_is_seeded(small_problem):
    data, fit, target = small_problem
    pools = scale_center_residuals(data, fit)
    a = draw_semiparametric(pools, fit, data, rngmod.stream(5, 1, 0), target)
    b = draw_semiparametric(pools, fit, data, rngmod.stream(5, 1, 0), target)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert set(np.round(a.e, 12)) <= set(np.round(pools.e_scaled_centered, 12))


def test_resampled_errors_match_pool_frequencies():
    d = build_random_intercept([(j % 3, 0.0, []) for j in range(9)])
    fit = FitResult(np.zeros(1), VarianceParams(1.0, 1.0), tuple(np.array([x]) for x in (1.0, 0.0, -1.0)),
                    np.eye(1), 0.0, False, 0)
    pools = SimpleNamespace(u_scaled_centered=np.zeros((3, 1)),
                            e_scaled_centered=np.array([0.0, 1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 4.0, 5.0]))
    rng = np.random.default_rng(7)
    draws = np.concatenate([draw_semiparametric(pools, fit, d, rng).e for _ in range(100_000 // 9 + 1)])
    n = draws.size
    values, counts = np.unique(pools.e_scaled_centered, return_counts=True)
    for v, c in zip(values, counts):
        p = c / 9
        observed = np.sum(draws == v)
        assert abs(observed - n * p) <= 3 * math.sqrt(n * p * (1 - p)), v


def test_parametric_moments():
    data = make_intercept_data(np.random.default_rng(3), m=50, nj=20)
    fit = reml_fit(data)
    rng = np.random.default_rng(8)
    e = np.concatenate([draw_parametric(fit, data, rng).e for _ in range(100)])
    assert e.size >= 100_000
    assert np.var(e) == pytest.approx(fit.delta_hat.sigma_e2, rel=0.02)


def test_parametric_degenerate_gives_fixed_part(small_problem):
    data, fit, _ = small_problem
    fake = SimpleNamespace(beta_hat=fit.beta_hat, delta_hat=SimpleNamespace(as_tuple=lambda: (0.0, 0.0)))
    s = draw_parametric(fake, data, np.random.default_rng(0))
    np.testing.assert_array_equal(s.y, data.X @ fit.beta_hat)


# -- bootstrap runs ----------------------------------------------------------------------

@pytest.mark.parametrize("scheme", ["semiparametric", "parametric"])
def test_single_replicate(small_problem, scheme):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=1, scheme=scheme, seed=3))
    assert boot.B == 1
    assert np.all(np.abs(boot.t_star) <= boot.m_star[:, None])


@pytest.mark.parametrize("choice", ["g1", "mse_l", "mse_b1", "mse_spa"])
def test_max_statistic_is_exact(small_problem, choice):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=20, seed=4, sigma_choice=choice))
    assert np.array_equal(boot.m_star, np.abs(boot.t_star).max(axis=1))
    np.testing.assert_allclose(mse_3t(boot), mse_b1(boot), rtol=1e-12)


def _assert_same(a, b):
    for name in ("delta_star", "beta_star", "theta_star", "theta_hat_star", "t_star", "m_star", "g1_star"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


@pytest.mark.parametrize("scheme", ["semiparametric", "parametric"])
def test_determinism_across_workers(small_problem, scheme):
    data, fit, target = small_problem
    runs = [run_bootstrap(data, fit, target, BootstrapConfig(b_outer=50, seed=99, scheme=scheme, workers=w))
            for w in (1, 1, 4)]
    _assert_same(runs[0], runs[1])
    _assert_same(runs[0], runs[2])


def test_different_seeds_differ(small_problem):
    data, fit, target = small_problem
    a = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=5, seed=1))
    b = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=5, seed=2))
    assert not np.array_equal(a.theta_star, b.theta_star)


def test_studentization_choices(small_problem):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=30, seed=5), record_mse_l=True)
    g1 = studentize(boot, "g1", data, fit, target)
    np.testing.assert_array_equal(g1.t_star, boot.t_star)
    fixed = studentize(boot, "g1", data, fit, target, studentize_at="delta_hat")
    np.testing.assert_allclose(fixed.sigma_star, np.broadcast_to(fixed.sigma_hat, boot.theta_star.shape))
    # bootstrap MSE choices studentize with sigma_hat, so the t* differ only by a per-cluster scale
    b1 = studentize(boot, "mse_b1", data, fit, target)
    spa = studentize(boot, "mse_spa", data, fit, target)
    np.testing.assert_allclose(b1.t_star * b1.sigma_hat, spa.t_star * spa.sigma_hat, rtol=1e-12)
    assert np.all(studentize(boot, "mse_l", data, fit, target).sigma_hat ** 2 >= g1.sigma_hat ** 2)


def test_mse_l_requires_recorded_values(small_problem):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=3, seed=5))
    with pytest.raises(ValueError):
        studentize(boot, "mse_l", data, fit, target)


def test_dump_round_trip(tmp_path, small_problem):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=10, seed=6, c_inner=2), double=True)
    path = tmp_path / "boot.npz"
    save_distribution(path, boot)
    back = load_distribution(path)
    _assert_same(boot, back)
    assert back.seed == 6 and back.scheme == boot.scheme and back.B == 10
    np.testing.assert_array_equal(back.inner.theta_hat_2, boot.inner.theta_hat_2)
    np.testing.assert_allclose(mse_b2_inner(back.inner), mse_b2_inner(boot.inner))


def test_double_bootstrap_replay(small_problem):
    data, fit, target = small_problem
    cfg = BootstrapConfig(b_outer=2, c_inner=1, seed=12)
    boot, inner = run_double_bootstrap(data, fit, target, cfg)
    again, inner2 = run_double_bootstrap(data, fit, target, cfg)
    np.testing.assert_array_equal(inner.theta_hat_2, inner2.theta_hat_2)
    assert inner.theta_2.shape == (2, 1, data.m)
    # replay inner draw (b=0, c=0) by hand with the outer replicate's own fit
    engine = _Engine(data, fit, target, cfg, RemlConfig(likelihood=fit.likelihood), double=True, need_mse_l=False)
    rec = engine.replicate(0)
    th2, hat2, _ = rec[9]
    np.testing.assert_array_equal(hat2, inner.theta_hat_2[0])
    expected = np.nanmean((inner.theta_hat_2 - inner.theta_2) ** 2, axis=(0, 1))
    np.testing.assert_allclose(mse_b2_inner(inner), expected)


def test_bc_uses_inner_replicates(small_problem):
    data, fit, target = small_problem
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=8, seed=13, sigma_choice="mse_bc"))
    assert boot.inner is not None
    value = 2 * mse_b1(boot) - mse_b2_inner(boot.inner)
    base = g1_fn(data, fit.delta_hat, target)
    np.testing.assert_allclose(boot.sigma_hat ** 2, np.maximum(value, base))
    assert boot.floored == int(np.sum(value < base))


def test_failure_budget(monkeypatch, small_problem):
    data, fit, target = small_problem
    original = _Engine.replicate

    def flaky(self, b):
        return None if b % 4 == 0 else original(self, b)

    monkeypatch.setattr(_Engine, "replicate", flaky)
    with pytest.raises(BootstrapFailure):
        run_bootstrap(data, fit, target, BootstrapConfig(b_outer=20, seed=1))
    boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=20, seed=1, failure_budget=0.3))
    assert boot.B == 15 and boot.n_failed == 5


@pytest.mark.parametrize("kwargs", [dict(b_outer=0), dict(alpha=1.0), dict(scheme="wild"),
                                    dict(sigma_choice="x"), dict(seed=-1), dict(workers=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        BootstrapConfig(**kwargs)


def test_cross_scheme_consistency():
    # normal DGP with many clusters: both schemes estimate the same quantile
    data = make_intercept_data(np.random.default_rng(21), m=40, nj=8)
    fit = reml_fit(data)
    target = MixedEffectTarget.cluster_means(data)
    B = 400
    q = {}
    for scheme in ("semiparametric", "parametric"):
        boot = run_bootstrap(data, fit, target, BootstrapConfig(b_outer=B, seed=31, scheme=scheme))
        q[scheme] = boot.critical_values(0.05)[1]
        m_star = boot.m_star
    # bootstrap-quantile standard error from the order-statistic density
    p = 0.95
    lo, hi = np.quantile(m_star, [p - 0.02, p + 0.02])
    density = 0.04 / (hi - lo)
    se = math.sqrt(p * (1 - p) / B) / density
    assert abs(q["semiparametric"] - q["parametric"]) <= 3 * math.sqrt(2) * se
