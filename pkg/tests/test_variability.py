import numpy as np
import pytest
from types import SimpleNamespace

from lmmboot.estimation import reml_fit
from lmmboot.model import VarianceParams
from lmmboot.variability import (
    FisherInformation,
    fisher_information_reml,
    g1,
    g2,
    g3,
    mse_3t,
    mse_b1,
    mse_b2_inner,
    mse_bc,
    mse_components,
    mse_spa,
    o_derivatives,
    o_vectors,
)

from oracles import (Dense, g3_by_differences, g3_dense, o_derivatives_dense, o_vector_dense, random_dataset,
                     random_target)


@pytest.mark.parametrize("q", [1, 2])
def test_g1_g2_match_dense(q):
    rng = np.random.default_rng(100 + q)
    for _ in range(10):
        data = random_dataset(rng, q=q)
        target = random_target(rng, data)
        delta = VarianceParams(*rng.uniform(0.1, 3.0, size=2))
        dense = Dense(data, *delta.as_tuple())
        np.testing.assert_allclose(g1(data, delta, target), dense.g1(target), rtol=1e-8)
        np.testing.assert_allclose(g2(data, delta, target), dense.g2(target), rtol=1e-8)


@pytest.mark.parametrize("q", [1, 2])
@pytest.mark.parametrize("likelihood", ["reml", "ml"])
def test_fisher_information_matches_dense(q, likelihood):
    rng = np.random.default_rng(200 + q)
    for _ in range(5):
        data = random_dataset(rng, q=q)
        delta = VarianceParams(*rng.uniform(0.1, 3.0, size=2))
        info = fisher_information_reml(data, delta, likelihood)
        np.testing.assert_allclose(info.matrix, Dense(data, *delta.as_tuple()).fisher(likelihood == "reml"),
                                   rtol=1e-9)
        np.testing.assert_allclose(info.v_a @ info.matrix, np.eye(2), atol=1e-8)


@pytest.mark.parametrize("q", [1, 2])
def test_o_derivatives_match_finite_differences(q):
    rng = np.random.default_rng(300 + q)
    data = random_dataset(rng, q=q)
    target = random_target(rng, data)
    se2, su2 = 0.8, 1.4
    h = 1e-6
    analytic = o_derivatives(data, VarianceParams(se2, su2), target)
    for j, (de, du) in enumerate(analytic):
        fd_e = (o_vector_dense(data, se2 + h, su2, target, j) - o_vector_dense(data, se2 - h, su2, target, j)) / (2 * h)
        fd_u = (o_vector_dense(data, se2, su2 + h, target, j) - o_vector_dense(data, se2, su2 - h, target, j)) / (2 * h)
        np.testing.assert_allclose(de, fd_e, atol=1e-6)
        np.testing.assert_allclose(du, fd_u, atol=1e-6)
    for o, j in zip(o_vectors(data, VarianceParams(se2, su2), target), range(data.m)):
        np.testing.assert_allclose(o, o_vector_dense(data, se2, su2, target, j), rtol=1e-10)


@pytest.mark.parametrize("q", [1, 2])
def test_g3_matches_difference_oracle(q):
    rng = np.random.default_rng(400 + q)
    for _ in range(5):
        data = random_dataset(rng, q=q)
        target = random_target(rng, data)
        delta = VarianceParams(*rng.uniform(0.2, 2.0, size=2))
        info = fisher_information_reml(data, delta)
        expected = g3_by_differences(data, *delta.as_tuple(), target, info.v_a)
        np.testing.assert_allclose(g3(data, delta, target, info), expected, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("q", [1, 2])
def test_g3_and_derivatives_match_exact_dense(q):
    rng = np.random.default_rng(500 + q)
    for _ in range(10):
        data = random_dataset(rng, q=q)
        target = random_target(rng, data)
        delta = VarianceParams(*rng.uniform(0.2, 2.0, size=2))
        for j, (de, du) in enumerate(o_derivatives(data, delta, target)):
            ee, eu = o_derivatives_dense(data, *delta.as_tuple(), target, j)
            np.testing.assert_allclose(de, ee, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(du, eu, rtol=1e-9, atol=1e-12)
        info = fisher_information_reml(data, delta)
        np.testing.assert_allclose(g3(data, delta, target, info), g3_dense(data, *delta.as_tuple(), target, info.v_a),
                                   rtol=1e-8)


def test_g3_zero_for_singular_information():
    rng = np.random.default_rng(1)
    data = random_dataset(rng)
    target = random_target(rng, data)
    info = FisherInformation(np.zeros((2, 2)), np.zeros((2, 2)), singular=True)
    np.testing.assert_array_equal(g3(data, VarianceParams(1.0, 1.0), target, info), 0.0)


def test_mse_l_combines_components():
    rng = np.random.default_rng(2)
    data = random_dataset(rng, m=8)
    target = random_target(rng, data)
    comp = mse_components(data, VarianceParams(1.0, 0.5), target)
    np.testing.assert_allclose(comp.mse_l, comp.g1 + comp.g2 + 2 * comp.g3)
    assert np.all(comp.g1 > 0) and np.all(comp.g2 >= 0) and np.all(comp.g3 >= 0)


def _fake_replicates(rng, B=40, m=5):
    theta = rng.normal(size=(B, m))
    tilde = theta + 0.3 * rng.normal(size=(B, m))
    hat = tilde + 0.1 * rng.normal(size=(B, m))
    return SimpleNamespace(theta_star=theta, theta_tilde_star=tilde, theta_hat_star=hat)


def test_mse_3t_recombines_to_b1():
    rng = np.random.default_rng(3)
    for _ in range(20):
        boot = _fake_replicates(rng)
        np.testing.assert_allclose(mse_3t(boot), mse_b1(boot), rtol=1e-12, atol=1e-15)


def test_mse_spa_formula():
    rng = np.random.default_rng(4)
    data = random_dataset(rng, m=5)
    fit = reml_fit(data)
    target = random_target(rng, data)
    boot = _fake_replicates(rng, m=5)
    boot.g12_star = rng.uniform(0.1, 1.0, size=(40, 5))
    base = g1(data, fit.delta_hat, target) + g2(data, fit.delta_hat, target)
    a = boot.theta_tilde_star - boot.theta_star
    c = boot.theta_hat_star - boot.theta_tilde_star
    expected = 2 * base - boot.g12_star.mean(0) + (c * c).mean(0) + 2 * (a * c).mean(0)
    np.testing.assert_allclose(mse_spa(boot, data, fit, target), expected, rtol=1e-12)
    # without stored g12_star the values are recomputed from delta_star
    boot2 = _fake_replicates(np.random.default_rng(5), m=5)
    boot2.delta_star = np.array([[0.5, 0.2], [1.0, 0.4]])
    boot2.theta_star, boot2.theta_tilde_star, boot2.theta_hat_star = (
        boot2.theta_star[:2], boot2.theta_tilde_star[:2], boot2.theta_hat_star[:2])
    g12 = np.mean([g1(data, VarianceParams(*d), target) + g2(data, VarianceParams(*d), target)
                   for d in boot2.delta_star], axis=0)
    a = boot2.theta_tilde_star - boot2.theta_star
    c = boot2.theta_hat_star - boot2.theta_tilde_star
    np.testing.assert_allclose(mse_spa(boot2, data, fit, target),
                               2 * base - g12 + (c * c).mean(0) + 2 * (a * c).mean(0), rtol=1e-10)


def test_mse_bc_and_inner_failures():
    rng = np.random.default_rng(6)
    outer = _fake_replicates(rng)
    theta2 = rng.normal(size=(40, 2, 5))
    hat2 = theta2 + 0.2 * rng.normal(size=(40, 2, 5))
    inner = SimpleNamespace(theta_2=theta2, theta_hat_2=hat2)
    b2 = ((hat2 - theta2) ** 2).reshape(-1, 5).mean(0)
    np.testing.assert_allclose(mse_b2_inner(inner), b2)
    np.testing.assert_allclose(mse_bc(outer, inner), 2 * mse_b1(outer) - b2)
    hat2[3, 1] = np.nan
    kept = np.delete((hat2 - theta2).reshape(-1, 5), 3 * 2 + 1, axis=0)
    np.testing.assert_allclose(mse_b2_inner(inner), (kept ** 2).mean(0))
    with pytest.raises(ValueError):
        mse_bc(outer, None)
