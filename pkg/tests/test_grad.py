import numpy as np
import pytest

from conftest import ConstPolicy, brownian_problem
from oracles import linear_policy, linear_scalar_problem, quadrature_paths, two_step_gradient, two_step_objective
from simfree.grad import (
    objective_estimate, offpolicy_objective, path_costs, per_walker_costs, simfree_gradient, vanilla_gradient,
)
from simfree.policy import ZeroPolicy, init_policy
from simfree.problems import LqrSpec, gaussian_follmer_problem, lqr_problem
from simfree.rng import CounterRng
from simfree.sde_core import DivergenceError, make_randomized_grid, rollout, sample_wiener_increments, uniform_grid


def _lqr(d=2):
    spec = LqrSpec(0.3 * np.eye(d), 0.2 * np.eye(d), 0.1 * np.eye(d), np.eye(d))
    return lqr_problem(spec)


@pytest.mark.parametrize("theta", [0.0, 0.7, -1.3])
def test_quadrature_oracle_all_estimators(theta):
    prob = linear_scalar_problem()
    pol = linear_policy(theta)
    grid, wp, wts = quadrature_paths()
    exact = two_step_gradient(theta)
    for est in (simfree_gradient(prob, pol, grid, wp, path="direct", walker_weights=wts),
                simfree_gradient(prob, pol, grid, wp, path="stopgrad", walker_weights=wts),
                vanilla_gradient(prob, pol, grid, wp, walker_weights=wts)):
        assert est.grad[0] == pytest.approx(exact, rel=1e-10, abs=1e-12)
        assert est.loss == pytest.approx(two_step_objective(theta), rel=1e-12)


def test_vanilla_is_derivative_of_sample_objective():
    # with the noise frozen the pathwise gradient is the exact derivative of the empirical loss
    prob = _lqr()
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [8], "num_freqs": 1}, 4)
    rng = CounterRng(3)
    grid = make_randomized_grid(12, 1.0, rng)
    wp = sample_wiener_increments(grid, 64, 2, rng)
    g = vanilla_gradient(prob, pol, grid, wp).grad
    h = 1e-6
    for j in np.random.default_rng(0).choice(pol.num_params, 15, replace=False):
        old = pol.params.data[j]
        pol.params.data[j] = old + h
        up = objective_estimate(prob, pol, grid, wp)
        pol.params.data[j] = old - h
        dn = objective_estimate(prob, pol, grid, wp)
        pol.params.data[j] = old
        assert g[j] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-8)


def test_stored_step_records():
    prob = _lqr()
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [4]}, 0)
    for K in (3, 17):
        grid = uniform_grid(K, 1.0)
        wp = sample_wiener_increments(grid, 8, 2, CounterRng(0))
        assert simfree_gradient(prob, pol, grid, wp, path="direct").stored_step_records == 0
        assert simfree_gradient(prob, pol, grid, wp, path="stopgrad").stored_step_records == 0
        assert vanilla_gradient(prob, pol, grid, wp).stored_step_records == K


def test_surrogate_loss_value():
    prob = _lqr()
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [4]}, 0)
    grid = uniform_grid(8, 1.0)
    wp = sample_wiener_increments(grid, 16, 2, CounterRng(1))
    est = simfree_gradient(prob, pol, grid, wp)
    tr = rollout(prob, pol, grid, wp)
    w = path_costs(prob, tr)
    assert est.extras["surrogate_loss"] == pytest.approx(np.mean(tr.acc_A + w * tr.acc_C), rel=1e-14)
    assert est.loss == pytest.approx(np.mean(w), rel=1e-15)
    assert est.weight_mean == pytest.approx(np.mean(w))


def test_dual_path_agreement_and_chunking():
    prob = _lqr(3)
    pol = init_policy({"kind": "mlp", "dim": 3, "widths": [16, 16], "num_freqs": 2}, 5)
    rng = CounterRng(7)
    grid = make_randomized_grid(10, 1.0, rng)
    wp = sample_wiener_increments(grid, 100, 3, rng)
    a = simfree_gradient(prob, pol, grid, wp, path="direct").grad
    b = simfree_gradient(prob, pol, grid, wp, path="stopgrad").grad
    c = simfree_gradient(prob, pol, grid, wp, path="stopgrad", chunk_size=7).grad
    assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(a)
    assert np.linalg.norm(a - c) <= 1e-12 * np.linalg.norm(a)
    np.testing.assert_array_equal(b, simfree_gradient(prob, pol, grid, wp, path="stopgrad").grad)


def test_uniform_walker_weights_match_plain_mean():
    prob = _lqr()
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [4]}, 0)
    grid = uniform_grid(5, 1.0)
    wp = sample_wiener_increments(grid, 10, 2, CounterRng(0))
    for fn in (lambda **k: simfree_gradient(prob, pol, grid, wp, **k),
               lambda **k: vanilla_gradient(prob, pol, grid, wp, **k)):
        np.testing.assert_allclose(fn(walker_weights=np.full(10, 3.0)).grad, fn().grad, rtol=1e-14)


def test_follmer_gaussian_zero_policy_has_zero_gradient():
    prob = gaussian_follmer_problem(3)
    pol = init_policy({"kind": "mlp", "dim": 3, "widths": [8]}, 0, zero_last_layer=True)
    grid = uniform_grid(8, 1.0)
    wp = sample_wiener_increments(grid, 32, 3, CounterRng(0))
    est = simfree_gradient(prob, pol, grid, wp)
    # u ≡ 0 and g ≡ 0: every path weight and every cotangent vanishes
    assert est.loss == 0.0
    assert np.all(est.grad == 0.0)


def test_unknown_path_and_missing_jacobians():
    prob = _lqr()
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [4]}, 0)
    grid = uniform_grid(4, 1.0)
    wp = sample_wiener_increments(grid, 4, 2, CounterRng(0))
    with pytest.raises(ValueError):
        simfree_gradient(prob, pol, grid, wp, path="adjoint")
    from dataclasses import replace
    with pytest.raises(ValueError):
        vanilla_gradient(replace(prob, drift_vjp=None), pol, grid, wp)


def test_divergence_strict_and_excluded():
    # paths that wander above 1 blow up, the rest stay tame
    prob = brownian_problem(1, b=lambda t, x: 500.0 * np.maximum(x - 1.0, 0.0))
    pol = init_policy({"kind": "mlp", "dim": 1, "widths": [4]}, 0)
    grid = uniform_grid(64, 1.0)
    wp = sample_wiener_increments(grid, 64, 1, CounterRng(2))
    with pytest.raises(DivergenceError):
        simfree_gradient(prob, pol, grid, wp, strict=True)
    est = simfree_gradient(prob, pol, grid, wp)
    assert est.diverged_count > 0
    assert est.n_walkers == 64 - est.diverged_count
    assert np.all(np.isfinite(est.grad))


def test_offpolicy_equals_onpolicy_bitwise():
    prob = _lqr(2)
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [8]}, 1)
    grid = make_randomized_grid(16, 1.0, CounterRng(0))
    wp = sample_wiener_increments(grid, 200, 2, CounterRng(0))
    loss, weights = offpolicy_objective(prob, pol, pol, grid, wp)
    assert loss == objective_estimate(prob, pol, grid, wp)
    assert np.all(weights.log_m == 0.0)


def test_offpolicy_unbiased_for_constant_controls():
    prob = brownian_problem(1, g=lambda x: x[:, 0] ** 2)
    grid = uniform_grid(8, 1.0)
    wp = sample_wiener_increments(grid, 100_000, 1, CounterRng(5))
    u, v = ConstPolicy([0.4]), ConstPolicy([-0.3])
    loss, weights, cost = offpolicy_objective(prob, u, v, grid, wp, return_costs=True)
    m = np.exp(weights.log_m)
    assert abs(m.mean() - 1.0) < 3 * m.std(ddof=1) / np.sqrt(m.size)
    # J(u) for constant u: ½c²T + E[(cT + W_T)²] = 0.08 + 0.16 + 1
    terms = cost * m
    assert abs(loss - 1.24) < 3 * terms.std(ddof=1) / np.sqrt(terms.size)


def test_per_walker_costs_zero_policy():
    prob = gaussian_follmer_problem(2)
    grid = uniform_grid(4, 1.0)
    costs, alive = per_walker_costs(prob, ZeroPolicy(2), grid, sample_wiener_increments(grid, 5, 2, CounterRng(0)))
    assert np.all(costs == 0.0) and alive.all()
