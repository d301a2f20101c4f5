import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import ConstPolicy, brownian_problem
from simfree.policy import ZeroPolicy
from simfree.rng import CounterRng
from simfree.sde_core import (
    DivergenceError, NumericalError, TimeGrid, WienerPath, euler_maruyama_step, make_randomized_grid,
    rollout, sample_wiener_increments, simulate_controlled, tree_sum, uniform_grid,
)


def test_grid_k1_is_endpoints():
    g = make_randomized_grid(1, 2.0, CounterRng(0))
    assert list(g.times) == [0.0, 2.0]


def test_grid_order_statistics_match_uniform():
    # with K=2 the single interior point is Uniform(0, T)
    pts = np.array([make_randomized_grid(2, 1.0, CounterRng(0).at_iteration(i)).times[1] for i in range(4000)])
    assert stats.kstest(pts, "uniform").pvalue > 1e-3


def test_grid_interior_is_beta_distributed():
    # the j-th of K-1 sorted uniforms is Beta(j, K-j)
    K = 5
    draws = np.array([make_randomized_grid(K, 1.0, CounterRng(3).at_iteration(i)).times[1:-1] for i in range(3000)])
    for j in range(1, K):
        assert stats.kstest(draws[:, j - 1], stats.beta(j, K - j).cdf).pvalue > 1e-3


@pytest.mark.parametrize("K,T", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_grid_rejects_bad_arguments(K, T):
    with pytest.raises(ValueError):
        make_randomized_grid(K, T, CounterRng(0))


@given(st.integers(1, 300), st.floats(1e-3, 50.0), st.integers(0, 2**32), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_grid_closure(K, T, seed, it):
    g = make_randomized_grid(K, T, CounterRng(seed).at_iteration(it))
    assert g.K == K
    assert g.times[-1] - g.times[0] == T
    assert np.all(g.steps() > 0)


def test_uniform_grid_mode():
    g = make_randomized_grid(4, 2.0, mode="uniform")
    np.testing.assert_allclose(g.times, [0, 0.5, 1.0, 1.5, 2.0])


def test_timegrid_validation():
    with pytest.raises(ValueError):
        TimeGrid([0.0])
    with pytest.raises(ValueError):
        TimeGrid([0.1, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.0, 0.6, 0.5])


def test_wiener_reversed_walker_order_identical():
    grid = uniform_grid(8, 1.0)
    fwd = sample_wiener_increments(grid, 2, 3, CounterRng(11), walkers=[0, 1])
    rev = sample_wiener_increments(grid, 2, 3, CounterRng(11), walkers=[1, 0])
    np.testing.assert_array_equal(fwd.increments, rev.increments[::-1])
    np.testing.assert_array_equal(fwd.initial_noise, rev.initial_noise[::-1])


def test_wiener_chunked_equals_whole():
    grid = make_randomized_grid(16, 1.0, CounterRng(2))
    whole = sample_wiener_increments(grid, 50, 2, CounterRng(2))
    parts = [sample_wiener_increments(grid, 10, 2, CounterRng(2), walkers=np.arange(i, i + 10)) for i in range(0, 50, 10)]
    np.testing.assert_array_equal(whole.increments, np.concatenate([p.increments for p in parts]))


def test_wiener_variance_interval():
    grid = TimeGrid([0.0, 0.25])
    w = sample_wiener_increments(grid, 100_000, 1, CounterRng(0)).increments.ravel()
    v = w.var(ddof=1)
    assert 0.2475 <= v <= 0.2525
    # chi-square 99% interval for the variance
    n = w.size
    lo, hi = (n - 1) * v / stats.chi2.ppf([0.995, 0.005], n - 1)
    assert lo <= 0.25 <= hi


def test_wiener_rejects_bad_shapes():
    with pytest.raises(ValueError):
        sample_wiener_increments(uniform_grid(4, 1.0), 0, 1, CounterRng(0))
    with pytest.raises(ValueError):
        sample_wiener_increments(uniform_grid(4, 1.0), 3, 1, CounterRng(0), walkers=[0, 1])


def test_em_step_examples():
    x = np.array([[0.3, -1.0]])
    np.testing.assert_array_equal(euler_maruyama_step(x, 0.0, 0.1, 0.0, np.eye(2), np.zeros((1, 2))), x)
    out = euler_maruyama_step(np.array([[1.0]]), 0.0, 0.1, np.array([[0.5]]), np.eye(1), np.array([[0.2]]))
    assert out[0, 0] == pytest.approx(1.25, abs=1e-15)
    out = euler_maruyama_step(x, 0.0, 0.1, 0.0, np.diag([2.0, 3.0]), np.array([[0.1, 0.1]]))
    np.testing.assert_allclose(out, x + [0.2, 0.3], atol=1e-15)


def test_em_step_non_finite():
    with pytest.raises(NumericalError) as info:
        euler_maruyama_step(np.array([[0.0], [np.nan]]), 0.0, 0.1, 0.0, np.eye(1), np.zeros((2, 1)), step=4)
    assert info.value.walker == 1 and info.value.step == 4


def _deterministic_path(grid, n, d, value):
    inc = np.full((n, grid.K, d), value)
    return WienerPath(inc, np.zeros((n, d)), np.arange(n))


def test_zero_policy_accumulators_vanish():
    p = brownian_problem(2)
    grid = uniform_grid(10, 1.0)
    tr = simulate_controlled(p, ZeroPolicy(2), grid, sample_wiener_increments(grid, 20, 2, CounterRng(0)))
    for acc in (tr.acc_A, tr.acc_Abar, tr.acc_Bbar, tr.acc_C):
        assert np.all(acc == 0.0)


def test_constant_control_accumulators():
    p = brownian_problem(2)
    c = np.array([0.5, -1.5])
    grid = make_randomized_grid(7, 1.0, CounterRng(1))
    wp = _deterministic_path(grid, 3, 2, 0.1)
    tr = simulate_controlled(p, ConstPolicy(c), grid, wp)
    np.testing.assert_allclose(tr.acc_A, 0.5 * c @ c * 1.0, rtol=1e-14)
    np.testing.assert_allclose(tr.acc_C, c @ wp.increments[0].sum(axis=0), rtol=1e-14)
    np.testing.assert_array_equal(tr.acc_A, tr.acc_Abar)


def test_single_step_terminal_is_increment():
    p = brownian_problem(3)
    grid = uniform_grid(1, 1.0)
    wp = sample_wiener_increments(grid, 5, 3, CounterRng(9))
    tr = simulate_controlled(p, ZeroPolicy(3), grid, wp)
    np.testing.assert_array_equal(tr.x_final, wp.increments[:, 0])


def test_storage_is_opt_in():
    p = brownian_problem(1)
    grid = uniform_grid(6, 1.0)
    wp = sample_wiener_increments(grid, 4, 1, CounterRng(0))
    assert simulate_controlled(p, ZeroPolicy(1), grid, wp).states is None
    full = simulate_controlled(p, ZeroPolicy(1), grid, wp, store_states=True)
    assert full.states.shape == (4, 7, 1)
    np.testing.assert_allclose(full.states[:, -1], np.cumsum(wp.increments, axis=1)[:, -1])


def test_rollout_shape_mismatch():
    p = brownian_problem(2)
    grid = uniform_grid(4, 1.0)
    with pytest.raises(ValueError):
        rollout(p, ZeroPolicy(2), uniform_grid(5, 1.0), sample_wiener_increments(grid, 2, 2, CounterRng(0)))


def test_divergence_guard_raises_and_excludes():
    p = brownian_problem(1, x0=1.0, b=lambda t, x: 50.0 * x)
    grid = uniform_grid(64, 1.0)
    wp = sample_wiener_increments(grid, 8, 1, CounterRng(0))
    with pytest.raises(DivergenceError) as info:
        simulate_controlled(p, ZeroPolicy(1), grid, wp, guard=1e6)
    assert info.value.step is not None and info.value.walkers
    tr = simulate_controlled(p, ZeroPolicy(1), grid, wp, on_divergence="exclude")
    assert tr.diverged_count == 8
    assert np.all(tr.x_final == 0.0)


def test_ou_weak_order_mean():
    a, T = -0.7, 1.0
    p = brownian_problem(1, x0=1.0, b=lambda t, x: a * x)
    grid = uniform_grid(256, T)
    wp = sample_wiener_increments(grid, 100_000, 1, CounterRng(4))
    xT = simulate_controlled(p, ZeroPolicy(1), grid, wp).x_final[:, 0]
    se = xT.std(ddof=1) / np.sqrt(xT.size)
    assert abs(xT.mean() - np.exp(a * T)) < 3 * se


def test_trajectory_determinism_across_chunks():
    p = brownian_problem(2, x0_var=0.5)
    grid = make_randomized_grid(12, 1.0, CounterRng(8))
    pol = ConstPolicy([0.3, 0.1])
    whole = simulate_controlled(p, pol, grid, sample_wiener_increments(grid, 40, 2, CounterRng(8)))
    parts = [simulate_controlled(p, pol, grid, sample_wiener_increments(grid, 8, 2, CounterRng(8),
                                                                       walkers=np.arange(i, i + 8)))
             for i in range(0, 40, 8)]
    np.testing.assert_array_equal(whole.x_final, np.concatenate([q.x_final for q in parts]))
    np.testing.assert_array_equal(whole.acc_C, np.concatenate([q.acc_C for q in parts]))


def test_tree_sum_fixed_topology():
    rows = np.random.default_rng(0).normal(size=(37, 5))
    np.testing.assert_allclose(tree_sum(rows), rows.sum(axis=0), rtol=1e-13)
    np.testing.assert_array_equal(tree_sum(rows), tree_sum(rows.copy()))
    assert tree_sum(np.zeros((0, 3))).shape == (3,)
