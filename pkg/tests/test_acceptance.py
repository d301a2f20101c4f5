"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from conftest import ConstPolicy, brownian_problem
from oracles import linear_policy, linear_scalar_problem, quadrature_paths, two_step_gradient
from simfree import config as C
from simfree.cli import _make_policy, run_bench
from simfree.grad import objective_estimate, offpolicy_objective, simfree_gradient, vanilla_gradient
from simfree.policy import ZeroPolicy, init_policy
from simfree.problems import (
    LOG_2PI, FunnelTarget, LqrSpec, follmer_problem, funnel_log_density, finetune_problem, solve_riccati,
)
from simfree.rng import CounterRng
from simfree.sampling import ess, finetune_weights, follmer_sample, log_z_estimate, reweighted_expectation
from simfree.sde_core import make_randomized_grid, sample_wiener_increments, uniform_grid
from simfree.train import l2_error, train_loop


def _preset(name, **tables):
    cfg = C.preset(name)
    for table, vals in tables.items():
        cfg[table].update(vals)
    C.validate(cfg)
    return cfg


def test_c01_gradient_oracle(criterion):
    t0 = time.perf_counter()
    prob = linear_scalar_problem()
    grid, wp, wts = quadrature_paths()
    worst = 0.0
    for theta in (0.0, 0.7, -1.3):
        pol = linear_policy(theta)
        exact = two_step_gradient(theta)
        for est in (simfree_gradient(prob, pol, grid, wp, path="direct", walker_weights=wts),
                    simfree_gradient(prob, pol, grid, wp, path="stopgrad", walker_weights=wts),
                    vanilla_gradient(prob, pol, grid, wp, walker_weights=wts)):
            worst = max(worst, abs(est.grad[0] - exact) / abs(exact))
    dt = time.perf_counter() - t0
    ok = criterion(1, "gradient oracle", worst <= 1e-6 and dt < 1.0, f"max rel err {worst:.2e}, {dt:.2f}s")
    assert ok


def test_c02_estimator_agreement(criterion):
    t0 = time.perf_counter()
    cfg = _preset("lqr-easy", problem={"dim": 4})
    built = C.build_problem(cfg)
    prob = built.problem
    pol = init_policy({"kind": "mlp", "dim": 4, "widths": [8], "num_freqs": 1}, 11)
    rng = CounterRng(2024)
    grid = make_randomized_grid(32, prob.horizon, rng)
    batches, size = 50, 2000
    gs, gv = [], []
    for b in range(batches):
        wp = sample_wiener_increments(grid, size, 4, rng, walkers=np.arange(b * size, (b + 1) * size))
        gs.append(simfree_gradient(prob, pol, grid, wp).grad)
        gv.append(vanilla_gradient(prob, pol, grid, wp).grad)
    gs, gv = np.array(gs), np.array(gv)
    se = np.sqrt(gs.var(axis=0, ddof=1) / batches + gv.var(axis=0, ddof=1) / batches)
    z = np.abs(gs.mean(axis=0) - gv.mean(axis=0)) / se
    dt = time.perf_counter() - t0
    ok = criterion(2, "estimator agreement", np.all(z <= 3.0) and dt < 120,
                   f"max |diff|/SE {z.max():.2f} over {z.size} coords, {dt:.0f}s")
    assert ok


def test_c03_dual_path_identity(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for name in C.PRESET_NAMES:
        cfg = C.preset(name)
        built = C.build_problem(cfg)
        pol = _make_policy(cfg, built)
        # perturb away from zero-init so every parameter carries gradient
        pol.params.data[:] += 0.05 * np.random.default_rng(1).normal(size=pol.num_params)
        rng = CounterRng(5)
        grid = make_randomized_grid(16, built.problem.horizon, rng)
        wp = sample_wiener_increments(grid, 64, built.problem.dim, rng)
        a = simfree_gradient(built.problem, pol, grid, wp, path="direct").grad
        s = simfree_gradient(built.problem, pol, grid, wp, path="stopgrad").grad
        worst = max(worst, np.linalg.norm(a - s) / np.linalg.norm(a), np.abs(a - s).max() / np.abs(a).max())
    dt = time.perf_counter() - t0
    ok = criterion(3, "dual-path identity", worst <= 1e-12 and dt < 30, f"max rel diff {worst:.1e}, {dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_c04_linear_ou_convergence(criterion):
    cfg = _preset("linear-ou", problem={"dim": 8}, train={"eval_every": 5000})
    built = C.build_problem(cfg)
    pol = _make_policy(cfg, built)
    tcfg = C.train_config(cfg)
    assert (tcfg.iterations, tcfg.walkers, tcfg.steps) == (5000, 1000, 64)
    t0 = time.perf_counter()
    res = train_loop(built.problem, pol, tcfg, u_star=built.u_star)
    start = res.metrics[0].l2_err
    end = l2_error(built.problem, pol, built.u_star, n=256)
    dt = time.perf_counter() - t0
    ok = criterion(4, "linear OU convergence", start / end >= 10 and dt < 1200,
                   f"l2 {start:.3g} -> {end:.3g} ({start / end:.0f}x), {dt:.0f}s")
    assert ok


def test_c05_riccati(criterion):
    t0 = time.perf_counter()
    q, T = 0.7, 1.0
    sol = solve_riccati(LqrSpec(np.zeros((1, 1)), np.zeros((1, 1)), [[q]], np.eye(1)), T, 4096)
    exact = q / (1 + 2 * q * (T - sol.times))
    err1 = np.max(np.abs(sol.F[:, 0, 0] / exact - 1))
    I = np.eye(20)
    spec = LqrSpec(0.2 * I, 0.2 * I, 0.1 * I, I)
    coarse = solve_riccati(spec, T, 4096)
    fine = solve_riccati(spec, T, 409600, keep_every=100)
    np.testing.assert_array_equal(coarse.times, fine.times)
    err2 = np.max(np.abs(coarse.F - fine.F)) / np.max(np.abs(fine.F))
    dt = time.perf_counter() - t0
    ok = criterion(5, "Riccati correctness", err1 <= 1e-8 and err2 <= 1e-8 and dt < 60,
                   f"closed form {err1:.1e}, self-convergence {err2:.1e}, {dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_c06_lqr_easy_convergence(criterion):
    cfg = _preset("lqr-easy", problem={"dim": 8}, train={"iterations": 3000, "eval_every": 3000})
    built = C.build_problem(cfg)
    pol = _make_policy(cfg, built)
    t0 = time.perf_counter()
    res = train_loop(built.problem, pol, C.train_config(cfg), u_star=built.u_star)
    start = res.metrics[0].l2_err
    end = l2_error(built.problem, pol, built.u_star, n=256)
    dt = time.perf_counter() - t0
    ok = criterion(6, "LQR-easy convergence", start / end >= 10 and dt < 1800,
                   f"l2 {start:.3g} -> {end:.3g} ({start / end:.0f}x) in 3000 its, {dt:.0f}s")
    assert ok


def test_c07_gaussian_certificate(criterion):
    t0 = time.perf_counter()
    built = C.build_problem(_preset("gaussian-follmer", problem={"dim": 10}))
    n = 1000
    ws = follmer_sample(built.problem, ZeroPolicy(10), n, 100, CounterRng(3))
    log_z, se = log_z_estimate(ws)
    e = ess(ws)
    dt = time.perf_counter() - t0
    ok = criterion(7, "zero-variance Gaussian", abs(log_z - 5 * LOG_2PI) <= 1e-10 and e == n and dt < 1.0,
                   f"log Z err {abs(log_z - 5 * LOG_2PI):.1e}, ESS {e:g}/{n}, SE {se:g}, {dt:.2f}s")
    assert ok


@pytest.fixture(scope="module")
def funnel_run():
    cfg = C.preset("funnel")
    built = C.build_problem(cfg)
    pol = _make_policy(cfg, built)
    tcfg = C.train_config(cfg)
    t0 = time.perf_counter()
    train_loop(built.problem, pol, tcfg)
    ws = follmer_sample(built.problem, pol, 10_000, 100, CounterRng(7))
    return tcfg, ws, time.perf_counter() - t0


@pytest.mark.long
def test_c08_funnel_log_z(criterion, funnel_run):
    tcfg, ws, dt = funnel_run
    assert tcfg.steps == 100 and tcfg.walkers == 1000 and tcfg.iterations >= 5000
    log_z, se = log_z_estimate(ws)
    ok = criterion(8, "funnel log-Z", abs(log_z) <= 0.05 and se <= 0.02 and dt <= 7200,
                   f"log Z {log_z:+.4f} ± {se:.4f}, ESS {ess(ws):.0f}, {tcfg.iterations} its, {dt / 60:.0f} min")
    assert ok


@pytest.mark.long
def test_funnel_first_coordinate_variance(funnel_run):
    # the x0 marginal is N(0, s²) with s = 1
    _, ws, _ = funnel_run
    assert reweighted_expectation(ws, lambda x: x[:, 0] ** 2) == pytest.approx(1.0, rel=0.05)


@pytest.mark.long
def test_funnel_pathwise_reference():
    # same preset, sampler and evaluation with the low-variance pathwise gradient;
    # separates sampler quality from gradient noise when criterion 8 misses
    cfg = _preset("funnel", train={"estimator": "vanilla", "iterations": 3000, "eval_every": 0})
    built = C.build_problem(cfg)
    pol = _make_policy(cfg, built)
    train_loop(built.problem, pol, C.train_config(cfg))
    log_z, se = log_z_estimate(follmer_sample(built.problem, pol, 10_000, 100, CounterRng(7)))
    print(f"pathwise reference: log Z {log_z:+.4f} ± {se:.4f}")
    assert abs(log_z) <= 0.05 and se <= 0.02


def test_c09_memory_structure(criterion):
    t0 = time.perf_counter()
    built = C.build_problem(_preset("lqr-easy", problem={"dim": 4}))
    pol = init_policy({"kind": "mlp", "dim": 4, "widths": [64, 64], "num_freqs": 4}, 0)
    Ks = [32, 64, 128, 256]
    rows = run_bench(built.problem, pol, Ks, walkers=256, repeats=3, estimators=["simfree", "vanilla"])
    rec = {(r["estimator"], r["K"]): r["stored_step_records"] for r in rows}
    wall = [r["wall_s"] for r in rows if r["estimator"] == "vanilla"]
    counters = all(rec[("simfree", K)] == 0 and rec[("vanilla", K)] == K for K in Ks)
    increasing = all(b > a for a, b in zip(wall, wall[1:]))
    dt = time.perf_counter() - t0
    ok = criterion(9, "memory-scaling structure", counters and increasing and dt < 600,
                   "vanilla s/iter " + ", ".join(f"{w:.3f}" for w in wall) + f"; {dt:.0f}s")
    assert ok


def test_c10_girsanov(criterion):
    t0 = time.perf_counter()
    built = C.build_problem(_preset("lqr-easy", problem={"dim": 2}))
    pol = init_policy({"kind": "mlp", "dim": 2, "widths": [16], "num_freqs": 2}, 3)
    grid = make_randomized_grid(32, 1.0, CounterRng(0))
    wp = sample_wiener_increments(grid, 2000, 2, CounterRng(0))
    loss, weights = offpolicy_objective(built.problem, pol, pol, grid, wp)
    bitwise = loss == objective_estimate(built.problem, pol, grid, wp) and np.all(weights.log_m == 0.0)
    prob = brownian_problem(1, g=lambda x: x[:, 0] ** 2)
    grid = uniform_grid(16, 1.0)
    wp = sample_wiener_increments(grid, 100_000, 1, CounterRng(10))
    _, weights = offpolicy_objective(prob, ConstPolicy([0.5]), ConstPolicy([-0.4]), grid, wp)
    m = np.exp(weights.log_m)
    z = abs(m.mean() - 1.0) / (m.std(ddof=1) / np.sqrt(m.size))
    dt = time.perf_counter() - t0
    ok = criterion(10, "Girsanov consistency", bitwise and z <= 3 and dt < 60,
                   f"on-policy bitwise {bitwise}, |E[M]-1|/SE {z:.2f}, {dt:.1f}s")
    assert ok


def test_c11_finetune_identity(criterion):
    t0 = time.perf_counter()
    target = FunnelTarget()
    U = lambda x: -funnel_log_density(target, x)  # noqa: E731
    d = target.dim
    base = follmer_problem(U, dim=d)
    r = lambda x: 0.5 * np.einsum("ij,ij->i", x, x) - U(x)  # noqa: E731
    tuned = finetune_problem(lambda t, x: np.zeros_like(x), lambda t: np.eye(d), 1.0, r, d)
    pol = init_policy({"kind": "mlp", "dim": d, "widths": [16], "num_freqs": 2}, 8)
    pol.params.data[:] *= 0.3
    ws = follmer_sample(base, pol, 2000, 50, CounterRng(4))
    wr = finetune_weights(tuned, r, pol, 2000, 50, CounterRng(4))
    same_x = np.array_equal(ws.samples, wr.samples)
    same = np.array_equal(wr.log_weights + 0.5 * d * LOG_2PI, ws.log_weights)
    dt = time.perf_counter() - t0
    ok = criterion(11, "fine-tune reduction identity", same_x and same and dt < 10,
                   f"bitwise log M {same}, shared samples {same_x}, {dt:.2f}s")
    assert ok
