"""Gradient and objective estimators for parameterised feedback controls.

``simfree_gradient``
    On-policy gradient without differentiating the state trajectory.  Per
    walker ``i`` it needs ``G1_i = Σ_k Δt_k uᵀ∂θu``, ``S_i = Σ_k ΔW_kᵀ∂θu`` and the
    scalar path cost ``w_i``; the estimate is ``mean_i(G1_i + w_i S_i)``.

    ``path="direct"`` keeps ``G1_i`` and ``S_i`` as per-walker buffers filled in
    a single streaming pass (memory ``chunk × |θ|``).

    ``path="stopgrad"`` differentiates the surrogate
    ``L̂(θ, θ̄) = mean_i[A_i^θ + (Ā_i + B̄_i + g_i) C_i^θ]`` where only ``A^θ``
    and ``C^θ`` carry θ-dependence.  The detached weight is only known at the
    end of a path, so the walkers are simulated once to get it and replayed
    bit-identically (same noise, same parameters) while the per-step VJPs with
    cotangent ``Δt_k u_k + w̄_i ΔW_k`` are reduced over walkers.  No state or
    tape history is kept in either path.

``vanilla_gradient``
    Pathwise derivative of the empirical objective by a reverse sweep through
    the Euler-Maruyama recursion.  Retains one tape per time step.
"""

from dataclasses import dataclass, field

import numpy as np

from .sde_core import DEFAULT_GUARD, rollout, tree_sum

DEFAULT_CHUNK = 4096


@dataclass
class GradEstimate:
    grad: np.ndarray
    loss: float
    n_walkers: int
    weight_mean: float = 0.0
    weight_var: float = 0.0
    diverged_count: int = 0
    stored_step_records: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def per_walker_weight_stats(self):
        return {"mean": self.weight_mean, "var": self.weight_var}


@dataclass
class GirsanovWeight:
    log_m: np.ndarray

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.log_m))) if self.log_m.size else 0.0


def _chunks(n, chunk_size):
    chunk_size = n if not chunk_size else int(chunk_size)
    for lo in range(0, n, chunk_size):
        yield slice(lo, min(n, lo + chunk_size))


def _reduce(parts, deterministic):
    parts = np.asarray(parts)
    if deterministic:
        return tree_sum(parts)
    return parts.sum(axis=0)


def _on_divergence(strict):
    return "raise" if strict else "exclude"


def path_costs(problem, traj):
    """Per-walker ``Ā + B̄ + g(x_K)``."""
    return traj.acc_Abar + traj.acc_Bbar + problem.terminal_cost(traj.x_final)


def _finish(problem, parts, costs, alive, n, deterministic, extras, walker_weights):
    keep = np.concatenate(alive)
    w = np.concatenate(costs)
    n_alive = int(keep.sum())
    if n_alive == 0:
        raise FloatingPointError("every walker diverged")
    wk = w[keep]
    if walker_weights is None:
        grad = _reduce(parts, deterministic) / n_alive
        loss = float(np.mean(wk))
    else:
        q = np.asarray(walker_weights, dtype=float)[keep]
        grad = _reduce(parts, deterministic) / q.sum()
        loss = float(np.dot(q, wk) / q.sum())
    return GradEstimate(
        grad=grad, loss=loss, n_walkers=n_alive,
        weight_mean=float(np.mean(wk)), weight_var=float(np.var(wk)),
        diverged_count=n - n_alive, stored_step_records=0, extras=extras)


def _chunk_weights(walker_weights, sl, m):
    if walker_weights is None:
        return np.ones(m)
    return np.asarray(walker_weights, dtype=float)[sl]


def simfree_gradient(problem, policy, grid, wiener, path="stopgrad", strict=False,
                     chunk_size=DEFAULT_CHUNK, deterministic=True, guard=DEFAULT_GUARD,
                     walker_weights=None):
    """Simulation-free on-policy gradient of the control objective.

    ``walker_weights`` replaces the plain walker average by a weighted one
    (e.g. quadrature weights over deterministic increments).
    """
    if path not in ("direct", "stopgrad"):
        raise ValueError(f"unknown simfree path {path!r}")
    n = wiener.increments.shape[0]
    P = policy.num_params
    parts, costs, alive, surrogate = [], [], [], []
    mode = _on_divergence(strict)
    for sl in _chunks(n, chunk_size):
        wp = wiener.subset(sl)
        m = wp.increments.shape[0]
        if path == "direct":
            G1 = np.zeros((m, P))
            S = np.zeros((m, P))

            def hook(k, t, dt, x, u, dW, tape, live):
                policy.vjp_tape(tape, u * dt, out=G1, per_sample=True)
                policy.vjp_tape(tape, dW, out=S, per_sample=True)

            traj = rollout(problem, policy, grid, wp, guard=guard, on_divergence=mode,
                           step_hook=hook, want_tape=True)
            w = path_costs(problem, traj)
            keep = traj.alive
            q = _chunk_weights(walker_weights, sl, m)[keep, None]
            contrib = q * (G1[keep] + w[keep, None] * S[keep])
            parts.append(_reduce(contrib, deterministic) if contrib.shape[0] else np.zeros(P))
        else:
            traj = rollout(problem, policy, grid, wp, guard=guard, on_divergence=mode)
            w = path_costs(problem, traj)
            keep = traj.alive
            q = _chunk_weights(walker_weights, sl, m)
            wbar = np.where(keep, q * w, 0.0)[:, None]
            mask = np.where(keep, q, 0.0)[:, None]
            g = np.zeros(P)

            def hook(k, t, dt, x, u, dW, tape, live):
                policy.vjp_tape(tape, mask * (u * dt) + wbar * dW, out=g)

            replay = rollout(problem, policy, grid, wp, guard=guard, on_divergence="exclude",
                             step_hook=hook, want_tape=True)
            if not np.array_equal(replay.x_final, traj.x_final):
                raise RuntimeError("replay pass diverged from the first pass; policy is not deterministic")
            parts.append(g)
            surrogate.append(np.where(keep, traj.acc_A + w * traj.acc_C, 0.0))
        costs.append(w)
        alive.append(keep)
    extras = {"path": path}
    keep = np.concatenate(alive)
    if surrogate and keep.any():
        extras["surrogate_loss"] = float(np.concatenate(surrogate)[keep].mean())
    return _finish(problem, parts, costs, alive, n, deterministic, extras, walker_weights)


def vanilla_gradient(problem, policy, grid, wiener, strict=False, chunk_size=DEFAULT_CHUNK,
                     deterministic=True, guard=DEFAULT_GUARD, walker_weights=None):
    """Backpropagation through the discretised SDE (the baseline estimator)."""
    if problem.terminal_cost_grad is None or problem.drift_vjp is None:
        raise ValueError(f"problem {problem.name!r} lacks the Jacobians needed by the pathwise gradient")
    if problem.running_cost is not None and problem.running_cost_grad is None:
        raise ValueError(f"problem {problem.name!r} lacks the running-cost gradient")
    n = wiener.increments.shape[0]
    P = policy.num_params
    parts, costs, alive = [], [], []
    records = []
    mode = _on_divergence(strict)
    stored = 0
    for sl in _chunks(n, chunk_size):
        wp = wiener.subset(sl)
        records = []

        def hook(k, t, dt, x, u, dW, tape, live):
            records.append((t, dt, x, u, tape))

        traj = rollout(problem, policy, grid, wp, guard=guard, on_divergence=mode,
                       step_hook=hook, want_tape=True)
        stored = max(stored, len(records))
        keep = traj.alive
        mask = np.where(keep, _chunk_weights(walker_weights, sl, keep.size), 0.0)[:, None]
        lam = mask * problem.terminal_cost_grad(traj.x_final)
        g = np.zeros(P)
        for t, dt, x, u, tape in reversed(records):
            sigma = problem.volatility(t)
            du = dt * (mask * u + lam @ sigma)
            _, gx = policy.vjp_tape(tape, du, out=g, want_input=True)
            nxt = lam + dt * problem.drift_vjp(t, x, lam) + gx
            if problem.running_cost_grad is not None:
                nxt = nxt + dt * mask * problem.running_cost_grad(t, x)
            lam = nxt
        records.clear()
        parts.append(g)
        costs.append(path_costs(problem, traj))
        alive.append(keep)
    est = _finish(problem, parts, costs, alive, n, deterministic, {"path": "vanilla"}, walker_weights)
    est.stored_step_records = stored
    return est


def per_walker_costs(problem, policy, grid, wiener, guard=DEFAULT_GUARD, on_divergence="raise"):
    """Per-walker on-policy costs ``Ā + B̄ + g`` and the alive mask."""
    traj = rollout(problem, policy, grid, wiener, guard=guard, on_divergence=on_divergence)
    return path_costs(problem, traj), traj.alive


def objective_estimate(problem, policy, grid, wiener, guard=DEFAULT_GUARD):
    """Plain on-policy Monte-Carlo estimate of the control objective."""
    costs, _ = per_walker_costs(problem, policy, grid, wiener, guard=guard)
    return float(np.mean(costs))


def offpolicy_objective(problem, policy_u, policy_v, grid, wiener, guard=DEFAULT_GUARD,
                        return_costs=False):
    """Objective of ``u`` from paths driven by ``v``, reweighted by the Girsanov factor.

    ``log M = -Σ (v_k - u_k)·ΔW_k - ½ Σ |v_k - u_k|² Δt_k``.  Returns
    ``(loss, GirsanovWeight)`` and the per-walker costs when ``return_costs``.
    """
    n = wiener.increments.shape[0]
    Au = np.zeros(n)
    log_m = np.zeros(n)

    def hook(k, t, dt, x, v, dW, tape, live):
        u = policy_u.forward(t, x)
        Au[:] += 0.5 * np.einsum("ij,ij->i", u, u) * dt
        diff = v - u
        log_m[:] -= np.einsum("ij,ij->i", diff, dW) + 0.5 * np.einsum("ij,ij->i", diff, diff) * dt

    traj = rollout(problem, policy_v, grid, wiener, guard=guard, step_hook=hook)
    cost = Au + traj.acc_Bbar + problem.terminal_cost(traj.x_final)
    top = float(np.max(log_m))
    loss = float(np.mean(cost * np.exp(log_m - top)) * np.exp(top))
    weights = GirsanovWeight(log_m)
    if return_costs:
        return loss, weights, cost
    return loss, weights
