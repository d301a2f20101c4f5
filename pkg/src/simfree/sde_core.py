"""Time grids, Wiener increments and Euler-Maruyama simulation of controlled SDEs."""

from dataclasses import dataclass, field

import numpy as np

from .rng import INITIAL, WIENER, as_counter_rng

DEFAULT_GUARD = 1e6


class NumericalError(FloatingPointError):
    """Non-finite value met during simulation."""

    def __init__(self, message, walker=None, step=None):
        super().__init__(message)
        self.walker = walker
        self.step = step


class DivergenceError(NumericalError):
    """A walker left the divergence guard."""

    def __init__(self, message, walkers=(), step=None, max_abs=None):
        walkers = [int(w) for w in walkers]
        super().__init__(message, walker=walkers[0] if walkers else None, step=step)
        self.walkers = walkers
        self.max_abs = max_abs


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two instants")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) < 0):
            raise ValueError("time grid must be sorted")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def K(self):
        return self.times.size - 1

    @property
    def T(self):
        return float(self.times[-1])

    def steps(self):
        return np.diff(self.times)


def uniform_grid(K, T):
    if K < 1 or T <= 0:
        raise ValueError(f"need K >= 1 and T > 0, got K={K}, T={T}")
    t = np.arange(K + 1) * (T / K)
    t[-1] = T
    return TimeGrid(t)


def make_randomized_grid(K, T, rng=None, mode="randomized"):
    """K-step grid on [0, T].

    In ``randomized`` mode the K-1 interior instants are sorted i.i.d.
    Uniform(0, T) draws; ``uniform`` gives the equispaced grid.  ``rng`` is any
    object with a ``uniform(low, high, size)`` method (numpy Generator or
    :class:`~simfree.rng.CounterRng`).
    """
    if int(K) != K or K < 1 or not T > 0:
        raise ValueError(f"need K >= 1 and T > 0, got K={K}, T={T}")
    K = int(K)
    if mode == "uniform":
        return uniform_grid(K, T)
    if mode != "randomized":
        raise ValueError(f"unknown grid mode {mode!r}")
    if K == 1:
        return TimeGrid(np.array([0.0, float(T)]))
    if rng is None:
        raise ValueError("randomized grid needs an rng")
    interior = np.sort(np.asarray(rng.uniform(0.0, T, size=K - 1), dtype=float))
    t = np.concatenate(([0.0], interior, [float(T)]))
    if np.any(np.diff(t) <= 0):  # ties have probability zero; keep the contract anyway
        raise NumericalError("randomized grid produced a zero-length step")
    return TimeGrid(t)


@dataclass
class WienerPath:
    """Brownian increments ``(n, K, d)`` plus the standard normals for the initial law."""

    increments: np.ndarray
    initial_noise: np.ndarray
    walkers: np.ndarray

    @property
    def shape(self):
        return self.increments.shape

    def subset(self, sl):
        return WienerPath(self.increments[sl], self.initial_noise[sl], self.walkers[sl])


def sample_wiener_increments(grid, n, d, rng, walkers=None):
    """``ΔW[i, k] = sqrt(Δt_k) ζ`` with ζ drawn from walker i's own counter stream."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = as_counter_rng(rng)
    walkers = np.arange(n, dtype=np.int64) if walkers is None else np.asarray(walkers, dtype=np.int64)
    if walkers.shape != (n,):
        raise ValueError("walker index array must have length n")
    K = grid.K
    z = rng.normals(WIENER, walkers, K * d).reshape(n, K, d)
    z *= np.sqrt(grid.steps())[None, :, None]
    x0 = rng.normals(INITIAL, walkers, d)
    return WienerPath(z, x0, walkers)


def euler_maruyama_step(x, t, dt, drift, sigma, dW, step=None):
    """One Euler-Maruyama step ``x + drift dt + σ ΔW`` for a batch of rows."""
    x = np.asarray(x, dtype=float)
    out = x + drift * dt + dW @ np.asarray(sigma).T
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(np.atleast_2d(out)).all(axis=1)).ravel()
        raise NumericalError(f"non-finite state at step {step}, t={t}", walker=int(bad[0]), step=step)
    return out


@dataclass
class TrajectoryBatch:
    x_final: np.ndarray
    acc_A: np.ndarray
    acc_Abar: np.ndarray
    acc_Bbar: np.ndarray
    acc_C: np.ndarray
    wiener: WienerPath
    grid: TimeGrid
    states: np.ndarray = None
    alive: np.ndarray = None
    diverged_steps: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x_final.shape[0]

    @property
    def diverged_count(self):
        return int(np.count_nonzero(~self.alive))


def initial_states(problem, wiener):
    return problem.initial_law.sample_from_normals(wiener.initial_noise)


def rollout(problem, policy, grid, wiener, *, store_states=False, guard=DEFAULT_GUARD,
            on_divergence="raise", step_hook=None, want_tape=False):
    """Shared simulation loop.

    ``step_hook(k, t, dt, x, u, dW, tape, alive)`` is called at every step
    with the pre-update state; ``tape`` is the policy's per-step activation
    cache when ``want_tape`` is set and ``None`` otherwise.
    """
    n, K, d = wiener.increments.shape
    if K != grid.K or d != problem.dim:
        raise ValueError(f"wiener shape {wiener.increments.shape} does not match grid K={grid.K}, d={problem.dim}")
    times = grid.times
    dts = grid.steps()
    x = initial_states(problem, wiener)
    A = np.zeros(n)
    Abar = np.zeros(n)
    B = np.zeros(n)
    C = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    diverged = {}
    states = None
    if store_states:
        states = np.empty((n, K + 1, d))
        states[:, 0] = x
    for k in range(K):
        t = times[k]
        dt = dts[k]
        dW = wiener.increments[:, k]
        if want_tape:
            u, tape = policy.forward_tape(t, x)
        else:
            u, tape = policy.forward(t, x), None
        if not np.all(np.isfinite(u)):
            bad = np.flatnonzero(~np.isfinite(u).all(axis=1) & alive)
            if bad.size and on_divergence == "raise":
                raise NumericalError(f"non-finite control at step {k}", walker=int(wiener.walkers[bad[0]]), step=k)
            u = np.where(np.isfinite(u), u, 0.0)
            _mark(alive, bad, k, diverged)
        if step_hook is not None:
            step_hook(k, t, dt, x, u, dW, tape, alive)
        half_sq = 0.5 * np.einsum("ij,ij->i", u, u) * dt
        A += half_sq
        Abar += half_sq
        if problem.running_cost is not None:
            B += problem.running_cost(t, x) * dt
        C += np.einsum("ij,ij->i", u, dW)
        sigma = problem.volatility(t)
        drift = problem.base_drift(t, x) + u @ sigma.T
        x = x + drift * dt + dW @ sigma.T
        bad_rows = ~(np.isfinite(x).all(axis=1) & (np.abs(x).max(axis=1) <= guard)) & alive
        if bad_rows.any():
            bad = np.flatnonzero(bad_rows)
            with np.errstate(invalid="ignore"):
                mx = float(np.nanmax(np.abs(x[bad])))
            if on_divergence == "raise":
                raise DivergenceError(
                    f"{bad.size} walker(s) exceeded |x| <= {guard:g} at step {k + 1} (max |x| = {mx:.3g})",
                    walkers=wiener.walkers[bad], step=k + 1, max_abs=mx)
            _mark(alive, bad, k + 1, diverged)
        if diverged:
            # excluded walkers stay parked at the origin
            x[~alive] = 0.0
        if store_states:
            states[:, k + 1] = x
    return TrajectoryBatch(x, A, Abar, B, C, wiener, grid, states, alive, diverged)


def _mark(alive, bad, step, diverged):
    for i in bad:
        if alive[i]:
            diverged[int(i)] = step
    alive[bad] = False


def simulate_controlled(problem, policy, grid, wiener, store_states=False,
                        guard=DEFAULT_GUARD, on_divergence="raise"):
    """Euler-Maruyama simulation with drift ``b + σu`` and running accumulators.

    Per walker: ``A = Ā = Σ ½|u_k|² Δt_k``, ``B̄ = Σ f(t_k, x_k) Δt_k`` and
    ``C = Σ u_k · ΔW_k``.  Only the terminal state is kept unless
    ``store_states`` is set.
    """
    return rollout(problem, policy, grid, wiener, store_states=store_states,
                   guard=guard, on_divergence=on_divergence)


def tree_sum(rows):
    """Pairwise reduction over axis 0 with a topology fixed by the row count."""
    rows = np.asarray(rows)
    while rows.shape[0] > 1:
        if rows.shape[0] % 2:
            head = rows[:-1:2] + rows[1::2]
            rows = np.concatenate([head, rows[-1:]], axis=0)
        else:
            rows = rows[0::2] + rows[1::2]
    return rows[0] if rows.shape[0] else np.zeros(rows.shape[1:])
