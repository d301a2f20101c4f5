"""Control problem definitions, analytic optimal controls and the Riccati solver.

All callables act on batches: states are ``(n, d)`` arrays, scalar fields
return ``(n,)`` arrays.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

LOG_2PI = float(np.log(2.0 * np.pi))


class RiccatiDivergenceError(ArithmeticError):
    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class InitialLaw:
    """Point mass at ``mean`` or a Gaussian with diagonal covariance ``var``."""

    kind: str
    mean: np.ndarray
    var: Optional[np.ndarray] = None

    @classmethod
    def point(cls, x0):
        return cls("point", np.atleast_1d(np.asarray(x0, dtype=float)))

    @classmethod
    def gaussian(cls, mean, var):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape).copy()
        if np.any(var < 0):
            raise ValueError("initial variance must be non-negative")
        return cls("gaussian", mean, var)

    @property
    def is_point_mass(self):
        return self.kind == "point"

    def sample_from_normals(self, z):
        if self.kind == "point":
            return np.broadcast_to(self.mean, z.shape).copy()
        return self.mean + np.sqrt(self.var) * z


@dataclass(frozen=True)
class SocProblem:
    dim: int
    horizon: float
    base_drift: Callable
    volatility: Callable
    running_cost: Optional[Callable]
    terminal_cost: Callable
    initial_law: InitialLaw
    name: str = "custom"
    # Jacobian hooks for the pathwise (vanilla) baseline
    drift_vjp: Optional[Callable] = None
    running_cost_grad: Optional[Callable] = None
    terminal_cost_grad: Optional[Callable] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.initial_law.mean.shape != (self.dim,):
            raise ValueError("initial law dimension does not match problem dimension")
        for t in np.linspace(0.0, self.horizon, 5):
            s = np.asarray(self.volatility(t), dtype=float)
            if s.shape != (self.dim, self.dim):
                raise ValueError(f"volatility must be {self.dim}x{self.dim}")
            if not np.isfinite(np.linalg.cond(s)) or np.linalg.cond(s) > 1e12:
                raise ValueError(f"volatility is not invertible at t={t}")


def _const_matrix(m):
    m = np.array(m, dtype=float)
    m.setflags(write=False)
    return lambda t: m


def _zero_drift(t, x):
    return np.zeros_like(x)


def _zero_vjp(t, x, v):
    return np.zeros_like(v)


# --------------------------------------------------------------------------
# Linear Ornstein-Uhlenbeck with linear terminal cost
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearOuSpec:
    A: np.ndarray
    gamma: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        s = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        d = g.size
        if A.shape != (d, d) or s.shape != (d, d):
            raise ValueError("LinearOuSpec: A and sigma0 must be d x d with d = len(gamma)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "sigma0", s)

    @property
    def dim(self):
        return self.gamma.size


def linear_ou_optimal_control(spec, T, t, x=None):
    """``u*(t) = -σ0ᵀ exp(Aᵀ(T - t)) γ``; independent of the state."""
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    u = -spec.sigma0.T @ (expm(spec.A.T * (T - t)) @ spec.gamma)
    if x is None:
        return u
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(u, x.shape).copy()


def linear_ou_problem(spec, T=1.0, x0_var=0.5, name="linear-ou"):
    A, gamma, s0 = spec.A, spec.gamma, spec.sigma0
    return SocProblem(
        dim=spec.dim, horizon=T,
        base_drift=lambda t, x: x @ A.T,
        volatility=_const_matrix(s0),
        running_cost=None,
        terminal_cost=lambda x: x @ gamma,
        initial_law=InitialLaw.gaussian(np.zeros(spec.dim), x0_var),
        name=name,
        drift_vjp=lambda t, x, v: v @ A,
        running_cost_grad=None,
        terminal_cost_grad=lambda x: np.broadcast_to(gamma, x.shape),
        meta={"ou": spec},
    )


class LinearOuControl:
    """Analytic control of the linear OU problem, usable wherever a policy is."""

    def __init__(self, spec, T):
        self.spec = spec
        self.T = T
        self._cache = {}

    def at(self, t):
        key = float(t)
        u = self._cache.get(key)
        if u is None:
            u = linear_ou_optimal_control(self.spec, self.T, key)
            if len(self._cache) < 100_000:
                self._cache[key] = u
        return u

    def forward(self, t, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.at(t), x.shape).copy()


# --------------------------------------------------------------------------
# Linear-quadratic regulator
# --------------------------------------------------------------------------

def _check_psd(name, m):
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class LqrSpec:
    A: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        mats = {k: np.atleast_2d(np.asarray(getattr(self, k), dtype=float)) for k in ("A", "P", "Q", "sigma0")}
        d = mats["A"].shape[0]
        for k, m in mats.items():
            if m.shape != (d, d):
                raise ValueError(f"LqrSpec.{k} must be {d}x{d}")
            object.__setattr__(self, k, m)
        _check_psd("P", mats["P"])
        _check_psd("Q", mats["Q"])

    @property
    def dim(self):
        return self.A.shape[0]


@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray
    F: np.ndarray  # (len(times), d, d)

    def at(self, t):
        """F_t by linear interpolation in t."""
        times = self.times
        if t <= times[0]:
            return self.F[0]
        if t >= times[-1]:
            return self.F[-1]
        j = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[j]) / (times[j + 1] - times[j])
        return (1.0 - w) * self.F[j] + w * self.F[j + 1]


def riccati_rhs(F, A, P, S):
    """dF/dt from the LQR Riccati equation, with ``S = σ0 σ0ᵀ``."""
    return -(A.T @ F + F @ A - 2.0 * F @ S @ F + P)


def solve_riccati(spec, T, steps, keep_every=1, blowup=1e8):
    """Backward RK4 for ``dF/dt + AᵀF + FA - 2Fσ0σ0ᵀF + P = 0``, ``F_T = Q``.

    ``keep_every`` thins the stored grid (the integration step is unchanged),
    which keeps very fine reference solves within memory.
    """
    if steps < 16:
        raise ValueError("Riccati solve needs at least 16 steps")
    if steps % keep_every:
        raise ValueError("keep_every must divide steps")
    A, P = spec.A, spec.P
    S = spec.sigma0 @ spec.sigma0.T
    h = T / steps
    F = spec.Q.copy()
    stored = [F.copy()]
    stored_t = [T]
    for j in range(steps):
        t = T - j * h
        k1 = riccati_rhs(F, A, P, S)
        k2 = riccati_rhs(F - 0.5 * h * k1, A, P, S)
        k3 = riccati_rhs(F - 0.5 * h * k2, A, P, S)
        k4 = riccati_rhs(F - h * k3, A, P, S)
        F = F - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        F = 0.5 * (F + F.T)
        if not np.all(np.isfinite(F)) or np.abs(F).max() > blowup:
            raise RiccatiDivergenceError(f"Riccati solution blew up near t={t - h:.6g}", t - h)
        if (j + 1) % keep_every == 0:
            stored.append(F.copy())
            stored_t.append(T - (j + 1) * h if j + 1 < steps else 0.0)
    times = np.array(stored_t[::-1])
    times[0] = 0.0
    return RiccatiSolution(times, np.array(stored[::-1]))


def lqr_optimal_control(riccati, sigma0, t, x):
    """``u*(t, x) = -2 σ0ᵀ F_t x`` (rows of ``x`` are states)."""
    x = np.asarray(x, dtype=float)
    M = -2.0 * np.asarray(sigma0).T @ riccati.at(t)
    return x @ M.T


class LqrControl:
    def __init__(self, riccati, sigma0):
        self.riccati = riccati
        self.sigma0 = np.asarray(sigma0, dtype=float)

    def forward(self, t, x):
        return lqr_optimal_control(self.riccati, self.sigma0, t, np.atleast_2d(x))


def lqr_problem(spec, T=1.0, x0_var=0.5, name="lqr"):
    A, P, Q = spec.A, spec.P, spec.Q
    return SocProblem(
        dim=spec.dim, horizon=T,
        base_drift=lambda t, x: x @ A.T,
        volatility=_const_matrix(spec.sigma0),
        running_cost=lambda t, x: np.einsum("ij,jk,ik->i", x, P, x),
        terminal_cost=lambda x: np.einsum("ij,jk,ik->i", x, Q, x),
        initial_law=InitialLaw.gaussian(np.zeros(spec.dim), x0_var),
        name=name,
        drift_vjp=lambda t, x, v: v @ A,
        running_cost_grad=lambda t, x: x @ (P + P.T),
        terminal_cost_grad=lambda x: x @ (Q + Q.T),
        meta={"lqr": spec},
    )


# --------------------------------------------------------------------------
# Funnel target
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FunnelTarget:
    """Neal's funnel: ``x0 ~ N(0, s²)``, ``x_i | x0 ~ N(0, exp(x0))`` for i >= 1.

    ``sigma0_funnel`` is the standard deviation ``s`` of the first coordinate.
    """

    dim: int = 10
    sigma0_funnel: float = 1.0


def _funnel_check(target, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != target.dim:
        raise ValueError(f"funnel expects dimension {target.dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("funnel density needs finite input")
    return x, single


def funnel_log_density(target, x):
    x, single = _funnel_check(target, x)
    s = target.sigma0_funnel
    m = target.dim - 1
    x0 = x[:, 0]
    rest_sq = np.einsum("ij,ij->i", x[:, 1:], x[:, 1:])
    out = (-0.5 * x0 * x0 / (s * s) - np.log(s) - 0.5 * LOG_2PI
           - 0.5 * m * (LOG_2PI + x0) - 0.5 * np.exp(-x0) * rest_sq)
    return out[0] if single else out


def funnel_score(target, x):
    x, single = _funnel_check(target, x)
    s = target.sigma0_funnel
    e = np.exp(-x[:, 0])
    g = np.empty_like(x)
    g[:, 0] = -x[:, 0] / (s * s) - 0.5 * (target.dim - 1) + 0.5 * e * np.einsum("ij,ij->i", x[:, 1:], x[:, 1:])
    g[:, 1:] = -e[:, None] * x[:, 1:]
    return g[0] if single else g


def funnel_hvp(target, x, v):
    """Hessian of the funnel log-density applied to ``v`` (row-wise)."""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    s = target.sigma0_funnel
    e = np.exp(-x[:, 0])
    xr, vr = x[:, 1:], v[:, 1:]
    out = np.empty(np.broadcast_shapes(x.shape, v.shape))
    out[:, 0] = ((-1.0 / (s * s) - 0.5 * e * np.einsum("ij,ij->i", xr, xr)) * v[:, 0]
                 + e * np.einsum("ij,ij->i", xr, vr))
    out[:, 1:] = e[:, None] * (xr * v[:, :1] - vr)
    return out


# --------------------------------------------------------------------------
# Föllmer and fine-tuning problems
# --------------------------------------------------------------------------

def follmer_problem(U, grad_U=None, dim=None, name="follmer"):
    """SOC problem whose optimal control yields the Föllmer process for ``e^{-U}``.

    b = 0, σ = I, T = 1, f = 0, g(x) = -½|x|² + U(x), X_0 = 0.
    """
    if dim is None:
        raise ValueError("follmer_problem needs the state dimension")
    probe = np.zeros((1, dim))
    if not np.all(np.isfinite(U(probe))):
        raise ValueError("potential is not finite at the origin")

    def g(x):
        return U(x) - 0.5 * np.einsum("ij,ij->i", x, x)

    grad_g = None if grad_U is None else (lambda x: grad_U(x) - x)
    return SocProblem(
        dim=dim, horizon=1.0,
        base_drift=_zero_drift,
        volatility=_const_matrix(np.eye(dim)),
        running_cost=None,
        terminal_cost=g,
        initial_law=InitialLaw.point(np.zeros(dim)),
        name=name,
        drift_vjp=_zero_vjp,
        terminal_cost_grad=grad_g,
        meta={"kind": "follmer", "U": U, "grad_U": grad_U},
    )


def finetune_problem(base_drift, volatility, T, r, dim, grad_r=None, drift_vjp=None,
                     initial_law=None, name="finetune"):
    """Reward tilting as SOC: f = 0, g = -r, with the base process started at 0."""
    if initial_law is None:
        initial_law = InitialLaw.point(np.zeros(dim))
    if not initial_law.is_point_mass or np.any(initial_law.mean != 0.0):
        raise ValueError("fine-tuning requires the base process to start from the point mass at 0 (Y_0 ~ δ_0)")
    grad_g = None if grad_r is None else (lambda x: -grad_r(x))
    return SocProblem(
        dim=dim, horizon=T,
        base_drift=base_drift,
        volatility=volatility,
        running_cost=None,
        terminal_cost=lambda x: -r(x),
        initial_law=initial_law,
        name=name,
        drift_vjp=drift_vjp,
        terminal_cost_grad=grad_g,
        meta={"kind": "finetune", "r": r},
    )


def funnel_problem(target):
    def U(x):
        return -funnel_log_density(target, x)

    def grad_U(x):
        return -funnel_score(target, x)

    p = follmer_problem(U, grad_U, dim=target.dim, name="funnel")
    p.meta["funnel"] = target
    return p


def gaussian_follmer_problem(dim):
    """Standard-normal target ``U = ½|x|²`` (Z = (2π)^{d/2}); the optimal control is zero."""
    return follmer_problem(lambda x: 0.5 * np.einsum("ij,ij->i", x, x), lambda x: x.copy(),
                           dim=dim, name="gaussian-follmer")
