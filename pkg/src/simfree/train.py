"""Adam + cosine-annealed training loop and control-error metrics."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .grad import simfree_gradient, vanilla_gradient
from .policy import save_checkpoint
from .rng import CounterRng
from .sde_core import DivergenceError, NumericalError, make_randomized_grid, rollout, sample_wiener_increments, uniform_grid

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["iter", "wall_s", "loss", "l2_err", "grad_norm", "diverged", "lr"]
ESTIMATORS = ("simfree", "vanilla", "offpolicy")


class TrainingAborted(RuntimeError):
    def __init__(self, message, rows=(), checkpoint=None):
        super().__init__(message)
        self.rows = list(rows)
        self.checkpoint = checkpoint


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


def adam_step(state, params, grad, lr):
    """Bias-corrected Adam update of ``params`` (a flat array) in place."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("Adam: parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("Adam: non-finite gradient")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def cosine_lr(it, total, lr0, floor=0.0):
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    if total == 0:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1.0 + math.cos(math.pi * it / total))


def l2_error(problem, policy, u_star, n=256, grid=None, seed=2**31 - 1, K=64):
    """``mean_i Σ_k |u(t_k, x_k) - u*(t_k, x_k)|² Δt_k`` along paths driven by ``u*``.

    The evaluation noise comes from its own fixed seed so the metric does not
    alias the training noise.
    """
    if grid is None:
        grid = uniform_grid(K, problem.horizon)
    wiener = sample_wiener_increments(grid, n, problem.dim, CounterRng(seed))
    err = np.zeros(n)

    def hook(k, t, dt, x, u, dW, tape, live):
        diff = policy.forward(t, x) - u
        err[:] += np.einsum("ij,ij->i", diff, diff) * dt

    rollout(problem, u_star, grid, wiener, step_hook=hook)
    return float(np.mean(err))


@dataclass
class TrainConfig:
    lr: float = 3e-4
    iterations: int = 1000
    walkers: int = 512
    steps: int = 64
    grid_mode: str = "randomized"
    seed: int = 0
    estimator: str = "simfree"
    simfree_path: str = "stopgrad"
    eval_every: int = 10
    eval_walkers: int = 256
    eval_steps: int = 64
    lr_floor: float = 0.0
    checkpoint_every: int = 0
    strict_divergence: bool = False
    deterministic: bool = True
    chunk_size: int = 4096
    early_stop_window: int = 0
    early_stop_tol: float = 1e-4

    def __post_init__(self):
        for name in ("lr", "walkers", "steps", "eval_walkers", "eval_steps", "chunk_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive")
        for name in ("iterations", "eval_every", "checkpoint_every", "early_stop_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be non-negative")
        if self.lr_floor < 0 or self.lr_floor > self.lr:
            raise ValueError("train.lr_floor must lie in [0, lr]")
        if self.grid_mode not in ("randomized", "uniform"):
            raise ValueError(f"train.grid_mode must be randomized or uniform, got {self.grid_mode!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"train.estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.simfree_path not in ("direct", "stopgrad"):
            raise ValueError("train.simfree_path must be direct or stopgrad")


@dataclass
class MetricsRow:
    iter: int
    wall_s: float
    loss: float
    l2_err: float = None
    grad_norm: float = 0.0
    diverged: int = 0
    lr: float = 0.0

    def as_list(self):
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [str(self.iter), fmt(self.wall_s), fmt(self.loss), fmt(self.l2_err),
                fmt(self.grad_norm), str(self.diverged), fmt(self.lr)]


def write_metrics(path, rows, deterministic_time=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            items = r.as_list()
            if deterministic_time:
                items[1] = "0.0"
            w.writerow(items)


def estimate_gradient(problem, policy, grid, wiener, cfg):
    if cfg.estimator == "simfree":
        est = simfree_gradient(problem, policy, grid, wiener, path=cfg.simfree_path,
                               strict=cfg.strict_divergence, chunk_size=cfg.chunk_size,
                               deterministic=cfg.deterministic)
        return est.grad, est.loss, est.diverged_count
    if cfg.estimator == "vanilla":
        est = vanilla_gradient(problem, policy, grid, wiener, strict=cfg.strict_divergence,
                               chunk_size=cfg.chunk_size, deterministic=cfg.deterministic)
        return est.grad, est.loss, est.diverged_count
    raise ValueError("the offpolicy estimator evaluates objectives only; train with simfree or vanilla")


@dataclass
class TrainResult:
    policy: object
    metrics: list = field(default_factory=list)
    adam: AdamState = None
    stopped_early: bool = False


def train_loop(problem, policy, cfg, u_star=None, out_dir=None, on_row=None):
    """Optimise ``policy`` in place.

    Each iteration draws a fresh grid and fresh Wiener increments from the
    counter streams of ``(seed, iteration)``, estimates the gradient, applies
    a cosine-scheduled Adam step and, every ``eval_every`` iterations, appends
    a :class:`MetricsRow`.
    """
    if cfg.estimator == "offpolicy":
        raise ValueError("the offpolicy estimator evaluates objectives only; train with simfree or vanilla")
    rows = []
    adam = AdamState.zeros(policy.num_params)
    if cfg.iterations == 0:
        return TrainResult(policy, rows, adam)
    root = CounterRng(cfg.seed)
    eval_grid = uniform_grid(cfg.eval_steps, problem.horizon)
    t0 = time.perf_counter()
    history = []
    last_ckpt = None
    stopped = False
    for it in range(cfg.iterations):
        rng = root.at_iteration(it)
        grid = make_randomized_grid(cfg.steps, problem.horizon, rng, mode=cfg.grid_mode)
        wiener = sample_wiener_increments(grid, cfg.walkers, problem.dim, rng)
        lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_floor)
        try:
            g, loss, diverged = estimate_gradient(problem, policy, grid, wiener, cfg)
        except (DivergenceError, NumericalError, FloatingPointError) as exc:
            raise TrainingAborted(f"iteration {it}: {exc}; last checkpoint: {last_ckpt}", rows, last_ckpt) from exc
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise TrainingAborted(f"iteration {it}: non-finite loss or gradient; last checkpoint: {last_ckpt}",
                                  rows, last_ckpt)
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations - 1):
            l2 = l2_error(problem, policy, u_star, n=cfg.eval_walkers, grid=eval_grid) if u_star is not None else None
            row = MetricsRow(it, time.perf_counter() - t0, loss, l2, float(np.linalg.norm(g)), diverged, lr)
            rows.append(row)
            if on_row is not None:
                on_row(row)
        adam_step(adam, policy.params.data, g, lr)
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            last_ckpt = os.path.join(out_dir, f"ckpt_{it + 1}.bin")
            save_checkpoint(last_ckpt, policy.params, policy.arch())
        history.append(loss)
        win = cfg.early_stop_window
        if win and len(history) >= 2 * win:
            prev = np.mean(history[-2 * win:-win])
            cur = np.mean(history[-win:])
            if prev - cur <= cfg.early_stop_tol * abs(prev):
                log.info("early stop at iteration %d", it)
                stopped = True
                break
    return TrainResult(policy, rows, adam, stopped)
