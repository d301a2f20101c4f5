"""Importance-weighted sampling from Föllmer-type and reward-tilted controls.

A (possibly suboptimal) control ``u`` drives ``X`` from the origin; each
terminal sample carries the log of its Girsanov weight

    log M   = (d/2) log 2π − Σ ½|u_k|² Δt_k − Σ u_k·ΔW_k + ½|x_K|² − U(x_K)
    log M_r =              − Σ ½|u_k|² Δt_k − Σ u_k·ΔW_k + r(x_K)

so that ``E[M] = Z`` and ``E[h(X_T) M] = ∫ h e^{-U}``.  Weights stay in log
space; every reduction subtracts the maximum first.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .problems import LOG_2PI
from .rng import as_counter_rng
from .sde_core import NumericalError, make_randomized_grid, rollout, sample_wiener_increments

SAMPLE_CHUNK = 2048


@dataclass
class WeightedSampleSet:
    samples: np.ndarray
    log_weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.log_weights = np.asarray(self.log_weights, dtype=float).ravel()
        if self.samples.shape[0] != self.log_weights.size:
            raise ValueError("samples and log weights differ in length")
        if not np.all(np.isfinite(self.log_weights)):
            bad = int(np.flatnonzero(~np.isfinite(self.log_weights))[0])
            raise NumericalError(f"non-finite log weight for walker {bad}", walker=bad)

    @property
    def n(self):
        return self.log_weights.size

    @property
    def dim(self):
        return self.samples.shape[1]


def _path_terms(problem, policy, n, K, rng, grid_mode, chunk):
    """Terminal states and ``-(A + C)`` per walker, simulated chunk by chunk."""
    rng = as_counter_rng(rng)
    grid = make_randomized_grid(K, problem.horizon, rng, mode=grid_mode)
    xs, path = [], []
    for lo in range(0, n, chunk):
        walkers = np.arange(lo, min(n, lo + chunk), dtype=np.int64)
        wiener = sample_wiener_increments(grid, walkers.size, problem.dim, rng, walkers=walkers)
        traj = rollout(problem, policy, grid, wiener)
        xs.append(traj.x_final)
        path.append(-traj.acc_A - traj.acc_C)
    return np.concatenate(xs), np.concatenate(path)


def follmer_sample(problem, policy, n, K, rng, U=None, grid_mode="uniform", chunk=SAMPLE_CHUNK):
    """Terminal samples of the controlled Föllmer SDE with their log ``M(u)``."""
    if problem.meta.get("kind") != "follmer":
        raise ValueError("follmer_sample needs a problem built by follmer_problem")
    if U is None:
        U = problem.meta["U"]
    x, lm = _path_terms(problem, policy, n, K, rng, grid_mode, chunk)
    lm = lm + (0.5 * np.einsum("ij,ij->i", x, x) - U(x))
    lm = lm + 0.5 * problem.dim * LOG_2PI
    seed = as_counter_rng(rng).seed
    return WeightedSampleSet(x, lm, {"problem": problem.name, "seed": seed, "K": K})


def finetune_weights(problem, r, policy, n, K, rng, grid_mode="uniform", chunk=SAMPLE_CHUNK):
    """Terminal samples under the tilted control with their log ``M_r(u)``."""
    if not problem.initial_law.is_point_mass or np.any(problem.initial_law.mean != 0.0):
        raise ValueError("reward reweighting needs the process started at the origin")
    x, lm = _path_terms(problem, policy, n, K, rng, grid_mode, chunk)
    lm = lm + r(x)
    seed = as_counter_rng(rng).seed
    return WeightedSampleSet(x, lm, {"problem": problem.name, "seed": seed, "K": K})


def _shifted(lw):
    top = float(np.max(lw))
    return top, np.exp(lw - top)


def log_z_estimate(ws):
    """``(log Ẑ, std_err)``; the error bar is the delta-method SE of ``log mean M``."""
    if ws.n < 2:
        raise ValueError("log-Z estimate needs at least two samples")
    top, w = _shifted(ws.log_weights)
    mean = w.mean()
    se = w.std(ddof=1) / np.sqrt(ws.n)
    return top + float(np.log(mean)), float(se / mean)


def ess(ws):
    _, w = _shifted(ws.log_weights)
    return float(w.sum() ** 2 / np.dot(w, w))


def _h_values(ws, h):
    hv = np.asarray(h(ws.samples), dtype=float).ravel()
    if hv.size != ws.n or not np.all(np.isfinite(hv)):
        raise ValueError("test function must return one finite value per sample")
    return hv


def reweighted_expectation(ws, h):
    """Self-normalised ``Σ h(x_i) w_i / Σ w_i``."""
    _, w = _shifted(ws.log_weights)
    # same reduction for numerator and denominator so h ≡ 1 gives exactly 1
    return float((_h_values(ws, h) * w).sum() / w.sum())


def unnormalized_expectation(ws, h):
    """Unbiased ``mean_i h(x_i) M_i`` and its standard error."""
    top, w = _shifted(ws.log_weights)
    terms = _h_values(ws, h) * w
    scale = np.exp(top)
    return float(terms.mean() * scale), float(terms.std(ddof=1) / np.sqrt(ws.n) * scale)


def summary(ws):
    log_z, se = log_z_estimate(ws)
    return {"log_z": log_z, "std_err": se, "ess": ess(ws), "n": ws.n, "seed": ws.meta.get("seed")}


def write_samples_csv(path, ws):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(ws.dim)] + ["log_w"])
        for x, lw in zip(ws.samples, ws.log_weights):
            w.writerow([repr(float(v)) for v in x] + [repr(float(lw))])


def write_summary_json(path, ws, extra=None):
    out = summary(ws)
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
