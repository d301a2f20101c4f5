"""Experiment configuration: TOML files with one table per module, plus embedded presets.

A config names a problem preset and may override any field; every table and
key is checked against the schema below and unknown names are rejected with
the line on which they appear.
"""

import copy
import hashlib
import re
import sys

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from . import problems as P
from .policy import PIS_FUNNEL, ZeroPolicy
from .train import TrainConfig

PRESET_NAMES = ("linear-ou", "lqr-easy", "lqr-hard", "funnel", "gaussian-follmer", "finetune-toy")


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None, field=None):
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.field = field


_NUM = (int, float)
_LIST = (list,)

# table -> key -> accepted python types
SCHEMA = {
    "run": {"preset": (str,), "seed": (int,), "out": (str,), "threads": (int,), "deterministic": (bool,)},
    "problem": {
        "dim": (int,), "horizon": _NUM, "a": _NUM, "gamma": _NUM + _LIST, "sigma0": _NUM,
        "x0_var": _NUM, "p": _NUM, "q": _NUM, "riccati_steps": (int,), "funnel_sigma0": _NUM,
        "reward": _NUM + _LIST,
    },
    "policy": {
        "kind": (str,), "widths": _LIST, "activation": (str,), "num_freqs": (int,), "time_input": (bool,),
        "bias": (bool,), "init": (str,), "zero_last_layer": (bool,), "init_seed": (int,),
        "feat_width": (int,), "head_widths": _LIST, "gate_widths": _LIST, "gate": (str,),
    },
    "train": {
        "lr": _NUM, "iterations": (int,), "walkers": (int,), "steps": (int,), "grid_mode": (str,),
        "estimator": (str,), "simfree_path": (str,), "eval_every": (int,), "eval_walkers": (int,),
        "eval_steps": (int,), "lr_floor": _NUM, "checkpoint_every": (int,), "strict_divergence": (bool,),
        "chunk_size": (int,), "early_stop_window": (int,), "early_stop_tol": _NUM,
    },
    "eval": {"walkers": (int,), "steps": (int,), "seed": (int,)},
    "sampling": {"walkers": (int,), "steps": (int,), "grid_mode": (str,)},
    "bench": {"steps": _LIST, "walkers": (int,), "repeats": (int,), "estimators": _LIST},
}

_MLP_SMALL = {"kind": "mlp", "widths": [64, 64], "activation": "tanh", "num_freqs": 4, "time_input": True,
              "bias": True, "init": "lecun", "zero_last_layer": True, "init_seed": 0}

_COMMON = {
    "run": {"seed": 0, "out": "runs", "threads": 0, "deterministic": True},
    "eval": {"walkers": 4096, "steps": 64, "seed": 12345},
    "sampling": {"walkers": 10000, "steps": 100, "grid_mode": "uniform"},
    "bench": {"steps": [32, 64, 128, 256], "walkers": 256, "repeats": 3, "estimators": ["simfree", "vanilla"]},
}

PRESETS = {
    "linear-ou": {
        "problem": {"dim": 20, "horizon": 1.0, "a": 0.2, "gamma": 1.0, "sigma0": 1.0, "x0_var": 0.5},
        "policy": dict(_MLP_SMALL),
        "train": {"lr": 1e-3, "iterations": 5000, "walkers": 1000, "steps": 64, "eval_every": 250},
    },
    "lqr-easy": {
        "problem": {"dim": 20, "horizon": 1.0, "a": 0.2, "p": 0.2, "q": 0.1, "sigma0": 1.0, "x0_var": 0.5,
                    "riccati_steps": 4096},
        "policy": dict(_MLP_SMALL),
        "train": {"lr": 1e-3, "iterations": 10000, "walkers": 512, "steps": 64, "eval_every": 500},
    },
    "lqr-hard": {
        "problem": {"dim": 20, "horizon": 1.0, "a": 1.0, "p": 1.0, "q": 0.5, "sigma0": 1.0, "x0_var": 0.5,
                    "riccati_steps": 4096},
        "policy": dict(_MLP_SMALL),
        "train": {"lr": 1e-3, "iterations": 10000, "walkers": 512, "steps": 64, "eval_every": 500},
    },
    "funnel": {
        "problem": {"dim": 10, "funnel_sigma0": 1.0},
        "policy": dict(PIS_FUNNEL, time_input=False, init="lecun", zero_last_layer=True, init_seed=0),
        "train": {"lr": 1e-3, "iterations": 5000, "walkers": 1000, "steps": 100, "eval_every": 100},
    },
    "gaussian-follmer": {
        "problem": {"dim": 10},
        "policy": dict(_MLP_SMALL),
        "train": {"lr": 3e-4, "iterations": 1000, "walkers": 512, "steps": 64, "eval_every": 50},
    },
    "finetune-toy": {
        "problem": {"dim": 2, "horizon": 1.0, "a": 0.0, "sigma0": 1.0, "reward": 0.5},
        "policy": dict(_MLP_SMALL),
        "train": {"lr": 1e-3, "iterations": 2000, "walkers": 512, "steps": 64, "eval_every": 100},
    },
}


def preset(name):
    """Full resolved config dict for an embedded preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose one of {', '.join(PRESET_NAMES)}", field="run.preset")
    cfg = copy.deepcopy(_COMMON)
    for table, vals in PRESETS[name].items():
        cfg.setdefault(table, {}).update(copy.deepcopy(vals))
    cfg["run"]["preset"] = name
    train = {k: v for k, v in vars(TrainConfig()).items() if k not in ("seed", "deterministic")}
    train.update(cfg["train"])
    cfg["train"] = train
    return cfg


def dump_preset(name):
    return tomli_w.dumps(preset(name))


def _line_of(text, table, key=None):
    """1-based line of ``[table]`` (or of ``key`` inside it) in ``text``, if found."""
    if text is None:
        return None
    lines = text.splitlines()
    current = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", s)
        if m:
            current = m.group(1)
            if key is None and current == table:
                return i
            continue
        if key is not None and current == table and re.match(rf"^\"?{re.escape(key)}\"?\s*=", s):
            return i
    return None


def _check_types(raw, text, path):
    for table, vals in raw.items():
        if table not in SCHEMA:
            raise ConfigError(f"unknown table [{table}] (allowed: {', '.join(SCHEMA)})",
                              path, _line_of(text, table), table)
        if not isinstance(vals, dict):
            raise ConfigError(f"[{table}] must be a table", path, None, table)
        for key, val in vals.items():
            allowed = SCHEMA[table]
            if key not in allowed:
                raise ConfigError(f"unknown key {table}.{key} (allowed: {', '.join(sorted(allowed))})",
                                  path, _line_of(text, table, key), f"{table}.{key}")
            types = allowed[key]
            ok = isinstance(val, types) and not (isinstance(val, bool) and bool not in types)
            if not ok:
                raise ConfigError(f"{table}.{key} has the wrong type ({type(val).__name__})",
                                  path, _line_of(text, table, key), f"{table}.{key}")


def resolve(raw, text=None, path=None):
    """Merge a parsed config over its preset and validate it."""
    _check_types(raw, text, path)
    name = raw.get("run", {}).get("preset")
    if name is None:
        raise ConfigError("run.preset is required", path, _line_of(text, "run"), "run.preset")
    try:
        cfg = preset(name)
    except ConfigError as exc:
        raise ConfigError(str(exc), path, _line_of(text, "run", "preset"), "run.preset") from None
    for table, vals in raw.items():
        cfg.setdefault(table, {}).update(vals)
    try:
        validate(cfg)
    except ConfigError as exc:
        table, _, key = (exc.field or "").partition(".")
        raise ConfigError(str(exc), path, _line_of(text, table, key or None), exc.field) from None
    return cfg


def validate(cfg):
    pr = cfg["problem"]
    for key in ("dim", "horizon", "sigma0", "riccati_steps", "funnel_sigma0"):
        if key in pr and not pr[key] > 0:
            raise ConfigError(f"problem.{key} must be positive", field=f"problem.{key}")
    if "x0_var" in pr and pr["x0_var"] < 0:
        raise ConfigError("problem.x0_var must be non-negative", field="problem.x0_var")
    for key in ("p", "q"):
        if key in pr and pr[key] < 0:
            raise ConfigError(f"problem.{key} must be non-negative", field=f"problem.{key}")
    for key in ("gamma", "reward"):
        if isinstance(pr.get(key), list) and len(pr[key]) != pr["dim"]:
            raise ConfigError(f"problem.{key} must have dim={pr['dim']} entries", field=f"problem.{key}")
    run = cfg["run"]
    if run["threads"] < 0:
        raise ConfigError("run.threads must be >= 0", field="run.threads")
    if run["seed"] < 0:
        raise ConfigError("run.seed must be >= 0", field="run.seed")
    pol = cfg["policy"]
    if pol.get("kind") not in ("mlp", "pis"):
        raise ConfigError("policy.kind must be mlp or pis", field="policy.kind")
    if pol.get("kind") == "pis" and run["preset"] != "funnel":
        raise ConfigError("policy.kind = pis needs a target score (funnel preset only)", field="policy.kind")
    if pol.get("init", "lecun") not in ("lecun", "torch"):
        raise ConfigError("policy.init must be lecun or torch", field="policy.init")
    for key in ("widths", "head_widths", "gate_widths"):
        if key in pol and not all(isinstance(w, int) and w > 0 for w in pol[key]):
            raise ConfigError(f"policy.{key} must list positive integers", field=f"policy.{key}")
    for table in ("eval", "sampling"):
        for key in ("walkers", "steps"):
            if not cfg[table][key] > 0:
                raise ConfigError(f"{table}.{key} must be positive", field=f"{table}.{key}")
    b = cfg["bench"]
    if not b["steps"] or not all(isinstance(k, int) and k > 0 for k in b["steps"]):
        raise ConfigError("bench.steps must list positive integers", field="bench.steps")
    if b["walkers"] < 1 or b["repeats"] < 1:
        raise ConfigError("bench.walkers and bench.repeats must be positive", field="bench.walkers")
    if not set(b["estimators"]) <= {"simfree", "vanilla"}:
        raise ConfigError("bench.estimators may contain simfree and vanilla only", field="bench.estimators")
    try:
        train_config(cfg)
    except ValueError as exc:
        key = re.search(r"train\.(\w+)", str(exc))
        raise ConfigError(str(exc), field=f"train.{key.group(1)}" if key else "train") from None


def load(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}", path) from None
    text = data.decode("utf-8", errors="replace")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", path, int(m.group(1)) if m else None) from None
    return resolve(raw, text, path)


def train_config(cfg):
    return TrainConfig(seed=cfg["run"]["seed"], deterministic=cfg["run"]["deterministic"], **cfg["train"])


def _sorted(obj):
    if isinstance(obj, dict):
        return {k: _sorted(obj[k]) for k in sorted(obj)}
    return obj


def content_hash(cfg):
    """Git blob hash of the canonical (key-sorted) TOML rendering of ``cfg``."""
    body = tomli_w.dumps(_sorted(cfg)).encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# --------------------------------------------------------------------------
# building objects from a resolved config
# --------------------------------------------------------------------------

def _vec(v, d):
    return np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()


class Built:
    """Problem, analytic control (or ``None``), policy factory inputs and sampler hooks."""

    def __init__(self, problem, u_star=None, score_fn=None, score_vjp=None, reward=None, log_z=None):
        self.problem = problem
        self.u_star = u_star
        self.score_fn = score_fn
        self.score_vjp = score_vjp
        self.reward = reward
        self.log_z = log_z


def build_problem(cfg):
    name = cfg["run"]["preset"]
    pr = cfg["problem"]
    d = pr["dim"]
    I = np.eye(d)
    if name == "linear-ou":
        spec = P.LinearOuSpec(A=pr["a"] * I, gamma=_vec(pr["gamma"], d), sigma0=pr["sigma0"] * I)
        T = pr["horizon"]
        return Built(P.linear_ou_problem(spec, T, pr["x0_var"], name=name), P.LinearOuControl(spec, T))
    if name in ("lqr-easy", "lqr-hard"):
        spec = P.LqrSpec(A=pr["a"] * I, P=pr["p"] * I, Q=pr["q"] * I, sigma0=pr["sigma0"] * I)
        T = pr["horizon"]
        ric = P.solve_riccati(spec, T, pr["riccati_steps"])
        return Built(P.lqr_problem(spec, T, pr["x0_var"], name=name), P.LqrControl(ric, spec.sigma0))
    if name == "funnel":
        target = P.FunnelTarget(d, pr["funnel_sigma0"])
        return Built(P.funnel_problem(target), score_fn=lambda x: P.funnel_score(target, x),
                     score_vjp=lambda x, v: P.funnel_hvp(target, x, v), log_z=0.0)
    if name == "gaussian-follmer":
        return Built(P.gaussian_follmer_problem(d), u_star=ZeroPolicy(d), log_z=0.5 * d * P.LOG_2PI)
    if name == "finetune-toy":
        return _finetune_toy(pr)
    raise ConfigError(f"unknown preset {name!r}", field="run.preset")


def _finetune_toy(pr):
    """Linear reward ``r(x) = m·x`` on an OU (or Brownian, a = 0) base started at 0.

    ``X_T`` is Gaussian with variance ``v = (e^{2aT} - 1)/(2a)`` per coordinate,
    so ``log Z = ½ v |m|²`` and the optimal control is that of the linear OU
    problem with ``γ = -m``.
    """
    d, a, T, s = pr["dim"], pr["a"], pr["horizon"], pr["sigma0"]
    m = _vec(pr["reward"], d)
    A = a * np.eye(d)
    S = s * np.eye(d)
    reward = lambda x: x @ m  # noqa: E731
    prob = P.finetune_problem(lambda t, x: x @ A.T, P._const_matrix(S), T, reward, d,
                              grad_r=lambda x: np.broadcast_to(m, x.shape), drift_vjp=lambda t, x, v: v @ A,
                              name="finetune-toy")
    var = T if a == 0 else np.expm1(2 * a * T) / (2 * a)
    ctrl = P.LinearOuControl(P.LinearOuSpec(A=A, gamma=-m, sigma0=S), T)
    return Built(prob, ctrl, reward=reward, log_z=float(0.5 * var * s * s * m @ m))


def policy_arch(cfg):
    pol = cfg["policy"]
    dim = cfg["problem"]["dim"]
    keys = ("widths", "activation", "num_freqs", "time_input", "bias") if pol["kind"] == "mlp" else (
        "num_freqs", "feat_width", "head_widths", "gate_widths", "gate", "activation", "time_input")
    arch = {"kind": pol["kind"], "dim": dim, "horizon": float(cfg["problem"].get("horizon", 1.0))}
    arch.update({k: pol[k] for k in keys if k in pol})
    return arch
