"""Command-line front end: ``simfree {train,eval,sample,bench}``.

Exit status: 0 on success, 1 for usage/config/checkpoint problems, 2 when a
run aborts numerically.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import config as C
from . import kernels
from .grad import offpolicy_objective, per_walker_costs, simfree_gradient, vanilla_gradient
from .policy import CheckpointError, init_policy, load_checkpoint, save_checkpoint
from .problems import RiccatiDivergenceError
from .rng import CounterRng
from .sampling import finetune_weights, follmer_sample, write_samples_csv, write_summary_json
from .sde_core import NumericalError, sample_wiener_increments, uniform_grid
from .train import TrainingAborted, l2_error, train_loop, write_metrics

log = logging.getLogger("simfree")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical aborts here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser():
    p = _Parser(prog="simfree", description="Simulation-free training of SDE feedback controls.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="TOML experiment config")
        sp.add_argument("--preset", choices=C.PRESET_NAMES, help="use an embedded preset instead of a file")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", metavar="DIR", help="override run.out")
        sp.add_argument("--threads", type=int, help="worker threads for the compiled kernels (0 = auto)")
        sp.add_argument("-v", "--verbose", action="store_true")

    tr = sub.add_parser("train", help="train a policy")
    common(tr)
    tr.add_argument("--dump-preset", metavar="NAME", help="print an embedded preset as TOML and exit")
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", metavar="PATH", help="policy checkpoint (default: freshly initialised policy)")
    sa = sub.add_parser("sample", help="draw importance-weighted samples")
    common(sa)
    sa.add_argument("--checkpoint", metavar="PATH")
    sa.add_argument("--n", type=int, help="number of samples (default sampling.walkers)")
    be = sub.add_parser("bench", help="memory/runtime scaling of the gradient estimators in K")
    common(be)
    return p


def _load_config(args):
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        cfg = C.load(args.config)
    elif args.preset:
        cfg = C.preset(args.preset)
    else:
        raise UsageError("no configuration: pass --config PATH or --preset NAME")
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out"] = args.out
    if args.threads is not None:
        cfg["run"]["threads"] = args.threads
    C.validate(cfg)
    return cfg


def _apply_threads(n):
    if n and kernels.USE_NUMBA:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out_dir(cfg):
    out = cfg["run"]["out"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _make_policy(cfg, built, checkpoint=None):
    arch = C.policy_arch(cfg)
    pol = cfg["policy"]
    policy = init_policy(arch, pol.get("init_seed", 0), zero_last_layer=pol.get("zero_last_layer", False),
                         scheme=pol.get("init", "lecun"), score_fn=built.score_fn, score_vjp=built.score_vjp)
    if checkpoint is not None:
        params, ck_arch = load_checkpoint(checkpoint)
        diff = sorted(k for k in set(arch) | set(ck_arch) if ck_arch and arch.get(k) != ck_arch.get(k))
        if diff:
            detail = ", ".join(f"{k}: config {arch.get(k)!r} vs checkpoint {ck_arch.get(k)!r}" for k in diff)
            raise CheckpointError(f"{checkpoint}: architecture mismatch ({detail})")
        policy.set_params(params)
    return policy


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args):
    if args.dump_preset:
        try:
            sys.stdout.write(C.dump_preset(args.dump_preset))
        except C.ConfigError as exc:
            raise UsageError(str(exc)) from None
        return 0
    cfg = _load_config(args)
    _apply_threads(cfg["run"]["threads"])
    out = _out_dir(cfg)
    built = C.build_problem(cfg)
    policy = _make_policy(cfg, built)
    tcfg = C.train_config(cfg)
    det = cfg["run"]["deterministic"]

    def show(row):
        l2 = "" if row.l2_err is None else f" l2_err={row.l2_err:.4g}"
        log.info("iter %d loss=%.6g%s grad_norm=%.3g lr=%.3g", row.iter, row.loss, l2, row.grad_norm, row.lr)

    status = 0
    try:
        res = train_loop(built.problem, policy, tcfg, u_star=built.u_star, out_dir=out, on_row=show)
        rows = res.metrics
        final = os.path.join(out, f"ckpt_{tcfg.iterations}.bin")
        save_checkpoint(final, policy.params, policy.arch())
        summary = {"status": "ok", "stopped_early": res.stopped_early, "checkpoint": final}
    except TrainingAborted as exc:
        print(f"simfree: training aborted: {exc}", file=sys.stderr)
        rows = getattr(exc, "rows", [])
        summary = {"status": "aborted", "error": str(exc)}
        status = 2
    write_metrics(os.path.join(out, "metrics.csv"), rows, deterministic_time=det)
    if rows:
        last = rows[-1]
        summary.update(final_loss=last.loss, final_l2_err=last.l2_err)
    _write_json(os.path.join(out, "run.json"), {
        "config": cfg, "config_hash": C.content_hash(cfg), "backend": kernels.backend(), "result": summary})
    return status


def _eval_report(cfg, built, policy):
    prob = built.problem
    ev = cfg["eval"]
    rng = CounterRng(ev["seed"])
    grid = uniform_grid(ev["steps"], prob.horizon)
    wiener = sample_wiener_increments(grid, ev["walkers"], prob.dim, rng)
    costs, alive = per_walker_costs(prob, policy, grid, wiener)
    report = {"preset": cfg["run"]["preset"], "n": int(costs.size), "K": grid.K,
              "objective": float(np.mean(costs)), "objective_se": float(np.std(costs, ddof=1) / np.sqrt(costs.size))}
    if built.u_star is not None:
        report["l2_err"] = l2_error(prob, policy, built.u_star, n=min(256, ev["walkers"]), grid=grid)
    # cross-checks on a small shared batch
    m = min(256, ev["walkers"])
    sub = wiener.subset(slice(0, m))
    checks = {}
    if hasattr(policy, "vjp_tape"):
        direct = simfree_gradient(prob, policy, grid, sub, path="direct")
        stop = simfree_gradient(prob, policy, grid, sub, path="stopgrad")
        scale = max(np.linalg.norm(direct.grad), np.finfo(float).tiny)
        checks["dual_path_rel_diff"] = float(np.linalg.norm(direct.grad - stop.grad) / scale)
        if prob.drift_vjp is not None and prob.terminal_cost_grad is not None:
            van = vanilla_gradient(prob, policy, grid, sub)
            checks["simfree_vs_vanilla_rel_diff"] = float(np.linalg.norm(direct.grad - van.grad) / scale)
    on = float(np.mean(per_walker_costs(prob, policy, grid, sub)[0]))
    off, _ = offpolicy_objective(prob, policy, policy, grid, sub)
    checks["offpolicy_equals_onpolicy"] = bool(off == on)
    report["cross_checks"] = checks
    return report


def cmd_eval(args):
    cfg = _load_config(args)
    _apply_threads(cfg["run"]["threads"])
    out = _out_dir(cfg)
    built = C.build_problem(cfg)
    policy = _make_policy(cfg, built, args.checkpoint)
    report = _eval_report(cfg, built, policy)
    report["checkpoint"] = args.checkpoint
    _write_json(os.path.join(out, "eval.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_sample(args):
    cfg = _load_config(args)
    _apply_threads(cfg["run"]["threads"])
    out = _out_dir(cfg)
    built = C.build_problem(cfg)
    policy = _make_policy(cfg, built, args.checkpoint)
    s = cfg["sampling"]
    n = args.n if args.n is not None else s["walkers"]
    if n < 2:
        raise UsageError("--n must be at least 2")
    rng = CounterRng(cfg["run"]["seed"])
    prob = built.problem
    if prob.meta.get("kind") == "follmer":
        ws = follmer_sample(prob, policy, n, s["steps"], rng, grid_mode=s["grid_mode"])
    elif prob.meta.get("kind") == "finetune":
        ws = finetune_weights(prob, built.reward, policy, n, s["steps"], rng, grid_mode=s["grid_mode"])
    else:
        raise UsageError(f"sample needs a Föllmer or fine-tuning preset, not {cfg['run']['preset']!r}")
    write_samples_csv(os.path.join(out, "samples.csv"), ws)
    summary = write_summary_json(os.path.join(out, "summary.json"), ws)
    if built.log_z is not None:
        log.info("reference log Z = %.10g", built.log_z)
    print(json.dumps(summary, sort_keys=True))
    return 0


BENCH_COLUMNS = ["estimator", "K", "walkers", "wall_s", "stored_step_records"]


def cmd_bench(args):
    cfg = _load_config(args)
    _apply_threads(cfg["run"]["threads"])
    out = _out_dir(cfg)
    built = C.build_problem(cfg)
    policy = _make_policy(cfg, built)
    rows = run_bench(built.problem, policy, cfg["bench"]["steps"], cfg["bench"]["walkers"],
                     cfg["bench"]["repeats"], cfg["bench"]["estimators"], cfg["run"]["seed"])
    with open(os.path.join(out, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in BENCH_COLUMNS])
    print(f"{'estimator':<10}{'K':>6}{'wall_s':>12}{'stored':>9}")
    for r in rows:
        print(f"{r['estimator']:<10}{r['K']:>6}{r['wall_s']:>12.4f}{r['stored_step_records']:>9}")
    return 0


def run_bench(problem, policy, steps, walkers, repeats, estimators, seed=0):
    """Median per-call wall time and stored step records of each estimator at each K."""
    rows = []
    rng = CounterRng(seed)
    for K in steps:
        grid = uniform_grid(K, problem.horizon)
        wiener = sample_wiener_increments(grid, walkers, problem.dim, rng)
        for name in estimators:
            fn = (lambda: simfree_gradient(problem, policy, grid, wiener)) if name == "simfree" else \
                (lambda: vanilla_gradient(problem, policy, grid, wiener))
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                est = fn()
                times.append(time.perf_counter() - t0)
            rows.append({"estimator": name, "K": K, "walkers": walkers, "wall_s": float(np.median(times)),
                         "stored_step_records": est.stored_step_records})
    return rows


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "bench": cmd_bench}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, C.ConfigError, CheckpointError) as exc:
        print(f"simfree: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"simfree: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, NumericalError, RiccatiDivergenceError, FloatingPointError) as exc:
        print(f"simfree: numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
