"""Command-line entry point: train / simulate / eval / waypoints.

Exit codes: 0 success, 1 runtime failure (diverged rollout, aborted training,
violated eval threshold), 2 usage or configuration error.  Every command
honors --seed and produces byte-reproducible outputs for a fixed seed; the
only exception is the wall_ms column of the training log, which records real
elapsed time.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, make_problem
from .evaluation import (
    ConstraintActive,
    NonPositive,
    RolloutDiverged,
    fit_decay,
    invariance_residual,
    leg_velocity_stats,
    lqr_agreement,
    rollout,
    waypoint_track,
    write_hoplog_csv,
)
from .hopper import reduced_to_full
from .policy import (
    NetPolicy,
    RaibertPolicy,
    init_policy,
    load_weights,
    pretrain,
    save_weights,
    SchemaMismatch,
    CorruptFile,
)
from .training import TrainingAborted, train, write_train_log
from . import training as _training


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.train.jobs = args.jobs
    return cfg


def _net_policy(cfg: RunConfig, weights_path: str) -> NetPolicy:
    return NetPolicy(load_weights(weights_path, z_dim=4, out_dim=2))


def _raibert_policy(cfg: RunConfig) -> RaibertPolicy:
    return RaibertPolicy(cfg.raibert, cfg.hopper, cfg.input_box)


def _parse_x0(text: str) -> np.ndarray:
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 4:
        raise ValueError("--x0 expects px,py,vx,vy")
    return np.array(vals)


def _parse_disturb(items) -> list:
    out = []
    for item in items or ():
        hop, vx, vy = item.split(":")
        out.append((int(hop), float(vx), float(vy)))
    return out


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    problem = make_problem(cfg)
    params = init_policy(4, 2, cfg.policy_hidden, cfg.input_box, seed=cfg.seed)
    if not args.no_pretrain:
        params = pretrain(params, cfg.raibert, cfg.hopper,
                          cfg.train.z_lower, cfg.train.z_upper,
                          steps=cfg.pretrain_steps, rate=cfg.pretrain_rate,
                          seed=cfg.seed, target_mse=cfg.pretrain_target)
    policy = NetPolicy(params)
    out_weights = args.out or cfg.paths.weights
    checkpoint_fn = None
    if cfg.train.checkpoint_every > 0:
        def checkpoint_fn(step, pol):
            save_weights(pol.params, f"{out_weights}.step{step + 1}")
    try:
        policy, records = train(policy, cfg.train, problem, checkpoint_fn=checkpoint_fn)
    except TrainingAborted as exc:
        return _fail(str(exc), 1)
    save_weights(policy.params, out_weights)
    if args.log:
        write_train_log(args.log, records)
    if records:
        print(f"trained {len(records)} steps: loss {records[0].loss:.3e} -> {records[-1].loss:.3e}")
    print(f"weights written to {out_weights}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    if args.raibert:
        policy = _raibert_policy(cfg)
    else:
        if not args.weights:
            return _fail("--weights is required unless --raibert is given", 2)
        policy = _net_policy(cfg, args.weights)
    problem = make_problem(cfg)
    try:
        z0 = _parse_x0(args.x0) if args.x0 else np.zeros(4)
        disturbances = _parse_disturb(args.disturb)
    except ValueError as exc:
        return _fail(str(exc), 2)
    x0 = reduced_to_full(np.zeros(4), z0, cfg.hopper)
    try:
        logs, _ = rollout(policy, x0, args.hops, cfg.hopper, cfg.input_box,
                          cost=problem.cost, disturbances=disturbances)
    except RolloutDiverged as exc:
        return _fail(str(exc), 1)
    write_hoplog_csv(args.log, logs)
    print(f"{len(logs)} hops written to {args.log}")
    return 0


def _fit_lam(norms) -> float:
    try:
        return fit_decay(norms).lam
    except NonPositive:
        return 0.0  # series converged at the start


def _eval_decay(policy, cfg: RunConfig, problem) -> dict:
    rng = np.random.default_rng(cfg.seed)
    lam_e, lam_z = [], []
    for _ in range(cfg.eval.n_starts):
        direction = rng.normal(size=4)
        z0 = cfg.eval.start_norm * rng.uniform() ** 0.25 * direction / np.linalg.norm(direction)
        x0 = reduced_to_full(np.zeros(4), z0, cfg.hopper)
        logs, _ = rollout(policy, x0, cfg.eval.n_hops, cfg.hopper, cfg.input_box,
                          cost=problem.cost)
        lam_e.append(_fit_lam([float(np.linalg.norm(log.e)) for log in logs]))
        lam_z.append(_fit_lam([float(np.linalg.norm(log.z)) for log in logs]))
    return {"lambda_e_max": max(lam_e), "lambda_z_max": max(lam_z),
            "lambda_e": lam_e, "lambda_z": lam_z}


def _eval_disturbance(policy, cfg: RunConfig, problem) -> dict:
    kick_hop = 5
    x0 = reduced_to_full(np.zeros(4), np.zeros(4), cfg.hopper)
    logs, _ = rollout(policy, x0, kick_hop + cfg.eval.disturbance_recovery_hops + 1,
                      cfg.hopper, cfg.input_box, cost=problem.cost,
                      disturbances=[(kick_hop, cfg.eval.disturbance_impulse, 0.0)])
    recovery = [float(np.linalg.norm(log.z)) for log in logs[kick_hop:]]
    final = recovery[-1]
    hops_to_recover = next((i for i, r in enumerate(recovery)
                            if r < cfg.eval.disturbance_recovery_norm), None)
    return {"final_norm": final, "hops_to_recover": hops_to_recover,
            "recovery": recovery}


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    problem = make_problem(cfg)
    policy = _net_policy(cfg, args.weights)
    baseline = _raibert_policy(cfg)
    suites = set((args.suite or "all").split(","))
    if "all" in suites:
        suites = {"residual", "lqr", "decay", "disturbance"}
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    failures = []

    if "residual" in suites:
        rng = np.random.default_rng(cfg.seed + 1)
        samples = _training.sample_batch(cfg.train.z_lower, cfg.train.z_upper,
                                         cfg.eval.heldout_samples, rng)
        stats = invariance_residual(policy, samples, problem, cfg.train.horizon,
                                    cfg.train.ilqr_max_iter, cfg.train.ilqr_tol,
                                    jobs=cfg.train.jobs)
        base = invariance_residual(baseline, samples, problem, cfg.train.horizon,
                                   cfg.train.ilqr_max_iter, cfg.train.ilqr_tol,
                                   jobs=cfg.train.jobs)
        ratio = stats.mean / base.mean
        ok = ratio <= cfg.eval.residual_ratio_max
        lines.append(f"residual: mean {stats.mean!r} max {stats.max!r} "
                     f"baseline {base.mean!r} ratio {ratio!r} "
                     f"[{'ok' if ok else 'FAIL'}]")
        if not ok:
            failures.append("residual")
        with open(out_dir / "residuals.csv", "w") as fh:
            fh.write("sample,trained,baseline\n")
            for i, (a, b) in enumerate(zip(stats.per_sample, base.per_sample)):
                fh.write(f"{i},{float(a)!r},{float(b)!r}\n")

    if "lqr" in suites:
        try:
            agree = lqr_agreement(policy, problem, cfg.eval.lqr_radius, cfg.eval.lqr_grid)
            agree_base = lqr_agreement(baseline, problem, cfg.eval.lqr_radius, cfg.eval.lqr_grid)
            ok = (agree.max_deviation < cfg.eval.lqr_max_deviation
                  and agree_base.max_deviation > agree.max_deviation)
            lines.append(f"lqr: trained {agree.max_deviation!r} rad (radius {agree.radius!r}) "
                         f"baseline {agree_base.max_deviation!r} rad "
                         f"[{'ok' if ok else 'FAIL'}]")
            with open(out_dir / "lqr_scatter.csv", "w") as fh:
                fh.write("z1,z2,z3,z4,vlqr1,vlqr2,psi1,psi2\n")
                for z, v, p in zip(agree.points, agree.v_lqr, agree.psi_next):
                    fh.write(",".join(repr(float(x)) for x in (*z, *v, *p)) + "\n")
        except ConstraintActive as exc:
            ok = False
            lines.append(f"lqr: {exc} [FAIL]")
        if not ok:
            failures.append("lqr")

    if "decay" in suites:
        decay = _eval_decay(policy, cfg, problem)
        ok = (decay["lambda_e_max"] < cfg.eval.decay_lambda_max
              and decay["lambda_z_max"] < cfg.eval.decay_lambda_max)
        lines.append(f"decay: lambda_e max {decay['lambda_e_max']!r} "
                     f"lambda_z max {decay['lambda_z_max']!r} "
                     f"over {cfg.eval.n_starts} starts [{'ok' if ok else 'FAIL'}]")
        if not ok:
            failures.append("decay")
        with open(out_dir / "decay.csv", "w") as fh:
            fh.write("start,lambda_e,lambda_z\n")
            for i, (le, lz) in enumerate(zip(decay["lambda_e"], decay["lambda_z"])):
                fh.write(f"{i},{le!r},{lz!r}\n")

    if "disturbance" in suites:
        dist = _eval_disturbance(policy, cfg, problem)
        ok = (dist["hops_to_recover"] is not None
              and dist["hops_to_recover"] <= cfg.eval.disturbance_recovery_hops)
        lines.append(f"disturbance: recovered in {dist['hops_to_recover']} hops "
                     f"(final |z| {dist['final_norm']!r}) [{'ok' if ok else 'FAIL'}]")
        if not ok:
            failures.append("disturbance")

    report = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(report)
    print(report, end="")
    if failures:
        return _fail(f"eval thresholds violated: {', '.join(failures)}", 1)
    return 0


def _read_waypoints(path: str) -> list:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                continue  # header line
            if len(vals) != 5:
                raise ValueError(f"waypoint rows need 5 fields, got {len(vals)}")
            rows.append((vals[0], vals[1], vals[2], vals[3], int(vals[4])))
    return rows


def cmd_waypoints(args) -> int:
    cfg = _load_run_config(args)
    problem = make_problem(cfg)
    policy = _net_policy(cfg, args.weights)
    try:
        waypoints = _read_waypoints(args.waypoints)
    except (OSError, ValueError) as exc:
        return _fail(f"bad waypoint file: {exc}", 2)
    if not waypoints:
        return _fail("waypoint file contains no waypoints", 2)
    try:
        logs, corners = waypoint_track(policy, waypoints, cfg.hopper, cfg.input_box,
                                       cost=problem.cost)
    except RolloutDiverged as exc:
        return _fail(str(exc), 1)
    write_hoplog_csv(args.log, logs)
    legs_path = Path(args.log).with_suffix(".legs.csv")
    with open(legs_path, "w") as fh:
        fh.write("leg,px,py,corner_error,verr_mean_x,verr_mean_y,verr_2sigma_x,verr_2sigma_y\n")
        start = 0
        for i, ((px, py, vx, vy, hops), err) in enumerate(zip(waypoints, corners)):
            mean, band = leg_velocity_stats(logs[start:start + hops], (vx, vy))
            vals = (px, py, err, mean[0], mean[1], band[0], band[1])
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in vals) + "\n")
            start += hops
    print(f"{len(logs)} hops over {len(waypoints)} waypoints; "
          f"corner errors: {', '.join(f'{e:.3f}' for e in corners)}")
    print(f"logs written to {args.log} and {legs_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zdp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config path (defaults built in)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, help="parallel workers (1 = serial)")

    p = sub.add_parser("train", help="pretrain and train the policy")
    common(p)
    p.add_argument("--out", help="output weight file")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--no-pretrain", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="closed-loop rollout of the full hybrid model")
    common(p)
    p.add_argument("--weights")
    p.add_argument("--raibert", action="store_true", help="use the heuristic baseline")
    p.add_argument("--x0", help="initial z as px,py,vx,vy")
    p.add_argument("--hops", type=int, default=30)
    p.add_argument("--disturb", action="append", metavar="hop:vx:vy")
    p.add_argument("--log", required=True, help="hop log CSV")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("eval", help="run the certification suite")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", help="report directory")
    p.add_argument("--suite", help="comma list: residual,lqr,decay,disturbance (default all)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("waypoints", help="track a waypoint CSV")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--waypoints", required=True, help="CSV of px,py,vx_ref,vy_ref,hops")
    p.add_argument("--log", required=True, help="hop log CSV")
    p.set_defaults(fn=cmd_waypoints)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(str(exc), 2)
    except (SchemaMismatch, CorruptFile) as exc:
        return _fail(f"weights: {exc}", 2)
    except FileNotFoundError as exc:
        return _fail(str(exc), 2)
    except Exception as exc:  # runtime failure
        return _fail(f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
