"""Command-line entry point.

Subcommands: train, eval, verify, compare, sysid-test. Exit codes:
0 success, 2 validation error, 3 runtime failure. Every run directory
receives a frozen copy of the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

import numpy as np

from . import agent, config, envs, evaluate, linalg, nets, runio, sysid

LOG_FILE = "train_log.csv"
POLICY_FILE = "policy.json"
GAIN_FILE = "gain.json"
SYSID_FILE = "sysid_report.csv"
CONFIG_FILE = "config.resolved.toml"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--env", help="environment name")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. --set train.lambda_k=0",
    )


def _resolve(args) -> config.ResolvedConfig:
    file_doc = config.load_config_file(args.config) if args.config else {}
    overrides = config.parse_set_overrides(args.overrides)
    return config.resolve(
        file_doc,
        overrides,
        env_name=args.env,
        seed=args.seed,
        out=args.out,
    )


def _gain_doc(result: agent.TrainResult) -> dict:
    if result.gain is None or result.model is None:
        return {"available": False}
    return {
        "available": True,
        "a_hat": result.model.a_hat.tolist(),
        "b_hat": result.model.b_hat.tolist(),
        "k_hat": result.gain.k_hat.tolist(),
        "p": result.gain.p.tolist(),
        "schur_stable": result.gain.schur_stable,
        "timestamp": result.gain.timestamp,
        "dare_residual": result.gain.dare_residual,
    }


def cmd_train(args) -> int:
    rc = _resolve(args)
    out = runio.prepare_run_dir(rc.io.out, force=args.force)
    config.write_resolved(os.path.join(out, CONFIG_FILE), rc)
    env = rc.build_env()
    try:
        result = agent.train(env, rc.train)
    except Exception as err:
        runio.write_json(
            os.path.join(out, "error.json"),
            {"error": repr(err), "traceback": traceback.format_exc()},
        )
        raise
    runio.write_csv(os.path.join(out, LOG_FILE), agent.LOG_COLUMNS, result.log_rows)
    nets.save_policy(result.policy, os.path.join(out, POLICY_FILE))
    runio.write_json(os.path.join(out, GAIN_FILE), _gain_doc(result))
    runio.write_csv(os.path.join(out, SYSID_FILE), sysid.SYSID_REPORT_COLUMNS, result.sysid_rows)
    shift = float(np.linalg.norm(result.policy.mean_shift))
    print(f"run directory: {out}")
    print(f"gain available at env step: {result.gain_available_step}")
    print(f"finalization shift norm: {shift:.6g}")
    return 0


def _load_policy_for_env(policy_path: str, env: envs.EnvSpec) -> nets.GaussianPolicy:
    policy = nets.load_policy(policy_path)
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise config.ConfigError(
            ["policy"],
            f"policy dims (state {policy.state_dim}, action {policy.action_dim}) do not "
            f"match env {env.name} (state {env.state_dim}, action {env.action_dim})",
        )
    return policy


def cmd_eval(args) -> int:
    rc = _resolve(args)
    env = rc.build_env()
    policy = _load_policy_for_env(args.policy, env)
    out = runio.prepare_run_dir(rc.io.out, force=args.force)
    n_starts = args.n_starts if args.n_starts is not None else rc.eval.n_starts
    horizon = args.horizon if args.horizon is not None else rc.eval.horizon
    q_cost, r_cost = evaluate.default_cost_matrices(env, rc.eval.r_cost_scale)

    comparison = evaluate.compare_costs(
        {"policy": policy},
        env,
        n_starts,
        horizon,
        rc.seed,
        q_cost=q_cost,
        r_cost=r_cost,
        final_window=rc.eval.final_window,
    )
    for i, x0 in enumerate(comparison.starts):
        traj = evaluate.rollout(policy, env, x0, horizon, q_cost, r_cost)
        evaluate.write_trajectory_csv(
            os.path.join(out, f"trajectory_{i:03d}.csv"), traj, env, q_cost, r_cost
        )
    evaluate.write_cost_curves_csv(os.path.join(out, "cost_curves.csv"), comparison)
    runio.write_json(os.path.join(out, "eval_summary.json"), comparison.summary)
    print(f"evaluated {n_starts} starts over {horizon} steps -> {out}")
    return 0


def cmd_verify(args) -> int:
    rc = _resolve(args)
    env = rc.build_env()
    policy = _load_policy_for_env(args.policy, env)
    out_path = args.report or os.path.join(rc.io.out, "roa_report.json")
    out_dir = os.path.dirname(out_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    a_cl = evaluate.linearize_closed_loop(env, policy)
    schur = linalg.is_schur_stable(a_cl)
    doc = {"env": env.name, "a_cl": a_cl.tolist(), "schur_stable": schur}
    if not schur:
        doc["note"] = "closed-loop linearization unstable; no ROA attempted"
        runio.write_json(out_path, doc)
        print(f"schur_stable: false -> {out_path}")
        return 0
    q_v = (
        np.diag(np.asarray(rc.verify.q_v_diag, dtype=float))
        if rc.verify.q_v_diag
        else np.eye(env.state_dim)
    )
    p = evaluate.quadratic_lyapunov(a_cl, q_v)
    margin = rc.verify.margin_scale * float(np.linalg.eigvalsh(q_v)[0])
    report = evaluate.roa_estimate(
        env,
        policy,
        p,
        grid_density=rc.verify.grid_density,
        margin=margin,
        bisection_steps=rc.verify.bisection_steps,
        seed=rc.seed,
    )
    doc.update(report.to_dict())
    doc["margin"] = margin
    runio.write_json(out_path, doc)
    print(
        f"schur_stable: true, level: {report.level:.6g}, "
        f"violations: {report.violations}, certified_by_sampling: "
        f"{report.certified_by_sampling} -> {out_path}"
    )
    return 0


SUMMARY_COLUMNS = ("policy_name", "final_mean_cost", "settling_step", "final_window_mean_norm")


def cmd_compare(args) -> int:
    if not args.runs:
        raise config.ConfigError(["runs"], "at least one run directory is required")
    env_block = None
    policies = {}
    for run_dir in args.runs:
        cfg_path = os.path.join(run_dir, CONFIG_FILE)
        pol_path = os.path.join(run_dir, POLICY_FILE)
        if not os.path.isfile(cfg_path) or not os.path.isfile(pol_path):
            raise config.ConfigError(
                [run_dir], f"{run_dir!r} is not a run directory (missing artifacts)"
            )
        doc = config.load_config_file(cfg_path)
        if env_block is None:
            env_block, first_doc = doc["env"], doc
        elif doc["env"] != env_block:
            raise config.ConfigError(
                [run_dir], f"environment of {run_dir!r} differs from {args.runs[0]!r}"
            )
        name = os.path.basename(os.path.normpath(run_dir))
        while name in policies:
            name += "+"
        policies[name] = nets.load_policy(pol_path)

    rc = config.resolve(
        {"env": dict(env_block), "eval": first_doc.get("eval", {})},
        seed=args.seed,
    )
    env = rc.build_env()
    n_starts = args.n_starts if args.n_starts is not None else rc.eval.n_starts
    horizon = args.horizon if args.horizon is not None else rc.eval.horizon
    out = runio.prepare_run_dir(args.out, force=args.force)
    comparison = evaluate.compare_costs(
        policies, env, n_starts, horizon, rc.seed, final_window=rc.eval.final_window
    )
    evaluate.write_cost_curves_csv(os.path.join(out, "cost_curves.csv"), comparison)
    rows = [
        {"policy_name": name, **comparison.summary[name]} for name in comparison.names
    ]
    runio.write_csv(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, rows)
    for row in rows:
        print(
            f"{row['policy_name']}: final_mean_cost={row['final_mean_cost']:.6g} "
            f"settling_step={row['settling_step']} "
            f"final_window_mean_norm={row['final_window_mean_norm']:.6g}"
        )
    return 0


def collect_sysid_fixture(
    env: envs.EnvSpec, eta: float, samples: int, rng: np.random.Generator
) -> sysid.SysIdBuffer:
    """Drive the collector through both phases with in-ball states: zero
    actions for the state matrix, uniform exploration for the input one."""
    buffer = sysid.SysIdBuffer(eta, samples, samples)
    n = env.state_dim
    half = 0.9 * eta / np.sqrt(n)
    while buffer.phase != sysid.Phase.DONE:
        x = rng.uniform(-half, half, size=n)
        if buffer.phase == sysid.Phase.COLLECT_A:
            u = np.zeros(env.action_dim)
        else:
            u = rng.uniform(env.action_low, env.action_high)
        result = envs.env_step(env, x, u)
        buffer.maybe_collect(x, u, result.next_state)
        if buffer.ready_a or buffer.ready_b:
            buffer.advance()
    return buffer


def cmd_sysid_test(args) -> int:
    rc = _resolve(args)
    env = rc.build_env()
    eta = args.eta if args.eta is not None else rc.train.eta
    samples = args.samples
    rng = np.random.default_rng(np.random.SeedSequence(rc.seed))

    buffer = collect_sysid_fixture(env, eta, samples, rng)
    a_hat, res_a = sysid.estimate_a(buffer, rc.train.sysid_ridge)
    b_hat, res_b = sysid.estimate_b(buffer, a_hat, rc.train.sysid_ridge)
    model = sysid.LinearModel(a_hat, b_hat, (res_a, res_b))
    gain = sysid.compute_gain(
        model, env.q_reward, rc.train.lqr_r_scale * np.eye(env.action_dim)
    )
    a_true, b_true = envs.linearize_env(env)
    row = sysid.sysid_report_row(buffer, model, gain, a_true, b_true)
    if args.out:
        out = runio.prepare_run_dir(args.out, force=args.force)
        runio.write_csv(os.path.join(out, SYSID_FILE), sysid.SYSID_REPORT_COLUMNS, [row])

    err_a = row["fro_err_A_vs_linearization"] / np.linalg.norm(a_true, "fro")
    err_b = row["fro_err_B_vs_linearization"] / np.linalg.norm(b_true, "fro")
    print(f"relative A error: {err_a:.3e}")
    print(f"relative B error: {err_b:.3e}")
    print(f"identified closed loop Schur stable: {gain.schur_stable}")
    tol = args.tolerance
    if err_a > tol or err_b > tol or not gain.schur_stable:
        print(f"FAIL: identification error above {tol:.2%} or unstable gain")
        return 3
    print(f"PASS: within {tol:.2%} of the finite-difference linearization")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqrsac",
        description="Stabilizing neural controllers via SAC with an online LQR gain penalty",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop, write run artifacts")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="deterministic rollouts of a saved policy")
    _add_common(p)
    p.add_argument("--policy", required=True, help="policy JSON checkpoint")
    p.add_argument("--n-starts", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="Lyapunov + sampled ROA report for a saved policy")
    _add_common(p)
    p.add_argument("--policy", required=True, help="policy JSON checkpoint")
    p.add_argument("--report", default=None, help="report JSON path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="cost curves for several runs on shared starts")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-starts", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sysid-test", help="identification fixture against the linearization")
    _add_common(p)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_sysid_test)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (config.ConfigError, FileExistsError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"runtime failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
