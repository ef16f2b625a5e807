"""Command-line interface: run, compare, replay, diagnose, serve."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .simenv import variant_config


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cmd_run(args: argparse.Namespace) -> int:
    from .trial import TrialConfig, run_experiment

    base = _load_config(args.config)
    if args.algorithm:
        base["algorithm"] = args.algorithm
    if args.trials:
        base["n_trials"] = args.trials
    if args.seed is not None:
        base["seed"] = args.seed
    if args.users:
        base["n_users"] = args.users
    if args.workers:
        base["n_workers"] = args.workers
    cfg = TrialConfig.from_dict(base)
    label = "custom"
    if args.variant:
        env = variant_config(args.variant, cfg.env)
        cfg = TrialConfig.from_dict({**cfg.to_dict(), "env": env.__dict__})
        label = args.variant
    _, summary = run_experiment(cfg, out_dir=args.out, variant_label=label)
    print(
        f"{cfg.algorithm} variant={label} trials={summary.n_trials} "
        f"mean_total_reward={summary.mean_total_reward:.4f} "
        f"ci_pooled=+-{summary.ci_half_width_pooled:.4f} "
        f"ci_trials=+-{summary.ci_half_width_trial_means:.4f} "
        f"send_rate={summary.mean_send_rate:.4f}"
    )
    if args.out:
        print(f"wrote {os.path.join(args.out, 'summary.csv')}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    import csv

    from .trial import compare_runs

    result = compare_runs(args.a, args.b)
    for key, value in result.items():
        print(f"{key}: {value}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(result))
            writer.writerow([result[k] for k in result])
        print(f"wrote {args.out}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    with open(args.log, encoding="utf-8") as fh:
        first = json.loads(fh.readline())
    if first.get("type") == "trial_config":
        from .trial import replay_trial_log

        report = replay_trial_log(args.log)
        print(
            f"decisions={report.n_decisions} pi_mismatches={report.pi_mismatches} "
            f"action_mismatches={report.action_mismatches} max_pi_diff={report.max_pi_diff:.3e}"
        )
        return 0 if report.ok else 1
    # A service event log: the config lives next to it.
    from .service import ServiceConfig, verify_service_log

    state_dir = os.path.dirname(os.path.abspath(args.log))
    cfg_path = os.path.join(state_dir, "service_config.json")
    cfg = ServiceConfig.from_dict(_load_config(cfg_path)) if os.path.exists(cfg_path) else ServiceConfig()
    report = verify_service_log(state_dir, cfg)
    print(
        f"decisions={report['n_decisions']} pi_mismatches={report['pi_mismatches']} "
        f"action_mismatches={report['action_mismatches']} max_pi_diff={report['max_pi_diff']:.3e}"
    )
    return 0 if report["pi_mismatches"] == 0 and report["action_mismatches"] == 0 else 1


def _cmd_diagnose(args: argparse.Namespace) -> int:
    from .diagnostics import diagnose_log

    out = args.out or (os.path.splitext(args.log)[0] + "_diagnostics.csv")
    n = diagnose_log(args.log, out)
    print(f"wrote {n} update epochs to {out}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig.from_dict(_load_config(args.config))
    os.makedirs(args.state_dir, exist_ok=True)
    with open(
        os.path.join(args.state_dir, "service_config.json"), "w", encoding="utf-8", newline="\n"
    ) as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    app = create_app(cfg, args.state_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="rebandit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run seeded simulated trials")
    p_run.add_argument("--config", help="JSON trial config file")
    p_run.add_argument("--algorithm", choices=["rebandit", "blr", "random"])
    p_run.add_argument("--variant", help="environment variant id (1..15 or a name)")
    p_run.add_argument("--trials", type=int)
    p_run.add_argument("--users", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--workers", type=int)
    p_run.add_argument("--out", help="output directory for logs and CSVs")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="compare two seed-matched run directories")
    p_cmp.add_argument("--a", required=True)
    p_cmp.add_argument("--b", required=True)
    p_cmp.add_argument("--out", help="write the comparison as CSV")
    p_cmp.set_defaults(func=_cmd_compare)

    p_rep = sub.add_parser("replay", help="recompute decisions from a log")
    p_rep.add_argument("--log", required=True)
    p_rep.set_defaults(func=_cmd_replay)

    p_diag = sub.add_parser("diagnose", help="population statistics per update epoch")
    p_diag.add_argument("--log", required=True)
    p_diag.add_argument("--out")
    p_diag.set_defaults(func=_cmd_diagnose)

    p_srv = sub.add_parser("serve", help="start the decision service")
    p_srv.add_argument("--config", help="JSON service config file")
    p_srv.add_argument("--state-dir", required=True)
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8080)
    p_srv.set_defaults(func=_cmd_serve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
