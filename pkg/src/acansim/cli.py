"""Command line interface.

``acansim run`` executes a simulated training run and writes its outputs to
a directory: loss.csv (epoch,sample,sim_time,loss), perf.csv
(sim_time,timeout,total_power,pouches,reissues,crashes), params.npz with the
final parameter blocks keyed by their tuple keys, and summary.json.

Exit codes: 0 success, 2 configuration error, 3 stall abort.

``acansim oracle`` runs the sequential reference on the same config,
``acansim verify`` compares two params.npz files, ``acansim serve-ts`` hosts
the tuple space service on TCP.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .manager import ManagerError
from .oracle import OracleError, compare_params, run_reference
from .scenario import (
    EXPERIMENTS,
    RunConfig,
    ScenarioError,
    experiment_config,
    run_scenario,
)
from .service import TupleSpaceServer
from .taskgraph import TaskGraphError

SEED_ENV = "ACAN_SEED"


class ConfigError(Exception):
    pass


def _load_config(args: argparse.Namespace) -> RunConfig:
    """Layered config: experiment preset, then file, then env, then flags."""
    if args.exp is not None and args.exp != "custom" and args.exp not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {args.exp!r}; choose from {EXPERIMENTS + ('custom',)}")
    preset = args.exp is not None and args.exp != "custom"
    base = experiment_config(args.exp) if preset else RunConfig()
    merged = base.to_json()

    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config file: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(loaded)

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from err

    overrides = {
        "seed": args.seed,
        "eta": args.eta,
        "dataset_size": args.samples,
        "epochs": args.epochs,
        "handler_count": args.handlers,
        "pouch_size": args.pouch_size,
        "max_task_size": args.max_task_size,
        "timeout_initial": args.timeout_initial,
        "timeout_min": args.timeout_min,
        "timeout_max": args.timeout_max,
        "activation": args.activation,
        "max_stall_rounds": args.max_stall_rounds,
    }
    for name, value in overrides.items():
        if value is not None:
            merged[name] = value

    try:
        return RunConfig.from_json(merged)
    except (ScenarioError, TaskGraphError, ManagerError, ValueError, TypeError, KeyError) as err:
        raise ConfigError(f"bad configuration: {err}") from err


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--exp", default=None,
                   help=f"experiment preset, one of {', '.join(EXPERIMENTS)}, or custom")
    p.add_argument("--config", default=None, help="JSON config file overlaying the preset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--samples", type=int, default=None, help="dataset size")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--handlers", type=int, default=None)
    p.add_argument("--pouch-size", type=int, default=None)
    p.add_argument("--max-task-size", type=int, default=None)
    p.add_argument("--timeout-initial", type=float, default=None)
    p.add_argument("--timeout-min", type=float, default=None)
    p.add_argument("--timeout-max", type=float, default=None)
    p.add_argument("--activation", choices=("relu", "identity"), default=None)
    p.add_argument("--max-stall-rounds", type=int, default=None)


def write_loss_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        fh.write("epoch,sample,sim_time,loss\n")
        for epoch, sample, sim_time, loss in rows:
            fh.write(f"{epoch},{sample},{sim_time},{loss}\n")


def write_perf_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        fh.write("sim_time,timeout,total_power,pouches,reissues,crashes\n")
        for sim_time, timeout, power, pouches, reissues, crashes in rows:
            fh.write(f"{sim_time},{timeout},{power},{pouches},{reissues},{crashes}\n")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    result = run_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_loss_csv(out / "loss.csv", result.loss_rows)
    write_perf_csv(out / "perf.csv", result.perf_rows)
    np.savez(out / "params.npz", **result.params)
    summary = {
        "ok": result.ok,
        "stall": result.stall,
        "experiment": args.exp,
        "config": cfg.to_json(),
        "sim_time": result.sim_time,
        "events_processed": result.events_processed,
        "pouches": result.pouches,
        "reissues": result.reissues,
        "crashes": result.crashes,
        "loss_rows": len(result.loss_rows),
        "perf_rows": len(result.perf_rows),
        "final_loss": result.loss_rows[-1][3] if result.loss_rows else None,
        "handler_stats": {
            "executed": result.handler_stats.executed,
            "stored_unready": result.handler_stats.stored_unready,
            "discarded_unready": result.handler_stats.discarded_unready,
            "refused_capacity": result.handler_stats.refused_capacity,
            "protocol_errors": result.handler_stats.protocol_errors,
            "stale_drops": result.handler_stats.stale_drops,
            "vanished": result.handler_stats.vanished,
            "by_kind": result.handler_stats.by_kind,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not result.ok:
        print(f"run stalled: {result.stall}", file=sys.stderr)
        return 3
    print(f"run complete: {len(result.loss_rows)} loss rows, "
          f"{result.pouches} pouches, sim time {result.sim_time:.2f}s -> {out}")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    result = run_reference(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "params.npz", **result.params)
    with (out / "loss_ref.csv").open("w", newline="") as fh:
        fh.write("epoch,sample,loss\n")
        for epoch, sample, loss in result.loss_rows:
            fh.write(f"{epoch},{sample},{loss}\n")
    print(f"reference complete: {len(result.loss_rows)} loss rows -> {out}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    a = dict(np.load(args.params_a))
    b = dict(np.load(args.params_b))
    try:
        max_abs, max_rel = compare_params(a, b)
    except OracleError as err:
        print(f"verify failed: {err}", file=sys.stderr)
        return 2
    exact = max_abs == 0.0
    ok = exact or (args.rtol > 0 and max_rel <= args.rtol)
    status = "EXACT" if exact else ("WITHIN TOLERANCE" if ok else "MISMATCH")
    print(f"{status}: max_abs={max_abs:.3e} max_rel={max_rel:.3e} "
          f"({len(a)} parameter blocks)")
    return 0 if ok else 1


def cmd_serve(args: argparse.Namespace) -> int:
    server = TupleSpaceServer(args.host, args.port)
    host, port = server.address
    print(f"tuple space service listening on {host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acansim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a training run")
    _add_config_flags(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_oracle = sub.add_parser("oracle", help="sequential reference run")
    _add_config_flags(p_oracle)
    p_oracle.add_argument("--out", required=True, help="output directory")
    p_oracle.set_defaults(func=cmd_oracle)

    p_verify = sub.add_parser("verify", help="compare two params.npz files")
    p_verify.add_argument("params_a")
    p_verify.add_argument("params_b")
    p_verify.add_argument("--rtol", type=float, default=0.0,
                          help="relative tolerance; 0 demands exact equality")
    p_verify.set_defaults(func=cmd_verify)

    p_serve = sub.add_parser("serve-ts", help="host the tuple space over TCP")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=7654)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
