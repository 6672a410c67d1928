"""Command line interface.

Subcommands:
  run              run a scenario, write result.json + CSV reports
  measure          back-to-back SA setup measurement for one pair
  validate-config  parse + validate a topology file
  report           regenerate CSV (and plot) from a saved result.json
  serve-etsi       demo: expose a node's delivery endpoint over a local socket

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import QsVpnError, SchemaError
from .metrics import ScenarioResult
from .report import emit_report
from .scenario import MEASUREMENT_MODES, measure_sa_setup, run_scenario
from .topology import load_scenario

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _add_scenario_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", default="fieldtrial5",
                        help="built-in scenario name or path to a config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsvpnsim",
        description="Deterministic simulator for hybrid quantum-safe VPN "
                    "key orchestration")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and emit reports")
    _add_scenario_arg(run_p)
    run_p.add_argument("--duration-ms", type=float, default=None)
    run_p.add_argument("--mode", choices=["ppk", "ecdh-only"], default="ppk")
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument("--plot", action="store_true",
                       help="also render the latency comparison image")

    measure_p = sub.add_parser("measure", help="measure SA setup latency")
    _add_scenario_arg(measure_p)
    measure_p.add_argument("--pair", required=True,
                           help="comma-separated node pair, initiator first")
    measure_p.add_argument("--mode", choices=[m.lower().replace("_", "-")
                                              for m in MEASUREMENT_MODES],
                           default="ppk")
    measure_p.add_argument("--runs", type=int, default=30)
    measure_p.add_argument("--out", default=None,
                           help="optional path for the JSON summary")

    validate_p = sub.add_parser("validate-config", help="validate a config file")
    validate_p.add_argument("path")

    report_p = sub.add_parser("report", help="regenerate CSV from result.json")
    report_p.add_argument("--result", required=True)
    report_p.add_argument("--out", default="out")
    report_p.add_argument("--plot", action="store_true")

    serve_p = sub.add_parser("serve-etsi",
                             help="serve a node's key-delivery endpoint on a socket")
    _add_scenario_arg(serve_p)
    serve_p.add_argument("--node", required=True)
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8141)
    serve_p.add_argument("--prefill-ms", type=float, default=10_000.0,
                         help="simulated production time before serving")
    return parser


def _cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    mode = "PPK" if args.mode == "ppk" else "ECDH_ONLY"
    result = run_scenario(cfg, duration_ms=args.duration_ms, seed=args.seed,
                          mode=mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.save(out / "result.json")
    paths = emit_report(result, out, plot=args.plot)
    print(f"scenario {result.name} seed={result.seed} mode={result.mode}: "
          f"{len(result.sa_records)} SA setups, {len(result.rekey_records)} rekeys, "
          f"{result.decrypt_failures} decrypt failures, {result.losses} losses")
    for path in [out / "result.json", *paths]:
        print(f"  wrote {path}")
    return EXIT_OK


def _cmd_measure(args) -> int:
    cfg = load_scenario(args.scenario)
    pair = tuple(p.strip() for p in args.pair.split(","))
    if len(pair) != 2:
        raise SchemaError("--pair expects exactly two comma-separated node ids")
    mode = args.mode.upper().replace("-", "_")
    stats = measure_sa_setup(cfg, pair, mode, args.runs, seed=args.seed)
    summary = {
        "pair": list(stats.pair), "mode": stats.mode, "runs": stats.runs,
        "mean_total_ms": stats.total.mean, "var_total_ms": stats.total.variance,
        "mean_t_sa_init_ms": stats.t_sa_init.mean,
        "mean_t_get_key_ms": stats.t_get_key.mean,
        "mean_t_ike_auth_ms": stats.t_ike_auth.mean,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_scenario(args.path)
    print(f"{args.path}: OK ({len(cfg.nodes)} nodes, {len(cfg.qkd_links)} QKD links, "
          f"{len(cfg.transport_links)} transport links)")
    return EXIT_OK


def _cmd_report(args) -> int:
    result = ScenarioResult.load(args.result)
    paths = emit_report(result, args.out, plot=args.plot)
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_serve_etsi(args) -> int:
    from .etsi_socket import serve_scenario_endpoint

    serve_scenario_endpoint(args.scenario, args.node, args.host, args.port,
                            seed=args.seed, prefill_ms=args.prefill_ms)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "measure": _cmd_measure,
        "validate-config": _cmd_validate,
        "report": _cmd_report,
        "serve-etsi": _cmd_serve_etsi,
    }
    try:
        return handlers[args.command](args)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QsVpnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
