"""Command-line entry point: run scenarios, verify chain dumps, print the
cost tables.

Exit codes: 0 success, 2 scenario/input error, 3 halted run, 4 chain
verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import cost_model as cm
from . import sim
from .ledger import load_chain_jsonl, verify_block_sequence

EXIT_OK = 0
EXIT_SCENARIO_ERROR = 2
EXIT_HALTED = 3
EXIT_VERIFY_FAILED = 4

OUT_DIR_ENV = "FLLSIM_OUT"


def _write(path: Path, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    path.write_text(text)


def cmd_run(args) -> int:
    try:
        if args.scenario is not None:
            scenario = sim.load_scenario(args.scenario)
        else:
            scenario = sim.Scenario()
        if args.seed is not None:
            scenario = sim.replace(scenario, seed=args.seed)
    except sim.ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    out_dir = Path(args.out or os.environ.get(OUT_DIR_ENV, "out"))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    try:
        metrics, report, state = sim.run_scenario(scenario)
    except sim.ScenarioHalted as e:
        print(f"run halted: {e}", file=sys.stderr)
        return EXIT_HALTED
    _write(out_dir / "metrics.csv", sim.metrics_csv(metrics))
    _write(out_dir / "cost_report.json", sim.cost_report_json(report))
    _write(out_dir / "chain.jsonl", state.ledger.dump_jsonl())
    _write(out_dir / "arbitration.jsonl", sim.arbitration_jsonl(state))
    final = metrics[-1]
    print(f"completed {len(metrics)} rounds "
          f"(final mean accuracy {final.mean_accuracy:.4f}, "
          f"chain height {state.ledger.height()}); outputs in {out_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    path = Path(args.chain)
    if not path.is_file():
        print(f"chain file not found: {path}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    text = path.read_text()
    if not text.strip():
        print("chain file is empty", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    try:
        chain = load_chain_jsonl(text)
    except (ValueError, KeyError) as e:
        print(f"chain file is not parseable: {e}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    bad = verify_block_sequence(chain)
    if bad is None:
        print("ok")
        return EXIT_OK
    print(f"first bad height: {bad}")
    return EXIT_VERIFY_FAILED


def _load_cost_params(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def cmd_cost(args) -> int:
    try:
        raw = _load_cost_params(args.params)
    except FileNotFoundError:
        print(f"params file not found: {args.params}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR
    try:
        p = cm.CostParams(
            clients=int(raw.get("clients", 20)),
            tasks=int(raw.get("tasks", 10)),
            stored_per_round=int(raw.get("stored_per_round", 20)),
            dim=int(raw.get("dim", 424)),
            n_buckets=int(raw.get("buckets", 64)),
            groups=int(raw.get("groups", 4)),
            candidate_exponent=float(raw.get("candidate_exponent", 0.7)),
            rounds_per_task=int(raw.get("rounds_per_task", 5)),
        )
        n_servers = int(raw.get("servers", 6))
        p_comp = float(raw.get("p_compromise", 0.1))
    except (TypeError, ValueError) as e:
        print(f"invalid cost params: {e}", file=sys.stderr)
        return EXIT_SCENARIO_ERROR

    rows = [
        ("knowledge items (c*t)", p.clients * p.tasks),
        ("retrieval cost: hash index", f"{cm.index_compute_cost(p):.1f}"),
        ("retrieval cost: linear scan", f"{cm.linear_compute_cost(p):.1f}"),
        ("index crossover threshold (min over M,groups)",
         f"{cm.index_crossover_threshold(2, 1):.0f}"),
        ("on-chain bits per client block", cm.onchain_block_bits(p)),
        ("similarity-table bits per block", cm.baseline_table_bits(p)),
        ("block storage smaller on-chain", cm.onchain_beats_baseline(p)),
        ("broadcast bits per client block", cm.broadcast_bits(p, n_servers)),
        ("broadcast savings bits", cm.broadcast_savings_bits(p, n_servers)),
        (f"collusion safety prob (s={n_servers}, p={p_comp})",
         f"{cm.collusion_safety_prob(n_servers, p_comp):.6f}"),
        (f"collusion attack prob (s={n_servers}, p={p_comp})",
         f"{cm.collusion_attack_prob(n_servers, p_comp):.6f}"),
    ]
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fllsim",
        description="Deterministic desk-scale simulator of ledger-backed "
                    "secure federated lifelong learning.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write the output files")
    p_run.add_argument("--scenario", help="TOML scenario file (default: built-in)")
    p_run.add_argument("--seed", type=int, help="override the scenario seed")
    p_run.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./out)")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="verify a chain.jsonl dump")
    p_verify.add_argument("--chain", required=True, help="chain dump to check")
    p_verify.set_defaults(func=cmd_verify)

    p_cost = sub.add_parser("cost", help="print the cost-model comparison table")
    p_cost.add_argument("--params", help="TOML file with cost parameters")
    p_cost.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
