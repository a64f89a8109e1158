"""Command-line driver: ``gen-trace``, ``run`` and ``verify``.

Exit codes: 0 success, 1 invalid input, 2 a verification suite failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .engine import EngineConfig, EngineMode, run_trace
from .workloads import PATTERNS, TraceError, gen_trace, parse_trace, serialize_trace, validate_trace
from .verify import run_suites

EXIT_OK, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2
RATIO_KEYS = ("tasks_per_second", "per_agent_bytes", "cache_hit_rate", "avg_decode_batch_size")


def load_config(path: str | Path) -> EngineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    bad = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if bad:
        raise ValueError(f"{path}: config is flat key/value, nested value(s) under {', '.join(bad)}")
    return EngineConfig.from_dict(data)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def compare(metrics: dict[str, dict]) -> dict:
    """disaggregated / unified ratios, only when both runs are present."""
    if "unified" not in metrics or "disaggregated" not in metrics:
        return {}
    u, d = metrics["unified"], metrics["disaggregated"]
    out = {}
    for key in RATIO_KEYS:
        out[f"{key}_disaggregated_over_unified"] = d[key] / u[key] if u[key] else None
    return out


def run_modes(trace_path: str, config_path: str, modes: list[str], out_dir: str) -> dict:
    trace = parse_trace(Path(trace_path).read_text())
    config = load_config(config_path)
    validate_trace(trace, vocab=config.geometry.vocab, num_adapters=config.num_adapters)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_mode = {}
    for mode in modes:
        engine = run_trace(config.with_mode(mode), trace)
        metrics = engine.report().to_dict()
        target = out if len(modes) == 1 else out / mode
        target.mkdir(parents=True, exist_ok=True)
        _write_json(target / "metrics.json", metrics)
        (target / "timeline.csv").write_text(engine.timeline_csv())
        per_mode[mode] = metrics
    report = {
        "config": {**config.to_dict(), "mode": modes},
        "trace": {"path": str(trace_path), "records": len(trace.records), "meta": trace.meta},
        "modes": per_mode,
        "ratios": compare(per_mode),
    }
    _write_json(out / "report.json", report)
    return report


def _parse_modes(text: str) -> list[str]:
    if text == "all":
        return [m.value for m in EngineMode]
    modes = [m.strip() for m in text.split(",") if m.strip()]
    for m in modes:
        EngineMode(m)
    return modes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disaggkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic workflow trace")
    g.add_argument("--pattern", choices=PATTERNS, required=True)
    g.add_argument("--workflows", type=int, default=8)
    g.add_argument("--agents", type=int, default=4, help="agents per workflow")
    g.add_argument("--ctx-tokens", type=int, default=1024, help="shared context tokens")
    g.add_argument("--dyn-tokens", type=int, default=64, help="per-agent dynamic tokens")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--rate", type=float, default=2.0, help="workflow arrivals per second")
    g.add_argument("--tool-latency", type=float, default=0.1)
    g.add_argument("--tool-tokens", type=int, default=100)
    g.add_argument("--max-new", type=int, default=256)
    g.add_argument("--turns", type=int, default=1)
    g.add_argument("--context-scope", choices=("global", "workflow"), default="global")

    r = sub.add_parser("run", help="simulate a trace")
    r.add_argument("--trace", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--mode", default="disaggregated", help="unified, disaggregated, full_reuse, a comma list, or all")
    r.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run randomized self-checks")
    v.add_argument("--suite", choices=("attention", "radix", "memory", "all"), default="all")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-trace":
        try:
            trace = gen_trace(
                args.pattern, args.workflows, args.agents, args.ctx_tokens, args.dyn_tokens, args.seed,
                arrival_rate=args.rate, tool_latency=args.tool_latency, tool_tokens=args.tool_tokens,
                max_new_tokens=args.max_new, turns=args.turns, context_scope=args.context_scope,
            )
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        Path(args.out).write_text(serialize_trace(trace))
        print(f"wrote {len(trace.records)} records to {args.out}")
        return EXIT_OK
    if args.command == "run":
        try:
            modes = _parse_modes(args.mode)
            report = run_modes(args.trace, args.config, modes, args.out)
        except (TraceError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        for mode, m in report["modes"].items():
            print(f"{mode}: {m['workflows_completed']} workflows, {m['tasks_per_second']:.4f} tasks/s, "
                  f"hit rate {m['cache_hit_rate']:.3f}, {m['per_agent_bytes'] / 2**20:.3f} MiB/agent")
        for key, value in report["ratios"].items():
            print(f"{key}: {value if value is None else round(value, 4)}")
        return EXIT_OK
    results = run_suites(args.suite)
    for res in results:
        print(res.summary())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
