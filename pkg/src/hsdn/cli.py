"""Command line: ``hsdn run | compare | validate``."""
from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ScenarioConfig, parse_config
from .network import FATAL_INCIDENTS, Network
from .scenario import (TrialBatch, compare, compare_csv, cdf_text, report_json, run_trials,
                       samples_csv, summarize, trace_jsonl)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ANOMALIES = 2
EXIT_FATAL = 3


def resolve_seed(cfg: ScenarioConfig, flag: Optional[int], env: Optional[str]) -> int:
    """Flag beats environment beats config file."""
    if flag is not None:
        return flag
    if env:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError([f"HSDN_SEED: {env!r} is not an integer"]) from None
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(["HSDN_SEED: must be an unsigned 64-bit integer"])
        return seed
    return cfg.seed


def write_atomic(out_dir: Path, files: dict[str, str]) -> None:
    """Stage every file in a scratch directory, then rename each into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        for name, text in files.items():
            with open(stage / name, "w", newline="\n") as fh:
                fh.write(text)
        for name in files:
            os.replace(stage / name, out_dir / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsdn", description="Hybrid SDN control simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and its trial batch")
    run.add_argument("--config", required=True, help="JSON file or built-in scenario name")
    run.add_argument("--seed", type=_u64, default=None)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--method", default=None, help="override the configured method")
    run.add_argument("--trials", type=int, default=None, help="override knobs.trials")

    cmp_ = sub.add_parser("compare", help="summarize several methods side by side")
    cmp_.add_argument("--config", required=True, action="append",
                      help="repeat to compare configs that share a topology")
    cmp_.add_argument("--methods", required=True)
    cmp_.add_argument("--out", required=True, type=Path)
    cmp_.add_argument("--seed", type=_u64, default=None)
    cmp_.add_argument("--trials", type=int, default=None)
    cmp_.add_argument("--jobs", type=int, default=1)

    val = sub.add_parser("validate", help="check a config and list every problem")
    val.add_argument("--config", required=True)
    return p


def _fmt_us(v) -> str:
    return "n/a" if v is None else f"{v / 1000:.3f}ms"


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.method:
        cfg = cfg.with_method(args.method)
    cfg.seed = resolve_seed(cfg, args.seed, os.environ.get("HSDN_SEED"))
    n_trials = cfg.knobs.trials if args.trials is None else args.trials
    net = Network(cfg)
    rep = net.run()
    batch = run_trials(cfg, n_trials, max(1, args.jobs)) if n_trials > 0 else \
        TrialBatch(cfg.method, rep.samples, [])
    files = {
        "trace.jsonl": trace_jsonl(net.sim.trace),
        "samples.csv": samples_csv(batch.samples),
        "cdf.csv": cdf_text(batch.delays),
        "report.json": report_json(rep, batch if n_trials > 0 else None),
        "rules.jsonl": "".join(net.tables[n].dump() for n in net.nodes),
    }
    write_atomic(args.out, files)
    stats = summarize(batch.delays)
    msgs = " ".join(f"{k}={v}" for k, v in sorted(rep.messages.items()))
    var = "n/a" if stats["var_us2"] is None else f"{stats['var_us2'] / 1e6:.3f}ms^2"
    print(f"{cfg.name} {cfg.method} seed={cfg.seed}: samples={stats['n']} "
          f"mean={_fmt_us(stats['mean_us'])} var={var} censored={len(batch.censored)} "
          f"delivery={rep.delivery_ratio:.4f} messages[{msgs}]")
    fatal = [i for i in rep.incidents if i["kind"] in FATAL_INCIDENTS]
    if rep.anomalies:
        print(f"{len(rep.anomalies)} routing anomalies; see {args.out / 'report.json'} "
              f"(key 'anomalies')", file=sys.stderr)
        return EXIT_ANOMALIES
    if fatal:
        print(f"{len(fatal)} fatal incidents; see {args.out / 'report.json'} (key 'incidents')",
              file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [parse_config(c) for c in args.config]
    seed = resolve_seed(cfgs[0], args.seed, os.environ.get("HSDN_SEED"))
    for c in cfgs:
        c.seed = seed
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = compare(cfgs, methods, args.trials, max(1, args.jobs))
    text = compare_csv(rows)
    write_atomic(args.out, {"compare.csv": text})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    print(f"{args.config}: ok ({len(cfg.nodes)} nodes, {len(cfg.links)} links, "
          f"method {cfg.method})")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
