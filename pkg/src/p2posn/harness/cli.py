"""Command line: ``run`` a workload, ``oracle`` invariant checks, ``report`` figures.

Exit codes: 0 success, 1 some workload action did not succeed,
2 an invariant check failed, 64 usage error.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from ..config import Config
from . import checks
from .plan import PlanError, load_churn, load_plan, parse_plan
from .report import summary_lines, write_csvs, write_figures
from .runner import run_plan

EXIT_OK, EXIT_ACTIONS, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2, 64


def default_plan_text() -> str:
    return resources.files("p2posn.harness").joinpath("table3.plan").read_text()


def _load_config(path) -> Config:
    return Config.load(path) if path else Config()


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    plan = load_plan(args.plan) if args.plan else parse_plan(default_plan_text())
    churn = load_churn(args.churn) if args.churn else None
    status = EXIT_OK
    for n in args.nodes:
        out = Path(args.out) / f"n{n}" if len(args.nodes) > 1 else Path(args.out)
        result = run_plan(n, plan, seed=args.seed, cfg=cfg, churn=churn)
        paths = write_csvs(result, out)
        figs = [] if args.no_figures else write_figures(out)
        for line in summary_lines(result):
            print(line)
        print(f"wrote {len(paths)} CSV files and {len(figs)} figures to {out}")
        for t, user, action, detail in result.failures[: args.show_failures]:
            print(f"  t={t:.1f}s {user} {action}: {detail}")
        if result.total("ok") != result.scheduled:
            status = EXIT_ACTIONS
    return status


def cmd_oracle(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    ok = True
    if args.check == "routing":
        for n in args.nodes:
            r = checks.routing_check(n, args.keys, seeds)
            print(f"routing n={n}: agreement={r.agreement:.4f} mean_hops={r.mean_hops:.3f} "
                  f"max_hops={r.max_hops} bound={r.hop_bound} wall={r.wall_s:.1f}s")
            ok &= r.ok
    elif args.check == "replication":
        lost = 0
        for seed in seeds:
            r = checks.durability_run(seed)
            lost += len(r.lost) + len(r.unreadable)
            ok &= r.ok
        detected, unreadable = checks.holder_wipeout(args.seed)
        print(f"replication runs={len(seeds)} lost={lost} wipeout_detected={detected} "
              f"wipeout_unreadable={unreadable}")
        ok &= detected and unreadable
    elif args.check == "pht":
        r = checks.pht_check(seeds)
        print(f"pht seeds={r.seeds} ranges={r.ranges} lookups={r.lookups} mismatches={r.mismatches} "
              f"max_probes={r.max_probes} max_gets={r.max_gets} bound={r.bound}")
        ok = r.ok
    elif args.check == "monitoring":
        for n in args.nodes:
            for seed in seeds:
                r = checks.monitoring_check(n, seed)
                print(f"monitoring n={n} seed={seed}: depth={r.depth} count={r.count} exact={r.exact} "
                      f"stddev_err={r.stddev_err:.2e} churn_ticks={r.churn_ticks}")
                ok &= r.ok
    elif args.check == "crypto":
        r = checks.crypto_overhead()
        print(f"crypto sizes={r.sizes[0]}..{r.sizes[-1]} asym_overhead={sorted(set(r.asym))} "
              f"signature={sorted(set(r.sig))} sym_overhead={sorted(set(r.sym))} "
              f"item_overhead={sorted(set(r.item))}")
        ok = r.ok
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_report(args) -> int:
    out = Path(args.dir)
    if not out.is_dir():
        print(f"no such directory: {out}", file=sys.stderr)
        return EXIT_USAGE
    figs = write_figures(out)
    print(f"wrote {len(figs)} figures to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p2posn", description="Simulated decentralized social network")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="replay a workload plan and export metric CSVs and figures")
    r.add_argument("--nodes", type=int, nargs="+", default=[8])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--plan", help="plan file (default: the built-in social workload)")
    r.add_argument("--churn", help="churn schedule file")
    r.add_argument("--config", help="key=value configuration file")
    r.add_argument("--out", default="out")
    r.add_argument("--no-figures", action="store_true")
    r.add_argument("--show-failures", type=int, default=10)
    r.set_defaults(fn=cmd_run)

    o = sub.add_parser("oracle", help="check an invariant against its oracle")
    o.add_argument("--check", required=True, choices=("routing", "replication", "pht", "monitoring", "crypto"))
    o.add_argument("--nodes", type=int, nargs="+", default=[64])
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--seeds", type=int, default=10)
    o.add_argument("--keys", type=int, default=256)
    o.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("report", help="(re)draw figures from the CSVs in a run directory")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (PlanError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
