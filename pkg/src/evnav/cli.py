"""Command line entry point: ``evnav train|eval|report|selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Method, RunConfig, load_config
from .harness import report, run_eval, run_many, write_csv
from .selftest import SUITES, run_suite


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _vec(x) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(x))


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.method:
        config.method = Method(args.method)
    if args.episodes is not None:
        config.episodes = args.episodes
    seeds = args.seed if args.seed else config.seeds
    jobs = []
    for s in seeds:
        run_dir = Path(args.runs) / config.method.value / str(s)
        jobs.append((config.to_dict(), s, str(run_dir)))
    for out in run_many(jobs):
        rep = out["report"]
        print(f"{out['method']} seed={out['seed']} cost_ratio={rep['cost_ratio']:.4f} "
              f"mean_cost={np.mean(rep['costs']):.3f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.config:
        config = load_config(args.config)
    else:
        # checkpoints live in <run>/checkpoints/, next to config.snapshot
        snap = ckpt.parent.parent / "config.snapshot"
        if not snap.exists():
            print(f"no --config given and no {snap}", file=sys.stderr)
            return 2
        config = RunConfig.from_dict(json.loads(snap.read_text()))
    seeds = args.seeds if args.seeds else config.eval_seeds
    dump = [] if args.dump_ri else None
    try:
        rep = run_eval(ckpt, config, seeds, ri_dump=dump)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    if dump is not None:
        rows = [(d[0], d[1], f"{d[2]} {d[3]!r} {d[4]!r}", _vec(d[5]), _vec(d[6]), _vec(d[7]))
                for d in dump]
        write_csv(Path(args.dump_ri), ("step", "ev", "request", "c", "ri", "fcc_true"), rows)
    return 0


def cmd_report(args) -> int:
    print(report(args.runs, args.csv))
    return 0


def cmd_selftest(args) -> int:
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in suites:
        for res in run_suite(name):
            print(res.line())
            ok &= res.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evnav", description="Multi-agent EV charging navigation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one method and evaluate it against the shortest-path baseline")
    t.add_argument("--config", required=True, help="JSON run config or a bundled scene name (scene_2ev)")
    t.add_argument("--method", choices=[m.value for m in Method])
    t.add_argument("--seed", type=_seed_list, help="one seed or a comma separated list")
    t.add_argument("--episodes", type=int)
    t.add_argument("--runs", default="runs", help="root of runs/<method>/<seed>/")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seeds", type=_seed_list)
    e.add_argument("--config")
    e.add_argument("--dump-ri", metavar="CSV", help="write (step, request, c, RI, fcc_true) rows")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="cost-ratio table over finished runs")
    r.add_argument("--runs", default="runs")
    r.add_argument("--csv")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="oracle, gradient and min-norm checks")
    s.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
