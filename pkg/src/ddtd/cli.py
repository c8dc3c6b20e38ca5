"""Command-line entry point: ``ddtd <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _cmd_init(a):
    from .pipeline import RunConfig, generate_initial

    cfg = RunConfig.load(a.config)
    out = Path(a.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pop, cands, _ = generate_initial(cfg, out)
    print(f"{len(cands)} initial candidates, {sum(c.feasible for c in cands)} feasible; "
          f"manifest at {out / 'initial' / 'manifest.csv'}")


def _cmd_run(a):
    from .pipeline import RunConfig, run

    cfg = RunConfig.load(a.config)
    state = run(cfg, a.out, resume=not a.fresh)
    print(f"finished at iteration {state.t}, hypervolume {state.records[-1].hypervolume!r}")


def _cmd_compare(a):
    from .pipeline import RunConfig, compare_experiment

    cfg = RunConfig.load(a.config)
    summary = compare_experiment(cfg, a.seeds, a.out)
    print(json.dumps(summary, indent=2))


def _cmd_ph(a):
    from .grid import read_pgm
    from .persistence import diagram_of, write_diagram_csv

    d = diagram_of(read_pgm(a.image), a.threshold)
    if a.out:
        write_diagram_csv(d, a.out)
    else:
        print("birth,death")
        for b, e in d.pairs:
            print(f"{b:g},{e:g}")


def _cmd_wdist(a):
    from .pd_metric import wasserstein
    from .persistence import read_diagram_csv

    print(repr(wasserstein(read_diagram_csv(a.first), read_diagram_csv(a.second), a.p)))


def _cmd_hv(a):
    from .evolution import hypervolume_2d, read_front_csv

    print(repr(hypervolume_2d(read_front_csv(a.front), a.ref)))


def _cmd_eval(a):
    from .fem import evaluate_high_fidelity, lbracket_bc
    from .grid import read_pgm

    f = read_pgm(a.image)
    n = f.mask.nx
    f1, f2 = evaluate_high_fidelity(f, lbracket_bc(n, a.cut), a.threshold)
    print("F1,F2")
    print(f"{f1!r},{f2!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddtd", description="data-driven topology design with PH-based selection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="seed, evaluate and select the initial population")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("run", help="run (or resume) the optimisation loop")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="run both selection modes over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ph", help="persistence diagram of a density graymap")
    p.add_argument("image")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ph)

    p = sub.add_parser("wdist", help="Wasserstein distance between two diagram CSVs")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("-p", type=float, default=2.0)
    p.set_defaults(func=_cmd_wdist)

    p = sub.add_parser("hv", help="hypervolume of a front CSV")
    p.add_argument("front")
    p.add_argument("--ref", type=float, nargs=2, required=True, metavar=("F1", "F2"))
    p.set_defaults(func=_cmd_hv)

    p = sub.add_parser("eval", help="max von Mises stress and volume of an L-bracket design")
    p.add_argument("image")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cut", type=float, default=0.6)
    p.set_defaults(func=_cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a failing exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
