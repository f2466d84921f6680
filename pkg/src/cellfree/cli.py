"""Command-line entry point: run, fig2, validate, selftest."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import default_config_text, load_spec, validate_spec


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="path to a flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a single config key")
    parser.add_argument("--seed", type=int, help="root seed (experiment.seed)")
    parser.add_argument("--outdir", help="output directory")


def _spec_from_args(args):
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if args.outdir is not None:
        overrides["experiment.output_dir"] = args.outdir
    if getattr(args, "budget", None) is not None:
        overrides["experiment.mc_blocks"] = str(args.budget)
    if getattr(args, "drops", None) is not None:
        overrides["experiment.drops"] = str(args.drops)
    return load_spec(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cellfree",
        description="Deterministic cell-free massive MIMO spectral-efficiency simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a multi-drop SE experiment")
    _add_common(p_run)
    p_run.add_argument("--budget", type=int, help="Monte-Carlo blocks per drop")
    p_run.add_argument("--drops", type=int, help="number of network drops")

    p_fig2 = sub.add_parser("fig2", help="MR vs SLNR normalized gain histogram")
    p_fig2.add_argument("--budget", type=int, default=1000000, help="number of samples")
    p_fig2.add_argument("--seed", type=int, default=1)
    p_fig2.add_argument("--outdir", default="runs/fig2")
    p_fig2.add_argument("--samples", action="store_true",
                        help="also write the raw samples CSV")

    p_val = sub.add_parser("validate", help="check a config and print diagnostics")
    _add_common(p_val)
    p_val.add_argument("--dump-config", action="store_true",
                       help="print the default config profile and exit")

    p_self = sub.add_parser("selftest", help="run the oracle gates")
    p_self.add_argument("--seed", type=int, default=1)
    p_self.add_argument("--outdir", default="runs/selftest")
    p_self.add_argument("--budget", type=int, default=20000,
                        help="Monte-Carlo blocks for the main oracle gate")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        if args.command == "run":
            spec = _spec_from_args(args)
            problems = validate_spec(spec)
            if problems:
                for d in problems:
                    print(f"diagnostic {d}", file=sys.stderr)
                return 1
            result = harness.run_experiment(spec)
            agg = result.summary["aggregates"]
            for key in sorted(agg):
                print(f"{key}: mean SE {agg[key]['mean_se']:.4f} bit/s/Hz "
                      f"(n={agg[key]['n']})")
            print(f"wrote {result.se_csv}, {result.clusters_csv}, "
                  f"{result.ap_load_csv}, {result.summary_json}")
            return 0

        if args.command == "fig2":
            res = harness.run_fig2(args.budget, seed=args.seed, outdir=args.outdir,
                                   write_samples=args.samples)
            print(f"mr mean {res.mr_gain.mean():.4f}, var {res.mr_gain.var():.4f}; "
                  f"slnr mean {res.slnr_gain.mean():.4f}, "
                  f"max {res.slnr_gain.max():.4f} "
                  f"(bound {0.25 / res.norm_constant:.4f})")
            print(f"wrote {res.hist_csv}" + (f", {res.samples_csv}" if res.samples_csv else ""))
            return 0

        if args.command == "validate":
            if args.dump_config:
                print(default_config_text(), end="")
                return 0
            spec = _spec_from_args(args)
            problems = validate_spec(spec)
            for d in problems:
                print(str(d))
            if not problems:
                print("ok: no diagnostics")
            return 0 if not problems else 1

        if args.command == "selftest":
            result = harness.selftest(args.outdir, seed=args.seed, budget=args.budget)
            with open(result.report_path, "r", encoding="utf-8") as fh:
                print(fh.read(), end="")
            return 0 if result.passed else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
