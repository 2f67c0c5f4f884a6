"""Command-line entry point: ``hopcast <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
GRADCHECK_TOL = 1e-4


def _common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required,
                   help="experiment YAML file or bundled preset name (e.g. lv_sigma01)")
    p.add_argument("--seed", type=int, default=None, help="run only this seed")
    p.add_argument("--scale", choices=("desk", "full"), default=None,
                   help="desk divides N and epochs by five")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hopcast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    _common(sub.add_parser("run", help="run an experiment and write result bundles"))

    cmp_ = sub.add_parser("compare", help="aggregate result bundles into a table")
    cmp_.add_argument("bundles", nargs="+", help="bundle directories or their parents")
    cmp_.add_argument("--out", default="comparison.csv")

    demo = sub.add_parser("demo", help="demonstrations")
    demo_sub = demo.add_subparsers(dest="demo", required=True)
    span = demo_sub.add_parser("attention-span", help="sine-wave attention-span histograms")
    span.add_argument("--seed", type=int, default=0)
    span.add_argument("--seq-lens", type=int, nargs="+", default=[3, 8])
    span.add_argument("--out", default="attention_span.csv")

    tune = sub.add_parser("tune", help="hyperparameter tuning")
    tune_sub = tune.add_subparsers(dest="tune", required=True)
    _common(tune_sub.add_parser("sl", help="tune per-channel sequence lengths"))
    ens = tune_sub.add_parser("ensemble", help="sweep ensemble sizes")
    _common(ens)
    ens.add_argument("--method", default="expectation",
                     choices=("expectation", "trajectory_sampling", "moment_matching"))
    ens.add_argument("--sizes", type=int, nargs="+", default=list(range(1, 16)))

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _out(args, cfg, suffix: str = "") -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir + suffix)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    from . import pipeline

    if args.verb == "run":
        cfg = load_config(args.config, args.scale, args.seed)
        for bundle in pipeline.run_experiment(cfg, _out(args, cfg)):
            body = json.loads((bundle / "metrics.json").read_text())
            for m, rep in body["methods"].items():
                print(f"{bundle}  {m:20s} CE={rep['ce']:.4g}  PI-Width={rep['pi_width']:.4g}  "
                      f"MSE={rep['mse']:.4g}")
        return EXIT_OK
    if args.verb == "compare":
        rows = pipeline.compare(args.bundles, args.out)
        for r in rows:
            print(f"{r['system']:12s} {r['sigma']:<5g} {r['method']:20s} MSE {r['mse_cell']:>18s}"
                  f"  PI-Width {r['pi_width_cell']:>18s}  CE {r['ce_cell']}")
        print(f"wrote {args.out}")
        return EXIT_OK
    if args.verb == "demo":
        from .tuning import SINE_QUERY, sine_attention_span_demo, write_span_csv

        results = sine_attention_span_demo(args.seq_lens, args.seed)
        write_span_csv(results, args.out)
        for s_len, res in results.items():
            print(f"S_L={s_len}: mass within 0.5 of {SINE_QUERY}: "
                  f"{res.mass_near(SINE_QUERY):.3f}, near -3.2: {res.mass_near(-3.2):.3f}, "
                  f"near 6.5: {res.mass_near(6.5):.3f}")
        print(f"wrote {args.out}")
        return EXIT_OK
    if args.verb == "tune":
        cfg = load_config(args.config, args.scale, args.seed)
        seed = cfg.seeds[0]
        if args.tune == "sl":
            chosen = pipeline.tune_sl(cfg, seed, _out(args, cfg, "_tune_sl"))
            print("chosen sequence lengths:", chosen)
        else:
            reports = pipeline.tune_ensemble(cfg, seed, args.sizes, args.method,
                                             _out(args, cfg, "_tune_ensemble"))
            for m, rep in reports.items():
                print(f"M={m:2d}  CE={rep.ce_mean:.4g}  PI-Width={rep.width_mean:.4g}  "
                      f"MSE={rep.mse_mean:.4g}")
        return EXIT_OK
    if args.verb == "gradcheck":
        worst = pipeline.gradient_checks(args.seed)
        for name, err in worst.items():
            print(f"{name:22s} max rel. error {err:.3e}  "
                  f"{'PASS' if err < GRADCHECK_TOL else 'FAIL'}")
        return EXIT_OK if max(worst.values()) < GRADCHECK_TOL else EXIT_STAGE
    raise AssertionError(args.verb)


if __name__ == "__main__":
    sys.exit(main())
