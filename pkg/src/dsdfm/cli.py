"""Command-line entry point: ``dsdfm <verb> [options]``.

Verbs: train-vq, train-drift, sample, verify, eval, sweep.
Exit codes: 0 success, 1 usage or configuration error, 2 a verification
check failed, 3 numerical failure (non-finite values, divergence).
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import container, metrics, nn, pipeline, verify, vq

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an integer") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    p = _Parser(prog="dsdfm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, out_default=Path("runs/default")):
        sp.add_argument("--config", type=Path, help="experiment config (JSON)")
        sp.add_argument("--seed", type=_u64, help="override the config seed")
        sp.add_argument("--out", type=Path, default=out_default, help="output directory")

    common(sub.add_parser("train-vq", help="fit the VQ autoencoder"))
    sp = sub.add_parser("train-drift", help="fit the drift network or a baseline score network")
    common(sp)
    sp.add_argument("--mode", choices=("derode", "vpsde", "vesde"), default="derode")
    sp = sub.add_parser("sample", help="generate samples")
    common(sp)
    sp.add_argument("--mode", choices=pipeline.MODES, default="divsde")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--count", type=int)
    sp.add_argument("--label", type=int)
    sp = sub.add_parser("verify", help="run self-contained numerical checks")
    sp.add_argument("which", choices=verify.CHECKS + ("all",))
    sp.add_argument("--out", type=Path, help="write the JSON report here")
    sp.add_argument("--seed", type=_u64, default=0)
    sp = sub.add_parser("eval", help="metric report for generated samples")
    common(sp, out_default=None)
    sp.add_argument("real", type=Path)
    sp.add_argument("gen", type=Path)
    sp.add_argument("--multimodality", action="store_true", help="fail if labels are missing")
    sp = sub.add_parser("sweep", help="step / eta / lambda ablation grids")
    common(sp)
    sp.add_argument("--grid", choices=("steps", "eta", "lambda"), default="steps")
    sp.add_argument("--count", type=int)
    return p


def _config(args):
    cfg = pipeline.ExperimentConfig.load(args.config) if args.config else pipeline.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _run(args, argv):
    if args.verb == "verify":
        rows, passed = _verify(args)
        return EXIT_OK if passed else EXIT_VERIFY
    cfg = _config(args)
    if args.verb == "train-vq":
        res = pipeline.train_vq_stage(cfg, args.out, argv)
        print(json.dumps({"checkpoint": str(res["checkpoint"]), "test_mse": res["test_mse"],
                          "test_usage": res["test_usage"]}))
    elif args.verb == "train-drift":
        res = pipeline.train_drift_stage(cfg, args.out, args.mode, argv)
        print(json.dumps({"checkpoint": str(res["checkpoint"]), "held_out": res["held_out"]}))
    elif args.verb == "sample":
        if args.count is not None and args.count < 0:
            raise UsageError("--count must be >= 0")
        if args.steps is not None and args.steps < 1:
            raise UsageError("--steps must be >= 1")
        res = pipeline.sample_stage(cfg, args.out, args.mode, args.steps, args.eta, args.count, args.label, argv)
        print(json.dumps({"samples": str(res["path"]), "count": res["count"], "seconds": res["seconds"]}))
    elif args.verb == "eval":
        report = pipeline.eval_stage(args.real, args.gen, args.out, cfg, multimodality=args.multimodality,
                                     argv=argv)
        print(report.to_json())
    elif args.verb == "sweep":
        rows = pipeline.sweep_stage(cfg, args.out, args.grid, count=args.count, argv=argv)
        if rows:
            w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def _verify(args):
    rows, passed = verify.run(args.which, args.seed)
    report = {"check": args.which, "passed": passed, "rows": [r.to_dict() for r in rows]}
    text = json.dumps(report, indent=2)
    if args.out:
        pipeline.prepare_out(args.out)
        (Path(args.out) / f"verify-{args.which}.json").write_text(text + "\n")
    print(text)
    return rows, passed


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dsdfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args, argv)
    except (UsageError, pipeline.ConfigError, container.ContainerError, metrics.MetricError) as exc:
        print(f"dsdfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nn.NonFiniteError, vq.TrainingDiverged, FloatingPointError) as exc:
        print(f"dsdfm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
