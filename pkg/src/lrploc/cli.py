"""``lrploc`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
inconsistent inputs), 4 numeric failure (divergence, non-finite values),
1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiments as ex
from .acoustics import GeometryError, UnreachableT60
from .data import DataError
from .lrp import NonFiniteRelevance
from .nn import NonFiniteError, TrainingDiverged
from .nn.checkpoint import CheckpointError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

VERBS = ("dataset", "train", "attribute", "manipulate", "tdoa", "stft-export")


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON run config (e.g. a frozen configs/<verb>.json)")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--scale", choices=("desk", "full"), default=d)
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrploc", description=__doc__.splitlines()[0])
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        _globals(sp, suppress=True)
        if verb == "dataset":
            sp.add_argument("--corpus-dir", default=None, help="directory of WAV recordings (any rate)")
            sp.add_argument("--surrogate", action="store_true", help="use the synthetic speech surrogate")
        if verb == "train":
            sp.add_argument("--resume", action="store_true", help="continue from state.ckpt")
            sp.add_argument("--stop-after", type=int, default=None, help="pause after this many epochs")
        if verb in ("train", "attribute", "manipulate", "tdoa", "stft-export"):
            sp.add_argument("--pooled", action="store_true", default=None,
                            help="one model across all conditions instead of one per condition")
        if verb in ("attribute", "manipulate"):
            sp.add_argument("--target", choices=("sum", "x", "y", "z"), default=None, help="LRP output seed")
    return p


def resolve_config(args) -> ex.RunConfig:
    overrides = {k: getattr(args, k) for k in ("seed", "out") if getattr(args, k, None) is not None}
    if getattr(args, "pooled", None):
        overrides["pooled"] = True
    if getattr(args, "target", None):
        overrides["lrp_selector"] = args.target
    if getattr(args, "surrogate", False):
        overrides["corpus_dir"] = None
    elif getattr(args, "corpus_dir", None):
        overrides["corpus_dir"] = args.corpus_dir
    if args.config:
        return ex.RunConfig.load(args.config, scale=args.scale, **overrides)
    return ex.RunConfig.preset(args.scale or "desk", **overrides)


def run(args) -> object:
    cfg = resolve_config(args)
    if args.verb == "dataset":
        m = ex.cmd_dataset(cfg)
        return {c["key"]: c["counts"] for c in m["conditions"]}
    if args.verb == "train":
        res = ex.cmd_train(cfg, resume=args.resume, stop_after=args.stop_after)
        return {f"{m}/{k}": {kk: v[kk] for kk in ("test_mae", "baseline_mae", "epochs")} if "test_mae" in v else v
                for (m, k), v in res.items()}
    if args.verb == "attribute":
        return {f"{m}/{k}": v for (m, k), v in ex.cmd_attribute(cfg).items()}
    if args.verb == "manipulate":
        return {m: v["mean"] for m, v in ex.cmd_manipulate(cfg).items()}
    if args.verb == "tdoa":
        ex.cmd_tdoa(cfg)
        return str(cfg.root / "tdoa" / "anomaly_table.csv")
    return [str(p) for p in ex.cmd_stft_export(cfg)]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, GeometryError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, NonFiniteRelevance, UnreachableT60, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
