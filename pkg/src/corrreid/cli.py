"""``corrreid train|correlate|eval|bench`` entry point.

Exit codes: 0 ok, 2 invalid config, 3 state (missing checkpoint, divergence),
4 data (manifest/store mismatch, corrupt files).
"""
import argparse
import json
import logging
import sys

from corrreid import pipeline
from corrreid.config import PipelineConfig, config_from_dict, load_config
from corrreid.errors import ConfigError, DataError, ManifestError, StateError, StoreError

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_DATA = 0, 2, 3, 4

logger = logging.getLogger("corrreid")


def _parse_sweep(text):
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"sweep must be comma-separated integers: {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("sweep is empty")
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="corrreid", description="Set-level correlation re-ID pipeline")
    p.add_argument("command", choices=("train", "correlate", "eval", "bench"))
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--in", dest="inp", help="input feature store")
    p.add_argument("--out", help="output path (run directory for train)")
    p.add_argument("--sweep", type=_parse_sweep, default=[1, 3, 5, 7, 9],
                   help="landmark counts for bench, e.g. 1,3,5,7,9")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--manifest", help="manifest for eval/bench (default: next to the store)")
    p.add_argument("--with-map", action="store_true", help="bench: also score mAP per landmark count")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig().validate()
    if args.seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = config_from_dict(raw)
    return cfg


def _require(value, flag, command):
    if not value:
        raise ConfigError(f"{command} needs {flag}", flag.lstrip("-"))
    return value


def run(args):
    cfg = _config(args)
    if args.command == "train":
        out = pipeline.run_train(cfg, _require(args.out, "--out", "train"))
        print(out)
    elif args.command == "correlate":
        print(pipeline.run_correlate(cfg, _require(args.inp, "--in", "correlate"), args.out))
    elif args.command == "eval":
        report = pipeline.run_eval(cfg, _require(args.inp, "--in", "eval"), args.out, args.manifest)
        print(json.dumps({"map": round(report.map_score, 6),
                          "cmc": {str(k): round(v, 6) for k, v in report.cmc.items()}}))
    else:
        result = pipeline.run_bench(cfg, _require(args.inp, "--in", "bench"), args.sweep,
                                    args.out, args.manifest, args.with_map)
        if not args.out:
            print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (DataError, ManifestError, StoreError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
