"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 pipeline failure (partial
results are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import CalibrationError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=_u64, help="base seed for every random stream")
    common.add_argument("--out", help="output directory (default: from config, else ./out)")
    common.add_argument("--threads", type=_positive, help="worker threads for the noise study")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    p = _Parser(prog="panocalib", description="Single-shot multi-camera / multi-LiDAR extrinsic calibration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="synthesize a room, a mapping sequence and one rig capture")
    sub.add_parser("reconstruct", parents=[common], help="build the marker map from the stereo sequence")
    sub.add_parser("calibrate", parents=[common], help="localize every sensor and derive extrinsics")
    ev = sub.add_parser("evaluate", parents=[common], help="score result.json against the rig's mounts")
    ev.add_argument("--result", help="result JSON (default: <out>/result.json)")
    ev.add_argument("--truth", help="rig JSON with true mounts (default: <out>/rig.json)")
    sub.add_parser("noise-study", parents=[common], help="repeat calibration under increasing map noise")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            s = pipeline.cmd_simulate(cfg)
            print(f"simulated {s['stereo_frames']} stereo frames and 1 capture of {len(s['sensors'])} sensors -> {cfg.out}")
        elif args.command == "reconstruct":
            r = pipeline.cmd_reconstruct(cfg)
            line = f"map: {r['points']} points, {r['planes']} planes"
            if "mean_error_cm" in r:
                line += f", mean error {r['mean_error_cm']:.3f} cm, plane error {r['plane_error_cm']:.3f} cm"
            print(line)
        elif args.command == "calibrate":
            res = pipeline.cmd_calibrate(cfg)
            print(f"localized {len(res.sensor_poses)} sensors -> {cfg.out}/result.json")
            if res.failures:
                for k, v in res.failures.items():
                    print(f"failed {k}: {v}", file=sys.stderr)
                return EXIT_FAILURE
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(cfg, args.result, args.truth)
            with open(f"{cfg.out}/evaluation.txt", encoding="utf-8") as f:
                print(f.read(), end="")
        elif args.command == "noise-study":
            rows = pipeline.cmd_noise_study(cfg)
            with open(f"{cfg.out}/noise_study.txt", encoding="utf-8") as f:
                print(f.read(), end="")
            del rows
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as e:
        print(f"{args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
