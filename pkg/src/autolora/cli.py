"""``autolora`` command line: train, finetune, sample, eval, sweep.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .train import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's own usage errors are config errors too
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config leaf, e.g. train.base.steps=100")
    common.add_argument("--out", help="output root (default: output.dir from the config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--resume", action="store_true", help="reuse completed sweep cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="autolora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the base denoiser")
    sub.add_parser("finetune", parents=[common], help="fit a LoRA adapter on the subset")
    p = sub.add_parser("sample", parents=[common], help="sample with guidance.* settings")
    p.add_argument("--mode", help="shorthand for --set guidance.mode=...")
    p = sub.add_parser("eval", parents=[common], help="score a samples CSV")
    p.add_argument("samples", help="samples CSV written by `sample`")
    sub.add_parser("sweep", parents=[common], help="grid over LoRA scales and guidance settings")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "mode", None):
            overrides.append(f"guidance.mode={args.mode}")
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "sample":
            try:
                pipeline.guidance_from_config(cfg)
            except ValueError as exc:
                raise ConfigError(f"guidance: {exc}") from None
        if args.command == "train":
            path = pipeline.cmd_train(cfg, args.out)
        elif args.command == "finetune":
            path = pipeline.cmd_finetune(cfg, args.out)
        elif args.command == "sample":
            path = pipeline.cmd_sample(cfg, args.out)
        elif args.command == "eval":
            path = pipeline.cmd_eval(cfg, args.samples, args.out)
        else:
            path = pipeline.cmd_sweep(cfg, args.out, jobs=args.jobs, resume=args.resume)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
