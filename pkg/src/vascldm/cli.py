"""Command-line front door: ``vascldm <subcommand> --config run.toml [--set section.key=value ...]``.

Exit codes: 0 success, 1 validation error (bad config, flags or inconsistent
artifacts), 2 runtime failure (divergence, rejected extractor, I/O).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import numcore as nc
from . import pipeline
from .autoencoder import TrainingDiverged
from .checkpoint import CheckpointError, CorruptCheckpoint
from .config import VARIANTS, ConfigError, RunConfig
from .metrics import ExtractorRejected
from .phantom import PhantomSpecError

log = logging.getLogger("vascldm")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vascldm", description="Shape- and anatomy-guided latent diffusion on vessel phantoms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, type=Path, help="TOML run configuration")
            p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                           help="override one config value (repeatable)")
        return p

    add("gen-data", "generate the phantom corpus and its manifest")
    add("train-ae", "train the autoencoder")
    p = add("train-ldm", "train the latent diffusion model")
    p.add_argument("--variant", choices=[*VARIANTS, "all"], help="guidance ablation variant (default: config flags)")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p = add("sample", "draw samples from a trained model")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--class", dest="cls", type=int, choices=[1, 2, 3], help="class to sample (default: all)")
    p.add_argument("--n", type=int, help="samples per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p = add("evaluate", "compute the metrics report")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--synth", type=Path, help="sample directory (default: the variant's samples)")
    p.add_argument("--ablation", action="store_true", help="evaluate all three variants and print the comparison")
    p.add_argument("--extractor", type=Path, help="feature extractor checkpoint (trained and cached if absent)")
    p = add("render-mip", "render maximum intensity projections of volume files", config=False)
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory, or a .png/.pgm file")
    p.add_argument("--axis", default="z", choices=["x", "y", "z"])
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "render-mip":
        for path in pipeline.run_render_mip(args.inputs, args.out, args.axis):
            print(path)
        return
    cfg = RunConfig.load(args.config, args.set)
    log.info("command=%s config_hash=%s", args.command, cfg.config_hash)
    if args.command == "gen-data":
        pipeline.run_gen_data(cfg)
    elif args.command == "train-ae":
        pipeline.run_train_ae(cfg)
    elif args.command == "train-ldm":
        variants = list(VARIANTS) if args.variant == "all" else [args.variant]
        for v in variants:
            pipeline.run_train_ldm(cfg, v, resume=args.resume)
    elif args.command == "sample":
        out = pipeline.run_sample(cfg, args.variant, [args.cls] if args.cls else None, args.n, args.seed, args.out)
        print(out)
    elif args.command == "evaluate":
        pipeline.run_evaluate(cfg, args.variant, args.synth, args.ablation, args.extractor)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s", stream=sys.stderr, force=True
    )
    nc.configure_determinism()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    try:
        dispatch(args)
    except CorruptCheckpoint as exc:
        log.error("corrupt checkpoint: %s", exc)
        return EXIT_RUNTIME
    except (ConfigError, PhantomSpecError, pipeline.ValidationError, CheckpointError, nc.ShapeError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (ExtractorRejected, TrainingDiverged, FloatingPointError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
