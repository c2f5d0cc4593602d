"""Command-line entry point for the affect pipeline"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from .affect.errors import AffectError, ConfigError, StageError
from .affect.pipeline import STAGES, report_digest, run_pipeline
from .affect.synth import CONTRADICTION_RULES, SyntheticSpec, synth_dataset
from .config import PathsConfig, PipelineConfig
from .utils.logging import setup_logging
from .utils.storage import dump_json, read_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

# stages each subcommand runs, earlier stages included so the command is self-contained
STAGE_COMMANDS = {
    "labels": ("labels",),
    "audio": ("labels", "audio"),
    "align": ("labels", "align"),
    "clips": ("labels", "audio", "align", "clips"),
    "forward": ("labels", "audio", "align", "forward"),
    "eval": ("labels", "audio", "align", "forward", "eval"),
    "run": STAGES,
}


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON configuration file")
    parser.add_argument("--corpus", type=str, help="Corpus root laid out like the synth output")
    parser.add_argument("--out", type=str, help="Output directory (overrides paths.output)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--filter", choices=["on", "off"])
    parser.add_argument("--pseudo", choices=["none", "valence", "valence-only", "va", "va+ex"])
    parser.add_argument("--bins", type=int)
    parser.add_argument("--stream", choices=["both", "visual", "aural"], help="Streams fed to the head")
    parser.add_argument("--mask", choices=["on", "off"], help="Keep or zero the mask channel")
    parser.add_argument("--augment", action="store_true", default=None)
    parser.add_argument("--write-clips", action="store_true", default=None, help="Persist sampled clips")
    parser.add_argument("--csv", action="store_true", default=None, help="Also export spectrograms as CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avaffect", description="Aural-visual affect recognition pipeline")
    parser.add_argument("--log-level", type=str, default=None, help="Overrides AFFECT_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="Generate a synthetic labeled corpus")
    synth.add_argument("--out", type=str, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--videos", type=int, default=None)
    synth.add_argument("--frames", type=int, default=None, help="Frames per video")
    synth.add_argument("--contradictions", type=int, default=2, help="Contradictory frames per filter rule")
    synth.add_argument("--spec", type=str, help="JSON file with generator settings")

    for name, stages in STAGE_COMMANDS.items():
        sub = subparsers.add_parser(name, help=f"Run stages: {', '.join(stages)}")
        _add_pipeline_args(sub)

    return parser


def _flag(value: Optional[str]) -> Optional[bool]:
    return None if value is None else value == "on"


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """Merge config file, corpus layout and flags; flags win"""
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "jobs": args.jobs,
        "filter": _flag(args.filter),
        "pseudo": args.pseudo,
        "bins": args.bins,
        "stream_mode": args.stream,
        "augment": args.augment,
        "write_clips": args.write_clips,
        "spectrogram_csv": args.csv,
        "mask": {"use_mask": _flag(args.mask)},
    }
    paths: Dict[str, Any] = {}
    if args.corpus:
        paths.update(PathsConfig.corpus_layout(args.corpus))
    if args.out:
        paths["output"] = args.out
    overrides["paths"] = paths
    return PipelineConfig.load(args.config, overrides)


def _synth_spec(args: argparse.Namespace) -> SyntheticSpec:
    data: Dict[str, Any] = {}
    if args.spec:
        try:
            data = read_json(args.spec)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read generator settings {args.spec}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"generator settings {args.spec} must contain a JSON object")
    if args.videos is not None:
        data["n_videos"] = args.videos
    if args.frames is not None:
        data["frames_per_video"] = args.frames
    data.setdefault("contradictions", {rule: args.contradictions for rule in CONTRADICTION_RULES})
    try:
        return SyntheticSpec.model_validate(data)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_synth(args: argparse.Namespace) -> Dict[str, Any]:
    spec = _synth_spec(args)
    manifest = synth_dataset(spec, args.out, np.random.default_rng(args.seed))
    return {
        "out": str(Path(args.out)),
        "total_frames": manifest["total_frames"],
        "labeled": manifest["labeled"],
        "contradictions": manifest["contradiction_counts"],
    }


def cmd_pipeline(args: argparse.Namespace) -> Dict[str, Any]:
    config = config_from_args(args)
    report = run_pipeline(config, stages=STAGE_COMMANDS[args.command])
    return {
        "out": config.paths.output,
        "stages": report["stages"],
        "digest": report_digest(report),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(level=args.log_level)

    try:
        if args.command == "synth":
            summary = cmd_synth(args)
        else:
            summary = cmd_pipeline(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except StageError as e:
        logger.error(str(e))
        return EXIT_STAGE_FAILURE
    except AffectError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_STAGE_FAILURE

    sys.stdout.write(dump_json(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
