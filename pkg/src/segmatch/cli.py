"""``segmatch`` command line.

Settings resolve in this order, later winning: built-in defaults, the
``--config`` JSON file, ``SEGMATCH_*`` environment variables, flags.

Environment variables: ``SEGMATCH_CONFIG``, ``SEGMATCH_SEED``,
``SEGMATCH_VARIANT``, ``SEGMATCH_SCORE_THRESHOLD``, ``SEGMATCH_OUT``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .pipeline import ArtifactError, PipelineConfig

ENV_PREFIX = "SEGMATCH_"
EXIT_ARTIFACT = 3
EXIT_INVALID = 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("tcam", "sram"))
    p.add_argument("--score-threshold", type=float, dest="score_threshold")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; VALUE is parsed as JSON when possible")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segmatch", description="Key Segment traffic classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a planted-motif synthetic dataset",
        "ingest": "read flow records or captures and split train/val/test",
        "train": "train the CNN",
        "discover": "harvest candidates and build scored Key Segments",
        "compile": "select segments, compile match tables, train the backup tree",
        "simulate": "replay test flows through the data-plane simulator",
        "report": "metrics report from a verdict file",
        "sweep": "score-threshold sweep",
        "run": "all stages end to end",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "ingest":
            p.add_argument("inputs", nargs="*", metavar="PATH[=LABEL]",
                           help="flow-record or pcap files; pcaps need a class label")
        if name == "simulate":
            p.add_argument("--trace", help="pcap trace to replay instead of the test flows")
        if name == "sweep":
            p.add_argument("--thresholds", type=lambda s: [float(x) for x in s.split(",")],
                           help="comma-separated score thresholds")
        if name == "run":
            p.add_argument("--no-sweep", action="store_true")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace, environ: Optional[dict] = None) -> PipelineConfig:
    env = os.environ if environ is None else environ
    values: dict = {}
    config_path = args.config or env.get(ENV_PREFIX + "CONFIG")
    if config_path:
        values.update(json.loads(PipelineConfig.from_json(Path(config_path).read_text()).to_json())["config"])
    env_map = {"SEED": ("seed", int), "VARIANT": ("variant", str),
               "SCORE_THRESHOLD": ("score_threshold", float), "OUT": ("out_dir", str)}
    for suffix, (field, conv) in env_map.items():
        if ENV_PREFIX + suffix in env:
            values[field] = conv(env[ENV_PREFIX + suffix])
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = _parse_value(raw)
    for flag, field in (("seed", "seed"), ("variant", "variant"),
                        ("score_threshold", "score_threshold"), ("out", "out_dir")):
        if getattr(args, flag) is not None:
            values[field] = getattr(args, flag)
    cfg = PipelineConfig.from_dict(values)
    cfg.validate()
    return cfg


def _split_input(item: str):
    path, sep, label = item.rpartition("=")
    if sep and label.isdigit():
        return path, int(label)
    return item, None


def _summary(report: dict) -> str:
    keys = ("flows", "unresolved", "accuracy", "macro_f1", "segment_matching_rate",
            "segment_accuracy", "backup_accuracy", "bits_per_flow")
    return json.dumps({k: report[k] for k in keys if k in report}, sort_keys=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "gen":
            flows = pipeline.cmd_gen(cfg)
            print(f"wrote {len(flows)} flows to {pipeline.RunDir(cfg.out_dir).flows}")
        elif cmd == "ingest":
            split = pipeline.cmd_ingest(cfg, [_split_input(x) for x in args.inputs])
            print(f"train {len(split.train)} val {len(split.validation)} test {len(split.test)}")
        elif cmd == "train":
            pipeline.cmd_train(cfg)
            hist = json.loads(pipeline.RunDir(cfg.out_dir).history.read_text())
            print(f"best validation accuracy {max(h['val_accuracy'] for h in hist):.4f}")
        elif cmd == "discover":
            segs = pipeline.cmd_discover(cfg)
            print(f"{len(segs)} scored segments")
        elif cmd == "compile":
            compiled, dt = pipeline.cmd_compile(cfg)
            print(json.dumps(compiled.stats, sort_keys=True))
        elif cmd == "simulate":
            result = pipeline.cmd_simulate(cfg, args.variant, args.trace)
            print(json.dumps(result.counters, sort_keys=True))
        elif cmd == "report":
            print(_summary(pipeline.cmd_report(cfg, args.variant)))
        elif cmd == "sweep":
            for row in pipeline.cmd_sweep(cfg, args.thresholds, args.variant):
                print(json.dumps(row, sort_keys=True))
        elif cmd == "run":
            print(_summary(pipeline.cmd_run(cfg, sweep=not args.no_sweep)))
    except ArtifactError as exc:
        print(f"segmatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ValueError, OSError) as exc:
        print(f"segmatch {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
