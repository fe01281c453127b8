"""Command-line interface: cryo2d run | resume | synth | grade-report.

Exit codes: 0 success, 2 input error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import evalgen, formats
from .pipeline import (
    CheckpointError,
    InputError,
    PipelineConfig,
    StageFailure,
    parse_config_file,
    resume,
    run_pipeline,
)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="input particle stack (.mrcs)")
    p.add_argument("--star", help="STAR file with per-particle CTF parameters")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--num-classes", type=int, help="seed classes before pruning (default 3000)")
    p.add_argument("--keep-classes", type=int, help="classes kept after grading (default 1500)")
    p.add_argument("--class-size", type=int, help="neighbors per class at search time (default 300)")
    p.add_argument("--keep-members", type=int, help="members kept per class (default 150)")
    p.add_argument("--n-coeffs", type=int, help="steerable PCA coefficients (default 500)")
    p.add_argument("--downsample-size", type=int, dest="downsample",
                   help="working image side in pixels (default 89)")
    p.add_argument("--n-theta", type=int, help="rotation grid size (default 72)")
    p.add_argument("--phase-flip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--whiten", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--noise-sample-count", type=int,
                   help="images sampled for the noise spectrum (default 1000)")
    p.add_argument("--em-iters", type=int, help="EM iterations per class (default 7)")
    p.add_argument("--em-rotations", type=int, help="EM rotation grid (default 72)")
    p.add_argument("--em-max-shift", type=int, help="EM shift radius in pixels (default 4)")
    p.add_argument("--em-on-raw", action=argparse.BooleanOptionalAction, default=None,
                   help="run EM on full-size phase-flipped images")
    p.add_argument("--rng-seed", type=int, help="seed for the class-seed selection")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")


_FLAG_TO_FIELD = {
    "input": "input_path",
    "star": "star_path",
    "out": "out_dir",
}


def _config_from_args(args) -> PipelineConfig:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    names = {f.name for f in fields(PipelineConfig)}
    for key, val in vars(args).items():
        if val is None or key in ("command", "config"):
            continue
        values[_FLAG_TO_FIELD.get(key, key)] = val
    unknown = set(values) - names
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**values)


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    if not config.input_path:
        raise InputError("an input stack is required (--input)")
    result = run_pipeline(config)
    print(f"wrote {result.n_kept} class averages to {result.averages_path}")
    for key in ("preprocess", "sPCA", "NN", "EM", "total"):
        print(f"  {key}: {result.timings.get(key, 0.0):.1f} s")
    return 0


def _cmd_resume(args) -> int:
    out = Path(args.out or ".")
    saved = out / "config.cfg"
    if args.config:
        values = parse_config_file(args.config)
    elif saved.exists():
        values = parse_config_file(saved)
    else:
        raise InputError(f"no saved config at {saved}; pass --config")
    for key, val in vars(args).items():
        if val is None or key in ("command", "config"):
            continue
        values[_FLAG_TO_FIELD.get(key, key)] = val
    config = PipelineConfig(**values)
    result = resume(config)
    print(f"wrote {result.n_kept} class averages to {result.averages_path}")
    return 0


def _cmd_synth(args) -> int:
    values = {}
    if args.spec:
        with open(args.spec) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{args.spec}:{lineno}: expected key=value")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    field_types = {f.name: f.type for f in fields(evalgen.SyntheticSpec)}
    for key in list(values):
        if key not in field_types:
            raise InputError(f"unknown synth key {key!r}")
        values[key] = float(values[key]) if "float" in str(field_types[key]) else int(values[key])
    for key in ("n_templates", "images_per_template", "side", "rng_seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for key in ("snr", "shift_sigma", "reflection_prob"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    spec = evalgen.SyntheticSpec(**values)
    stack, truth = evalgen.generate(spec)
    formats.write_mrc_stack(formats.MrcStack(data=stack, pixel_size=1.0), args.out)
    truth.save_tsv(args.truth)
    print(f"wrote {spec.n_images} images to {args.out} and ground truth to {args.truth}")
    return 0


def _cmd_grade_report(args) -> int:
    path = Path(args.out or ".") / "grades.txt"
    if not path.exists():
        raise InputError(f"no grade report at {path}; run the pipeline first")
    sys.stdout.write(path.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cryo2d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full enhancement pipeline")
    _add_run_flags(p_run)

    p_res = sub.add_parser("resume", help="resume from the latest stage checkpoint")
    _add_run_flags(p_res)

    p_syn = sub.add_parser("synth", help="generate a synthetic particle stack")
    p_syn.add_argument("--spec", help="key=value synthetic spec file")
    p_syn.add_argument("--out", required=True, help="output stack (.mrcs)")
    p_syn.add_argument("--truth", required=True, help="output ground-truth TSV")
    p_syn.add_argument("--n-templates", type=int, dest="n_templates")
    p_syn.add_argument("--images-per-template", type=int, dest="images_per_template")
    p_syn.add_argument("--side", type=int)
    p_syn.add_argument("--snr", type=float)
    p_syn.add_argument("--shift-sigma", type=float, dest="shift_sigma")
    p_syn.add_argument("--reflection-prob", type=float, dest="reflection_prob")
    p_syn.add_argument("--rng-seed", type=int, dest="rng_seed")

    p_rep = sub.add_parser("grade-report", help="print the class grade table")
    p_rep.add_argument("--out", help="pipeline output directory")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "resume": _cmd_resume,
        "synth": _cmd_synth,
        "grade-report": _cmd_grade_report,
    }
    try:
        return handlers[args.command](args)
    except (InputError, formats.FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
