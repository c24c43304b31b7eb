"""Command-line interface: encode, decode, train, eval, ablate."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bitstream, evalmetrics, pipeline
from .mode_control import DEFAULT_TAU_SPATIAL_8BIT, DEFAULT_TAU_TEMPORAL_8BIT, Thresholds
from .model import PMVCModel
from .numerics.checkpoint import CheckpointError
from .predictor import PredictionMode

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BITSTREAM = 4
EXIT_CHECKPOINT = 5
EXIT_BAD_INPUT = 6
EXIT_INVARIANT = 7

DEFAULT_GRID = (400.0, 200.0, 100.0, 50.0, 25.0)


class InvariantViolation(RuntimeError):
    pass


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("PMVC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_BAD_INPUT, "bad-seed", f"PMVC_SEED must be an integer, got {env!r}") from None


def _grid(text: str | None) -> list[float]:
    if text is None:
        return list(DEFAULT_GRID)
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise CliError(EXIT_BAD_INPUT, "empty-grid", "threshold grid is empty")
    return values


def _load_model(path: str) -> PMVCModel:
    return PMVCModel.load(path)


def _thresholds(args) -> Thresholds:
    return Thresholds.from_8bit(args.tau_spatial, args.tau_temporal)


def _pipeline_config(args) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(deblock=args.deblock, max_stages=getattr(args, "stages", None))


# ---------------------------------------------------------------------------
# commands


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    if args.stages is not None and not 1 <= args.stages <= model.cfg.codec.stages:
        raise CliError(EXIT_BAD_INPUT, "bad-stages", f"--stages must lie in [1, {model.cfg.codec.stages}]")
    frames_u8 = pipeline.read_frames(args.input)
    result = pipeline.encode_sequence(pipeline.to_normalized(frames_u8), model, _thresholds(args),
                                      _pipeline_config(args))
    data = result.to_bytes()
    Path(args.output).write_bytes(data)
    report = bitstream.bit_accounting(result.document)
    if report.total != 8 * len(data):
        raise InvariantViolation("bit accounting does not match the written file size")
    rec = pipeline.to_uint8(result.reconstruction)
    summary = report.as_dict()
    summary.update(
        file_bytes=len(data),
        psnr_db=evalmetrics.sequence_psnr(frames_u8, rec),
        skip_fraction=float(np.mean([s.skip_fraction for s in result.stats])),
    )
    print(json.dumps(summary))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    data = Path(args.bitstream).read_bytes()
    frames = pipeline.decode_sequence(data, model, pipeline.PipelineConfig(deblock=args.deblock))
    frames_u8 = pipeline.to_uint8(frames)
    if args.png:
        pipeline.write_png_frames(args.output, frames_u8)
    else:
        pipeline.write_frames(args.output, frames_u8)
    print(json.dumps({"frames": int(frames_u8.shape[0]), "width": int(frames_u8.shape[2]),
                      "height": int(frames_u8.shape[1])}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import ABLATION_MODES, TrainConfig, load_config, train, train_ablation

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.mode:
        cfg.mode = PredictionMode(args.mode).value
    cfg.seed = resolve_seed(args.seed) if args.seed is not None or "PMVC_SEED" in os.environ else cfg.seed
    if args.all_modes:
        paths = train_ablation(cfg, args.out, ABLATION_MODES,
                               progress=lambda msg: print(msg, file=sys.stderr, flush=True))
        print(json.dumps({"model_dir": str(args.out), "checkpoints": {m: str(p) for m, p in paths.items()}}))
        return EXIT_OK
    model, log = train(cfg)
    model.save(args.out)
    if args.log:
        log.write_csv(args.log)
    print(json.dumps({"checkpoint": str(args.out), "mode": cfg.mode, "steps": len(log.rows),
                      "model_hash": model.model_hash().hex()}))
    return EXIT_OK


def _sequences(args) -> list[tuple[str, np.ndarray]]:
    if args.dataset:
        root = Path(args.dataset)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {root}")
        if (root / pipeline.DESCRIPTOR).exists() or list(root.glob("*.png")):
            return [(root.name, pipeline.read_frames(root))]
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not subdirs:
            raise FileNotFoundError(f"no sequences under {root}")
        return [(p.name, pipeline.read_frames(p)) for p in subdirs]
    from .synthetic import SyntheticDatasetSpec, generate_dataset

    spec = SyntheticDatasetSpec(frames=args.frames, count=args.synthetic, seed=resolve_seed(args.seed) + 104729)
    return [(f"synthetic{i:02d}-{c.texture}-{c.motion}", c.as_uint8()) for i, c in enumerate(generate_dataset(spec))]


def _write_gnuplot(csv_path: Path, rows) -> None:
    dat = csv_path.with_suffix(".dat")
    with open(dat, "w") as fh:
        fh.write("# mode tau_spatial bpp psnr_db msssim\n")
        for mode in sorted({r.mode for r in rows}):
            for p in evalmetrics.average_curve([r for r in rows if r.mode == mode]):
                fh.write(f"{mode} {p.bpp:.6f} {p.psnr:.4f} {p.msssim:.6f}\n")
            fh.write("\n\n")
    csv_path.with_suffix(".gp").write_text(
        "set xlabel 'bits per pixel'\nset ylabel 'PSNR (dB)'\nset key bottom right\n"
        f"plot for [i=0:*] '{dat.name}' index i using 2:3 with linespoints title columnhead(1)\n"
    )


def _sweep_all(sequences, model: PMVCModel, grid, args) -> list:
    """RD sweep of every sequence, in worker processes when --jobs > 1."""
    config = pipeline.PipelineConfig(deblock=args.deblock)
    if args.jobs < 1:
        raise CliError(EXIT_BAD_INPUT, "bad-jobs", "--jobs must be at least 1")
    if args.jobs == 1 or len(sequences) == 1:
        per_sequence = [evalmetrics.rd_sweep(name, frames, model, grid, args.tau_temporal, config)
                        for name, frames in sequences]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(evalmetrics.rd_sweep, name, frames, model, grid, args.tau_temporal, config)
                       for name, frames in sequences]
            per_sequence = [f.result() for f in futures]
    return [row for rows in per_sequence for row in rows]


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    grid = _grid(args.grid)
    rows = _sweep_all(_sequences(args), model, grid, args)
    out = Path(args.output)
    evalmetrics.write_csv(out, rows)
    _write_gnuplot(out, rows)
    print(json.dumps({"rows": len(rows), "csv": str(out)}))
    return EXIT_OK


def ablation_table(rows, modes: list[str]) -> dict[str, float]:
    """BD-rate of every mode against NoPred on the averaged RD curves."""
    curves = {m: evalmetrics.average_curve([r for r in rows if r.mode == m]) for m in modes}
    if "nopred" not in curves:
        raise CliError(EXIT_BAD_INPUT, "no-anchor", "ablation needs the nopred mode as anchor")
    return {m: evalmetrics.bd_rate(curves["nopred"], curves[m]) for m in modes}


def cmd_ablate(args) -> int:
    modes = [PredictionMode(m.strip()).value for m in args.modes.split(",") if m.strip()]
    grid = _grid(args.grid)
    sequences = _sequences(args)
    rows = []
    for mode in modes:
        model = _load_model(str(Path(args.model_dir) / f"{mode}.pmck"))
        if model.mode != mode:
            raise CliError(EXIT_CHECKPOINT, "mode-mismatch", f"{mode}.pmck holds a {model.mode} model")
        rows.extend(_sweep_all(sequences, model, grid, args))
    if args.output:
        evalmetrics.write_csv(args.output, rows)
    table = ablation_table(rows, modes)
    print("mode      BD-rate vs nopred")
    for m in modes:
        print(f"{m:<9} {table[m]:+8.2f}%")
    if args.check:
        ordered = all(m in table for m in ("pmcnn", "temporal", "spatial"))
        if not ordered or not table["pmcnn"] < table["temporal"] < table["spatial"] < 0:
            raise InvariantViolation("ablation ordering pmcnn < temporal < spatial < 0 does not hold")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmvc", description="Learned block-based video codec.")
    sub = parser.add_subparsers(dest="command", required=True)

    def coding_options(p, thresholds=True):
        p.add_argument("--seed", type=int, default=None, help="seed (falls back to $PMVC_SEED)")
        p.add_argument("--deblock", choices=pipeline.DEBLOCK_MODES, default="in-loop")
        if thresholds:
            p.add_argument("--tau-spatial", type=float, default=DEFAULT_TAU_SPATIAL_8BIT,
                           help="stage-stop MSE threshold, 8-bit units")
            p.add_argument("--tau-temporal", type=float, default=DEFAULT_TAU_TEMPORAL_8BIT,
                           help="skip MSE threshold, 8-bit units")

    p = sub.add_parser("encode", help="encode a frame directory")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stages", type=int, default=None, help="maximum stages per block (<= 8)")
    coding_options(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream into a frame directory")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--png", action="store_true", help="write PNG files instead of planar RGB24")
    coding_options(p, thresholds=False)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model on synthetic clips")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="checkpoint file, or a directory with --all-modes")
    p.add_argument("--mode", choices=[m.value for m in PredictionMode], default=None)
    p.add_argument("--all-modes", action="store_true",
                   help="train all four modes with a shared codec into the --out directory (for ablate)")
    p.add_argument("--log", default=None, help="training log CSV")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "rate-distortion sweep of one model"),
                             ("ablate", cmd_ablate, "BD-rate table of the four prediction modes")):
        p = sub.add_parser(name, help=text)
        if name == "eval":
            p.add_argument("--model", required=True)
            p.add_argument("--output", default="rd.csv")
        else:
            p.add_argument("--modes", default="pmcnn,spatial,temporal,nopred")
            p.add_argument("--model-dir", required=True, help="directory holding <mode>.pmck checkpoints")
            p.add_argument("--output", default=None)
            p.add_argument("--check", action="store_true", help="exit non-zero unless the ordering holds")
        p.add_argument("--dataset", default=None, help="frame directory or directory of frame directories")
        p.add_argument("--synthetic", type=int, default=4, help="held-out synthetic clips when no dataset is given")
        p.add_argument("--frames", type=int, default=6)
        p.add_argument("--grid", default=None, help="comma-separated spatial thresholds, 8-bit MSE")
        p.add_argument("--jobs", type=int, default=1, help="worker processes, one sequence each")
        coding_options(p)
        p.set_defaults(func=func)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    line = " ".join(str(message).split())
    print(f"error: {kind}: {line}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if hasattr(args, "seed"):
            resolve_seed(args.seed)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, "missing-file", str(exc))
    except bitstream.BitstreamError as exc:
        return _fail(EXIT_BITSTREAM, type(exc).__name__, str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except InvariantViolation as exc:
        return _fail(EXIT_INVARIANT, "invariant", str(exc))
    except ValueError as exc:
        return _fail(EXIT_BAD_INPUT, "bad-input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
