from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, AppConfig, ConfigError, load_config
from .dataset import (
    DatasetError,
    build_pairs,
    centre_block,
    first_valid_time,
    frame_name,
    list_scenes,
    load_scene,
    read_frames,
    stack_adjacent,
    suffix_for,
    write_scene,
)
from .imageio import ImageFormatError, is_image, read_image, write_image
from .logger import MANIFEST_NAME, ManifestManager, RunManifest, setup_logging
from .metrics import MetricError, evaluate_scene, write_report_csv
from .monitor import ThroughputMonitor
from .network import NetworkConfigError, init_model, restore
from .scenes import bundled_scenes
from .tensor_core import ShapeError
from .training import MOVING_OBJECT_RESIZE, NumericalError, train, write_loss_csv
from .turbulence_sim import SimulationError, derive_seed, simulate_sequence


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DATA_ERRORS = (
    ShapeError,
    ImageFormatError,
    CheckpointError,
    DatasetError,
    SimulationError,
    MetricError,
    NetworkConfigError,
    OSError,
)


class UsageError(RuntimeError):
    """Raised for invalid command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="run.py", description="Turbulence mitigation with a residual CNN")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="KEY=value configuration file")
    common.add_argument("--seed", type=int, help="overrides SEED from the configuration")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    scenes = sub.add_parser("scenes", parents=[common], help="write the bundled synthetic clean scenes")
    scenes.add_argument("--out", type=Path, required=True)
    scenes.add_argument("--size", type=int, default=128)

    simulate = sub.add_parser("simulate", parents=[common], help="generate distorted sequences")
    simulate.add_argument("--clean", type=Path, required=True, help="directory of clean images")
    simulate.add_argument("--out", type=Path, required=True)
    simulate.add_argument("--frames", type=int, required=True)

    training = sub.add_parser("train", parents=[common], help="train a restoration model")
    training.add_argument("--data", type=Path, required=True)
    training.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    training.add_argument("--out", type=Path, required=True, help="checkpoint path (.atrm)")
    training.add_argument("--in-frames", type=int, choices=(1, 3), default=1)
    training.add_argument("--avg-window", type=int, default=1)
    training.add_argument("--scenes", help="comma separated scene names to train on")
    training.add_argument("--train-frames", type=int, help="use only the first N frames of each scene")
    training.add_argument("--resume", type=Path, help="continue from this checkpoint")
    training.add_argument("--loss-csv", type=Path)

    restoring = sub.add_parser("restore", parents=[common], help="restore a distorted sequence")
    restoring.add_argument("--model", type=Path, required=True)
    restoring.add_argument("--in", dest="in_dir", type=Path, required=True)
    restoring.add_argument("--out", type=Path, required=True)
    restoring.add_argument("--avg-window", type=int, default=1)
    restoring.add_argument("--report", action="store_true", help="record pixels/second in the manifest")
    restoring.add_argument("--workers", type=int, help="frames restored in parallel (overrides WORKERS)")

    evaluate = sub.add_parser("evaluate", parents=[common], help="score restored frames against a clean image")
    evaluate.add_argument("--restored", type=Path, required=True)
    evaluate.add_argument("--clean", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True)
    evaluate.add_argument("--distorted", type=Path, help="also score these distorted frames")
    return parser


def _manifest(path: Path, command: str, args: argparse.Namespace, config: AppConfig) -> ManifestManager:
    arguments = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()}
    return ManifestManager(path, RunManifest(command=command, arguments=arguments, config=config.echo(), seed=config.seed))


def _inputs(*paths: Optional[Path]) -> List[Path]:
    return [p for p in paths if p is not None]


def cmd_scenes(args: argparse.Namespace, config: AppConfig) -> int:
    for name, image in bundled_scenes(args.size).items():
        path = args.out / f"{name}{suffix_for(image)}"
        write_image(image, path)
        logger.info("Wrote scene %s", path)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: AppConfig) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if not args.clean.is_dir():
        raise DatasetError(f"clean directory {args.clean} does not exist")
    clean_files = sorted(p for p in args.clean.iterdir() if is_image(p))
    if not clean_files:
        raise DatasetError(f"no clean images in {args.clean}")

    manager = _manifest(args.out / MANIFEST_NAME, "simulate", args, config)
    manager.record_inputs(_inputs(args.clean, args.config))
    monitor = ThroughputMonitor()
    monitor.start()

    def simulate_one(item: tuple[int, Path]) -> Path:
        index, path = item
        clean = read_image(path)
        distortion = replace(config.distortion, seed=derive_seed(config.seed, index))
        frames = simulate_sequence(clean, args.frames, distortion)
        monitor.add(frames[0].size * len(frames))
        return write_scene(args.out, path.stem, clean, frames)

    try:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for scene_dir in pool.map(simulate_one, enumerate(clean_files)):
                manager.record_output(scene_dir)
                logger.info("Simulated %d frames into %s", args.frames, scene_dir)
    finally:
        monitor.stop()

    manager.record_throughput(monitor.pixels, monitor.elapsed, monitor.pixels_per_second())
    manager.record_cpu(monitor.cpu_stats())
    manager.finish()
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: AppConfig) -> int:
    if args.avg_window < 1:
        raise UsageError("--avg-window must be >= 1")
    names = [n.strip() for n in args.scenes.split(",") if n.strip()] if args.scenes else None
    scene_dirs = list_scenes(args.data, names)
    scenes = [load_scene(path) for path in scene_dirs]
    channels = {scene.channels for scene in scenes}
    if len(channels) != 1:
        raise DatasetError(f"scenes mix channel counts: {sorted(channels)}")
    in_channels = args.in_frames * channels.pop()
    pairs = build_pairs(scenes, args.in_frames, args.avg_window, args.train_frames)

    training_config = config.training
    if args.in_frames > 1 and training_config.resize_augment is None:
        training_config = replace(training_config, resize_augment=MOVING_OBJECT_RESIZE)

    adam = None
    if args.resume is not None:
        checkpoint = load_checkpoint(args.resume)
        model, adam = checkpoint.model, checkpoint.adam
        if model.config.in_channels != in_channels:
            raise DatasetError(
                f"checkpoint expects {model.config.in_channels} input channels, dataset provides {in_channels}"
            )
        logger.info("Resuming from %s at step %d", args.resume, adam.t if adam else 0)
    else:
        model = init_model(config.network(in_channels), config.seed)

    manifest_path = args.out.parent / f"{args.out.stem}.{MANIFEST_NAME}"
    manager = _manifest(manifest_path, "train", args, config)
    manager.record_inputs(_inputs(args.data, args.config, args.resume))
    loss_csv = args.loss_csv or args.out.parent / f"{args.out.stem}.loss.csv"

    monitor = ThroughputMonitor()
    monitor.start()
    try:
        result = train(model, pairs, training_config, adam=adam)
    except NumericalError as exc:
        write_loss_csv(exc.trace, loss_csv)
        manager.record("error", str(exc))
        manager.finish()
        raise
    finally:
        monitor.stop()

    save_checkpoint(result.model, args.out, result.adam)
    write_loss_csv(result.trace, loss_csv)
    manager.record_output(args.out)
    manager.record_output(loss_csv)
    manager.record_cpu(monitor.cpu_stats())
    manager.record("final_step", result.adam.t)
    if result.trace:
        manager.record("final_loss", result.trace[-1].loss)
    manager.finish()
    logger.info("Training finished in %.1fs, checkpoint %s", result.seconds, args.out)
    return EXIT_OK


def cmd_restore(args: argparse.Namespace, config: AppConfig) -> int:
    if args.avg_window < 1:
        raise UsageError("--avg-window must be >= 1")
    model = load_checkpoint(args.model).model
    _, frames = read_frames(args.in_dir)
    channels = frames.shape[1]
    if model.config.in_channels % channels:
        raise ShapeError(
            f"model expects {model.config.in_channels} input channels, frames have {channels}"
        )
    in_frames = model.config.in_channels // channels
    logger.info(
        "Model expects %d input frame(s) of %d channel(s); restoring with a %d-frame average",
        in_frames,
        channels,
        args.avg_window,
    )
    first = first_valid_time(in_frames, args.avg_window)
    if first >= len(frames):
        raise DatasetError(
            f"window of {args.avg_window} frames with {in_frames} input frame(s) "
            f"needs {first + 1} frames, sequence has {len(frames)}"
        )

    manager = _manifest(args.out / MANIFEST_NAME, "restore", args, config)
    manager.record_inputs(_inputs(args.model, args.in_dir, args.config))
    manager.record("in_frames", in_frames)
    workers = args.workers or config.workers
    suffix = suffix_for(frames[0])
    monitor = ThroughputMonitor()

    def restore_one(t: int) -> Path:
        restored = restore(model, stack_adjacent(frames, t, in_frames, args.avg_window).astype(np.float32))
        path = args.out / frame_name(t + 1, prefix="restored_", suffix=suffix)
        write_image(centre_block(restored, in_frames), path)
        monitor.add(int(frames.shape[-1] * frames.shape[-2]))
        return path

    monitor.start()
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(restore_one, range(first, len(frames))))
    finally:
        elapsed = monitor.stop()

    for path in outputs:
        manager.record_output(path)
    rate = monitor.pixels_per_second()
    logger.info("Restored %d frames in %.2fs (%.1f pixels/second)", len(outputs), elapsed, rate)
    if args.report:
        manager.record_throughput(monitor.pixels, elapsed, rate)
        manager.record_cpu(monitor.cpu_stats())
    manager.finish()
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: AppConfig) -> int:
    files, frames = read_frames(args.restored)
    clean = read_image(args.clean)
    report = evaluate_scene(list(frames), clean)
    write_report_csv(report, args.out, names=[f.name for f in files])

    manager = _manifest(args.out.parent / f"{args.out.stem}.{MANIFEST_NAME}", "evaluate", args, config)
    manager.record_inputs(_inputs(args.restored, args.clean, args.distorted))
    manager.record_output(args.out)
    manager.record("mean", {"psnr_db": report.mean.psnr_db, "ssim": report.mean.ssim, "mse": report.mean.mse})
    logger.info(
        "Restored: PSNR %.2f dB, SSIM %.4f over %d frames",
        report.mean.psnr_db,
        report.mean.ssim,
        len(report.frames),
    )

    if args.distorted is not None:
        _, distorted = read_frames(args.distorted)
        baseline = evaluate_scene(list(distorted), clean)
        manager.record(
            "distorted_mean",
            {"psnr_db": baseline.mean.psnr_db, "ssim": baseline.mean.ssim, "mse": baseline.mean.mse},
        )
        logger.info(
            "Distorted: PSNR %.2f dB, SSIM %.4f (gain %+.2f dB, %+.4f SSIM)",
            baseline.mean.psnr_db,
            baseline.mean.ssim,
            report.mean.psnr_db - baseline.mean.psnr_db,
            report.mean.ssim - baseline.mean.ssim,
        )
    manager.finish()
    return EXIT_OK


COMMANDS = {
    "scenes": cmd_scenes,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one workflow and return its exit code."""

    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config, preset=getattr(args, "preset", None), seed=args.seed)
    except (UsageError, ConfigError) as exc:
        print(f"設定エラー: {exc}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(config)
    try:
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError) as exc:
        logger.error("Usage error: %s", exc)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.error("Numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        logger.error("Data error: %s", exc)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
