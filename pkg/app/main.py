"""
Depth Coefficients command-line interface.
Every pipeline is a subcommand with seeded, file-based I/O. Results go to the
output directory (written atomically, with a manifest of the parsed flags) and,
for tabular results, to standard output as CSV.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.config import settings
from app.logging_config import get_logger, setup_logging
from app.services.analysis_service import bev_project, demo_conv1d
from app.services.dc_codec import (
    BinGrid,
    decode_3coeff,
    decode_image,
    default_grid,
    encode_image,
    encode_pixel,
)
from app.services.depth_io import (
    Camera,
    crop_top_rows,
    estimate_rings_from_elevation,
    lidar_to_camera_axes,
    project_points,
    read_dc_image,
    read_depth_png16,
    read_points_csv,
    subsample_rows,
    write_dc_image,
    write_depth_png16,
    write_gray_pgm,
    write_points_csv,
    write_tensors,
)
from app.services.experiment_service import (
    ExperimentConfig,
    ablation_for_seed,
    evaluate_model,
    make_splits,
    row_pattern,
    run_bin_sweep,
    run_sparsity_sweep,
)
from app.services.loss_service import fit_free_logits, softmax, two_point_loss_landscape
from app.services.metrics_service import evaluate, format_report_table
from app.services.scene_service import (
    build_pattern,
    load_scene_spec,
    make_scene_sample,
    random_scene_spec,
    save_scene_spec,
)
from app.services.toy_model import params_to_tensors, train
from app.utils import (
    MISSING_FILE_EXIT_CODE,
    ConfigurationError,
    DepthCoefficientsError,
    atomic_write_text,
    csv_text,
    error_line,
    parse_optional_floats,
)

logger = get_logger(__name__)

TOY_COMMANDS = {"train-toy", "ablate", "sweep-sparsity", "sweep-bins"}


# ==================== Shared flag handling ====================

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def resolve_grid(args: argparse.Namespace) -> BinGrid:
    """Preset grid (--grid, or the command's default) with explicit bound/bin flags applied on top."""
    kind = args.grid or ("toy" if args.command in TOY_COMMANDS else "outdoor")
    preset = default_grid(kind)
    try:
        return BinGrid(
            d_min=preset.d_min if args.d_min is None else args.d_min,
            d_max=preset.d_max if args.d_max is None else args.d_max,
            n_bins=preset.n_bins if args.n_bins is None else args.n_bins,
        )
    except ValidationError as exc:
        raise ConfigurationError(f"invalid grid: {exc.errors()[0]['msg']}") from exc


def resolve_t(args: argparse.Namespace) -> float:
    if args.t is not None:
        return args.t
    if args.command in TOY_COMMANDS or args.grid == "toy":
        return settings.TOY_T
    if args.grid == "indoor":
        return settings.THRESHOLD_T_INDOOR
    return settings.THRESHOLD_T_OUTDOOR


def output_dir(args: argparse.Namespace) -> Path:
    return Path(args.output_dir) if args.output_dir else Path("outputs") / args.command


def manifest_dir(args: argparse.Namespace) -> Path:
    """Directory for manifest.txt: --output-dir if given, else next to --output, else the default."""
    if not args.output_dir and getattr(args, "output", None):
        return Path(args.output).parent
    return output_dir(args)


def write_manifest(args: argparse.Namespace) -> Path:
    """Echo the parsed configuration as key=value lines into the output directory."""
    out = manifest_dir(args)
    lines = [f"app_version={settings.APP_VERSION}"]
    for key in sorted(vars(args)):
        if key == "handler":
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    grid = resolve_grid(args)
    lines += [f"resolved_grid={grid.d_min},{grid.d_max},{grid.n_bins}", f"resolved_t={resolve_t(args)}"]
    path = out / "manifest.txt"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def camera_from_args(args: argparse.Namespace) -> Camera:
    return Camera(fx=args.fx, fy=args.fy, cx=args.cx, cy=args.cy, width=args.width, height=args.height)


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig(
        seed=args.seed,
        n_train=args.n_train,
        n_eval=args.n_eval,
        height=args.scene_height,
        width=args.scene_width,
        row_step=args.row_step,
        noise_sigma=args.noise_sigma,
        t=resolve_t(args),
        window_radius=args.window_radius,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        lr_halving_epochs=args.lr_halving,
        use_guide=not args.no_guide,
        workers=args.workers,
    )


def emit_csv(args: argparse.Namespace, name: str, text: str) -> None:
    """Write a CSV result into the output directory and echo it on stdout."""
    atomic_write_text(output_dir(args) / name, text)
    sys.stdout.write(text)


# ==================== Subcommands ====================

def cmd_encode(args: argparse.Namespace) -> int:
    grid = resolve_grid(args)
    depth = read_depth_png16(args.input)
    dc = encode_image(depth, grid, clamp=args.clamp)
    target = Path(args.output) if args.output else output_dir(args) / "dc.bin"
    write_dc_image(dc, target)
    logger.info(f"Encoded {int(depth.valid.sum())} pixels into {target}")
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    dc = read_dc_image(args.input)
    depth = decode_image(dc, mode=args.mode)
    target = Path(args.output) if args.output else output_dir(args) / "depth.png"
    write_depth_png16(depth, target)
    logger.info(f"Decoded ({args.mode}) {int(depth.valid.sum())} pixels into {target}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred = read_depth_png16(args.pred)
    gt = read_depth_png16(args.gt)
    if args.crop_top:
        pred, gt = crop_top_rows(pred, args.crop_top), crop_top_rows(gt, args.crop_top)
    report = evaluate(pred, gt, resolve_t(args), args.delta_thresholds)
    atomic_write_text(output_dir(args) / "metrics.csv", report.to_csv())
    if args.table:
        sys.stdout.write(format_report_table(report) + "\n")
    else:
        sys.stdout.write(report.to_csv())
    return 0


def cmd_subsample(args: argparse.Namespace) -> int:
    points = read_points_csv(args.points, num_rings=args.num_rings)
    if points.ring is None and args.estimate_rings:
        points = estimate_rings_from_elevation(points, args.estimate_rings)
    kept = subsample_rows(points, every=args.every, rings=args.rings)
    target = Path(args.output) if args.output else output_dir(args) / "points.csv"
    write_points_csv(kept, target)
    n_rings = 0 if kept.ring is None else len(np.unique(kept.ring))
    logger.info(f"Kept {len(kept)} of {len(points)} points on {n_rings} rings")
    return 0


def cmd_project(args: argparse.Namespace) -> int:
    points = read_points_csv(args.points)
    if args.lidar_frame:
        points = lidar_to_camera_axes(points)
    result = project_points(points, camera_from_args(args))
    depth = crop_top_rows(result.image, args.crop_top) if args.crop_top else result.image
    target = Path(args.output) if args.output else output_dir(args) / "sparse.png"
    write_depth_png16(depth, target)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    grid = resolve_grid(args)
    if args.spec:
        spec = load_scene_spec(args.spec)
    else:
        rng = np.random.default_rng(args.seed)
        spec = random_scene_spec(rng, grid, args.scene_height, args.scene_width,
                                 noise_sigma=args.noise_sigma, guide_blur=args.guide_blur)
    pattern = build_pattern(kind=args.pattern, count=args.count, step=args.step, seed=args.seed)
    scene = make_scene_sample(spec, pattern, grid)
    out = output_dir(args)
    write_depth_png16(scene.gt, out / "gt.png")
    write_depth_png16(scene.sparse, out / "sparse.png")
    write_gray_pgm(scene.guide * 255.0, out / "guide.pgm")
    save_scene_spec(spec, out / "scene.txt")
    logger.info(f"Rendered {spec.height}x{spec.width} scene with {len(spec.objects)} objects "
                f"and {int(scene.sparse.valid.sum())} samples into {out}")
    return 0


def cmd_demo_ambiguity(args: argparse.Namespace) -> int:
    t = resolve_t(args)
    landscape = two_point_loss_landscape(args.d1, args.d2, args.loss, t, args.samples)
    rows = [[d, loss, int(d == landscape.argmin_depth)] for d, loss in landscape.rows()]
    emit_csv(args, "landscape.csv", csv_text(["d", "loss", "argmin"], rows))
    logger.info(f"{args.loss} landscape argmin at d={landscape.argmin_depth}")

    if args.with_ce:
        grid = resolve_grid(args)
        targets = [encode_pixel(args.d1, grid, clamp=True), encode_pixel(args.d2, grid, clamp=True)]
        logits, curve = fit_free_logits(targets, args.ce_lr, args.ce_steps)
        density = softmax(logits)
        average = 0.5 * (targets[0] + targets[1])
        rows = [[j + 1, c, p, a] for j, (c, p, a) in enumerate(zip(grid.centers, density, average))]
        atomic_write_text(output_dir(args) / "ce_density.csv",
                          csv_text(["bin", "center", "probability", "target_average"], rows))
        peak = decode_3coeff(density, grid)
        logger.info(f"CE fit: final loss {curve[-1]:.6f}, peak decode {peak:.6f}, "
                    f"inner product {float(density @ grid.centers):.6f}")
    return 0


def cmd_demo_conv1d(args: argparse.Namespace) -> int:
    signal = parse_optional_floats(args.signal)
    demo = demo_conv1d(signal, args.kernel, resolve_grid(args))
    emit_csv(args, "conv1d.csv", demo.to_csv())
    return 0


def cmd_bev(args: argparse.Namespace) -> int:
    depth = read_depth_png16(args.depth)
    bev = bev_project(depth, camera_from_args(args), (args.x_min, args.x_max), (args.z_min, args.z_max), args.cell)
    out = output_dir(args)
    bev.save(out / "bev.csv", out / "bev.pgm")
    logger.info(f"BEV grid {bev.counts.shape[1]}x{bev.counts.shape[0]} cells, {bev.total} pixels, "
                f"{bev.out_of_range} out of range")
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    grid = resolve_grid(args)
    config = experiment_config(args)
    train_scenes, eval_scenes = make_splits(config, grid, row_pattern(config.row_step))
    result = train(config.train_config(args.input_mode, args.loss_mode), train_scenes, grid)
    scores = evaluate_model(result.params, eval_scenes, config.t, config.window_radius)
    out = output_dir(args)
    write_tensors(out / "params.bin", params_to_tensors(result.params))
    atomic_write_text(out / "curve.csv", csv_text(["epoch", "loss"], list(enumerate(result.curve, start=1))))
    report = scores.report
    emit_csv(args, "metrics.csv", csv_text(
        report.header() + ["mixed_pixel_rate"], [report.row() + [scores.mixed_pixel_rate]]
    ))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    table = ablation_for_seed(experiment_config(args), resolve_grid(args))
    emit_csv(args, "ablation.csv", table.to_csv())
    logger.info("Ablation results:\n" + table.format_table())
    return 0


def cmd_sweep_sparsity(args: argparse.Namespace) -> int:
    table = run_sparsity_sweep(experiment_config(args), resolve_grid(args), args.steps)
    emit_csv(args, "sparsity_sweep.csv", table.to_csv())
    return 0


def cmd_sweep_bins(args: argparse.Namespace) -> int:
    grid = resolve_grid(args)
    table = run_bin_sweep(experiment_config(args), grid.d_min, grid.d_max, args.bins)
    emit_csv(args, "bin_sweep.csv", table.to_csv())
    return 0


# ==================== Parser ====================

def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Random seed")
    common.add_argument("--grid", choices=["outdoor", "indoor", "toy"], default=None,
                        help="Preset bin grid (default: outdoor, toy for training commands)")
    common.add_argument("--d-min", type=float, default=None, help="Grid lower bound in meters")
    common.add_argument("--d-max", type=float, default=None, help="Grid upper bound in meters")
    common.add_argument("--n-bins", type=int, default=None, help="Number of depth bins")
    common.add_argument("--t", type=float, default=None, help="Error threshold t in meters")
    common.add_argument("--output-dir", default=None, help="Output directory (default outputs/<command>)")
    common.add_argument("--log-level", default=settings.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    return common


def _camera_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--fx", type=float, required=True)
    parser.add_argument("--fy", type=float, required=True)
    parser.add_argument("--cx", type=float, required=True)
    parser.add_argument("--cy", type=float, required=True)
    parser.add_argument("--width", type=int, required=True)
    parser.add_argument("--height", type=int, required=True)


def _training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-train", type=int, default=settings.TOY_N_TRAIN)
    parser.add_argument("--n-eval", type=int, default=settings.TOY_N_EVAL)
    parser.add_argument("--scene-height", type=int, default=settings.TOY_HEIGHT)
    parser.add_argument("--scene-width", type=int, default=settings.TOY_WIDTH)
    parser.add_argument("--row-step", type=int, default=settings.TOY_ROW_STEP,
                        help="Keep every k-th row of the ground truth as sparse input")
    parser.add_argument("--noise-sigma", type=float, default=0.0)
    parser.add_argument("--window-radius", type=int, default=settings.MIXED_WINDOW_RADIUS)
    parser.add_argument("--epochs", type=int, default=settings.TOY_EPOCHS)
    parser.add_argument("--lr", type=float, default=settings.TOY_LEARNING_RATE)
    parser.add_argument("--batch-size", type=int, default=settings.TOY_BATCH_SIZE)
    parser.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    parser.add_argument("--lr-halving", type=int, default=None, help="Halve the learning rate every k epochs")
    parser.add_argument("--no-guide", action="store_true", help="Train without the guide channel")
    parser.add_argument("--workers", type=int, default=settings.TRAIN_WORKERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcdepth",
        description=f"{settings.APP_NAME}: encoding, losses, metrics and toy depth completion.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("encode", cmd_encode, "Encode a 16-bit PNG depth map into a DC tensor file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--clamp", action="store_true", help="Snap out-of-range depths into the grid")

    p = add("decode", cmd_decode, "Decode a DC tensor file into a 16-bit PNG depth map")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--mode", choices=["all", "3coeff"], default="3coeff")

    p = add("eval", cmd_eval, "Evaluate a predicted depth map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--delta-thresholds", type=_floats, default=None)
    p.add_argument("--crop-top", type=int, default=0, help="Drop this many top rows before evaluating")
    p.add_argument("--table", action="store_true", help="Human-readable table instead of CSV")

    p = add("subsample", cmd_subsample, "Keep evenly spaced Lidar rings of a point list")
    p.add_argument("--points", required=True)
    selection = p.add_mutually_exclusive_group(required=True)
    selection.add_argument("--every", type=int)
    selection.add_argument("--rings", type=_ints)
    p.add_argument("--num-rings", type=int, default=None, help="Ring count R of the sensor")
    p.add_argument("--estimate-rings", type=int, default=None,
                   help="Assign R rings from elevation when the file has no ring column")
    p.add_argument("--output", default=None)

    p = add("project", cmd_project, "Project camera-frame points into a sparse depth map")
    p.add_argument("--points", required=True)
    _camera_flags(p)
    p.add_argument("--lidar-frame", action="store_true", help="Points use x forward, y left, z up")
    p.add_argument("--crop-top", type=int, default=0)
    p.add_argument("--output", default=None)

    p = add("synth", cmd_synth, "Render a synthetic scene with its sparse samples and guide")
    p.add_argument("--spec", default=None, help="Scene file (random scene when omitted)")
    p.add_argument("--scene-height", type=int, default=settings.TOY_HEIGHT)
    p.add_argument("--scene-width", type=int, default=settings.TOY_WIDTH)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--guide-blur", type=float, default=1.0)
    p.add_argument("--pattern", choices=["uniform", "rows", "grid"], default="rows")
    p.add_argument("--count", type=int, default=None, help="Samples for the uniform pattern")
    p.add_argument("--step", type=int, default=settings.TOY_ROW_STEP, help="Step for rows/grid patterns")

    p = add("demo-ambiguity", cmd_demo_ambiguity, "Two-point loss landscape (and CE density fit)")
    p.add_argument("--d1", type=float, required=True)
    p.add_argument("--d2", type=float, required=True)
    p.add_argument("--loss", choices=["mse", "mae", "tmse", "tmae"], default="mse")
    p.add_argument("--samples", type=int, default=801)
    p.add_argument("--with-ce", action="store_true", help="Also fit one logit vector to both DC targets")
    p.add_argument("--ce-lr", type=float, default=2.0)
    p.add_argument("--ce-steps", type=int, default=5000)

    p = add("demo-conv1d", cmd_demo_conv1d, "Sparse vs. DC convolution on a 1-D slice")
    p.add_argument("--signal", required=True, help="Comma-separated depths, empty or 'nan' for missing")
    p.add_argument("--kernel", type=_floats, default=[1.0, 1.0, 1.0])

    p = add("bev", cmd_bev, "Bird's-eye-view pixel counts of a depth map")
    p.add_argument("--depth", required=True)
    _camera_flags(p)
    p.add_argument("--x-min", type=float, default=-20.0)
    p.add_argument("--x-max", type=float, default=20.0)
    p.add_argument("--z-min", type=float, default=0.0)
    p.add_argument("--z-max", type=float, default=80.0)
    p.add_argument("--cell", type=float, default=0.5)

    p = add("train-toy", cmd_train_toy, "Train one toy configuration on synthetic scenes")
    p.add_argument("--input-mode", choices=["sp", "dc"], default="dc")
    p.add_argument("--loss-mode", choices=["mse", "ce"], default="ce")
    _training_flags(p)

    p = add("ablate", cmd_ablate, "SP/DC input x MSE/CE loss ablation")
    _training_flags(p)

    p = add("sweep-sparsity", cmd_sweep_sparsity, "DC/CE over row-subsampling steps")
    p.add_argument("--steps", type=_ints, default=[1, 2, 4])
    _training_flags(p)

    p = add("sweep-bins", cmd_sweep_bins, "DC/CE over bin counts with timing")
    p.add_argument("--bins", type=_ints, default=[10, 20, 40])
    _training_flags(p)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 2 on usage errors, the error's exit code for toolkit errors,
        15 for missing files and 1 for anything unexpected
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.log_level)
    try:
        code = args.handler(args)
        write_manifest(args)
        return code
    except FileNotFoundError as exc:
        print(f"dcdepth: {error_line(exc)}", file=sys.stderr)
        return MISSING_FILE_EXIT_CODE
    except DepthCoefficientsError as exc:
        print(f"dcdepth: {error_line(exc)}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return exc.exit_code
    except ValidationError as exc:
        print(f"dcdepth: {error_line(ConfigurationError(exc.errors()[0]['msg']))}", file=sys.stderr)
        return ConfigurationError.exit_code
    except Exception as exc:
        logger.exception(f"Unexpected failure in {args.command}")
        print(f"dcdepth: {error_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
