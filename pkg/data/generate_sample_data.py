"""
Sample Data Generation Script
Writes a synthetic depth-completion dataset: for every scene a dense ground truth
and a sparse input (16-bit PNG, value / 256 m), a guide image (PGM) and the scene file.

Usage:
    python data/generate_sample_data.py --scenes 64 --out data/synthetic

Settings such as the toy grid come from the environment or a .env file.
"""

import argparse
from pathlib import Path

from dotenv import load_dotenv

from app.config import settings
from app.logging_config import setup_logging
from app.services.dc_codec import default_grid
from app.services.depth_io import write_depth_png16, write_gray_pgm
from app.services.scene_service import build_pattern, generate_dataset, save_scene_spec
from app.utils import atomic_write_text, csv_text

load_dotenv()


def write_dataset(out_dir: Path, n_scenes: int, seed: int, pattern_kind: str, step: int, count: int,
                  height: int, width: int, noise_sigma: float) -> int:
    """Render scenes and write them under out_dir; returns the number of scenes written."""
    grid = default_grid("toy")
    pattern = build_pattern(kind=pattern_kind, step=step, count=count if pattern_kind == "uniform" else None,
                            seed=seed)
    scenes = generate_dataset(n_scenes, seed, grid, pattern, height, width, noise_sigma)

    index_rows = []
    for i, scene in enumerate(scenes):
        stem = f"scene_{i:04d}"
        write_depth_png16(scene.gt, out_dir / "gt" / f"{stem}.png")
        write_depth_png16(scene.sparse, out_dir / "sparse" / f"{stem}.png")
        write_gray_pgm(scene.guide * 255.0, out_dir / "guide" / f"{stem}.pgm")
        save_scene_spec(scene.spec, out_dir / "specs" / f"{stem}.txt")
        index_rows.append([stem, len(scene.spec.objects), int(scene.sparse.valid.sum())])

    atomic_write_text(out_dir / "index.csv", csv_text(["scene", "objects", "samples"], index_rows))
    return len(scenes)


def main() -> int:
    parser = argparse.ArgumentParser(description="Generate a synthetic depth-completion dataset")
    parser.add_argument("--scenes", type=int, default=settings.TOY_N_TRAIN)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="data/synthetic")
    parser.add_argument("--pattern", choices=["uniform", "rows", "grid"], default="rows")
    parser.add_argument("--step", type=int, default=settings.TOY_ROW_STEP)
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("--height", type=int, default=settings.TOY_HEIGHT)
    parser.add_argument("--width", type=int, default=settings.TOY_WIDTH)
    parser.add_argument("--noise-sigma", type=float, default=0.0)
    args = parser.parse_args()

    setup_logging(settings.LOG_LEVEL)
    print("=" * 60)
    print("Synthetic Depth Data Generation")
    print("=" * 60)
    written = write_dataset(Path(args.out), args.scenes, args.seed, args.pattern, args.step, args.count,
                            args.height, args.width, args.noise_sigma)
    print(f"✓ Wrote {written} scenes to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
