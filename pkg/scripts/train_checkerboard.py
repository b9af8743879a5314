#!/usr/bin/env python3
"""End-to-end demo: train a mosaic generator on a synthetic task.

Builds a 64x64 grey-ramp content image and a two-color checkerboard
style image, trains for a configurable number of steps, then rolls the
final checkpoint over the content image in 2x2 chunks with the full map
decomposition. Everything goes through the `famos` command-line
interface, so this doubles as a living usage example.

    python3 scripts/train_checkerboard.py --out demo --steps 500
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from famos import image_ops
from famos.cli import main as famos


def write_task_images(directory: Path) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    ramp = np.linspace(-1.0, 1.0, 64, dtype=np.float32)
    content = np.broadcast_to(ramp, (3, 64, 64)).copy()
    content_path = directory / "content.png"
    image_ops.save_image(content, content_path)

    yy, xx = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    checker = ((yy // 4 + xx // 4) % 2).astype(bool)
    color_a = np.array([0.8, 0.3, -0.5], np.float32)[:, None, None]
    color_b = np.array([-0.8, -0.3, 0.5], np.float32)[:, None, None]
    style = np.where(checker, color_a, color_b).astype(np.float32)
    style_path = directory / "style.png"
    image_ops.save_image(style, style_path)
    return content_path, style_path


def run(out: Path, steps: int, seed: int) -> int:
    content, style = write_task_images(out)
    common = [
        "--content", str(content), "--style", str(style),
        "--memory.n", "4", "--seed", str(seed),
    ]
    code = famos([
        "train", *common, "--steps", str(steps),
        "--train.snapshot_every", str(max(1, steps // 2)),
        "--out", str(out / "run"),
    ])
    if code != 0:
        return code
    code = famos([
        "infer", *common,
        "--checkpoint", str(out / "run" / "checkpoint_final.bin"),
        "--chunk", "32", "--decompose", "--sidecar",
        "--out", str(out / "mosaic"),
    ])
    if code != 0:
        return code
    print(f"done: snapshots in {out / 'run'}, final mosaic in {out / 'mosaic'}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("checkerboard_demo"))
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--seed", type=int, default=11)
    ns = parser.parse_args()
    sys.exit(run(ns.out, ns.steps, ns.seed))
