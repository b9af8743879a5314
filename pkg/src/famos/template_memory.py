"""Non-parametric template memory: tiled style images plus coordinates.

The bank holds N float32 templates sampled from style images shifted by
random offsets. Coordinates live in the align-corners convention: -1 is
the first pixel center, +1 the last. A style image spans one [-1,1]^2
tile; template construction samples it at its native pixel density, so
out-of-tile coordinates are folded back by either a triangle wave
(mirror) or a period-2 reset (wrap). The bank also carries the global
canvas grid; crops return both the template stack and the matching grid
window so the networks know where on the canvas they operate.

Only crops ever enter the differentiable engine; the bank itself is
plain read-only host memory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_ops
from .substrate import RngState

__all__ = [
    "TemplateError",
    "MemoryBank",
    "fold_coordinate",
    "tiling_grid",
    "grid_sample",
    "build_memory",
    "crop_with_coords",
    "export_bank",
    "read_manifest",
    "rebuild_from_manifest",
]

MODES = ("wrap", "mirror")

# Sampling positions this close to a pixel center snap onto it, so that
# identity grids reproduce float32 pixels bit-exactly.
_SNAP = 1e-6


class TemplateError(Exception):
    pass


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise TemplateError(f"tiling mode must be one of {MODES}, got {mode!r}")


def fold_coordinate(c, mode: str):
    """Map any real coordinate into [-1,1]; scalars in, scalars out.

    mirror: triangle wave (1.25 -> 0.75), continuous everywhere.
    wrap:   period-2 reduction (1.25 -> -0.75); points already inside
            [-1,1] are fixed, including both endpoints.
    """
    _check_mode(mode)
    arr = np.asarray(c, dtype=np.float64)
    if mode == "mirror":
        t = np.mod(arr + 1.0, 4.0)
        out = np.where(t <= 2.0, t - 1.0, 3.0 - t)
    else:
        t = np.mod(arr + 1.0, 2.0)
        out = np.where((t == 0.0) & (arr > 0.0), 1.0, t - 1.0)
    # The identity region must be bit-exact, not merely close: grids
    # already in [-1,1] pass through folding unchanged.
    out = np.where(np.abs(arr) <= 1.0, arr, out)
    if np.ndim(c) == 0:
        return float(out)
    return out


def tiling_grid(h: int, w: int) -> np.ndarray:
    """Regular (2, h, w) grid spanning [-1,1]^2, corners exactly +-1.

    Channel 0 varies along rows, channel 1 along columns. A singleton
    axis degenerates to coordinate 0.
    """
    if h < 1 or w < 1:
        raise TemplateError(f"grid extents must be positive, got {(h, w)}")
    rows = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    grid = np.stack(
        [np.broadcast_to(rows[:, None], (h, w)), np.broadcast_to(cols[None, :], (h, w))]
    )
    return grid.astype(np.float32)


def grid_sample(image: np.ndarray, coords: np.ndarray, mode: str) -> np.ndarray:
    """Bilinear sample of (C,H,W) at folded (2,h,w) coordinates."""
    image = np.asarray(image)
    coords = np.asarray(coords)
    if image.ndim != 3:
        raise TemplateError(f"grid_sample expects a (C,H,W) image, got {image.shape}")
    if coords.ndim != 2 + 1 or coords.shape[0] != 2:
        raise TemplateError(f"grid_sample expects (2,h,w) coords, got {coords.shape}")
    _, height, width = image.shape
    folded = fold_coordinate(coords.astype(np.float64), mode)
    u = (folded[0] + 1.0) * 0.5 * (height - 1)
    v = (folded[1] + 1.0) * 0.5 * (width - 1)
    u = np.where(np.abs(u - np.rint(u)) < _SNAP, np.rint(u), u)
    v = np.where(np.abs(v - np.rint(v)) < _SNAP, np.rint(v), v)
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    i1 = np.minimum(i0 + 1, height - 1)
    j1 = np.minimum(j0 + 1, width - 1)
    img = image.astype(np.float64)
    out = (
        img[:, i0, j0] * (1.0 - fu) * (1.0 - fv)
        + img[:, i1, j0] * fu * (1.0 - fv)
        + img[:, i0, j1] * (1.0 - fu) * fv
        + img[:, i1, j1] * fu * fv
    )
    return out.astype(np.float32)


@dataclass(frozen=True)
class MemoryBank:
    templates: np.ndarray  # (N, 3, H, W) float32, read-only
    offsets: np.ndarray  # (N, 2) float64, read-only
    mode: str
    source_ids: tuple[int, ...]
    coords: np.ndarray  # (2, H, W) float32 canvas grid, read-only

    @property
    def n(self) -> int:
        return self.templates.shape[0]

    @property
    def extents(self) -> tuple[int, int]:
        return self.templates.shape[2], self.templates.shape[3]


def _as_style(style: np.ndarray, index: int) -> np.ndarray:
    a = np.asarray(style, dtype=np.float32)
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise TemplateError(
            f"style image {index} must be (1|3, H, W), got shape {a.shape}"
        )
    if a.shape[1] < 2 or a.shape[2] < 2:
        raise TemplateError(
            f"style image {index} needs extents of at least 2x2, got {a.shape[1:]}"
        )
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    return a


def build_memory(
    styles,
    n: int,
    target: tuple[int, int],
    mode: str,
    rng: RngState | None = None,
    *,
    offsets=None,
    source_ids=None,
) -> MemoryBank:
    """Sample N templates of `target` extents from the style images.

    The first len(styles) templates take the styles in order so every
    style appears; the rest pick uniformly at random. Each template gets
    an offset drawn uniformly from [-1,1]^2. Passing explicit offsets
    and source_ids (as a manifest records them) bypasses the rng and
    rebuilds a bank bit-identically.
    """
    styles = [_as_style(s, i) for i, s in enumerate(styles)]
    if not styles:
        raise TemplateError("at least one style image is required")
    if n < 1:
        raise TemplateError(f"memory needs n >= 1 templates, got {n}")
    _check_mode(mode)
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise TemplateError(f"target extents must be positive, got {target}")
    if source_ids is not None:
        source_ids = [int(i) for i in source_ids]
        if len(source_ids) != n:
            raise TemplateError(f"expected {n} source ids, got {len(source_ids)}")
        bad = [i for i in source_ids if not 0 <= i < len(styles)]
        if bad:
            raise TemplateError(f"source ids {bad} outside the {len(styles)} styles")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (n, 2):
            raise TemplateError(f"expected offsets of shape ({n}, 2), got {offsets.shape}")
    if rng is None and (offsets is None or source_ids is None):
        raise TemplateError("an rng is required unless offsets and source_ids are given")

    picked_ids: list[int] = []
    picked_offs: list[np.ndarray] = []
    planes: list[np.ndarray] = []
    for i in range(n):
        if source_ids is not None:
            sid = source_ids[i]
        elif i < len(styles):
            sid = i
        else:
            sid = rng.integer(0, len(styles))
        eta = offsets[i] if offsets is not None else rng.uniform((2,)).astype(np.float64)
        style = styles[sid]
        _, hs, ws = style.shape
        # One template pixel advances the tile coordinate by one style
        # pixel (native density); the target grid is centered on eta.
        rows = eta[0] + (2.0 * np.arange(th, dtype=np.float64) - (th - 1)) / (hs - 1)
        cols = eta[1] + (2.0 * np.arange(tw, dtype=np.float64) - (tw - 1)) / (ws - 1)
        grid = np.stack(
            [np.broadcast_to(rows[:, None], (th, tw)), np.broadcast_to(cols[None, :], (th, tw))]
        )
        planes.append(grid_sample(style, grid, mode))
        picked_ids.append(sid)
        picked_offs.append(np.asarray(eta, np.float64))

    templates = np.stack(planes)
    offs = np.stack(picked_offs)
    canvas = tiling_grid(th, tw)
    for a in (templates, offs, canvas):
        a.setflags(write=False)
    return MemoryBank(templates, offs, mode, tuple(picked_ids), canvas)


def crop_with_coords(
    bank: MemoryBank, top_left: tuple[int, int], size: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Window of all N templates plus the canvas grid of that window."""
    r, c = top_left
    h, w = size
    hm, wm = bank.extents
    if h < 1 or w < 1 or r < 0 or c < 0 or r + h > hm or c + w > wm:
        raise TemplateError(
            f"crop at {top_left} of size {size} does not fit template extents {(hm, wm)}"
        )
    return (
        bank.templates[:, :, r : r + h, c : c + w],
        bank.coords[:, r : r + h, c : c + w],
    )


def export_bank(bank: MemoryBank, directory) -> None:
    """Write numbered template PNGs plus a JSON manifest.

    The manifest stores mode, target extents and the exact per-template
    source id and offset, which is everything build_memory needs to
    reproduce the bank from the original styles; the PNGs are quantized
    and only for inspection.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(bank.n):
        image_ops.save_image(bank.templates[i], directory / f"template_{i:03d}.png")
    manifest = {
        "mode": bank.mode,
        "target": list(bank.extents),
        "templates": [
            {"source_id": bank.source_ids[i], "offset": [float(v) for v in bank.offsets[i]]}
            for i in range(bank.n)
        ],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise TemplateError(f"cannot read bank manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise TemplateError(f"malformed bank manifest {path}: {exc}") from exc
    for key in ("mode", "target", "templates"):
        if key not in manifest:
            raise TemplateError(f"bank manifest {path} lacks the '{key}' field")
    return manifest


def rebuild_from_manifest(styles, manifest: dict) -> MemoryBank:
    entries = manifest["templates"]
    return build_memory(
        styles,
        n=len(entries),
        target=tuple(manifest["target"]),
        mode=manifest["mode"],
        offsets=[e["offset"] for e in entries],
        source_ids=[e["source_id"] for e in entries],
    )
