"""Plain-array image utilities: codecs, greyscale, blur, box downsample.

Images are float32 arrays shaped (channels, height, width) with channels
1 (grey) or 3 (RGB) and values in [-1, 1]; byte b maps to 2*(b/255) - 1.
Everything here is non-differentiable plumbing around the networks.

"Reflection" padding throughout is the edge-including kind (numpy
'symmetric', scipy.ndimage 'reflect'): ...c b a | a b c... It is the
variant under which a normalized symmetric filter preserves the image
mean exactly, which the blur relies on.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

__all__ = [
    "ImageError",
    "load_image",
    "save_image",
    "to_greyscale",
    "gaussian_blur",
    "downsample",
]

GREY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601 luminance


class ImageError(Exception):
    pass


def _check_image(image: np.ndarray, op: str) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ImageError(
            f"{op} expects a (channels, height, width) array with 1 or 3 "
            f"channels, got shape {a.shape}"
        )
    return a.astype(np.float32, copy=False)


def _from_bytes(pixels: np.ndarray) -> np.ndarray:
    # (H, W) or (H, W, C) uint8 -> (C, H, W) float32 in [-1, 1].
    arr = pixels.astype(np.float64) * (2.0 / 255.0) - 1.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr.astype(np.float32))


def _to_bytes(image: np.ndarray) -> np.ndarray:
    # Inverse mapping with rounding; quantization error is below half a
    # byte so load -> save reproduces pixel bytes exactly.
    v = image.astype(np.float64)
    b = np.rint((v + 1.0) * (255.0 / 2.0))
    return np.clip(b, 0, 255).astype(np.uint8)


def _read_ppm(raw: bytes, path: Path) -> np.ndarray:
    # Binary netpbm: P5 (grey) and P6 (RGB), 8-bit only. Header fields
    # are whitespace-separated with '#' comments; one whitespace byte
    # separates the maxval from the raster.
    magic = raw[:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ImageError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ImageError(f"{path}: truncated netpbm header")
        c = raw[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif c.isdigit():
            start = pos
            while raw[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise ImageError(f"{path}: malformed netpbm header byte {c!r}")
    width, height, maxval = fields
    if maxval != 255:
        raise ImageError(f"{path}: unsupported depth (maxval {maxval}, need 255)")
    pos += 1  # single whitespace before the raster
    data = raw[pos : pos + width * height * channels]
    if len(data) != width * height * channels:
        raise ImageError(f"{path}: truncated netpbm raster")
    pixels = np.frombuffer(data, np.uint8).reshape(height, width, channels)
    return _from_bytes(pixels if channels == 3 else pixels[:, :, 0])


def _write_ppm(image: np.ndarray, path: Path) -> None:
    b = _to_bytes(image)
    c, h, w = b.shape
    magic = b"P6" if c == 3 else b"P5"
    raster = b.transpose(1, 2, 0) if c == 3 else b[0]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(raster).tobytes())


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PGM/PPM file, sniffing the format."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read image file {path}: {exc}") from exc
    if raw[:2] in (b"P5", b"P6"):
        return _read_ppm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with PILImage.open(path) as im:
                if im.mode not in ("L", "RGB"):
                    raise ImageError(
                        f"{path}: unsupported PNG mode '{im.mode}' "
                        "(need 8-bit greyscale 'L' or 'RGB')"
                    )
                return _from_bytes(np.asarray(im))
        except ImageError:
            raise
        except Exception as exc:
            raise ImageError(f"cannot decode PNG {path}: {exc}") from exc
    raise ImageError(f"{path}: unrecognized image format (need PNG or binary PGM/PPM)")


def save_image(image: np.ndarray, path) -> None:
    """Encode to 8-bit PNG (.png) or binary netpbm (.ppm/.pgm) by suffix."""
    image = _check_image(image, "save_image")
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        b = _to_bytes(image)
        pil = PILImage.fromarray(b.transpose(1, 2, 0) if b.shape[0] == 3 else b[0])
        pil.save(path)
    elif suffix in (".ppm", ".pgm"):
        _write_ppm(image, path)
    else:
        raise ImageError(f"cannot infer image format from suffix {suffix!r} ({path})")


def to_greyscale(image: np.ndarray) -> np.ndarray:
    image = _check_image(image, "to_greyscale")
    if image.shape[0] == 1:
        return image.copy()
    w = np.asarray(GREY_WEIGHTS, np.float64).reshape(3, 1, 1)
    return (image.astype(np.float64) * w).sum(axis=0, keepdims=True).astype(np.float32)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ImageError(f"gaussian blur needs sigma > 0, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    image = _check_image(image, "gaussian_blur")
    k = gaussian_kernel(sigma)
    out = image.astype(np.float64)
    out = correlate1d(out, k, axis=1, mode="reflect")
    out = correlate1d(out, k, axis=2, mode="reflect")
    return out.astype(np.float32)


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping factor x factor box average, reflect-padding the
    extents up to the next multiple first when needed."""
    image = _check_image(image, "downsample")
    if factor not in (4, 8, 16):
        raise ImageError(f"downsample factor must be 4, 8 or 16, got {factor}")
    c, h, w = image.shape
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="symmetric")
        h, w = h + pad_h, w + pad_w
    blocks = image.reshape(c, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(2, 4), dtype=np.float64).astype(np.float32)
