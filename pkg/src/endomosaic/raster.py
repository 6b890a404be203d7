"""Core image container: bilinear sampling, grayscale, Gaussian filtering, PNG/PNM I/O.

Pixels are stored as float64 even though the nominal range is [0, 255]:
all downstream math (seam optimization in particular) needs sub-intensity
precision, so values are only quantized to 8 bits when written to disk.
Border handling is clamp-to-edge everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-601 luma


class DecodeError(Exception):
    """Image file missing, unreadable, or with an unsupported layout."""


@dataclass(frozen=True)
class Raster:
    """Row-major image, 1 (gray) or 3 (RGB) channels, float64 storage.

    ``data`` has shape (height, width, channels). Instances are immutable:
    the backing array is marked read-only so rasters can be shared freely
    across threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"raster must be (h, w, 1|3), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self) -> np.ndarray:
        """The (h, w) view of a single-channel raster."""
        if self.channels != 1:
            raise ValueError("plane() requires a 1-channel raster")
        return self.data[:, :, 0]


def bilinear_many(plane: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Vectorized bilinear sampling of a 2-D array at real-valued coordinates.

    Returns (values, inbounds). Coordinates outside [0, w-1] x [0, h-1]
    are out of bounds; their returned value is 0 and the mask is False.
    Sampling exactly on the far edge is valid (the interpolation cell is
    clamped so the stored border pixel is reproduced).
    """
    h, w = plane.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inb = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xs = np.clip(x, 0.0, w - 1.0)
    ys = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    v00 = plane[y0, x0]
    v01 = plane[y0, x1]
    v10 = plane[y1, x0]
    v11 = plane[y1, x1]
    vals = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)
    return np.where(inb, vals, 0.0), inb


def bilinear_with_grad(plane: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear sample plus the analytic gradient of the interpolant.

    The gradient is exact for the piecewise-bilinear surface (within a cell,
    d/dx is linear in y and constant in x), which is what chain-rule
    Jacobians of sampled intensities need.

    Returns (values, gx, gy, inbounds).
    """
    h, w = plane.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inb = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xs = np.clip(x, 0.0, w - 1.0)
    ys = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    v00 = plane[y0, x0]
    v01 = plane[y0, x1]
    v10 = plane[y1, x0]
    v11 = plane[y1, x1]
    vals = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)
    gx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    gy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    zero = np.zeros_like(vals)
    return (np.where(inb, vals, 0.0), np.where(inb, gx, zero),
            np.where(inb, gy, zero), inb)


def sample_bilinear(img: Raster, p) -> np.ndarray | None:
    """Bilinear interpolation of the 4 neighboring pixels at point p=(x, y).

    Returns a (channels,) array, or None when p falls outside
    [0, w-1] x [0, h-1] (out of bounds is a value, not an error).
    """
    x, y = float(p[0]), float(p[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    if x < 0.0 or y < 0.0 or x > img.width - 1.0 or y > img.height - 1.0:
        return None
    out = np.empty(img.channels)
    for c in range(img.channels):
        vals, _ = bilinear_many(img.data[:, :, c], np.array([x]), np.array([y]))
        out[c] = vals[0]
    return out


def to_gray(img: Raster) -> Raster:
    """Collapse RGB to gray with fixed ITU-601 weights, rounded to nearest.

    1-channel input is returned unchanged.
    """
    if img.channels == 1:
        return img
    r, g, b = (img.data[:, :, i] for i in range(3))
    gray = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
    return Raster(np.floor(gray + 0.5))


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Discrete normalized Gaussian, radius ceil(3*sigma), sums to 1."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array([1.0])
    r = int(np.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_plane(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D array with clamp-to-edge borders."""
    if sigma == 0:
        return plane.astype(np.float64, copy=True)
    k = gaussian_kernel_1d(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(plane.astype(np.float64), ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(plane, dtype=np.float64)
    w = plane.shape[1]
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + w]
    padded = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(plane, dtype=np.float64)
    h = plane.shape[0]
    for i, kv in enumerate(k):
        out += kv * padded[i:i + h, :]
    return out


def gaussian_smooth(img: Raster, sigma: float) -> Raster:
    """Gaussian blur with a normalized separable kernel. sigma=0 is identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    out = np.stack([smooth_plane(img.data[:, :, c], sigma)
                    for c in range(img.channels)], axis=2)
    return Raster(out)


def quantize(img: Raster) -> np.ndarray:
    """Round to the nearest 8-bit level, clipped to [0, 255]."""
    return np.clip(np.floor(img.data + 0.5), 0, 255).astype(np.uint8)


def load_image(path) -> Raster:
    """Read a PNG or binary PPM/PGM file.

    Raises DecodeError for missing/undecodable files and for channel
    layouts other than 8-bit gray or RGB.
    """
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise DecodeError(f"unsupported channel layout {mode!r} in {path}")
            arr = np.asarray(im, dtype=np.uint8)
    except DecodeError:
        raise
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return Raster(arr.astype(np.float64))


def save_image(img: Raster, path) -> None:
    """Write as PNG (.png) or binary PPM/PGM (.ppm/.pgm); lossless round trip."""
    arr = quantize(img)
    if img.channels == 1:
        im = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    im.save(path)
