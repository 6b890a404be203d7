"""Radial lens distortion model and per-frame undistortion.

Wide-angle endoscope-style lenses bend straight lines noticeably; frames
are corrected with a two-term polynomial radial model before registration.
Coefficients come from the pipeline config (estimation from calibration
targets is out of scope).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import Raster, bilinear_many


@dataclass(frozen=True)
class DistortionModel:
    """Pinhole intrinsics + two radial coefficients.

    Forward model, with normalized coordinates u=(x-cx)/fx, v=(y-cy)/fy and
    r^2 = u^2 + v^2:

        scale s = 1 + k1*r^2 + k2*r^4
        distorted = (cx + fx*u*s, cy + fy*v*s)
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


def distort_points(model: DistortionModel, pts: np.ndarray) -> np.ndarray:
    """Forward radial distortion of an (n, 2) array of ideal pixel coords."""
    pts = np.asarray(pts, dtype=np.float64)
    u = (pts[..., 0] - model.cx) / model.fx
    v = (pts[..., 1] - model.cy) / model.fy
    r2 = u * u + v * v
    s = 1.0 + model.k1 * r2 + model.k2 * r2 * r2
    out = np.empty_like(pts)
    out[..., 0] = model.cx + model.fx * u * s
    out[..., 1] = model.cy + model.fy * v * s
    return out


def distort_point(model: DistortionModel, p) -> tuple[float, float]:
    """Map one ideal pixel coordinate through the forward radial model."""
    out = distort_points(model, np.array([[p[0], p[1]]], dtype=np.float64))[0]
    return float(out[0]), float(out[1])


def undistort_points(model: DistortionModel, pts: np.ndarray,
                     iters: int = 25) -> np.ndarray:
    """Invert the radial model (distorted -> ideal pixel coordinates).

    Solves r_i * (1 + k1*r_i^2 + k2*r_i^4) = r_d per point with Newton
    iterations on the scalar radius; for the moderate |k1| <= 0.3 regime the
    map is monotone and this converges in a handful of steps.
    """
    pts = np.asarray(pts, dtype=np.float64)
    u = (pts[..., 0] - model.cx) / model.fx
    v = (pts[..., 1] - model.cy) / model.fy
    rd = np.hypot(u, v)
    ri = rd.copy()
    for _ in range(iters):
        r2 = ri * ri
        f = ri * (1.0 + model.k1 * r2 + model.k2 * r2 * r2) - rd
        df = 1.0 + 3.0 * model.k1 * r2 + 5.0 * model.k2 * r2 * r2
        step = np.where(np.abs(df) > 1e-12, f / np.where(df == 0, 1.0, df), 0.0)
        ri = ri - step
    ratio = np.where(rd > 1e-12, ri / np.where(rd == 0, 1.0, rd), 1.0)
    out = np.empty_like(pts)
    out[..., 0] = model.cx + model.fx * u * ratio
    out[..., 1] = model.cy + model.fy * v * ratio
    return out


def undistort_valid_mask(model: DistortionModel, width: int,
                         height: int) -> np.ndarray:
    """Which ideal-grid pixels are reachable from inside the captured frame."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = distort_points(model, grid)
    ok = ((src[:, 0] >= 0) & (src[:, 0] <= width - 1)
          & (src[:, 1] >= 0) & (src[:, 1] <= height - 1))
    return ok.reshape(height, width)


def undistort_image(img: Raster, model: DistortionModel) -> Raster:
    """Resample a frame onto the ideal (distortion-free) pixel grid.

    Each output pixel q looks up the input at distort_point(q) with bilinear
    interpolation; ideal pixels whose distorted position falls outside the
    frame come out black.
    """
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = distort_points(model, grid)
    out = np.zeros((h, w, img.channels))
    for c in range(img.channels):
        vals, _ = bilinear_many(img.data[:, :, c], src[:, 0], src[:, 1])
        out[:, :, c] = vals.reshape(h, w)
    return Raster(out)
