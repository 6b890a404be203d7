"""Quantitative evaluation: seam texture error, FB error curves, detection rates.

The texture metric scores a stitched result by how much its contributors
disagree where they meet: at every seam pixel the inter-contributor intensity
difference and gradient-magnitude difference are averaged (each normalized by
255 and equally weighted), giving a [0, 1] score where 0 is a perfectly
consistent mosaic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fusion import Canvas, NoSeams, _as_delta_and_base, _homography_inverse_and_jac
from .raster import bilinear_with_grad
from .register import Homography, MatchSet
from .unfold import Atlas, DoubleCube, atlas_to_surface, project_points, surface_world
from .detect import iou


# ---------------------------------------------------------------------------
# texture metric error


def _pairwise_terms(vals: np.ndarray, gmags: np.ndarray, ok: np.ndarray):
    """Mean seam discrepancy per pixel over contributor pairs.

    vals/gmags are (n_frames, n_pixels); ok marks which frame actually covers
    which pixel. Pixels with < 2 contributors return NaN and are skipped.
    """
    n_pix = vals.shape[1]
    out = np.full(n_pix, np.nan)
    for p in range(n_pix):
        idx = np.nonzero(ok[:, p])[0]
        if len(idx) < 2:
            continue
        terms = []
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                di = abs(vals[i, p] - vals[j, p]) / 255.0
                dg = abs(gmags[i, p] - gmags[j, p]) / 255.0
                terms.append(0.5 * di + 0.5 * dg)
        out[p] = np.mean(terms)
    return out


def texture_metric_error(canvas: Canvas, frames: list, transforms: list,
                         base_warps: list | None = None) -> float:
    """Seam-consistency score of a mosaic, in [0, 1].

    Every contributor of a seam pixel is sampled in its own frame (value and
    interpolant gradient magnitude); the per-pixel pairwise discrepancies are
    averaged over all seam pixels.
    """
    ys, xs = np.nonzero(canvas.seam_mask)
    if len(xs) == 0:
        raise NoSeams("mosaic has no seam pixels")
    gx = xs + canvas.origin[0]
    gy = ys + canvas.origin[1]
    gpts = np.stack([gx, gy], axis=1).astype(np.float64)
    deltas, bases = _as_delta_and_base(transforms, base_warps, len(frames))

    n = len(frames)
    vals = np.zeros((n, len(xs)))
    gmag = np.zeros((n, len(xs)))
    ok = np.zeros((n, len(xs)), dtype=bool)
    for k, (img, d, b) in enumerate(zip(frames, deltas, bases)):
        covered = (canvas.contributors[ys, xs] >> np.uint64(k) & np.uint64(1)) == 1
        u = d.inverse_apply(gpts)
        inv, _ = _homography_inverse_and_jac(b)
        fpts = inv(u)
        v, gxv, gyv, inb = bilinear_with_grad(img.plane(), fpts[:, 0], fpts[:, 1])
        vals[k] = v
        gmag[k] = np.hypot(gxv, gyv)
        ok[k] = covered & inb
    per_pixel = _pairwise_terms(vals, gmag, ok)
    per_pixel = per_pixel[~np.isnan(per_pixel)]
    if not len(per_pixel):
        raise NoSeams("no seam pixel has two live contributors")
    return float(per_pixel.mean())


def atlas_texture_metric_error(atlas: Atlas, frames: list, poses: list,
                               intrinsics, geom: DoubleCube) -> float:
    """Texture metric for a baked atlas, using its per-frame coverage mask."""
    if atlas.contributors is None:
        raise ValueError("atlas was baked without coverage information")
    bits = atlas.contributors
    h, w = bits.shape
    counts = np.zeros(bits.shape, dtype=np.int64)
    tmp = bits.copy()
    while tmp.any():
        counts += (tmp & np.uint64(1)).astype(np.int64)
        tmp >>= np.uint64(1)
    diff = np.zeros(bits.shape, dtype=bool)
    padded = np.zeros((h + 2, w + 2), dtype=np.uint64)
    padded[1:-1, 1:-1] = bits
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        diff |= padded[1 + dy:h + 1 + dy, 1 + dx:w + 1 + dx] != bits
    seam = (counts >= 2) & diff
    ys, xs = np.nonzero(seam)
    if not len(xs):
        raise NoSeams("atlas has no seam pixels")

    world = []
    keep = []
    for i, (x, y) in enumerate(zip(xs, ys)):
        sp = atlas_to_surface(geom, atlas.layout, (x + 0.5, y + 0.5))
        if sp is None:
            continue
        world.append(surface_world(geom, sp))
        keep.append(i)
    world = np.array(world).reshape(-1, 3)
    xs, ys = xs[keep], ys[keep]

    n = len(frames)
    vals = np.zeros((n, len(xs)))
    gmag = np.zeros((n, len(xs)))
    ok = np.zeros((n, len(xs)), dtype=bool)
    for k, (pose, img) in enumerate(zip(poses, frames)):
        covered = (bits[ys, xs] >> np.uint64(k) & np.uint64(1)) == 1
        pix, in_front = project_points(pose, intrinsics, world)
        v, gxv, gyv, inb = bilinear_with_grad(img.plane(), pix[:, 0], pix[:, 1])
        vals[k] = v
        gmag[k] = np.hypot(gxv, gyv)
        ok[k] = covered & inb & in_front
    per_pixel = _pairwise_terms(vals, gmag, ok)
    per_pixel = per_pixel[~np.isnan(per_pixel)]
    if not len(per_pixel):
        raise NoSeams("no atlas seam pixel has two live contributors")
    return float(per_pixel.mean())


# ---------------------------------------------------------------------------
# forward-backward error


def fb_error(src, h_forward: Homography, h_backward: Homography) -> float:
    """Distance between a point and its forward-then-backward image, in px."""
    p = np.asarray([src[0], src[1]], dtype=np.float64)
    q = h_backward.apply(h_forward.apply(p[None, :]))[0]
    return float(np.linalg.norm(q - p))


def fb_errors(src_pts: np.ndarray, h_forward: Homography,
              h_backward: Homography) -> np.ndarray:
    pts = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    q = h_backward.apply(h_forward.apply(pts))
    return np.linalg.norm(q - pts, axis=1)


def fb_curve(matches, h_forward: Homography, h_backward: Homography,
             thresholds) -> np.ndarray:
    """Count of matches with FB error strictly below each threshold."""
    src = matches.src[matches.valid] if isinstance(matches, MatchSet) \
        else np.asarray(matches, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0:
        return np.zeros(len(list(thresholds)), dtype=np.int64)
    errs = fb_errors(src, h_forward, h_backward)
    return np.array([int((errs < t).sum()) for t in thresholds], dtype=np.int64)


# ---------------------------------------------------------------------------
# detection evaluation


@dataclass
class EvalReport:
    """Named metric values plus optional per-region breakdown."""

    metrics: dict = field(default_factory=dict)
    per_region: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics,
                           "per_region": self.per_region},
                          sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        lines = []
        if self.per_region:
            header = f"{'region':<14}{'gts':>6}{'dets':>6}{'matched':>9}" \
                     f"{'recall':>9}{'accuracy':>10}"
            lines.append(header)
            for region, m in sorted(self.per_region.items()):
                lines.append(f"{region:<14}{m['gts']:>6.0f}{m['detections']:>6.0f}"
                             f"{m['matched']:>9.0f}{100 * m['recall']:>8.1f}%"
                             f"{100 * m['accuracy']:>9.1f}%")
        for name, value in sorted(self.metrics.items()):
            lines.append(f"{name:<28}{value:.6g}")
        return "\n".join(lines) + "\n"


def _match_one_image(dets: list, gts: list, iou_thresh: float):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    matched = 0
    for i in order:
        best_iou = iou_thresh
        best_g = -1
        for g in range(len(gts)):
            if taken[g]:
                continue
            v = iou(dets[i].box, gts[g])
            if v > best_iou:
                best_iou = v
                best_g = g
        if best_g >= 0:
            taken[best_g] = True
            matched += 1
    return matched


def detection_report(dets_per_image: list, gts_per_image: list,
                     regions: list | None = None,
                     iou_thresh: float = 0.5) -> EvalReport:
    """Greedy one-to-one matching of detections to ground truths.

    Detections are consumed in descending confidence (ties by index) and each
    claims the unmatched ground truth of highest IOU above iou_thresh.
    recall = matched ground truths / all ground truths; accuracy = matched
    detections / all detections.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    if regions is None:
        regions = ["all"] * len(dets_per_image)
    agg: dict = {}
    for dets, gts, region in zip(dets_per_image, gts_per_image, regions):
        matched = _match_one_image(dets, gts, iou_thresh)
        d = agg.setdefault(region, {"gts": 0, "detections": 0, "matched": 0})
        d["gts"] += len(gts)
        d["detections"] += len(dets)
        d["matched"] += matched

    def rates(d):
        recall = d["matched"] / d["gts"] if d["gts"] else 1.0
        if d["detections"]:
            accuracy = d["matched"] / d["detections"]
        else:
            accuracy = 1.0 if d["gts"] == 0 else 0.0
        return recall, accuracy

    report = EvalReport()
    total = {"gts": 0, "detections": 0, "matched": 0}
    for region, d in agg.items():
        recall, accuracy = rates(d)
        report.per_region[region] = {**d, "recall": recall, "accuracy": accuracy}
        for key in total:
            total[key] += d[key]
    recall, accuracy = rates(total)
    report.metrics["recall"] = recall
    report.metrics["accuracy"] = accuracy
    report.metrics["gts"] = float(total["gts"])
    report.metrics["detections"] = float(total["detections"])
    report.metrics["matched"] = float(total["matched"])
    return report
