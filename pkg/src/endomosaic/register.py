"""Feature detection, matching, and homographic patch refinement.

Adjacent frames are registered in three steps: Harris keypoints with
normalized-patch descriptors, mutual-nearest-neighbor matching with a ratio
test, and a recursive patch verification pass that subdivides image blocks
until each block's matches agree with a single local homography (checked by
transfer error plus a histogram-divergence test of the block against its
warped counterpart). Blocks that never satisfy the hypothesis have their
matches invalidated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import Raster, bilinear_many, smooth_plane


class DegenerateConfiguration(Exception):
    """Too few or collinear correspondences: no homography is determined."""


# ---------------------------------------------------------------------------
# basic types


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, stored as the normalized representative h[2][2]=1.

    Only the projective equivalence class is observable, so the overall
    scale factor is never stored.
    """

    h: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.h, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if not np.all(np.isfinite(m)):
            raise DegenerateConfiguration("non-finite homography")
        if abs(m[2, 2]) < 1e-14:
            raise DegenerateConfiguration("homography not normalizable (h22 ~ 0)")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateConfiguration("singular homography")
        m.setflags(write=False)
        object.__setattr__(self, "h", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map an (n, 2) array of points; points on the line at infinity -> inf."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ones = np.ones((pts.shape[0], 1))
        q = np.hstack([pts, ones]) @ self.h.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self.compose(other)).apply(p) == self(other(p))."""
        return Homography(self.h @ other.h)


@dataclass
class Keypoint:
    x: float
    y: float
    response: float
    descriptor: np.ndarray  # mean-subtracted, unit-L2 gray patch


@dataclass
class MatchSet:
    """Point correspondences between two images with validity flags."""

    src: np.ndarray                     # (n, 2)
    dst: np.ndarray                     # (n, 2)
    patch_id: np.ndarray = None         # (n,) int, -1 = unassigned
    valid: np.ndarray = None            # (n,) bool

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        n = len(self.src)
        if len(self.dst) != n:
            raise ValueError("src/dst length mismatch")
        if self.patch_id is None:
            self.patch_id = np.full(n, -1, dtype=np.int64)
        else:
            self.patch_id = np.asarray(self.patch_id, dtype=np.int64)
        if self.valid is None:
            self.valid = np.ones(n, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self) -> int:
        return len(self.src)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_pairs(self):
        return self.src[self.valid], self.dst[self.valid]

    def copy(self) -> "MatchSet":
        return MatchSet(self.src.copy(), self.dst.copy(),
                        self.patch_id.copy(), self.valid.copy())


@dataclass
class PatchNode:
    """Node of the patch-subdivision tree (diagnostic output)."""

    rect: tuple  # (x0, y0, w, h) in source-image pixels
    h: Homography | None = None
    children: list = field(default_factory=list)
    accepted: bool = False


@dataclass(frozen=True)
class RefineConfig:
    tile: int = 64              # root block edge
    min_tile: int = 16          # stop subdividing below this edge
    median_tol: float = 1.5     # px, median symmetric transfer error
    kl_tau: float = 0.25        # nats, block-vs-warped-block divergence
    match_tol: float = 3.0      # px, per-match cutoff inside accepted blocks
    ransac_iters: int = 500
    ransac_thresh: float = 2.0  # px
    seed: int = 0
    min_overlap: float = 0.25   # fraction of block pixels the warp must cover


# ---------------------------------------------------------------------------
# keypoints and matching

DESC_RADIUS = 5  # 11x11 descriptor patch


def _max_filter(a: np.ndarray, radius: int) -> np.ndarray:
    """Square max filter via separable running max (clamped borders)."""
    out = a
    for axis in (0, 1):
        acc = out.copy()
        for d in range(1, radius + 1):
            shifted = np.roll(out, d, axis=axis)
            if axis == 0:
                shifted[:d, :] = -np.inf
            else:
                shifted[:, :d] = -np.inf
            acc = np.maximum(acc, shifted)
            shifted = np.roll(out, -d, axis=axis)
            if axis == 0:
                shifted[-d:, :] = -np.inf
            else:
                shifted[:, -d:] = -np.inf
            acc = np.maximum(acc, shifted)
        out = acc
    return out


def detect_keypoints(img: Raster, max_n: int, nms_radius: int = 5,
                     deriv_sigma: float = 1.0, window_sigma: float = 1.0,
                     k: float = 0.04, floor: float = 1e-10,
                     mask: np.ndarray | None = None) -> list[Keypoint]:
    """Harris corners with non-maximum suppression and patch descriptors.

    Top max_n responses are kept (fewer if the image has little structure);
    a constant image yields no keypoints. Descriptors are 11x11 gray patches,
    mean-subtracted and L2-normalized; flat patches are discarded. An optional
    validity mask suppresses responses near invalid pixels (e.g. the black
    fill outside an undistorted frame, whose hard boundary would otherwise
    out-rank every genuine corner). Larger deriv_sigma trades corner
    localization for robustness to sensor noise.
    """
    if img.channels != 1:
        raise ValueError("detect_keypoints expects a grayscale raster")
    plane = smooth_plane(img.plane(), deriv_sigma) / 255.0
    gy, gx = np.gradient(plane)
    sxx = smooth_plane(gx * gx, window_sigma)
    syy = smooth_plane(gy * gy, window_sigma)
    sxy = smooth_plane(gx * gy, window_sigma)
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - k * tr * tr

    local_max = resp >= _max_filter(resp, nms_radius)
    cand = local_max & (resp > floor)
    if mask is not None:
        # dilate the invalid region so boundary-induced corners drop out too
        bad = _max_filter(np.where(mask, 0.0, 1.0), DESC_RADIUS + 1) > 0
        cand &= ~bad

    m = DESC_RADIUS
    cand[:m, :] = False
    cand[-m:, :] = False
    cand[:, :m] = False
    cand[:, -m:] = False

    ys, xs = np.nonzero(cand)
    if len(xs) == 0:
        return []
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    kps: list[Keypoint] = []
    gray = plane * 255.0  # descriptors come from the denoised plane
    for idx in order:
        if len(kps) >= max_n:
            break
        x, y = int(xs[idx]), int(ys[idx])
        patch = gray[y - m:y + m + 1, x - m:x + m + 1]
        d = patch.ravel() - patch.mean()
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue
        kps.append(Keypoint(float(x), float(y), float(resp[y, x]), d / norm))
    return kps


def match_descriptors(a: list[Keypoint], b: list[Keypoint],
                      ratio: float = 0.8) -> MatchSet:
    """Mutual-nearest-neighbor matching with a best/second-best ratio test.

    Similarity is the descriptor dot product (normalized correlation); the
    ratio test is applied on the equivalent descriptor distance
    sqrt(2 - 2*sim) so a perfect match always passes.
    """
    if not a or not b:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)))
    da = np.stack([kp.descriptor for kp in a])
    db = np.stack([kp.descriptor for kp in b])
    sim = da @ db.T
    dist = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * sim))

    best_ab = np.argmin(dist, axis=1)
    best_ba = np.argmin(dist, axis=0)
    src, dst = [], []
    for i, j in enumerate(best_ab):
        if best_ba[j] != i:
            continue
        d1 = dist[i, j]
        if dist.shape[1] >= 2:
            row = dist[i].copy()
            row[j] = np.inf
            d2 = row.min()
            if not d1 < ratio * d2:
                continue
        src.append([a[i].x, a[i].y])
        dst.append([b[j].x, b[j].y])
    if not src:
        return MatchSet(np.zeros((0, 2)), np.zeros((0, 2)))
    return MatchSet(np.array(src), np.array(dst))


# ---------------------------------------------------------------------------
# homography estimation


def _normalize_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    t = np.array([[s, 0, -s * centroid[0]],
                  [0, s, -s * centroid[1]],
                  [0, 0, 1.0]])
    return (pts - centroid) * s, t


def _collinear(pts: np.ndarray, tol: float = 1e-7) -> bool:
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[1] <= tol * max(sv[0], 1.0)


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Plain least-squares homography via the normalized direct linear transform.

    Sensitive to outliers by design; the robust estimator wraps this.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need >= 4 pairs, got {n}")
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfiguration("correspondences are collinear")
    ns, ts = _normalize_points(src)
    nd, td = _normalize_points(dst)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = ns
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -ns * nd[:, 0:1]
    a[0::2, 8] = -nd[:, 0]
    a[1::2, 3:5] = ns
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -ns * nd[:, 1:2]
    a[1::2, 8] = -nd[:, 1]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    return Homography(m)


def symmetric_transfer_error(h: Homography, src: np.ndarray,
                             dst: np.ndarray) -> np.ndarray:
    """Mean of forward and backward point-transfer distances, in pixels."""
    fwd = np.linalg.norm(h.apply(src) - dst, axis=1)
    bwd = np.linalg.norm(h.inverse().apply(dst) - src, axis=1)
    return 0.5 * (fwd + bwd)


def fit_homography(matches: MatchSet, thresh: float = 2.0, iters: int = 500,
                   seed: int = 0) -> Homography:
    """Robust homography: RANSAC over 4-point samples, then inlier refit.

    Inliers are pairs with symmetric transfer error below thresh; the seed is
    fixed so results are reproducible.
    """
    src, dst = matches.valid_pairs()
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"need >= 4 valid pairs, got {n}")
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfiguration("correspondences are collinear")
    if n == 4:
        return fit_homography_dlt(src, dst)

    rng = np.random.default_rng(seed)
    best_inliers = None
    best_count = -1
    best_err = np.inf
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        s4, d4 = src[idx], dst[idx]
        try:
            cand = fit_homography_dlt(s4, d4)
            err = symmetric_transfer_error(cand, src, dst)
        except DegenerateConfiguration:
            continue  # singular/ill-conditioned sample
        inl = err < thresh
        count = int(inl.sum())
        med = float(np.median(err))
        if count > best_count or (count == best_count and med < best_err):
            best_count = count
            best_err = med
            best_inliers = inl
    if best_inliers is None or best_inliers.sum() < 4:
        raise DegenerateConfiguration("no homography-consistent sample found")
    return fit_homography_dlt(src[best_inliers], dst[best_inliers])


# ---------------------------------------------------------------------------
# histogram divergence

HIST_BINS = 32
HIST_EPS = 1e-6


def _gray_hist(values: np.ndarray) -> np.ndarray:
    idx = np.clip((np.asarray(values, dtype=np.float64)
                   * HIST_BINS / 256.0).astype(np.int64), 0, HIST_BINS - 1)
    h = np.bincount(idx.ravel(), minlength=HIST_BINS).astype(np.float64)
    h /= max(h.sum(), 1.0)
    h += HIST_EPS
    return h / h.sum()


def kl_patch_similarity(a, b) -> float:
    """Symmetric Kullback-Leibler divergence of two gray patches, in nats.

    Both patches are reduced to 32-bin intensity histograms, smoothed
    additively before normalization so empty bins never blow up the logs.
    Identical patches give 0.
    """
    pa = a.plane() if isinstance(a, Raster) else np.asarray(a)
    pb = b.plane() if isinstance(b, Raster) else np.asarray(b)
    if pa.size != pb.size:
        raise ValueError("patches must have equal size")
    p = _gray_hist(pa)
    q = _gray_hist(pb)
    return float(0.5 * (np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p))))


# ---------------------------------------------------------------------------
# homographic patch refinement


def _matches_in_rect(ms: MatchSet, rect) -> np.ndarray:
    x0, y0, w, h = rect
    return (ms.valid
            & (ms.src[:, 0] >= x0) & (ms.src[:, 0] < x0 + w)
            & (ms.src[:, 1] >= y0) & (ms.src[:, 1] < y0 + h))


def _warped_block_divergence(plane_a: np.ndarray, plane_b: np.ndarray,
                             rect, h: Homography, cfg: RefineConfig) -> float:
    """Divergence of a source block against its homography-warped view in b.

    Returns +inf when too little of the warped block lands inside image b to
    judge similarity.
    """
    x0, y0, w, hh = rect
    ys, xs = np.mgrid[y0:y0 + hh, x0:x0 + w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    mapped = h.apply(pts)
    vals, inb = bilinear_many(plane_b, mapped[:, 0], mapped[:, 1])
    if inb.sum() < cfg.min_overlap * len(pts):
        return np.inf
    src_vals = plane_a[ys.astype(int).ravel()[inb], xs.astype(int).ravel()[inb]]
    p = _gray_hist(src_vals)
    q = _gray_hist(vals[inb])
    return float(0.5 * (np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p))))


def refine_matches(img_a: Raster, img_b: Raster, init: MatchSet,
                cfg: RefineConfig | None = None):
    """Verify matches block-by-block against local homographies.

    The source image is tiled into cfg.tile-sized root blocks around the
    initial matches. Each block fits a homography from its contained matches
    (blocks too sparse to fit inherit their parent's, the root inheriting a
    global fit). A block is accepted when the median symmetric transfer error
    of its matches is below cfg.median_tol and the block's histogram
    divergence against its warped counterpart is below cfg.kl_tau; otherwise
    it splits into quadrants, down to cfg.min_tile. Blocks still failing at
    minimum size invalidate all their matches; accepted blocks invalidate
    only matches whose transfer error exceeds cfg.match_tol.

    Returns (refined MatchSet, list of root PatchNodes).
    """
    if len(init) == 0:
        raise ValueError("initial match set is empty")
    cfg = cfg or RefineConfig()
    out = init.copy()
    plane_a = img_a.plane()
    plane_b = img_b.plane()

    try:
        global_h = fit_homography(out, cfg.ransac_thresh, cfg.ransac_iters, cfg.seed)
    except DegenerateConfiguration:
        out.valid[:] = False
        return out, []

    def fit_local(mask: np.ndarray) -> Homography | None:
        if mask.sum() < 4:
            return None
        try:
            return fit_homography(MatchSet(out.src[mask], out.dst[mask]),
                                  cfg.ransac_thresh, cfg.ransac_iters, cfg.seed)
        except DegenerateConfiguration:
            return None

    next_patch_id = [0]

    def refine(node: PatchNode, inherited: Homography) -> None:
        mask = _matches_in_rect(out, node.rect)
        n_in = int(mask.sum())
        local = fit_local(mask)
        use_h = local if local is not None else inherited
        node.h = use_h
        if n_in == 0:
            node.accepted = True  # nothing at stake in an empty block
            return
        ste = symmetric_transfer_error(use_h, out.src[mask], out.dst[mask])
        hypothesis = (float(np.median(ste)) < cfg.median_tol
                      and _warped_block_divergence(plane_a, plane_b, node.rect,
                                                   use_h, cfg) < cfg.kl_tau)
        if hypothesis:
            node.accepted = True
            pid = next_patch_id[0]
            next_patch_id[0] += 1
            idx = np.nonzero(mask)[0]
            out.patch_id[idx] = pid
            out.valid[idx[ste >= cfg.match_tol]] = False
            return
        x0, y0, w, h = node.rect
        if min(w, h) // 2 >= cfg.min_tile:
            w0, h0 = w // 2, h // 2
            rects = [(x0, y0, w0, h0), (x0 + w0, y0, w - w0, h0),
                     (x0, y0 + h0, w0, h - h0), (x0 + w0, y0 + h0, w - w0, h - h0)]
            node.children = [PatchNode(r) for r in rects]
            for child in node.children:
                refine(child, use_h)
        else:
            node.accepted = False
            out.valid[mask] = False

    roots: list[PatchNode] = []
    t = cfg.tile
    for ty in range(0, img_a.height, t):
        for tx in range(0, img_a.width, t):
            rect = (tx, ty, min(t, img_a.width - tx), min(t, img_a.height - ty))
            if _matches_in_rect(out, rect).any():
                roots.append(PatchNode(rect))
    for root in roots:
        refine(root, global_h)
    return out, roots


def dump_matches(ms: MatchSet) -> str:
    """Line-oriented diagnostic record: src_x src_y dst_x dst_y valid."""
    lines = []
    for i in range(len(ms)):
        lines.append(f"{ms.src[i, 0]:.6f} {ms.src[i, 1]:.6f} "
                     f"{ms.dst[i, 0]:.6f} {ms.dst[i, 1]:.6f} {int(ms.valid[i])}")
    return "\n".join(lines) + ("\n" if lines else "")


def dump_patch_tree(roots: list) -> str:
    """Line-oriented block tree: depth x0 y0 w h accepted."""
    lines = []

    def walk(node, depth):
        x0, y0, w, h = node.rect
        lines.append(f"{depth} {x0} {y0} {w} {h} {int(node.accepted)}")
        for child in node.children:
            walk(child, depth + 1)

    for root in roots:
        walk(root, 0)
    return "\n".join(lines) + ("\n" if lines else "")
