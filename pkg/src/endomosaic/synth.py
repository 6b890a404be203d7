"""Synthetic cavity scenes with exact ground truth.

Everything the pipeline consumes can be generated here deterministically:
a procedurally textured two-cube cavity, raised-brightness elliptical
lesions, wide-angle camera renders along a pose path (with sensor noise and
saturated reflective spots), ideal unfolded panoramas, per-frame lesion
boxes, and the true plane-induced homographies between views of a face.
The texture lattice is integer-hashed, so renders of the same spec + seed
are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calib import DistortionModel, undistort_points
from .detect import Box, write_annotations
from .raster import Raster, bilinear_many, gaussian_smooth, save_image
from .register import Homography
from .unfold import (CUBES, CameraPose, DoubleCube, SurfacePoint,
                     default_layout, face_frame, ray_exit_batch, FACES)

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + _M1).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= _M2
    x ^= x >> np.uint64(27)
    x *= _M3
    x ^= x >> np.uint64(31)
    return x


def _lattice_hash(ix: np.ndarray, iy: np.ndarray, key: int) -> np.ndarray:
    """Hashed lattice value in [0, 1); wraps negative indices two's-complement."""
    a = ix.astype(np.int64).astype(np.uint64)
    b = iy.astype(np.int64).astype(np.uint64)
    h = _splitmix(a ^ _splitmix(b ^ np.uint64(key & 0xFFFFFFFFFFFFFFFF)))
    return h.astype(np.float64) / float(2 ** 64)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(x: np.ndarray, y: np.ndarray, key: int) -> np.ndarray:
    """Bilinear-blended hashed value noise at real coordinates."""
    ix = np.floor(x)
    iy = np.floor(y)
    fx = _smoothstep(x - ix)
    fy = _smoothstep(y - iy)
    v00 = _lattice_hash(ix, iy, key)
    v10 = _lattice_hash(ix + 1, iy, key)
    v01 = _lattice_hash(ix, iy + 1, key)
    v11 = _lattice_hash(ix + 1, iy + 1, key)
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


def fractal_noise(x: np.ndarray, y: np.ndarray, key: int, octaves: int = 3,
                  base_freq: float = 8.0) -> np.ndarray:
    """Octave sum of value noise, normalized back into [0, 1)."""
    total = np.zeros_like(np.asarray(x, dtype=np.float64))
    amp = 1.0
    norm = 0.0
    freq = base_freq
    for o in range(octaves):
        total += amp * value_noise(x * freq, y * freq, key * 1013 + o)
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


def noise_texture(width: int, height: int, seed: int = 0, octaves: int = 4,
                  lo: float = 40.0, hi: float = 220.0,
                  gain: float = 12.0) -> Raster:
    """Flat test texture rich in corners at several scales.

    gain steepens a logistic contrast curve around the median so region
    boundaries stay sharp and high-contrast (gain 0 keeps the raw noise).
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    n = fractal_noise(xs / max(width, height), ys / max(width, height),
                      seed, octaves, base_freq=12.0)
    if gain > 0:
        n = 1.0 / (1.0 + np.exp(-gain * (n - 0.5)))
    return Raster(lo + (hi - lo) * n)


# ---------------------------------------------------------------------------
# scene specification


@dataclass(frozen=True)
class Polyp:
    """Raised-brightness soft ellipse on one cavity face; radii in world units."""

    center: SurfacePoint
    rx: float
    ry: float
    brightness: float = 70.0


@dataclass
class SceneSpec:
    geometry: DoubleCube
    camera: DistortionModel
    frame_size: tuple                # (width, height)
    poses: list
    polyps: list = field(default_factory=list)
    texture_seed: int = 0
    texture_octaves: int = 3
    texture_range: tuple = (70.0, 190.0)
    texture_gain: float = 8.0        # contrast steepening of the mottling
    noise_sigma: float = 0.0         # gaussian noise std as a fraction of 255
    spot_count: int = 0
    spot_size: tuple = (2.0, 6.0)    # saturated disc radius range, px
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        for p in self.polyps:
            if p.center.face == self.geometry.junction_face(p.center.cube):
                raise ValueError("polyps must lie on non-excluded faces")


def _surface_texture(spec: SceneSpec, cube_idx: np.ndarray,
                     face_idx: np.ndarray, u: np.ndarray,
                     v: np.ndarray) -> np.ndarray:
    lo, hi = spec.texture_range
    out = np.zeros_like(u)
    for ci, cube in enumerate(CUBES):
        for fi, face in enumerate(FACES):
            mask = (cube_idx == ci) & (face_idx == fi)
            if not mask.any():
                continue
            key = spec.texture_seed * 97 + ci * 13 + fi
            n = fractal_noise(u[mask], v[mask], key, spec.texture_octaves)
            if spec.texture_gain > 0:
                n = 1.0 / (1.0 + np.exp(-spec.texture_gain * (n - 0.5)))
            vals = lo + (hi - lo) * n
            edge = spec.geometry.edge(cube)
            for p in spec.polyps:
                if p.center.cube != cube or p.center.face != face:
                    continue
                du = (u[mask] - p.center.u) * edge / p.rx
                dv = (v[mask] - p.center.v) * edge / p.ry
                d2 = du * du + dv * dv
                # paraboloid cap: soft edge, but visibly filling its nominal
                # extent so annotation boxes match the apparent blob
                bump = np.maximum(1.0 - d2, 0.0)
                vals = vals + p.brightness * bump
            out[mask] = vals
    return out


def _apply_spots_and_noise(img: np.ndarray, spec: SceneSpec,
                           stream: int) -> np.ndarray:
    h, w = img.shape
    rng = np.random.default_rng([spec.seed, stream])
    out = img.copy()
    if spec.spot_count:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        for _ in range(spec.spot_count):
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            r = rng.uniform(*spec.spot_size)
            out[(xs - cx) ** 2 + (ys - cy) ** 2 <= r * r] = 255.0
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma * 255.0, size=out.shape)
    return np.clip(out, 0.0, 255.0)


# ---------------------------------------------------------------------------
# frame rendering


@dataclass
class FrameTruth:
    """Exact per-frame ground truth emitted next to a render."""

    boxes: list                      # lesion boxes in frame pixels
    homographies: dict               # (cube, face) -> 3x3 from previous frame


def _camera_matrix(cam: DistortionModel) -> np.ndarray:
    return np.array([[cam.fx, 0.0, cam.cx],
                     [0.0, cam.fy, cam.cy],
                     [0.0, 0.0, 1.0]])


def face_homography(spec: SceneSpec, pose_i: int, pose_j: int, cube: str,
                    face: str) -> np.ndarray:
    """Plane-induced homography between two ideal (undistorted) views of a face.

    Maps ideal pixel coordinates of pose_i onto pose_j. Undefined when either
    camera center lies on the face plane.
    """
    pi = spec.poses[pose_i]
    pj = spec.poses[pose_j]
    center, _, _, normal, _ = face_frame(spec.geometry, cube, face)
    d_w = float(normal @ center)
    d_i = d_w - float(normal @ pi.position)
    if abs(d_i) < 1e-12:
        raise ValueError("camera lies on the face plane")
    n_i = pi.rotation.T @ normal
    r_rel = pj.rotation.T @ pi.rotation
    t_rel = pj.rotation.T @ (pi.position - pj.position)
    h_cam = r_rel + np.outer(t_rel, n_i) / d_i
    k = _camera_matrix(spec.camera)
    h = k @ h_cam @ np.linalg.inv(k)
    return h / h[2, 2]


def project_polyp_box(spec: SceneSpec, polyp: Polyp,
                      pose: CameraPose) -> Box | None:
    """Distorted-pixel bounding box of a lesion's extent, clipped to the frame."""
    from .unfold import project_points, surface_world

    center, eu, ev, _, _ = face_frame(spec.geometry, polyp.center.cube,
                                      polyp.center.face)
    cw = surface_world(spec.geometry, polyp.center)
    phis = np.linspace(0.0, 2 * np.pi, 24, endpoint=False)
    pts = (cw[None, :] + np.cos(phis)[:, None] * polyp.rx * eu
           + np.sin(phis)[:, None] * polyp.ry * ev)
    pix, in_front = project_points(pose, spec.camera, pts)
    if in_front.sum() < len(phis) // 2:
        return None
    pix = pix[in_front]
    w, h = spec.frame_size
    x0 = max(0.0, float(pix[:, 0].min()))
    y0 = max(0.0, float(pix[:, 1].min()))
    x1 = min(w - 1.0, float(pix[:, 0].max()))
    y1 = min(h - 1.0, float(pix[:, 1].max()))
    if x1 - x0 < 2.0 or y1 - y0 < 2.0:
        return None
    return Box(x0, y0, x1, y1)


def render_frame(spec: SceneSpec, pose_index: int):
    """Render one camera view of the cavity through the distortion model.

    Returns (Raster, FrameTruth). Deterministic given (spec, seed): the same
    call yields identical bytes.
    """
    pose = spec.poses[pose_index]
    w, h = spec.frame_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    ideal = undistort_points(spec.camera, pix)
    un = (ideal[:, 0] - spec.camera.cx) / spec.camera.fx
    vn = (ideal[:, 1] - spec.camera.cy) / spec.camera.fy
    dirs_cam = np.stack([un, vn, np.ones_like(un)], axis=1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.position, dirs.shape)
    _, cube_idx, face_idx, u, v = ray_exit_batch(spec.geometry, origins, dirs)
    vals = _surface_texture(spec, cube_idx, face_idx, u, v).reshape(h, w)
    vals = _apply_spots_and_noise(vals, spec, stream=pose_index)

    boxes = []
    for p in spec.polyps:
        b = project_polyp_box(spec, p, pose)
        if b is not None:
            boxes.append(b)
    homs = {}
    if pose_index > 0:
        for cube in CUBES:
            for face in spec.geometry.faces(cube):
                try:
                    homs[(cube, face)] = face_homography(
                        spec, pose_index - 1, pose_index, cube, face)
                except ValueError:
                    continue
    return Raster(vals), FrameTruth(boxes, homs)


# ---------------------------------------------------------------------------
# panoramas and datasets


def render_panorama(spec: SceneSpec, face_px: int = 64):
    """Ideal unfolded panorama straight from the surface texture.

    Returns (Raster, ground-truth lesion boxes in atlas pixels). This is the
    exact reference the camera pipeline is judged against, so no camera or
    resampling is involved; noise and reflective spots are still applied.
    """
    layout = default_layout(spec.geometry, face_px)
    grid = np.zeros((layout.height, layout.width))
    boxes: list[Box] = []
    for (cube, face), (x0, y0, tw, th) in sorted(layout.tiles.items()):
        ys, xs = np.mgrid[0:th, 0:tw].astype(np.float64)
        u = (xs.ravel() + 0.5) / tw
        v = (ys.ravel() + 0.5) / th
        ci = CUBES.index(cube)
        fi = FACES.index(face)
        vals = _surface_texture(spec, np.full(u.shape, ci), np.full(u.shape, fi),
                                u, v)
        grid[y0:y0 + th, x0:x0 + tw] = vals.reshape(th, tw)
        edge = spec.geometry.edge(cube)
        for p in spec.polyps:
            if p.center.cube != cube or p.center.face != face:
                continue
            bx0 = x0 + (p.center.u - p.rx / edge) * tw
            bx1 = x0 + (p.center.u + p.rx / edge) * tw
            by0 = y0 + (p.center.v - p.ry / edge) * th
            by1 = y0 + (p.center.v + p.ry / edge) * th
            bx0 = max(bx0, x0)
            by0 = max(by0, y0)
            bx1 = min(bx1, x0 + tw - 1.0)
            by1 = min(by1, y0 + th - 1.0)
            if bx1 - bx0 >= 2.0 and by1 - by0 >= 2.0:
                boxes.append(Box(bx0, by0, bx1, by1))
    grid = _apply_spots_and_noise(grid, spec, stream=100_000)
    return Raster(grid), boxes


def random_scene(template: SceneSpec, index: int,
                 polyp_count_range: tuple = (1, 3),
                 polyp_radius_range: tuple = (0.13, 0.20),
                 polyp_brightness: float = 110.0) -> SceneSpec:
    """Scene variant with reseeded texture and freshly placed lesions."""
    rng = np.random.default_rng([template.seed, index, 55])
    geom = template.geometry
    polyps = []
    n = int(rng.integers(polyp_count_range[0], polyp_count_range[1] + 1))
    faces = [(c, f) for c in CUBES for f in geom.faces(c)]
    for _ in range(n):
        cube, face = faces[int(rng.integers(0, len(faces)))]
        cu = float(rng.uniform(0.2, 0.8))
        cv = float(rng.uniform(0.2, 0.8))
        rx = float(rng.uniform(*polyp_radius_range))
        ry = float(rng.uniform(*polyp_radius_range))
        polyps.append(Polyp(SurfacePoint(cube, face, cu, cv), rx, ry,
                            polyp_brightness))
    return replace(template, polyps=polyps,
                   texture_seed=template.texture_seed + 1000 * (index + 1),
                   seed=template.seed + 1000 * (index + 1))


def make_dataset(template: SceneSpec, n_scenes: int, split: float,
                 out_dir, aug_sigmas=(0.0, 1.0, 2.0), face_px: int = 48,
                 polyp_count_range: tuple = (1, 3),
                 polyp_radius_range: tuple = (0.13, 0.20),
                 polyp_brightness: float = 110.0) -> dict:
    """Write a train/test panorama dataset in the detector's layout.

    Each scene contributes one panorama per augmentation sigma (sigma 0 is
    the original); annotation boxes are unchanged by smoothing. The split is
    a seed-deterministic permutation of scene indices.
    """
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes to split")
    out_dir = Path(out_dir)
    rng = np.random.default_rng([template.seed, 17])
    perm = rng.permutation(n_scenes)
    n_train = int(round(split * n_scenes))
    train_idx = set(perm[:n_train].tolist())
    counts = {"train": 0, "test": 0}
    for part in ("train", "test"):
        (out_dir / part).mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        scene = random_scene(template, i, polyp_count_range,
                             polyp_radius_range, polyp_brightness)
        pano, boxes = render_panorama(scene, face_px)
        part = "train" if i in train_idx else "test"
        for sigma in aug_sigmas:
            img = gaussian_smooth(pano, sigma)
            stem = f"scene{i:03d}_s{sigma:g}"
            save_image(img, out_dir / part / f"{stem}.png")
            write_annotations(out_dir / part / f"{stem}.txt", boxes)
            counts[part] += 1
    return counts


# ---------------------------------------------------------------------------
# planar test pairs (registration/fusion oracles)


def homography_pair(texture: Raster, h: Homography, noise_sigma: float = 0.0,
                    seed: int = 0):
    """Image pair related by a known global homography.

    img_a is the texture itself; img_b is built so that a point x in img_a
    appears at h(x) in img_b. Out-of-texture lookups clamp to the texture
    edge (a hard zero border would inject artificial mega-corners).
    Independent gaussian noise is added to each image.
    """
    w, hgt = texture.width, texture.height
    ys, xs = np.mgrid[0:hgt, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = h.inverse().apply(pts)
    plane = texture.plane()
    vals, _ = bilinear_many(plane, np.clip(src[:, 0], 0, w - 1),
                            np.clip(src[:, 1], 0, hgt - 1))
    img_b = vals.reshape(hgt, w)
    rng = np.random.default_rng([seed, 3])
    a = texture.plane().copy()
    b = img_b
    if noise_sigma > 0:
        a = np.clip(a + rng.normal(0, noise_sigma * 255, a.shape), 0, 255)
        b = np.clip(b + rng.normal(0, noise_sigma * 255, b.shape), 0, 255)
    return Raster(a), Raster(b)
