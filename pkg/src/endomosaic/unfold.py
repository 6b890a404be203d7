"""Two-cube cavity model: ray casting, face parameterization, atlas unfolding.

The cavity interior is modeled as the union of two axis-aligned cubes stacked
along Z with overlapping interiors; the two facing junction faces are
interior and never part of the visible surface. Every remaining face unfolds
into one tile of a flat atlas (two cross layouts side by side), giving a
panorama representation whose per-face distortion stays bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import DistortionModel
from .raster import Raster, bilinear_many


class ExcludedFace(Exception):
    """The requested face is swallowed by the cube-cube junction."""


class DegenerateRay(Exception):
    """Ray direction has (near-)zero length."""


FACES = ("+x", "-x", "+y", "-y", "+z", "-z")
# deterministic tie-break for rays hitting edges/corners
FACE_PRIORITY = ("+x", "+y", "+z", "-x", "-y", "-z")
_AXIS = {"+x": (0, 1.0), "-x": (0, -1.0), "+y": (1, 1.0), "-y": (1, -1.0),
         "+z": (2, 1.0), "-z": (2, -1.0)}
# in-face parameter axes: u runs along the first, v along the second
_UV_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

CUBES = ("a", "b")


@dataclass(frozen=True)
class DoubleCube:
    """Two axis-aligned cubes sharing the Z axis, interiors merged.

    Cube a is centered at the origin; cube b sits below it at
    (0, 0, -offset). The junction faces are a:-z and b:+z. With the default
    equal edges both junction faces are strictly interior (the union is a
    single box), so they can never be hit by an interior ray.
    """

    edge_a: float = 1.0
    edge_b: float = 1.0
    offset: float = 0.8

    def __post_init__(self):
        if self.edge_a <= 0 or self.edge_b <= 0:
            raise ValueError("edge lengths must be positive")
        if not 0 < self.offset < (self.edge_a + self.edge_b) / 2:
            raise ValueError("cubes must overlap: 0 < offset < (edge_a+edge_b)/2")

    def center(self, cube: str) -> np.ndarray:
        if cube == "a":
            return np.zeros(3)
        if cube == "b":
            return np.array([0.0, 0.0, -self.offset])
        raise ValueError(f"unknown cube {cube!r}")

    def edge(self, cube: str) -> float:
        return self.edge_a if cube == "a" else self.edge_b

    def junction_face(self, cube: str) -> str:
        return "-z" if cube == "a" else "+z"

    def faces(self, cube: str) -> list[str]:
        excl = self.junction_face(cube)
        return [f for f in FACES if f != excl]

    def contains(self, p, strict: bool = True) -> bool:
        p = np.asarray(p, dtype=np.float64)
        for cube in CUBES:
            half = self.edge(cube) / 2
            d = np.abs(p - self.center(cube))
            if strict and np.all(d < half):
                return True
            if not strict and np.all(d <= half):
                return True
        return False


@dataclass(frozen=True)
class SurfacePoint:
    """A location on the cavity surface: cube, face label, in-face (u, v)."""

    cube: str
    face: str
    u: float
    v: float

    def __post_init__(self):
        if self.cube not in CUBES:
            raise ValueError(f"unknown cube {self.cube!r}")
        if self.face not in FACES:
            raise ValueError(f"unknown face {self.face!r}")
        if not (-1e-9 <= self.u <= 1 + 1e-9 and -1e-9 <= self.v <= 1 + 1e-9):
            raise ValueError("uv must lie in [0, 1]^2")


def face_frame(geom: DoubleCube, cube: str, face: str):
    """(center, eu, ev, outward normal, edge length) of one cube face."""
    axis, sign = _AXIS[face]
    edge = geom.edge(cube)
    center = geom.center(cube).copy()
    center[axis] += sign * edge / 2
    ua, va = _UV_AXES[axis]
    eu = np.zeros(3)
    eu[ua] = 1.0
    ev = np.zeros(3)
    ev[va] = 1.0
    normal = np.zeros(3)
    normal[axis] = sign
    return center, eu, ev, normal, edge


def surface_world(geom: DoubleCube, sp: SurfacePoint) -> np.ndarray:
    """World position of a surface point."""
    center, eu, ev, _, edge = face_frame(geom, sp.cube, sp.face)
    return center + (sp.u - 0.5) * edge * eu + (sp.v - 0.5) * edge * ev


# ---------------------------------------------------------------------------
# atlas layout

_CROSS = {"+y": (1, 0), "-x": (0, 1), "+z": (1, 1), "+x": (2, 1),
          "-z": (3, 1), "-y": (1, 2)}


@dataclass(frozen=True)
class AtlasLayout:
    """Disjoint tile rectangles, one per non-excluded face."""

    tiles: dict
    width: int
    height: int
    face_px: int

    def manifest(self) -> str:
        lines = [f"{cube} {face} {r[0]} {r[1]} {r[2]} {r[3]}"
                 for (cube, face), r in sorted(self.tiles.items())]
        return "\n".join(lines) + "\n"


def default_layout(geom: DoubleCube, face_px: int = 256) -> AtlasLayout:
    """Two cross unfoldings side by side; junction tiles are omitted."""
    s = face_px
    tiles = {}
    for ci, cube in enumerate(CUBES):
        xoff = ci * 4 * s
        for face in geom.faces(cube):
            col, row = _CROSS[face]
            tiles[(cube, face)] = (xoff + col * s, row * s, s, s)
    return AtlasLayout(tiles, 8 * s, 3 * s, s)


def surface_to_atlas(geom: DoubleCube, layout: AtlasLayout,
                     sp: SurfacePoint) -> tuple[float, float]:
    """Affine map of a face (u, v) into its atlas tile."""
    if sp.face == geom.junction_face(sp.cube):
        raise ExcludedFace(f"face {sp.cube}:{sp.face} is interior")
    x0, y0, w, h = layout.tiles[(sp.cube, sp.face)]
    return (x0 + sp.u * w, y0 + sp.v * h)


def atlas_to_surface(geom: DoubleCube, layout: AtlasLayout,
                     p) -> SurfacePoint | None:
    """Inverse of surface_to_atlas; None for pixels outside every tile."""
    px, py = float(p[0]), float(p[1])
    for (cube, face), (x0, y0, w, h) in layout.tiles.items():
        if x0 <= px < x0 + w and y0 <= py < y0 + h:
            return SurfacePoint(cube, face, (px - x0) / w, (py - y0) / h)
    return None


# ---------------------------------------------------------------------------
# ray casting


def _cube_interval(geom: DoubleCube, cube: str, o: np.ndarray, d: np.ndarray):
    """Slab intersection interval (enter, exit) per ray; empty -> enter>exit."""
    half = geom.edge(cube) / 2
    c = geom.center(cube)
    n = len(o)
    enter = np.full(n, -np.inf)
    exit_ = np.full(n, np.inf)
    tfar_axes = np.full((n, 3), np.inf)
    for ax in range(3):
        da = d[:, ax]
        oa = o[:, ax] - c[ax]
        para = np.abs(da) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - oa) / da
            t2 = (half - oa) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside_slab = np.abs(oa) <= half
        lo = np.where(para, np.where(inside_slab, -np.inf, np.inf), lo)
        hi = np.where(para, np.where(inside_slab, np.inf, -np.inf), hi)
        enter = np.maximum(enter, lo)
        exit_ = np.minimum(exit_, hi)
        tfar_axes[:, ax] = hi
    return enter, exit_, tfar_axes


def ray_exit_batch(geom: DoubleCube, origins: np.ndarray, dirs: np.ndarray):
    """Vectorized union-exit computation for rays starting inside the cavity.

    Returns (t_exit, cube_idx, face_idx, u, v) arrays; face_idx indexes FACES.
    The exit is the far end of the union interval connected to t=0, so rays
    continue through the junction region from one cube into the other.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ea, xa, tfa = _cube_interval(geom, "a", origins, dirs)
    eb, xb, tfb = _cube_interval(geom, "b", origins, dirs)
    valid_a = xa > ea
    valid_b = xb > eb
    in_a = valid_a & (ea < 0) & (xa > 0)
    in_b = valid_b & (eb < 0) & (xb > 0)

    t_exit = np.where(in_a & in_b, np.maximum(xa, xb),
                      np.where(in_a, xa, xb))
    eps = 1e-12
    grow_b = in_a & ~in_b & valid_b & (eb <= t_exit + eps) & (xb > t_exit)
    t_exit = np.where(grow_b, xb, t_exit)
    grow_a = in_b & ~in_a & valid_a & (ea <= t_exit + eps) & (xa > t_exit)
    t_exit = np.where(grow_a, xa, t_exit)

    tol = 1e-9 * np.maximum(1.0, np.abs(t_exit))
    from_a = valid_a & (np.abs(xa - t_exit) <= tol)
    cube_idx = np.where(from_a, 0, 1)

    tfar = np.where(from_a[:, None], tfa, tfb)
    face_idx = np.full(len(origins), -1, dtype=np.int64)
    for face in FACE_PRIORITY:
        ax, sign = _AXIS[face]
        cand = ((face_idx == -1)
                & (np.abs(tfar[:, ax] - t_exit) <= tol)
                & ((dirs[:, ax] > 0) == (sign > 0))
                & (dirs[:, ax] != 0))
        face_idx[cand] = FACES.index(face)

    hit = origins + t_exit[:, None] * dirs
    u = np.zeros(len(origins))
    v = np.zeros(len(origins))
    for ci, cube in enumerate(CUBES):
        for fi, face in enumerate(FACES):
            mask = (cube_idx == ci) & (face_idx == fi)
            if not mask.any():
                continue
            center, eu, ev, _, edge = face_frame(geom, cube, face)
            rel = hit[mask] - center
            u[mask] = np.clip(rel @ eu / edge + 0.5, 0.0, 1.0)
            v[mask] = np.clip(rel @ ev / edge + 0.5, 0.0, 1.0)
    return t_exit, cube_idx, face_idx, u, v


def ray_to_surface(geom: DoubleCube, origin, direction) -> SurfacePoint:
    """Nearest interior-boundary intersection of a ray from inside the cavity.

    Edge/corner grazes resolve deterministically by the fixed face priority
    +x > +y > +z > -x > -y > -z; exits landing on a junction face (possible
    only with unequal cube edges) raise ExcludedFace.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        raise DegenerateRay("zero ray direction")
    d = d / norm
    if not geom.contains(o, strict=True):
        raise ValueError("ray origin must lie strictly inside the cavity")
    _, cube_idx, face_idx, u, v = ray_exit_batch(geom, o[None, :], d[None, :])
    if face_idx[0] < 0:
        raise DegenerateRay("no exit face found")
    cube = CUBES[int(cube_idx[0])]
    face = FACES[int(face_idx[0])]
    if face == geom.junction_face(cube):
        raise ExcludedFace(
            f"ray exits through junction face {cube}:{face} "
            "(only possible with unequal cube edges)")
    return SurfacePoint(cube, face, float(u[0]), float(v[0]))


# ---------------------------------------------------------------------------
# baking


@dataclass
class Atlas:
    """Unfolded panorama: raster, tile layout, scale, per-frame coverage."""

    raster: Raster
    layout: AtlasLayout
    pixels_per_unit: dict
    contributors: np.ndarray | None = None  # uint64 bitmask, like Canvas


@dataclass(frozen=True)
class CameraPose:
    """Camera position and camera-to-world rotation (camera looks along +Z)."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", r)


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Pose whose +Z axis points from position toward target."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    if abs(np.dot(upv / np.linalg.norm(upv), fwd)) > 0.999:
        upv = np.array([1.0, 0.0, 0.0])
    right = np.cross(upv, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    return CameraPose(position, r)


def project_points(pose: CameraPose, intrinsics: DistortionModel,
                   pts: np.ndarray):
    """World points -> distorted pixel coordinates; returns (pixels, in_front)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.position) @ pose.rotation  # R^T (p - C)
    z = cam[:, 2]
    in_front = z > 1e-9
    zsafe = np.where(in_front, z, 1.0)
    u = cam[:, 0] / zsafe
    v = cam[:, 1] / zsafe
    r2 = u * u + v * v
    s = 1.0 + intrinsics.k1 * r2 + intrinsics.k2 * r2 * r2
    px = intrinsics.cx + intrinsics.fx * u * s
    py = intrinsics.cy + intrinsics.fy * v * s
    return np.stack([px, py], axis=1), in_front


def bake_atlas(geom: DoubleCube, layout: AtlasLayout, poses: list,
               frames: list, intrinsics: DistortionModel) -> Atlas:
    """Project captured frames onto the cavity surface and unfold them.

    Every atlas pixel maps to its surface point, which is projected into each
    camera; samples from all cameras that actually see the point (in front,
    inside the frame, and unoccluded along the sight line) are averaged.
    Uncovered pixels stay background (0). Frame order does not matter.
    """
    if len(poses) != len(frames):
        raise ValueError("one pose per frame required")
    if len(frames) > 64:
        raise ValueError("coverage bitmask supports at most 64 frames")
    grid = np.zeros((layout.height, layout.width))
    total = np.zeros_like(grid)
    count = np.zeros_like(grid)
    bits = np.zeros(grid.shape, dtype=np.uint64)

    for (cube, face), (x0, y0, w, h) in sorted(layout.tiles.items()):
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        u = (xs.ravel() + 0.5) / w
        v = (ys.ravel() + 0.5) / h
        center, eu, ev, _, edge = face_frame(geom, cube, face)
        world = (center
                 + (u - 0.5)[:, None] * edge * eu
                 + (v - 0.5)[:, None] * edge * ev)
        tile_total = np.zeros(len(world))
        tile_count = np.zeros(len(world))
        tile_bits = np.zeros(len(world), dtype=np.uint64)
        for k, (pose, frame) in enumerate(zip(poses, frames)):
            pix, in_front = project_points(pose, intrinsics, world)
            inside = (in_front
                      & (pix[:, 0] >= 0) & (pix[:, 0] <= frame.width - 1)
                      & (pix[:, 1] >= 0) & (pix[:, 1] <= frame.height - 1))
            if not inside.any():
                continue
            rel = world[inside] - pose.position
            dist = np.linalg.norm(rel, axis=1)
            dirs = rel / dist[:, None]
            t_exit, _, _, _, _ = ray_exit_batch(
                geom, np.broadcast_to(pose.position, rel.shape), dirs)
            visible = t_exit >= dist - 1e-6
            sel = np.nonzero(inside)[0][visible]
            if not len(sel):
                continue
            vals, inb = bilinear_many(frame.plane(), pix[sel, 0], pix[sel, 1])
            sel = sel[inb]
            tile_total[sel] += vals[inb]
            tile_count[sel] += 1
            tile_bits[sel] |= np.uint64(1) << np.uint64(k)
        sl = (slice(y0, y0 + h), slice(x0, x0 + w))
        total[sl] = tile_total.reshape(h, w)
        count[sl] = tile_count.reshape(h, w)
        bits[sl] = tile_bits.reshape(h, w)

    grid = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    ppu = {cube: layout.face_px / geom.edge(cube) for cube in CUBES}
    return Atlas(Raster(grid), layout, ppu, bits)
