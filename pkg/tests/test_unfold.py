import numpy as np
import pytest

from endomosaic.calib import DistortionModel
from endomosaic.raster import Raster
from endomosaic.unfold import (CUBES, FACES, CameraPose,
                               DegenerateRay, DoubleCube, ExcludedFace,
                               SurfacePoint, atlas_to_surface, bake_atlas,
                               default_layout, face_frame, look_at,
                               project_points, ray_exit_batch, ray_to_surface,
                               surface_to_atlas, surface_world)

GEOM = DoubleCube()
LAYOUT = default_layout(GEOM, 64)


def test_double_cube_validation():
    with pytest.raises(ValueError):
        DoubleCube(edge_a=0.0)
    with pytest.raises(ValueError):
        DoubleCube(offset=1.5)  # disjoint cubes
    DoubleCube(offset=0.2)


def test_layout_tiles_disjoint_and_complete():
    rects = list(LAYOUT.tiles.values())
    for i in range(len(rects)):
        x0, y0, w, h = rects[i]
        for j in range(i + 1, len(rects)):
            a0, b0, aw, bh = rects[j]
            assert (x0 + w <= a0 or a0 + aw <= x0
                    or y0 + h <= b0 or b0 + bh <= y0)
    # every non-junction face has exactly one tile
    expected = {(c, f) for c in CUBES for f in GEOM.faces(c)}
    assert set(LAYOUT.tiles) == expected
    assert len(LAYOUT.tiles) == 10


def test_surface_to_atlas_center_and_origin():
    x0, y0, w, h = LAYOUT.tiles[("a", "+z")]
    assert surface_to_atlas(GEOM, LAYOUT, SurfacePoint("a", "+z", 0.5, 0.5)) \
        == (x0 + w / 2, y0 + h / 2)
    assert surface_to_atlas(GEOM, LAYOUT, SurfacePoint("a", "+z", 0.0, 0.0)) \
        == (x0, y0)


def test_junction_face_is_excluded():
    with pytest.raises(ExcludedFace):
        surface_to_atlas(GEOM, LAYOUT, SurfacePoint("a", "-z", 0.5, 0.5))
    with pytest.raises(ExcludedFace):
        surface_to_atlas(GEOM, LAYOUT, SurfacePoint("b", "+z", 0.5, 0.5))


def test_atlas_surface_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        cube = CUBES[rng.integers(0, 2)]
        face = GEOM.faces(cube)[rng.integers(0, 5)]
        u, v = rng.uniform(0, 1, 2)
        sp = SurfacePoint(cube, face, float(u), float(v))
        p = surface_to_atlas(GEOM, LAYOUT, sp)
        back = atlas_to_surface(GEOM, LAYOUT, p)
        assert back.cube == cube and back.face == face
        assert abs(back.u - u) < 1e-9 and abs(back.v - v) < 1e-9


def test_atlas_background_marker():
    assert atlas_to_surface(GEOM, LAYOUT, (1.0, 1.0)) is None  # cross corner gap


def test_ray_from_center_up():
    sp = ray_to_surface(GEOM, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    assert (sp.cube, sp.face) == ("a", "+z")
    assert (sp.u, sp.v) == pytest.approx((0.5, 0.5))


def test_ray_corner_diagonal_tie_break():
    d = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
    sp = ray_to_surface(GEOM, (0.0, 0.0, 0.0), d)
    assert (sp.cube, sp.face) == ("a", "+x")


def test_ray_through_junction_continues_into_lower_cube():
    sp = ray_to_surface(GEOM, (0.0, 0.0, 0.0), (0.0, 0.0, -1.0))
    assert (sp.cube, sp.face) == ("b", "-z")
    assert (sp.u, sp.v) == pytest.approx((0.5, 0.5))


def test_ray_degenerate_and_outside_origin():
    with pytest.raises(DegenerateRay):
        ray_to_surface(GEOM, (0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        ray_to_surface(GEOM, (5, 0, 0), (1, 0, 0))


def _random_interior(rng, n):
    pts = []
    while len(pts) < n:
        cube = CUBES[rng.integers(0, 2)]
        half = GEOM.edge(cube) / 2 - 1e-6
        p = GEOM.center(cube) + rng.uniform(-half, half, 3)
        pts.append(p)
    return np.array(pts)


def test_random_rays_hit_face_planes_exactly():
    rng = np.random.default_rng(7)
    origins = _random_interior(rng, 10000)
    dirs = rng.normal(size=(10000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, cube_idx, face_idx, u, v = ray_exit_batch(GEOM, origins, dirs)
    assert (face_idx >= 0).all()
    hits = origins + t[:, None] * dirs
    for ci, cube in enumerate(CUBES):
        for fi, face in enumerate(FACES):
            mask = (cube_idx == ci) & (face_idx == fi)
            if not mask.any():
                continue
            assert face != GEOM.junction_face(cube)
            center, eu, ev, normal, edge = face_frame(GEOM, cube, face)
            resid = np.abs((hits[mask] - center) @ normal)
            assert resid.max() < 1e-9
            uu = (hits[mask] - center) @ eu / edge + 0.5
            vv = (hits[mask] - center) @ ev / edge + 0.5
            assert uu.min() >= -1e-9 and uu.max() <= 1 + 1e-9
            assert vv.min() >= -1e-9 and vv.max() <= 1 + 1e-9
            assert np.allclose(u[mask], np.clip(uu, 0, 1), atol=1e-9)


def test_ray_world_position_on_union_boundary():
    rng = np.random.default_rng(9)
    origins = _random_interior(rng, 500)
    dirs = rng.normal(size=(500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for o, d in zip(origins, dirs):
        sp = ray_to_surface(GEOM, o, d)
        w = surface_world(GEOM, sp)
        # signed distance of a point to the union boundary (box-union SDF)
        dists = []
        for cube in CUBES:
            half = GEOM.edge(cube) / 2
            q = np.abs(w - GEOM.center(cube)) - half
            outside = np.linalg.norm(np.maximum(q, 0))
            inside = min(q.max(), 0.0)
            dists.append(outside + inside)
        assert abs(min(dists)) < 1e-9


# ---------------------------------------------------------------------------
# baking


def _face_on_setup(face_px=32, frame=128, fx=60.0, cells=4):
    """Camera at cube-a center staring at face a:+z, exact analytic frame."""
    cam = DistortionModel(fx, fx, frame / 2, frame / 2)
    pose = CameraPose(np.zeros(3), np.eye(3))

    ys, xs = np.mgrid[0:frame, 0:frame].astype(np.float64)
    wx = (xs - cam.cx) / cam.fx * 0.5
    wy = (ys - cam.cy) / cam.fy * 0.5
    u = wx + 0.5
    v = wy + 0.5
    checker = (((u * cells).astype(int) + (v * cells).astype(int)) % 2)
    vals = np.where((u >= 0) & (u < 1) & (v >= 0) & (v < 1),
                    30.0 + 190.0 * checker, 0.0)
    return cam, pose, Raster(vals)


def test_bake_checkerboard_face():
    cam, pose, frame = _face_on_setup()
    layout = default_layout(GEOM, 32)
    atlas = bake_atlas(GEOM, layout, [pose], [frame], cam)
    x0, y0, w, h = layout.tiles[("a", "+z")]
    tile = atlas.raster.plane()[y0:y0 + h, x0:x0 + w]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xs + 0.5) / w
    v = (ys + 0.5) / h
    expect = 30.0 + 190.0 * (((u * 4).astype(int) + (v * 4).astype(int)) % 2)
    assert np.abs(tile - expect).mean() < 2.0


def test_bake_zero_frames_is_background():
    layout = default_layout(GEOM, 16)
    cam = DistortionModel(50, 50, 32, 32)
    atlas = bake_atlas(GEOM, layout, [], [], cam)
    assert np.all(atlas.raster.data == 0.0)


def test_bake_duplicate_camera_equals_single():
    cam, pose, frame = _face_on_setup()
    layout = default_layout(GEOM, 16)
    one = bake_atlas(GEOM, layout, [pose], [frame], cam)
    two = bake_atlas(GEOM, layout, [pose, pose], [frame, frame], cam)
    assert np.array_equal(one.raster.data, two.raster.data)


def test_bake_frame_order_invariance():
    cam, pose_a, frame_a = _face_on_setup()
    pose_b = look_at((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), up=(0, 0, 1))
    frame_b = Raster(np.full((128, 128, 1), 90.0))
    layout = default_layout(GEOM, 16)
    ab = bake_atlas(GEOM, layout, [pose_a, pose_b], [frame_a, frame_b], cam)
    ba = bake_atlas(GEOM, layout, [pose_b, pose_a], [frame_b, frame_a], cam)
    assert np.array_equal(ab.raster.data, ba.raster.data)


def test_layout_manifest_format():
    text = LAYOUT.manifest()
    lines = text.strip().split("\n")
    assert len(lines) == 10
    cube, face, x0, y0, w, h = lines[0].split()
    assert cube in CUBES and face in FACES
    assert int(w) == 64 and int(h) == 64


def test_project_points_matches_pinhole_formula():
    cam = DistortionModel(100, 110, 64, 48, k1=0.1, k2=0.02)
    pose = look_at((0.1, -0.05, 0.0), (0.5, 0.0, 0.0), up=(0, 0, 1))
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.4, 0.4, (50, 3)) + np.array([0.45, 0, 0])
    pix, in_front = project_points(pose, cam, pts)
    for p, q, ok in zip(pts, pix, in_front):
        c = pose.rotation.T @ (p - pose.position)
        if c[2] <= 1e-9:
            assert not ok
            continue
        u, v = c[0] / c[2], c[1] / c[2]
        r2 = u * u + v * v
        s = 1 + cam.k1 * r2 + cam.k2 * r2 * r2
        assert q == pytest.approx((cam.cx + cam.fx * u * s,
                                   cam.cy + cam.fy * v * s), abs=1e-9)
