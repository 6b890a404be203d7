import numpy as np
import pytest

from endomosaic.fusion import (EmptyInput, FusionConfig, FusionProblem,
                               NoSeams, SeamSample, SimTransform4, apply_sim4,
                               build_seam_samples, composite, eloss,
                               optimize_alternating, seam_error,
                               _seam_jacobian)
from endomosaic.raster import Raster, sample_bilinear
from endomosaic.register import Homography
from endomosaic.synth import noise_texture
from endomosaic.raster import gaussian_smooth


# ---------------------------------------------------------------------------
# SimTransform4


def test_apply_sim4_identity():
    assert apply_sim4(SimTransform4(), (3.0, 4.0)) == (3.0, 4.0)


def test_apply_sim4_translation():
    assert apply_sim4(SimTransform4(0, 0, 2.0, -1.0), (0.0, 0.0)) == (2.0, -1.0)


def test_apply_sim4_linearized_rotation():
    # (x + r1*x - r2*y, y + r2*x + r1*y) at (10, 0): (10 + 1, 0 + 2)
    assert apply_sim4(SimTransform4(0.1, 0.2, 0, 0), (10.0, 0.0)) == \
        pytest.approx((11.0, 2.0))


def test_sim4_inverse_round_trip():
    t = SimTransform4(0.05, -0.08, 3.2, -1.7)
    pts = np.random.default_rng(0).uniform(-50, 50, (40, 2))
    assert np.max(np.abs(t.inverse_apply(t.apply(pts)) - pts)) < 1e-10


# ---------------------------------------------------------------------------
# seam_error / eloss


def _flat_problem(vals_a, vals_b, seams, beta=0.0, transforms=None, shape=(32, 32)):
    fa = Raster(np.full((*shape, 1), float(vals_a)))
    fb = Raster(np.full((*shape, 1), float(vals_b)))
    init = transforms or [SimTransform4(), SimTransform4()]
    return FusionProblem([fa, fb], init, seams, beta)


def test_seam_error_equal_constants():
    p = _flat_problem(100, 100, [SeamSample(10, 10, 0, 1)])
    assert seam_error(p, p.seams[0]) == 0.0


def test_seam_error_constant_difference():
    p = _flat_problem(100, 90, [SeamSample(10, 10, 0, 1)])
    assert seam_error(p, p.seams[0]) == pytest.approx(10.0)


def test_seam_error_gradient_frames_analytic():
    h, w = 32, 32
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    fa = Raster((2.0 * xs + ys)[:, :, None])
    fb = Raster((2.0 * xs + ys)[:, :, None])
    # frame b shifted on the canvas by 1 px in x: e = |I_a(p) - I_b(p - 1px)|
    shift = SimTransform4(0, 0, 1.0, 0.0)
    seams = [SeamSample(x, y, 0, 1) for x, y in [(5.5, 7.2), (12.1, 3.3), (20.0, 15.0)]]
    p = FusionProblem([fa, fb], [SimTransform4(), shift], seams, 0.0)
    for s in seams:
        # analytic: I_b sampled at (x-1, y) -> value drops by exactly 2
        assert seam_error(p, s) == pytest.approx(2.0, abs=1e-6)


def test_seam_error_out_of_frame_is_zero():
    p = _flat_problem(100, 90, [SeamSample(200, 200, 0, 1)])
    assert seam_error(p, p.seams[0]) == 0.0


def test_eloss_zero_problem():
    p = _flat_problem(50, 50, [SeamSample(3, 3, 0, 1)], beta=0.5)
    assert eloss(p) == pytest.approx(0.0)


def test_eloss_single_seam_substitution():
    # w=1, e=2 via constants 100 vs 98; one transform (0,0,1,0); beta=0.1
    seams = [SeamSample(10, 10, 0, 1, weight=1.0)]
    fa = Raster(np.full((32, 32, 1), 100.0))
    fb = Raster(np.full((32, 32, 1), 98.0))
    p = FusionProblem([fa, fb], [SimTransform4(), SimTransform4(0, 0, 1.0, 0)],
                      seams, beta=0.1)
    assert eloss(p) == pytest.approx(4.0 + 0.1)


def test_eloss_matches_independent_summation_oracle():
    rng = np.random.default_rng(8)
    frames = [gaussian_smooth(noise_texture(48, 40, seed=s), 1.0) for s in (1, 2, 3)]
    transforms = [SimTransform4(*rng.uniform(-0.02, 0.02, 2), *rng.uniform(-0.7, 0.7, 2))
                  for _ in range(3)]
    seams = []
    for _ in range(60):
        i, j = rng.choice(3, size=2, replace=False)
        seams.append(SeamSample(rng.uniform(8, 38), rng.uniform(8, 30),
                                int(i), int(j), rng.uniform(0.2, 2.0)))
    beta = 0.37
    p = FusionProblem(frames, transforms, seams, beta)

    total = 0.0
    for s in seams:
        vals = []
        ok = True
        for f in (s.frame_i, s.frame_j):
            t = transforms[f]
            m = np.array([[1 + t.r1, -t.r2], [t.r2, 1 + t.r1]])
            u = np.linalg.solve(m, np.array([s.x - t.t1, s.y - t.t2]))
            v = sample_bilinear(frames[f], u)
            if v is None:
                ok = False
                break
            vals.append(v[0])
        if ok:
            total += s.weight * (vals[0] - vals[1]) ** 2
    for t in transforms:
        total += beta * (t.r1 ** 2 + t.r2 ** 2 + t.t1 ** 2 + t.t2 ** 2)
    assert eloss(p) == pytest.approx(total, rel=1e-12)


# ---------------------------------------------------------------------------
# Jacobian check


def test_seam_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    frames = [gaussian_smooth(noise_texture(64, 64, seed=s), 1.5) for s in (4, 5)]
    base = [None,
            Homography(np.array([[1.01, 0.004, 2.0],
                                 [-0.006, 0.99, -1.0],
                                 [1e-5, -1e-5, 1.0]]))]
    transforms = [SimTransform4(0.013, -0.009, 0.37, -0.21),
                  SimTransform4(-0.011, 0.006, -0.43, 0.29)]
    seams = [SeamSample(rng.uniform(12, 50), rng.uniform(12, 50), 0, 1,
                        rng.uniform(0.5, 1.5)) for _ in range(50)]
    problem = FusionProblem(frames, transforms, seams, beta=0.0, base_warps=base)
    thetas = np.stack([t.params for t in transforms])

    # central differences are only valid away from bilinear cell boundaries
    generic = np.ones(len(seams), dtype=bool)
    for k in (0, 1):
        fpts = problem.frame_coords(k, thetas[k], problem.seam_pos)
        frac = np.abs(fpts - np.round(fpts))
        generic &= frac.min(axis=1) > 0.01
    assert generic.sum() >= 40

    for k in (0, 1):
        res, jac, idx = _seam_jacobian(problem, k, thetas)
        h = 1e-4
        for d in range(4):
            tp = thetas.copy()
            tp[k, d] += h
            rp, _, _ = _seam_jacobian(problem, k, tp)
            tm = thetas.copy()
            tm[k, d] -= h
            rm, _, _ = _seam_jacobian(problem, k, tm)
            fd = (rp - rm) / (2 * h)
            scale = np.maximum(np.abs(fd), 1e-3)
            rel = (np.abs(jac[:, d] - fd) / scale)[generic]
            assert rel.max() < 1e-3


# ---------------------------------------------------------------------------
# optimize_alternating


def test_perfect_mosaic_constant_trace():
    tex = noise_texture(96, 64, seed=11)
    fa = Raster(tex.data[:, :48].copy())
    fb = Raster(tex.data[:, 32:80].copy())
    base = [None, Homography.translation(32.0, 0.0)]
    transforms = [SimTransform4(), SimTransform4()]
    seams = [SeamSample(float(x), float(y), 0, 1)
             for x in range(33, 47) for y in (5, 20, 40)]
    p = FusionProblem([fa, fb], transforms, seams, beta=0.1, base_warps=base)
    assert eloss(p) == pytest.approx(0.0, abs=1e-18)
    out_t, c, trace = optimize_alternating(p, FusionConfig(max_rounds=5))
    assert all(v == pytest.approx(0.0, abs=1e-18) for v in trace)
    for t in out_t:
        assert np.allclose(t.params, 0.0)


def test_recovers_unmodeled_subpixel_offset():
    # both frames are integer-lattice crops of one texture, so their
    # interpolants agree exactly; the (1.5, -0.75) px error lives in the
    # nominal placement, which the optimizer must absorb
    big = gaussian_smooth(noise_texture(220, 120, seed=13, gain=10.0), 1.0)
    true_off = np.array([1.5, -0.75])
    fa = Raster(big.data[8:104, 4:100].copy())       # texture origin (4, 8)
    fb = Raster(big.data[7:103, 57:153].copy())      # texture origin (57, 7)
    # true relative placement x_a = x_b + (53, -1); nominal misses by true_off
    base = [None, Homography.translation(53.0 - true_off[0], -1.0 - true_off[1])]
    transforms = [SimTransform4(), SimTransform4()]
    canvas = composite([fa, fb], transforms, base_warps=base)
    seams = build_seam_samples(canvas, [fa, fb], transforms, base)
    assert seams
    p = FusionProblem([fa, fb], transforms, seams, beta=1e-4, base_warps=base)
    out_t, c, trace = optimize_alternating(p,
                                           FusionConfig(max_rounds=120, tol=1e-9))
    # gauge-invariant recovered relative map, probed at the overlap center
    xb = np.array([[48.0, 48.0]])
    xa = out_t[0].inverse_apply(out_t[1].apply(base[1].apply(xb)))
    assert np.linalg.norm((xa - xb)[0] - (53.0, -1.0)) < 0.05
    assert trace[-1] <= 0.01 * trace[0]
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_optimize_requires_seams():
    p = _flat_problem(10, 10, [])
    with pytest.raises(NoSeams):
        optimize_alternating(p)


def test_gauge_translation_leaves_seam_errors_unchanged():
    tex = noise_texture(64, 64, seed=17)
    frames = [Raster(tex.data[:, :40].copy()), Raster(tex.data[:, 24:].copy())]
    base = [None, Homography.translation(24.0, 0.0)]
    seams = [SeamSample(float(x), float(y), 0, 1)
             for x in range(25, 39, 3) for y in range(4, 60, 7)]
    t0 = [SimTransform4(0, 0, 0.4, -0.2), SimTransform4(0, 0, -0.3, 0.6)]
    p = FusionProblem(frames, t0, seams, beta=0.0, base_warps=base)
    e_before = [seam_error(p, s, t0) for s in seams]
    shift = np.array([0.9, -1.4])
    t1 = [SimTransform4(0, 0, t.t1 + shift[0], t.t2 + shift[1]) for t in t0]
    seams_shifted = [SeamSample(s.x + shift[0], s.y + shift[1], 0, 1) for s in seams]
    p2 = FusionProblem(frames, t1, seams_shifted, beta=0.0, base_warps=base)
    e_after = [seam_error(p2, s, t1) for s in seams_shifted]
    assert np.allclose(e_before, e_after, atol=1e-9)


def test_c_step_is_contributor_mean():
    fa = Raster(np.full((16, 16, 1), 80.0))
    fb = Raster(np.full((16, 16, 1), 90.0))
    seams = [SeamSample(5.0, 5.0, 0, 1), SeamSample(8.0, 3.0, 0, 1)]
    p = FusionProblem([fa, fb], [SimTransform4(), SimTransform4()], seams, 0.0)
    _, c, _ = optimize_alternating(p, FusionConfig(max_rounds=1))
    assert np.allclose(c, 85.0)


# ---------------------------------------------------------------------------
# composite


def test_composite_single_frame_identity():
    tex = noise_texture(40, 30, seed=19)
    canvas = composite([tex], [SimTransform4()])
    assert canvas.grid.width == 40 and canvas.grid.height == 30
    assert np.allclose(canvas.grid.plane(), tex.plane())
    assert not canvas.seam_mask.any()


def test_composite_two_constant_frames_half_overlap():
    fa = Raster(np.full((20, 30, 1), 64.0))
    fb = Raster(np.full((20, 30, 1), 64.0))
    canvas = composite([fa, fb], [SimTransform4(), SimTransform4(0, 0, 15.0, 0)])
    assert np.allclose(canvas.grid.plane()[:, :45], 64.0)
    # seam = boundary ring of the overlap rectangle (columns 15..29, all rows)
    expect = np.zeros((20, 45), dtype=bool)
    expect[:, 15] = expect[:, 29] = True
    expect[0, 15:30] = expect[19, 15:30] = True
    assert np.array_equal(canvas.seam_mask, expect)


def test_composite_periodic_strip_loop():
    period = 256
    h, w = 48, 64
    ys, xs = np.mgrid[0:h, 0:period].astype(np.float64)
    from endomosaic.synth import fractal_noise
    strip = 60 + 140 * fractal_noise(np.cos(2 * np.pi * xs / period),
                                     ys / h + np.sin(2 * np.pi * xs / period),
                                     key=23, octaves=3)
    frames = []
    transforms = []
    for k in range(8):
        x0 = k * 32
        cols = (np.arange(w) + x0) % period
        frames.append(Raster(strip[:, cols].copy()))
        transforms.append(SimTransform4(0, 0, float(x0), 0.0))
    canvas = composite(frames, transforms)
    grid = canvas.grid.plane()
    covered = canvas.counts > 0
    err = []
    for iy in range(canvas.grid.height):
        for ix in range(canvas.grid.width):
            if covered[iy, ix]:
                gx = int(ix + canvas.origin[0]) % period
                gy = int(iy + canvas.origin[1])
                err.append(abs(grid[iy, ix] - strip[gy, gx]))
    assert err and np.mean(err) < 3.0


def test_composite_empty_input():
    with pytest.raises(EmptyInput):
        composite([], [])


def test_canvas_contributors_listing():
    fa = Raster(np.full((8, 8, 1), 10.0))
    fb = Raster(np.full((8, 8, 1), 20.0))
    canvas = composite([fa, fb], [SimTransform4(), SimTransform4(0, 0, 4.0, 0)])
    assert canvas.contributors_at(5, 3) == [0, 1]
    assert canvas.contributors_at(0, 0) == [0]
