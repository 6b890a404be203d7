import numpy as np
import pytest

from endomosaic.detect import Box, Detection
from endomosaic.fusion import NoSeams, SimTransform4, composite
from endomosaic.metrics import (EvalReport, detection_report, fb_curve,
                                fb_error, fb_errors, texture_metric_error)
from endomosaic.raster import Raster, gaussian_smooth
from endomosaic.register import Homography
from endomosaic.synth import noise_texture


# ---------------------------------------------------------------------------
# texture metric error


def _two_crop_mosaic(offset_into_frame2=0.0, linear=False):
    if linear:
        ys, xs = np.mgrid[0:64, 0:96].astype(np.float64)
        tex = Raster(0.8 * xs + 1.1 * ys + 40.0)
    else:
        tex = gaussian_smooth(noise_texture(96, 64, seed=31), 1.0)
    fa = Raster(tex.data[:, :56].copy())
    fb_data = tex.data[:, 40:].copy()
    if offset_into_frame2:
        fb_data = fb_data + offset_into_frame2
    fb = Raster(fb_data)
    transforms = [SimTransform4(), SimTransform4(0, 0, 40.0, 0.0)]
    canvas = composite([fa, fb], transforms)
    return canvas, [fa, fb], transforms


def test_tme_zero_on_perfect_mosaic():
    # a linear ramp makes value AND gradient agreement exact at every seam
    # pixel, including frame-edge pixels where the stencil is one-sided
    canvas, frames, transforms = _two_crop_mosaic(linear=True)
    assert texture_metric_error(canvas, frames, transforms) == \
        pytest.approx(0.0, abs=1e-12)


def test_tme_near_zero_on_textured_perfect_mosaic():
    # at a frame's own coverage edge the gradient is one-sided, so curved
    # texture leaves a small residual even when all values agree exactly
    canvas, frames, transforms = _two_crop_mosaic()
    assert texture_metric_error(canvas, frames, transforms) < 0.01


def test_tme_constant_offset_analytic():
    fa = Raster(np.full((20, 40, 1), 100.0))
    fb = Raster(np.full((20, 40, 1), 125.5))
    transforms = [SimTransform4(), SimTransform4(0, 0, 20.0, 0.0)]
    canvas = composite([fa, fb], transforms)
    # equal (zero) gradients; intensity differs by 25.5 -> 0.5 * 25.5/255
    assert texture_metric_error(canvas, [fa, fb], transforms) == \
        pytest.approx(0.05, abs=1e-12)


def test_tme_strictly_increases_with_contributor_offset():
    for linear in (True, False):
        canvas, frames, transforms = _two_crop_mosaic(linear=linear)
        base = texture_metric_error(canvas, frames, transforms)
        canvas2, frames2, transforms2 = _two_crop_mosaic(
            offset_into_frame2=10.0, linear=linear)
        shifted = texture_metric_error(canvas2, frames2, transforms2)
        assert shifted > base
        if linear:
            assert shifted == pytest.approx(base + 0.5 * 10.0 / 255.0, abs=1e-12)


def test_tme_matches_independent_summation():
    rng = np.random.default_rng(33)
    tex = gaussian_smooth(noise_texture(80, 60, seed=7), 1.0)
    fa = Raster(tex.data[:, :48].copy())
    fb = Raster((tex.data[:, 32:] + rng.normal(0, 3, (60, 48, 1))).clip(0, 255))
    transforms = [SimTransform4(), SimTransform4(0, 0, 32.0, 0.0)]
    canvas = composite([fa, fb], transforms)
    got = texture_metric_error(canvas, [fa, fb], transforms)

    # independent scalar re-evaluation over the seam mask
    from endomosaic.raster import bilinear_with_grad
    ys, xs = np.nonzero(canvas.seam_mask)
    terms = []
    for x, y in zip(xs, ys):
        contributors = canvas.contributors_at(x, y)
        if len(contributors) < 2:
            continue
        gx = x + canvas.origin[0]
        gy = y + canvas.origin[1]
        vals = {}
        for k in contributors:
            t = transforms[k]
            fx, fy = gx - t.t1, gy - t.t2
            v, dx, dy, inb = bilinear_with_grad(
                [fa, fb][k].plane(), np.array([fx]), np.array([fy]))
            if inb[0]:
                vals[k] = (v[0], np.hypot(dx[0], dy[0]))
        ks = sorted(vals)
        pair_terms = []
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                va, ga = vals[ks[a]]
                vb, gb = vals[ks[b]]
                pair_terms.append(0.5 * abs(va - vb) / 255
                                  + 0.5 * abs(ga - gb) / 255)
        if pair_terms:
            terms.append(np.mean(pair_terms))
    assert got == pytest.approx(np.mean(terms), rel=1e-12)


def test_tme_requires_seams():
    img = noise_texture(32, 32, seed=1)
    canvas = composite([img], [SimTransform4()])
    with pytest.raises(NoSeams):
        texture_metric_error(canvas, [img], [SimTransform4()])


def test_tme_in_unit_range_on_random_mosaics():
    for seed in (1, 2, 3):
        rng = np.random.default_rng(seed)
        tex = noise_texture(64, 48, seed=seed)
        fa = Raster(tex.data[:, :40].copy())
        fb = Raster(rng.uniform(0, 255, (48, 40, 1)))
        transforms = [SimTransform4(), SimTransform4(0, 0, 24.0, 0.0)]
        canvas = composite([fa, fb], transforms)
        v = texture_metric_error(canvas, [fa, fb], transforms)
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# forward-backward error


def test_fb_error_exact_inverse_is_zero():
    h = Homography(np.array([[1.1, 0.02, 5.0], [-0.03, 0.95, -2.0],
                             [1e-4, -5e-5, 1.0]]))
    assert fb_error((10.0, 20.0), h, h.inverse()) == pytest.approx(0.0, abs=1e-9)


def test_fb_error_composed_translations():
    h_f = Homography.translation(2.0, 0.0)
    h_b = Homography.translation(-1.0, 0.0)
    assert fb_error((7.0, 3.0), h_f, h_b) == pytest.approx(1.0)


def test_fb_error_matches_matrix_composition_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m1 = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        m2 = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        h_f, h_b = Homography(m1), Homography(m2)
        p = rng.uniform(0, 100, 2)
        q = h_b.h @ (h_f.h @ [p[0], p[1], 1.0])
        q = q[:2] / q[2]
        assert fb_error(p, h_f, h_b) == pytest.approx(np.linalg.norm(q - p),
                                                      abs=1e-9)


def test_fb_curve_bounds_and_counts():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 200, (50, 2))
    h_f = Homography.translation(2.0, 0.0)
    h_b = Homography.translation(-1.5, 0.0)  # every FB error is exactly 0.5
    counts = fb_curve(pts, h_f, h_b, [0.0, 0.25, 0.75, np.inf])
    assert counts.tolist() == [0, 0, 50, 50]
    errs = fb_errors(pts, h_f, h_b)
    for t in (0.1, 0.4, 0.6):
        assert fb_curve(pts, h_f, h_b, [t])[0] == int((errs < t).sum())
    # monotone non-decreasing
    many = fb_curve(pts, h_f, h_b, np.linspace(0, 2, 21))
    assert (np.diff(many) >= 0).all()


# ---------------------------------------------------------------------------
# detection report


def _grid_boxes(n, size=10.0, gap=5.0):
    boxes = []
    per_row = 10
    for i in range(n):
        x = (i % per_row) * (size + gap)
        y = (i // per_row) * (size + gap)
        boxes.append(Box(x, y, x + size, y + size))
    return boxes


def test_report_perfect_detection_recall_one():
    gts = _grid_boxes(12)
    dets = [Detection(b, 0.9) for b in gts]
    rep = detection_report([dets], [gts])
    assert rep.metrics["recall"] == 1.0
    assert rep.metrics["accuracy"] == 1.0


def test_report_angularis_row_arithmetic():
    # 56 lesions all found, plus 2 false alarms among 58 emitted detections
    gts = _grid_boxes(56)
    dets = [Detection(b, 0.9) for b in gts]
    dets += [Detection(Box(1000 + i * 40, 1000, 1010 + i * 40, 1010), 0.8)
             for i in range(2)]
    rep = detection_report([dets], [gts])
    assert rep.metrics["recall"] == 1.0
    assert rep.metrics["accuracy"] == pytest.approx(56 / 58)
    assert f"{100 * rep.metrics['accuracy']:.1f}" == "96.6"  # 96.55 rounds up


def test_report_antrum_row_arithmetic():
    gts = _grid_boxes(67)
    dets = [Detection(b, 0.9) for b in gts]
    dets += [Detection(Box(1000 + i * 40, 1000, 1012 + i * 40, 1012), 0.7)
             for i in range(4)]
    rep = detection_report([dets], [gts])
    assert rep.metrics["accuracy"] == pytest.approx(67 / 71)
    assert abs(rep.metrics["accuracy"] - 0.944) < 6e-4


def test_report_per_region_breakdown():
    regions = ["angularis", "antrum", "body"]
    gts_all = [_grid_boxes(3), _grid_boxes(4), _grid_boxes(2)]
    dets_all = [[Detection(b, 0.9) for b in gts] for gts in gts_all]
    dets_all[1] = dets_all[1][:3]  # one missed in antrum
    rep = detection_report(dets_all, gts_all, regions)
    assert rep.per_region["angularis"]["recall"] == 1.0
    assert rep.per_region["antrum"]["recall"] == pytest.approx(3 / 4)
    assert rep.metrics["recall"] == pytest.approx(8 / 9)
    table = rep.to_table()
    assert "angularis" in table and "antrum" in table


def test_report_image_order_permutation_invariant():
    gts_all = [_grid_boxes(3), _grid_boxes(5), []]
    dets_all = [[Detection(b, 0.6) for b in g[:2]] for g in gts_all]
    a = detection_report(dets_all, gts_all)
    b = detection_report(dets_all[::-1], gts_all[::-1])
    assert a.metrics == b.metrics


def test_report_greedy_matching_prefers_confident_detection():
    gt = [Box(0, 0, 10, 10)]
    good = Detection(Box(0, 0, 10, 10), 0.9)
    also = Detection(Box(1, 1, 11, 11), 0.95)  # higher confidence claims the gt
    rep = detection_report([[good, also]], [gt])
    assert rep.metrics["matched"] == 1.0
    assert rep.metrics["accuracy"] == 0.5


def test_report_zero_detections_defined():
    rep = detection_report([[]], [[Box(0, 0, 5, 5)]])
    assert rep.metrics["recall"] == 0.0
    assert rep.metrics["accuracy"] == 0.0
    rep2 = detection_report([[]], [[]])
    assert rep2.metrics["accuracy"] == 1.0


def test_report_json_round_trip():
    import json

    rep = EvalReport({"recall": 1.0}, {"all": {"gts": 1, "detections": 1,
                                               "matched": 1, "recall": 1.0,
                                               "accuracy": 1.0}})
    parsed = json.loads(rep.to_json())
    assert parsed["metrics"]["recall"] == 1.0
