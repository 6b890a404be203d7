"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
All commands are deterministic given the config file and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import chain as chain_mod
from . import detect as detect_mod
from . import fusion as fusion_mod
from . import metrics as metrics_mod
from . import register as register_mod
from . import synth as synth_mod
from . import unfold as unfold_mod
from .calib import undistort_image
from .config import ConfigError, PipelineConfig, default_config, parse_config
from .raster import DecodeError, load_image, save_image, to_gray
from .register import DegenerateConfiguration, Homography
from .unfold import CameraPose, DegenerateRay, ExcludedFace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_DATA_ERRORS = (DecodeError, FileNotFoundError, NotADirectoryError,
                detect_mod.EmptyDataset, chain_mod.InsufficientMatches)
_NUMERIC_ERRORS = (DegenerateConfiguration, chain_mod.NonInvertibleLink,
                   fusion_mod.NoSeams, fusion_mod.EmptyInput,
                   detect_mod.EmptyTrainingSet, DegenerateRay, ExcludedFace,
                   np.linalg.LinAlgError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(args) -> PipelineConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.values["seed"] = args.seed
    return cfg


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    """Generate one scene (frames, poses, truth) and, if configured, a dataset."""
    cfg = _load_config(args)
    spec = cfg.scene_spec()
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)

    pose_lines = []
    for i, pose in enumerate(spec.poses):
        frame, truth = synth_mod.render_frame(spec, i)
        save_image(frame, out / "frames" / f"frame{i:03d}.png")
        detect_mod.write_annotations(out / "frames" / f"frame{i:03d}.txt",
                                     truth.boxes)
        p = pose.position
        r = pose.rotation.ravel()
        pose_lines.append(" ".join(f"{v:.12g}" for v in (*p, *r)))
    _write(out / "poses.txt", "\n".join(pose_lines) + "\n")

    pano, boxes = synth_mod.render_panorama(spec, cfg["synth.pano_face_px"])
    save_image(pano, out / "panorama_truth.png")
    detect_mod.write_annotations(out / "panorama_truth.txt", boxes)

    if cfg["synth.n_scenes"] >= 2:
        counts = synth_mod.make_dataset(spec, cfg["synth.n_scenes"],
                                        cfg["synth.split"], out / "dataset",
                                        aug_sigmas=cfg["synth.aug_sigmas"],
                                        face_px=cfg["synth.pano_face_px"])
        print(f"dataset: {counts['train']} train / {counts['test']} test images")
    print(f"scene written to {out}")
    return EXIT_OK


def _register_pair(gray_a, gray_b, cfg: PipelineConfig, mask=None):
    kps_a = register_mod.detect_keypoints(gray_a, cfg["register.max_keypoints"],
                                          mask=mask)
    kps_b = register_mod.detect_keypoints(gray_b, cfg["register.max_keypoints"],
                                          mask=mask)
    init = register_mod.match_descriptors(kps_a, kps_b, cfg["register.ratio"])
    if len(init) == 0:
        raise DegenerateConfiguration("no initial matches between frames")
    refined, tree = register_mod.refine_matches(gray_a, gray_b, init,
                                                cfg.refine())
    h = register_mod.fit_homography(refined, cfg["register.ransac_thresh"],
                                    cfg["register.ransac_iters"], cfg["seed"])
    return h, refined, tree


def cmd_stitch(args) -> int:
    """Undistort, register, chain-filter, fuse, and composite a frame directory."""
    cfg = _load_config(args)
    frames_dir = Path(args.frames)
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {frames_dir}")
    model = cfg.distortion()
    frames = [to_gray(undistort_image(load_image(p), model)) for p in paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if len(frames) == 1:
        save_image(frames[0], out / "panorama.png")
        _write(out / "loss_trace.txt", "0\n")
        print(f"single frame; panorama written to {out / 'panorama.png'}")
        return EXIT_OK

    from .calib import undistort_valid_mask
    mask = undistort_valid_mask(model, frames[0].width, frames[0].height)

    links = []
    pair_idx = [(i, i + 1) for i in range(len(frames) - 1)]
    pair_idx.append((len(frames) - 1, 0))
    for i, j in pair_idx:
        h, refined, tree = _register_pair(frames[i], frames[j], cfg, mask=mask)
        links.append(chain_mod.ChainLink(h, refined))
        _write(out / f"matches_{i:03d}_{j:03d}.txt",
               register_mod.dump_matches(refined))
        _write(out / f"blocks_{i:03d}_{j:03d}.txt",
               register_mod.dump_patch_tree(tree))

    tchain = chain_mod.TransformChain(links)
    tchain = chain_mod.filter_matches_closed_chain(tchain, cfg["chain.loop_tol"])
    print(f"loop residual after filtering: {chain_mod.loop_residual(tchain):.6g}")

    base_all = [Homography.identity()]
    for link in tchain.links[:-1]:
        base_all.append(base_all[-1].compose(link.h.inverse()))

    # A flat canvas can only hold views that stay in front of the reference
    # frame: placements whose warped corners blow past the size cap (a full
    # orbit necessarily contains some) are left out of the composite.
    keep = []
    cap = cfg["fusion.max_canvas"]
    for k, (img, b) in enumerate(zip(frames, base_all)):
        corners = np.array([[0, 0], [img.width - 1.0, 0], [0, img.height - 1.0],
                            [img.width - 1.0, img.height - 1.0]])
        hc = np.hstack([corners, np.ones((4, 1))]) @ b.h.T
        if (hc[:, 2] <= 1e-9).any():
            continue
        mapped = hc[:, :2] / hc[:, 2:3]
        if np.abs(mapped).max() > cap:
            continue
        keep.append(k)
    if len(keep) < len(frames):
        print(f"compositing {len(keep)}/{len(frames)} frames "
              "(rest face away from the reference view)")
    kept_frames = [frames[k] for k in keep]
    base = [base_all[k] for k in keep]
    deltas = [fusion_mod.SimTransform4() for _ in kept_frames]

    canvas = fusion_mod.composite(kept_frames, deltas, base_warps=base)
    seams = fusion_mod.build_seam_samples(canvas, kept_frames, deltas, base,
                                          cfg["fusion.weight_mode"],
                                          cfg["fusion.feather_margin"])
    trace = [0.0]
    c_vals = None
    c_pos = None
    if seams:
        problem = fusion_mod.FusionProblem(kept_frames, deltas, seams,
                                           cfg["fusion.beta"], base_warps=base)
        deltas, c_vals, trace = fusion_mod.optimize_alternating(problem,
                                                                cfg.fusion())
        c_pos = fusion_mod._unique_seam_pixels(problem)
    final = fusion_mod.composite(kept_frames, deltas, base_warps=base,
                                 c_values=c_vals, c_positions=c_pos)
    save_image(final.grid, out / "panorama.png")
    _write(out / "loss_trace.txt", "".join(f"{v:.9g}\n" for v in trace))
    tf_lines = []
    for k, b, d in zip(keep, base, deltas):
        tf_lines.append(f"{k} " + " ".join(f"{v:.12g}" for v in b.h.ravel())
                        + f" {d.r1:.12g} {d.r2:.12g} {d.t1:.12g} {d.t2:.12g}")
    _write(out / "transforms.txt", "\n".join(tf_lines) + "\n")
    print(f"panorama written to {out / 'panorama.png'} "
          f"(final loss {trace[-1]:.6g})")
    return EXIT_OK


def _read_poses(path) -> list:
    poses = []
    with open(path) as f:
        for line in f:
            vals = [float(t) for t in line.split()]
            if len(vals) != 12:
                raise DecodeError(f"pose line needs 12 numbers, got {len(vals)}")
            poses.append(CameraPose(np.array(vals[:3]),
                                    np.array(vals[3:]).reshape(3, 3)))
    return poses


def cmd_unfold(args) -> int:
    """Bake captured frames onto the cavity model and unfold the atlas."""
    cfg = _load_config(args)
    frames_dir = Path(args.frames)
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {frames_dir}")
    frames = [to_gray(load_image(p)) for p in paths]
    poses = _read_poses(args.poses)
    if len(poses) != len(frames):
        raise DecodeError(f"{len(poses)} poses for {len(frames)} frames")
    geom = cfg.geometry()
    layout = unfold_mod.default_layout(geom, cfg["unfold.face_px"])
    atlas = unfold_mod.bake_atlas(geom, layout, poses, frames, cfg.distortion())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(atlas.raster, out / "atlas.png")
    _write(out / "layout.txt", layout.manifest())
    print(f"atlas written to {out / 'atlas.png'}")
    return EXIT_OK


def _dataset_samples(directory):
    samples = detect_mod.load_dataset(directory)
    return [(to_gray(img), boxes) for img, boxes in samples]


def cmd_train(args) -> int:
    """Train the detector on a dataset directory and save the model."""
    cfg = _load_config(args)
    dataset = _dataset_samples(args.dataset)
    model = detect_mod.TinyDetector(cfg.detector_spec())
    curve = detect_mod.train(model, dataset, cfg.train_config())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    _write(str(args.out) + ".loss.txt", "".join(f"{v:.9g}\n" for v in curve))
    print(f"model written to {args.out} "
          f"(loss {curve[0]:.4g} -> {curve[-1]:.4g} over {len(curve)} steps)")
    return EXIT_OK


def cmd_detect(args) -> int:
    """Run a trained model on one image; emit detections as JSON."""
    cfg = _load_config(args)
    model = detect_mod.TinyDetector.load(args.model)
    img = to_gray(load_image(args.image))
    dets = detect_mod.infer(model, img, cfg["detect.conf_thresh"],
                            cfg["detect.nms_iou"])
    payload = detect_mod.detections_to_json(dets)
    if args.out:
        _write(args.out, payload)
    else:
        print(payload, end="")
    print(f"{len(dets)} detections", file=sys.stderr)
    return EXIT_OK


def _read_transforms(path):
    """Lines of: frame_index, 3x3 base warp (row major), 4-DOF refinement."""
    idx, base, deltas = [], [], []
    with open(path) as f:
        for line in f:
            vals = [float(t) for t in line.split()]
            if len(vals) != 14:
                raise DecodeError("transform line needs 14 numbers")
            idx.append(int(vals[0]))
            base.append(Homography(np.array(vals[1:10]).reshape(3, 3)))
            deltas.append(fusion_mod.SimTransform4(*vals[10:]))
    return idx, base, deltas


def cmd_eval(args) -> int:
    """Evaluate whatever artifact groups were supplied; emit one report."""
    cfg = _load_config(args)
    report = metrics_mod.EvalReport()

    if args.dataset and args.model:
        model = detect_mod.TinyDetector.load(args.model)
        samples = _dataset_samples(args.dataset)
        dets = [detect_mod.infer(model, img, cfg["detect.conf_thresh"],
                                 cfg["detect.nms_iou"])
                for img, _ in samples]
        gts = [boxes for _, boxes in samples]
        det_report = metrics_mod.detection_report(dets, gts,
                                                  iou_thresh=cfg["detect.pos_iou"])
        report.metrics.update(det_report.metrics)
        report.per_region.update(det_report.per_region)

    if args.frames and args.transforms:
        model_d = cfg.distortion()
        paths = sorted(Path(args.frames).glob("*.png"))
        idx, base, deltas = _read_transforms(args.transforms)
        if idx and max(idx) >= len(paths):
            raise DecodeError(f"transform frame index {max(idx)} out of range "
                              f"for {len(paths)} frames")
        frames = [to_gray(undistort_image(load_image(paths[k]), model_d))
                  for k in idx]
        canvas = fusion_mod.composite(frames, deltas, base_warps=base)
        tme = metrics_mod.texture_metric_error(canvas, frames, deltas, base)
        report.metrics["texture_metric_error"] = tme

    if args.pair:
        a = to_gray(load_image(args.pair[0]))
        b = to_gray(load_image(args.pair[1]))
        h_fwd, matches, _ = _register_pair(a, b, cfg)
        h_bwd, _, _ = _register_pair(b, a, cfg)
        thresholds = [1, 2, 3, 5, 10]
        counts = metrics_mod.fb_curve(matches, h_fwd, h_bwd, thresholds)
        for t, c in zip(thresholds, counts):
            report.metrics[f"fb_below_{t}px"] = float(c)
        report.metrics["fb_matches"] = float(matches.n_valid)

    if not report.metrics and not report.per_region:
        raise SystemExit(EXIT_USAGE)
    if args.out:
        _write(str(args.out) + ".json", report.to_json())
        _write(str(args.out) + ".txt", report.to_table())
        print(f"report written to {args.out}.json / .txt")
    else:
        print(report.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="endomosaic",
                description="cavity panorama reconstruction and lesion detection")
    p.add_argument("--config", help="pipeline config file (flat key = value)")
    p.add_argument("--seed", type=int, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene and dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("stitch", help="build a panorama from a frame directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_stitch)

    s = sub.add_parser("unfold", help="bake frames onto the cavity atlas")
    s.add_argument("--frames", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_unfold)

    s = sub.add_parser("train", help="train the lesion detector")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("detect", help="run the detector on one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("eval", help="compute evaluation metrics")
    s.add_argument("--dataset", help="detection dataset directory")
    s.add_argument("--model", help="trained model for detection metrics")
    s.add_argument("--frames", help="frame directory for the texture metric")
    s.add_argument("--transforms", help="transforms file from stitch")
    s.add_argument("--pair", nargs=2, help="two frames for an FB error curve")
    s.add_argument("--out", help="report path prefix")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
