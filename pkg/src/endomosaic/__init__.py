"""Cavity-interior panorama reconstruction and lesion detection toolkit."""

from .raster import Raster, load_image, save_image, sample_bilinear, to_gray, gaussian_smooth
from .calib import DistortionModel, distort_point, undistort_image
from .register import (Homography, Keypoint, MatchSet, PatchNode, RefineConfig,
                       detect_keypoints, match_descriptors, fit_homography,
                       kl_patch_similarity, refine_matches)
from .chain import TransformChain, ChainLink, loop_residual, filter_matches_closed_chain
from .fusion import (SimTransform4, SeamSample, FusionProblem, FusionConfig, Canvas,
                     apply_sim4, seam_error, eloss, optimize_alternating,
                     composite, build_seam_samples)
from .unfold import (DoubleCube, SurfacePoint, Atlas, AtlasLayout, CameraPose,
                     default_layout, surface_to_atlas, atlas_to_surface,
                     ray_to_surface, bake_atlas, look_at)
from .detect import (Box, Detection, AnchorSet, TinyDetector, DetectorSpec,
                     TrainConfig, iou, make_anchors, match_anchors,
                     selective_negatives, detector_loss, train, infer)
from .synth import SceneSpec, Polyp, render_frame, render_panorama, make_dataset
from .metrics import (EvalReport, texture_metric_error, fb_error, fb_curve,
                      detection_report)
from .config import PipelineConfig, parse_config, default_config

__version__ = "0.1.0"
