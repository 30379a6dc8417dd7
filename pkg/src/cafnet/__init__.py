"""Radar-camera depth estimation with confidence-aware gated fusion, on synthetic scenes."""
from .confidence import GtConfig, build_confidence_gt, build_radar_image, classify_points, region_for_point
from .errors import CafnetError, ConfigError, DataError, ManifestError, NumericError
from .losses import (LossBreakdown, MetricsReport, compute_metrics, confidence_loss, depth_loss,
                     smoothness_loss, total_loss)
from .model import CaFNet, ModelConfig, cagf_fuse, refine
from .scene import (BBox3D, CameraIntrinsics, Frame, Pose, RadarPoint, SceneConfig, accumulate_depth,
                    densify_depth, generate_dataset, generate_scene, project_points)

__version__ = "0.1.0"
