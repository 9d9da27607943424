"""Landmark-driven 3D morphable face model fitting.

Reconstructs face geometry from precomputed 2D and 3D landmark sets via
joint 2D/3D nonlinear least squares with coarse-to-fine pose estimation and
pose-adaptive re-weighting, plus a synthetic benchmark harness.
"""

from .evaluation import (AlignmentResult, BenchmarkResult, DegenerateCloudError,
                         EvaluationResult, NoiseModel, SyntheticCase, crop_face,
                         evaluate_reconstruction, icp_align, make_synthetic_case,
                         read_ablation_csv, rmse_3d, run_ablation_benchmark,
                         write_ablation_csv)
from .fitting import (VARIANTS, FitReport, IterationStats, WeightConfig,
                      adaptive_weights, energy_2d, energy_3d, fit, fit_variant,
                      prior_energy, stacked_jacobian, stacked_residual)
from .io import (LandmarkFormatError, export_obj, load_fit_report, load_landmarks,
                 load_params, read_obj, save_fit_report, save_landmarks,
                 save_params)
from .model import (INNER, LANDMARK_COUNT, SILHOUETTE, SILHOUETTE_LEFT,
                    SILHOUETTE_MIDDLE, SILHOUETTE_RIGHT, FaceParams, Mesh,
                    ModelBasis, ModelFormatError, generate_synthetic_basis,
                    landmarks_of, load_model, save_model, synthesize)
from .pose import (VISIBILITY_YAW_THRESHOLD, DegenerateConfigurationError,
                   LandmarkSet, Pose, coarse_pose, euler_from_rotation,
                   hybrid_image_points, initial_depth_offset, project,
                   refine_pose, rotation_from_euler, solve_pose_weak_perspective,
                   to_camera_frame)

__version__ = "0.1.0"
