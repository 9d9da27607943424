"""Weak-perspective camera model: Euler rotations, projection, closed-form
pose solving from correspondences, and coarse-to-fine pose estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (INNER, LANDMARK_COUNT, SILHOUETTE_LEFT, SILHOUETTE_MIDDLE,
                    SILHOUETTE_RIGHT, FaceParams, ModelBasis, landmarks_of)

# Camera convention: R = Rz(roll) @ Ry(yaw) @ Rx(pitch), camera looks down -z,
# image y down.  Positive yaw turns the nose toward image +x and hides the
# right silhouette (landmarks 11-17).
VISIBILITY_YAW_THRESHOLD = math.radians(15.0)


class DegenerateConfigurationError(ValueError):
    """Correspondences are rank-deficient or otherwise unsolvable."""


def _wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.remainder(float(a), math.tau)
    return math.pi if a <= -math.pi else a


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """Proper rotation Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cr, sr = math.cos(roll), math.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def euler_from_rotation(rotation: np.ndarray) -> tuple[float, float, float]:
    """Invert rotation_from_euler.  Yaw is returned in [-pi/2, pi/2]; at
    gimbal lock (|yaw| = pi/2) the pitch/roll split is not unique."""
    r = np.asarray(rotation, dtype=np.float64)
    yaw = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    pitch = math.atan2(r[2, 1], r[2, 2])
    roll = math.atan2(r[1, 0], r[0, 0])
    return pitch, yaw, roll


@dataclass(eq=False)
class Pose:
    """Weak-perspective pose: uniform scale (px/mm), Euler angles, 2D image
    translation, and the auxiliary 3D offset aligning detected 3D landmarks
    with the scaled-rotated model (used by the 3D alignment energy)."""

    scale: float
    angles: np.ndarray                       # (pitch, yaw, roll), radians
    translation: np.ndarray                  # (2,), pixels
    depth_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scale = float(self.scale)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be finite and strictly positive")
        angles = np.asarray(self.angles, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(angles)):
            raise ValueError("angles must be finite")
        self.angles = np.array([_wrap_angle(a) for a in angles])
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        self.depth_offset = np.asarray(self.depth_offset, dtype=np.float64).reshape(3)

    @property
    def pitch(self) -> float:
        return float(self.angles[0])

    @property
    def yaw(self) -> float:
        return float(self.angles[1])

    @property
    def roll(self) -> float:
        return float(self.angles[2])

    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.pitch, self.yaw, self.roll)


@dataclass(eq=False)
class LandmarkSet:
    """Detected 68-point 2D and 3D landmarks.  3D points carry image-aligned
    x, y in pixels and a relative depth z in pixels."""

    points_2d: np.ndarray  # (68, 2)
    points_3d: np.ndarray  # (68, 3)

    # semantic silhouette partition (1-based numbering 1-9 / 10 / 11-17)
    silhouette_left = SILHOUETTE_LEFT
    silhouette_middle = SILHOUETTE_MIDDLE
    silhouette_right = SILHOUETTE_RIGHT
    inner = INNER

    def __post_init__(self):
        self.points_2d = np.asarray(self.points_2d, dtype=np.float64)
        self.points_3d = np.asarray(self.points_3d, dtype=np.float64)
        if self.points_2d.shape != (LANDMARK_COUNT, 2):
            raise ValueError(
                f"points_2d must be ({LANDMARK_COUNT}, 2), got {self.points_2d.shape}")
        if self.points_3d.shape != (LANDMARK_COUNT, 3):
            raise ValueError(
                f"points_3d must be ({LANDMARK_COUNT}, 3), got {self.points_3d.shape}")
        if not np.all(np.isfinite(self.points_2d)):
            raise ValueError("points_2d contains non-finite values")
        if not np.all(np.isfinite(self.points_3d)):
            raise ValueError("points_3d contains non-finite values")


def project(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Weak-perspective projection s * (R p)_xy + t for one point or (N, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pose.scale * (pts @ pose.rotation().T)
    return cam[..., :2] + pose.translation


def to_camera_frame(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Scaled, rotated 3D positions s * R p (before the orthographic drop)."""
    pts = np.asarray(points, dtype=np.float64)
    return pose.scale * (pts @ pose.rotation().T)


def solve_pose_weak_perspective(model_points: np.ndarray,
                                image_points: np.ndarray) -> Pose:
    """Closed-form least-squares (s, R, t) from 3D-2D correspondences.

    Centroid-subtracts both sets, solves the 2x3 affine map, recovers the
    scale as the mean singular value, and lifts the affine rows to a proper
    rotation via orthonormal completion and SVD projection onto SO(3).
    """
    x = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(image_points, dtype=np.float64).reshape(-1, 2)
    if x.shape[0] != y.shape[0]:
        raise ValueError("model and image point counts differ")
    if x.shape[0] < 4:
        raise DegenerateConfigurationError("need at least 4 correspondences")

    cm = x.mean(axis=0)
    ci = y.mean(axis=0)
    xc = x - cm
    yc = y - ci

    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] == 0.0 or sv[2] < 1e-8 * sv[0]:
        raise DegenerateConfigurationError("model points are (near-)coplanar")

    m, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    affine = m.T  # (2, 3), approximately s * R[:2]

    u, s, vt = np.linalg.svd(affine, full_matrices=False)
    scale = float(s.mean())
    if not math.isfinite(scale) or scale < 1e-10:
        raise DegenerateConfigurationError("zero-scale solution; image points degenerate")

    rows = u @ vt  # closest orthonormal-row 2x3 matrix
    r0 = np.vstack([rows, np.cross(rows[0], rows[1])])
    ur, _, vtr = np.linalg.svd(r0)
    rot = ur @ np.diag([1.0, 1.0, float(np.linalg.det(ur @ vtr))]) @ vtr

    pitch, yaw, roll = euler_from_rotation(rot)
    t = ci - scale * (rot @ cm)[:2]
    return Pose(scale=scale, angles=(pitch, yaw, roll), translation=t)


def hybrid_image_points(lm: LandmarkSet, yaw: float,
                        threshold: float = VISIBILITY_YAW_THRESHOLD) -> np.ndarray:
    """2D targets with the invisible-side silhouette replaced by the (x, y)
    of the detected 3D landmarks.  No replacement at |yaw| <= threshold."""
    pts = np.array(lm.points_2d)
    if abs(yaw) > threshold:
        side = SILHOUETTE_RIGHT if yaw > 0 else SILHOUETTE_LEFT
        pts[side] = lm.points_3d[side, :2]
    return pts


def initial_depth_offset(pose: Pose, model_landmarks: np.ndarray,
                         detected_3d: np.ndarray) -> np.ndarray:
    """Centroid-alignment initialization of the auxiliary 3D offset."""
    cam = to_camera_frame(pose, model_landmarks)
    return cam.mean(axis=0) - np.asarray(detected_3d, dtype=np.float64).mean(axis=0)


def coarse_pose(basis: ModelBasis, lm: LandmarkSet) -> Pose:
    """Initial pose from the better of the two silhouette-side subsets.

    Solves the pose once over {left silhouette + inner} and once over
    {right silhouette + inner} mean-face landmarks, and keeps whichever has
    the larger |yaw|; ties go to the right-side solution.  The chin middle
    joins neither subset.
    """
    mean_pts = landmarks_of(basis, FaceParams.zeros(basis))
    left = np.concatenate([SILHOUETTE_LEFT, INNER])
    right = np.concatenate([SILHOUETTE_RIGHT, INNER])
    pose_l = solve_pose_weak_perspective(mean_pts[left], lm.points_2d[left])
    pose_r = solve_pose_weak_perspective(mean_pts[right], lm.points_2d[right])
    return pose_l if abs(pose_l.yaw) > abs(pose_r.yaw) else pose_r


def refine_pose(basis: ModelBasis, lm: LandmarkSet, coarse: Pose) -> Pose:
    """Re-solve the pose on all 68 points after replacing the occluded-side
    2D silhouette with 3D landmark positions, and initialize the 3D offset."""
    mean_pts = landmarks_of(basis, FaceParams.zeros(basis))
    targets = hybrid_image_points(lm, coarse.yaw)
    refined = solve_pose_weak_perspective(mean_pts, targets)
    offset = initial_depth_offset(refined, mean_pts, lm.points_3d)
    return replace(refined, depth_offset=offset)
