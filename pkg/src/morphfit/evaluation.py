"""Reconstruction scoring (ICP alignment, nose-centered crop, 3D RMSE) and
the synthetic ablation benchmark harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fitting import VARIANTS, FitReport, WeightConfig, fit_variant
from .model import (SILHOUETTE_LEFT, SILHOUETTE_RIGHT, FaceParams, Mesh,
                    ModelBasis, generate_synthetic_basis, landmarks_of,
                    synthesize)
from .pose import (VISIBILITY_YAW_THRESHOLD, LandmarkSet, Pose, project,
                   to_camera_frame)

CSV_HEADER = ["case", "seed", "yaw_deg", "variant", "rmse_mm", "iters", "converged"]


class DegenerateCloudError(ValueError):
    """Point cloud has rank < 3; rigid alignment is ill-posed."""


@dataclass(eq=False)
class AlignmentResult:
    """Rigid transform mapping the source cloud onto the target."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,), mm
    residual_mm: float       # RMS nearest-neighbor distance after alignment
    iterations: int

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def _vertices_of(obj) -> np.ndarray:
    if isinstance(obj, Mesh):
        return obj.vertices
    return np.asarray(obj, dtype=np.float64).reshape(-1, 3)


def _check_cloud(points: np.ndarray, name: str) -> None:
    if points.shape[0] == 0:
        raise DegenerateCloudError(f"{name} cloud is empty")
    if points.shape[0] < 3:
        raise DegenerateCloudError(f"{name} cloud has rank < 3")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] == 0.0 or sv[2] < 1e-9 * sv[0]:
        raise DegenerateCloudError(f"{name} cloud has rank < 3")


def _rigid_from_pairs(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form proper rigid transform minimizing ||R s + t - target||^2."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.diag([1.0, 1.0, float(np.linalg.det(vt.T @ u.T))])
    rot = vt.T @ d @ u.T
    return rot, ct - rot @ cs


def icp_align(source, target, max_iters: int = 50, tol: float = 1e-10) -> AlignmentResult:
    """Point-to-point ICP with nearest-vertex correspondences.

    Stops at max_iters or when the RMS residual improves by less than tol;
    the residual is non-increasing across iterations.
    """
    src = _vertices_of(source)
    tgt = _vertices_of(target)
    _check_cloud(src, "source")
    _check_cloud(tgt, "target")

    tree = cKDTree(tgt)
    rot_total = np.eye(3)
    t_total = np.zeros(3)
    current = np.array(src)
    previous = math.inf
    residual = previous
    iterations = 0
    for iterations in range(1, max_iters + 1):
        _, idx = tree.query(current)
        rot, t = _rigid_from_pairs(current, tgt[idx])
        current = current @ rot.T + t
        rot_total = rot @ rot_total
        t_total = rot @ t_total + t
        dists, _ = tree.query(current)
        residual = float(np.sqrt(np.mean(dists ** 2)))
        if residual == 0.0 or previous - residual < tol:
            break
        previous = residual
    return AlignmentResult(rotation=rot_total, translation=t_total,
                           residual_mm=residual, iterations=iterations)


def crop_face(vertices, nose_tip_index: int, radius: float = 85.0) -> np.ndarray:
    """Indices of vertices within the closed ball around the nose tip vertex."""
    verts = _vertices_of(vertices)
    if not 0 <= nose_tip_index < verts.shape[0]:
        raise ValueError(f"nose tip index {nose_tip_index} out of range")
    dists = np.linalg.norm(verts - verts[nose_tip_index], axis=1)
    keep = np.nonzero(dists <= radius)[0]
    if keep.size == 0:
        raise ValueError("crop produced no vertices")
    return keep


def rmse_3d(reconstructed, ground_truth) -> float:
    """Root-mean-square nearest-vertex distance from the (cropped) aligned
    reconstruction to the ground-truth surface."""
    recon = _vertices_of(reconstructed)
    truth = _vertices_of(ground_truth)
    if recon.shape[0] == 0 or truth.shape[0] == 0:
        raise ValueError("rmse_3d requires non-empty point sets")
    dists, _ = cKDTree(truth).query(recon)
    return float(np.sqrt(np.mean(dists ** 2)))


@dataclass(eq=False)
class EvaluationResult:
    rmse_mm: float
    alignment: AlignmentResult
    cropped_indices: np.ndarray
    per_vertex_mm: np.ndarray


def evaluate_reconstruction(reconstruction, ground_truth, nose_tip_index: int,
                            radius: float = 85.0, max_iters: int = 50,
                            tol: float = 1e-10) -> EvaluationResult:
    """ICP-align the reconstruction to ground truth, crop around the nose
    tip, and score the cropped vertices against the full ground truth."""
    recon = _vertices_of(reconstruction)
    truth = _vertices_of(ground_truth)
    alignment = icp_align(recon, truth, max_iters=max_iters, tol=tol)
    aligned = alignment.apply(recon)
    keep = crop_face(aligned, nose_tip_index, radius)
    dists, _ = cKDTree(truth).query(aligned[keep])
    return EvaluationResult(rmse_mm=float(np.sqrt(np.mean(dists ** 2))),
                            alignment=alignment, cropped_indices=keep,
                            per_vertex_mm=dists)


# --- synthetic benchmark -------------------------------------------------------

@dataclass
class NoiseModel:
    """Landmark corruption for synthetic cases.

    sigma_2d / sigma_3d: isotropic Gaussian noise (px) on the detected 2D and
    3D landmark coordinates; sigma_depth: extra Gaussian noise on the 3D
    landmark depth channel; silhouette_px: half-range of uniform corruption
    added to the occluded-side 2D silhouette (applied only when the true yaw
    exceeds the visibility threshold).
    """

    sigma_2d: float = 1.0
    sigma_3d: float = 1.0
    sigma_depth: float = 2.0
    silhouette_px: float = 30.0

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(eq=False)
class SyntheticCase:
    """One generated benchmark instance: model, ground truth, and detections."""

    basis: ModelBasis
    true_params: FaceParams
    true_pose: Pose
    truth_mesh: Mesh
    landmarks: LandmarkSet
    yaw_deg: float
    seed: int


def make_synthetic_case(seed: int, yaw_range_deg: tuple[float, float] = (-80.0, 80.0),
                        noise: NoiseModel | None = None, num_vertices: int = 2000,
                        num_shape: int = 40, num_expr: int = 10,
                        basis: ModelBasis | None = None) -> SyntheticCase:
    """Sample a face from the basis prior, pose it, and render landmarks.

    Detected 3D landmarks are image-aligned: x, y match the projected pixel
    positions and z is a relative depth with an arbitrary per-case shift, so
    the true auxiliary offset t' is minus that shift stacked on the image
    translation.
    """
    rng = np.random.default_rng(seed)
    if basis is None:
        basis = generate_synthetic_basis(seed, num_vertices=num_vertices,
                                         num_shape=num_shape, num_expr=num_expr)
    alpha = rng.normal(size=basis.num_shape) * np.sqrt(basis.shape_eigenvalues)
    beta = rng.normal(size=basis.num_expr) * np.sqrt(basis.expr_eigenvalues)
    params = FaceParams(alpha, beta)

    yaw_deg = float(rng.uniform(*yaw_range_deg))
    pitch, roll = np.deg2rad(rng.uniform(-8.0, 8.0, size=2))
    yaw = math.radians(yaw_deg)
    scale = float(rng.uniform(1.6, 2.4))
    translation = rng.uniform(250.0, 350.0, size=2)
    depth_shift = float(rng.uniform(-40.0, 40.0))
    shift3 = np.array([translation[0], translation[1], depth_shift])
    pose = Pose(scale=scale, angles=(pitch, yaw, roll), translation=translation,
                depth_offset=-shift3)

    truth_mesh = synthesize(basis, params)
    lm_pts = truth_mesh.vertices[basis.landmark_indices]
    pts_2d = project(pose, lm_pts)
    pts_3d = to_camera_frame(pose, lm_pts) + shift3

    noise = noise or NoiseModel.noiseless()
    if noise.sigma_2d > 0:
        pts_2d = pts_2d + rng.normal(0.0, noise.sigma_2d, size=pts_2d.shape)
    if noise.silhouette_px > 0 and abs(yaw) > VISIBILITY_YAW_THRESHOLD:
        side = SILHOUETTE_RIGHT if yaw > 0 else SILHOUETTE_LEFT
        pts_2d[side] += rng.uniform(-noise.silhouette_px, noise.silhouette_px,
                                    size=(side.size, 2))
    if noise.sigma_3d > 0:
        pts_3d = pts_3d + rng.normal(0.0, noise.sigma_3d, size=pts_3d.shape)
    if noise.sigma_depth > 0:
        pts_3d[:, 2] += rng.normal(0.0, noise.sigma_depth, size=pts_3d.shape[0])

    return SyntheticCase(basis=basis, true_params=params, true_pose=pose,
                         truth_mesh=truth_mesh,
                         landmarks=LandmarkSet(pts_2d, pts_3d),
                         yaw_deg=yaw_deg, seed=seed)


@dataclass(eq=False)
class BenchmarkResult:
    rows: list[dict]                 # one per (case, variant), CSV order
    mean_rmse: dict[str, float]      # per-variant mean over cases


def run_ablation_benchmark(seed: int, n_cases: int,
                           yaw_range_deg: tuple[float, float] = (60.0, 80.0),
                           noise: NoiseModel | None = None,
                           cfg: WeightConfig | None = None,
                           num_vertices: int = 2000,
                           variants: tuple[str, ...] = VARIANTS,
                           csv_path=None) -> BenchmarkResult:
    """Fit every variant on n_cases seeded synthetic instances and score the
    aligned, nose-cropped reconstructions.  Writes a CSV when csv_path is set."""
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    noise = NoiseModel() if noise is None else noise
    cfg = cfg or WeightConfig()
    rows: list[dict] = []
    for case_idx in range(n_cases):
        case_seed = seed * 1_000_003 + case_idx
        case = make_synthetic_case(case_seed, yaw_range_deg=yaw_range_deg,
                                   noise=noise, num_vertices=num_vertices)
        for variant in variants:
            report = fit_variant(case.basis, case.landmarks, cfg, variant)
            recon = synthesize(case.basis, report.params)
            scored = evaluate_reconstruction(recon, case.truth_mesh,
                                             case.basis.nose_tip_index)
            rows.append({
                "case": case_idx,
                "seed": case_seed,
                "yaw_deg": case.yaw_deg,
                "variant": variant,
                "rmse_mm": scored.rmse_mm,
                "iters": len(report.per_iteration),
                "converged": report.converged,
            })
    mean_rmse = {
        v: float(np.mean([r["rmse_mm"] for r in rows if r["variant"] == v]))
        for v in variants
    }
    if csv_path is not None:
        write_ablation_csv(rows, csv_path)
    return BenchmarkResult(rows=rows, mean_rmse=mean_rmse)


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r["case"], r["seed"], f"{r['yaw_deg']:.4f}",
                             r["variant"], f"{r['rmse_mm']:.6f}", r["iters"],
                             "true" if r["converged"] else "false"])


def read_ablation_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for rec in reader:
            rows.append({
                "case": int(rec["case"]),
                "seed": int(rec["seed"]),
                "yaw_deg": float(rec["yaw_deg"]),
                "variant": rec["variant"],
                "rmse_mm": float(rec["rmse_mm"]),
                "iters": int(rec["iters"]),
                "converged": rec["converged"] == "true",
            })
    return rows
