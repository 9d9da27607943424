"""Joint 2D/3D landmark fitting: adaptive weight schedule, alignment and
prior energies, and the alternating pose / coefficient optimization loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import LANDMARK_COUNT, FaceParams, ModelBasis, landmarks_of
from .pose import (LandmarkSet, Pose, coarse_pose, hybrid_image_points,
                   initial_depth_offset, project, refine_pose,
                   solve_pose_weak_perspective, to_camera_frame)

VARIANTS = ("2D", "3D", "2D+3D", "2D+3D+W", "2D+3D+P+W")

# Inner solver constants: damped Gauss-Newton on the stacked residual with
# energy-increase damping growth x10 and a relative-energy stop.
_MAX_INNER_STEPS = 50
_MAX_DAMPING_RETRIES = 30
_DAMPING_GROWTH = 10.0
_REL_ENERGY_TOL = 1e-8


@dataclass
class WeightConfig:
    """Schedule and prior weights for the joint energy."""

    epsilon: float = 0.5        # large-pose boundary on r = 2|yaw|/pi
    w: float = 0.5              # damping of the minority term
    lambda_alpha: float = 1e-3  # shape prior weight
    lambda_beta: float = 1e-3   # expression prior weight
    iters: int = 4              # outer alternation rounds

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must be in (0, 1]")
        if not 0.0 < self.w <= 1.0:
            raise ValueError("w must be in (0, 1]")
        if self.lambda_alpha < 0 or self.lambda_beta < 0:
            raise ValueError("prior weights must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")


@dataclass(eq=False)
class IterationStats:
    yaw: float
    lambda_2d: float
    lambda_3d: float
    energy_2d: float
    energy_3d: float
    energy_prior: float
    energy_fit: float


@dataclass(eq=False)
class FitReport:
    """Fit outcome: parameters, final pose, per-round diagnostics, and the
    final per-landmark residual norms (2D in px, 3D in detected-depth units)."""

    params: FaceParams
    pose: Pose
    per_iteration: list[IterationStats]
    converged: bool
    residuals_2d: np.ndarray  # (68,)
    residuals_3d: np.ndarray  # (68,)


def adaptive_weights(yaw: float, cfg: WeightConfig | None = None) -> tuple[float, float]:
    """Pose-driven (lambda_2d, lambda_3d).

    With r = 2|yaw|/pi (clamped to [0, 1]): large pose (r >= epsilon) gives
    lambda_3d = r, lambda_2d = (1 - r) * w; small pose gives
    lambda_3d = r * w, lambda_2d = 1 - r.
    """
    cfg = cfg or WeightConfig()
    if not math.isfinite(yaw):
        raise ValueError("yaw must be finite")
    r = min(2.0 * abs(float(yaw)) / math.pi, 1.0)
    if r >= cfg.epsilon:
        return (1.0 - r) * cfg.w, r
    return 1.0 - r, r * cfg.w


def energy_2d(basis: ModelBasis, params: FaceParams, pose: Pose,
              lm: LandmarkSet) -> float:
    """Sum of squared pixel distances between projected and detected landmarks."""
    diff = project(pose, landmarks_of(basis, params)) - lm.points_2d
    return float((diff * diff).sum())


def energy_3d(basis: ModelBasis, params: FaceParams, pose: Pose,
              lm: LandmarkSet) -> float:
    """Sum of squared distances between scaled-rotated model landmarks and
    offset-shifted detected 3D landmarks."""
    cam = to_camera_frame(pose, landmarks_of(basis, params))
    diff = cam - (lm.points_3d + pose.depth_offset)
    return float((diff * diff).sum())


def prior_energy(params: FaceParams, lambda_2d: float, lambda_3d: float,
                 basis: ModelBasis, cfg: WeightConfig | None = None) -> float:
    """Mahalanobis prior keeping coefficients within the basis distribution."""
    cfg = cfg or WeightConfig()
    total = lambda_2d + lambda_3d
    ea = float(((params.alpha / np.sqrt(basis.shape_eigenvalues)) ** 2).sum())
    eb = float(((params.beta / np.sqrt(basis.expr_eigenvalues)) ** 2).sum())
    return cfg.lambda_alpha * total * ea + cfg.lambda_beta * total * eb


# --- stacked residual system --------------------------------------------------
#
# Parameter vector theta = [alpha, beta, t'] with the pose's (s, R, t) held
# fixed.  The residual is affine in theta, so its Jacobian is constant and
# Gauss-Newton reaches the round's minimum in a single accepted step.

def _landmark_system(basis: ModelBasis) -> tuple[np.ndarray, np.ndarray]:
    rows = (3 * basis.landmark_indices[:, None] + np.arange(3)).reshape(-1)
    mean_lm = basis.mean[rows].reshape(LANDMARK_COUNT, 3)
    deform = np.concatenate([basis.shape_basis[rows], basis.expr_basis[rows]], axis=1)
    return mean_lm, deform


class _ResidualSystem:
    """Weighted residual and constant Jacobian for one optimization round."""

    def __init__(self, basis: ModelBasis, lm: LandmarkSet, pose: Pose,
                 weights: tuple[float, float], cfg: WeightConfig):
        self.l2d, self.l3d = weights
        self.na = basis.num_shape
        self.nb = basis.num_expr
        self.rot = pose.rotation()
        self.scale = pose.scale
        self.translation = pose.translation
        self.targets_2d = lm.points_2d
        self.targets_3d = lm.points_3d
        self.mean_lm, self.deform = _landmark_system(basis)
        self.sqrt_l2d = math.sqrt(self.l2d)
        self.sqrt_l3d = math.sqrt(self.l3d)
        total = self.l2d + self.l3d
        self.prior_alpha = math.sqrt(cfg.lambda_alpha * total) / np.sqrt(basis.shape_eigenvalues)
        self.prior_beta = math.sqrt(cfg.lambda_beta * total) / np.sqrt(basis.expr_eigenvalues)

    @property
    def num_params(self) -> int:
        return self.na + self.nb + 3

    def residual(self, theta: np.ndarray) -> np.ndarray:
        coeff = theta[: self.na + self.nb]
        t_prime = theta[self.na + self.nb:]
        lm3 = self.mean_lm + (self.deform @ coeff).reshape(LANDMARK_COUNT, 3)
        cam = self.scale * (lm3 @ self.rot.T)
        r2d = self.sqrt_l2d * (cam[:, :2] + self.translation - self.targets_2d)
        r3d = self.sqrt_l3d * (cam - (self.targets_3d + t_prime))
        alpha = theta[: self.na]
        beta = theta[self.na: self.na + self.nb]
        return np.concatenate([r2d.reshape(-1), r3d.reshape(-1),
                               self.prior_alpha * alpha, self.prior_beta * beta])

    def jacobian(self) -> np.ndarray:
        nc = self.na + self.nb
        blocks = self.deform.reshape(LANDMARK_COUNT, 3, nc)
        rb = self.scale * np.einsum("ij,kjn->kin", self.rot, blocks)
        j = np.zeros((2 * LANDMARK_COUNT + 3 * LANDMARK_COUNT + nc, self.num_params))
        j[: 2 * LANDMARK_COUNT, :nc] = self.sqrt_l2d * rb[:, :2, :].reshape(-1, nc)
        row3 = 2 * LANDMARK_COUNT
        j[row3: row3 + 3 * LANDMARK_COUNT, :nc] = self.sqrt_l3d * rb.reshape(-1, nc)
        j[row3: row3 + 3 * LANDMARK_COUNT, nc:] = np.tile(-self.sqrt_l3d * np.eye(3),
                                                          (LANDMARK_COUNT, 1))
        rowp = row3 + 3 * LANDMARK_COUNT
        j[rowp: rowp + self.na, : self.na] = np.diag(self.prior_alpha)
        j[rowp + self.na:, self.na: nc] = np.diag(self.prior_beta)
        return j


def _theta_of(params: FaceParams, pose: Pose) -> np.ndarray:
    return np.concatenate([params.alpha, params.beta, pose.depth_offset])


def stacked_residual(basis: ModelBasis, lm: LandmarkSet, pose: Pose,
                     params: FaceParams, weights: tuple[float, float],
                     cfg: WeightConfig | None = None) -> np.ndarray:
    """Weighted residual vector [sqrt(l2d) r2d; sqrt(l3d) r3d; prior] whose
    squared norm is the joint fitting energy; t' is taken from the pose."""
    cfg = cfg or WeightConfig()
    system = _ResidualSystem(basis, lm, pose, weights, cfg)
    return system.residual(_theta_of(params, pose))


def stacked_jacobian(basis: ModelBasis, lm: LandmarkSet, pose: Pose,
                     params: FaceParams, weights: tuple[float, float],
                     cfg: WeightConfig | None = None) -> np.ndarray:
    """Analytic Jacobian of stacked_residual w.r.t. theta = [alpha, beta, t']."""
    cfg = cfg or WeightConfig()
    system = _ResidualSystem(basis, lm, pose, weights, cfg)
    return system.jacobian()


def minimize_damped_gauss_newton(system: _ResidualSystem, theta0: np.ndarray
                                 ) -> tuple[np.ndarray, list[float], bool]:
    """Damped Gauss-Newton.  Returns (theta, accepted-energy trace, converged);
    on divergence (no acceptable step at max damping) returns the best state
    seen with converged=False."""
    theta = np.array(theta0, dtype=np.float64)
    j = system.jacobian()
    n = system.num_params
    r = system.residual(theta)
    energy = float(r @ r)
    trace = [energy]
    best_theta, best_energy = theta, energy
    mu = 0.0
    for _ in range(_MAX_INNER_STEPS):
        accepted = False
        trial_mu = mu
        for _retry in range(_MAX_DAMPING_RETRIES):
            if trial_mu == 0.0:
                delta, *_ = np.linalg.lstsq(j, -r, rcond=None)
            else:
                aug = np.vstack([j, math.sqrt(trial_mu) * np.eye(n)])
                rhs = np.concatenate([-r, np.zeros(n)])
                delta, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
            cand = theta + delta
            rc = system.residual(cand)
            ec = float(rc @ rc)
            if math.isfinite(ec) and ec <= energy:
                accepted = True
                break
            trial_mu = max(trial_mu, 1e-8) * _DAMPING_GROWTH
        if not accepted:
            return best_theta, trace, False
        previous = energy
        theta, r, energy = cand, rc, ec
        trace.append(energy)
        if energy < best_energy:
            best_theta, best_energy = theta, energy
        mu = trial_mu * 0.1
        if previous - energy <= _REL_ENERGY_TOL * max(previous, 1e-30):
            return theta, trace, True
    return theta, trace, True


def _round_weights(variant: str, yaw: float, cfg: WeightConfig) -> tuple[float, float]:
    if variant == "2D":
        return 1.0, 0.0
    if variant == "3D":
        return 0.0, 1.0
    if variant == "2D+3D":
        return 0.5, 0.5
    return adaptive_weights(yaw, cfg)


def fit_variant(basis: ModelBasis, lm: LandmarkSet,
                cfg: WeightConfig | None = None,
                variant: str = "2D+3D+P+W") -> FitReport:
    """Run the alternating optimization with the given ablation switches.

    Every variant alternates a closed-form pose solve with a Gauss-Newton
    coefficient solve for cfg.iters rounds.  "2D"/"3D"/"2D+3D" fix the term
    weights; "+W" uses the adaptive schedule; "+P" additionally refines the
    initial pose and keeps replacing occluded-side silhouette targets with 3D
    landmark positions when re-solving the pose each round.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    cfg = cfg or WeightConfig()
    use_refinement = variant == "2D+3D+P+W"

    coarse = coarse_pose(basis, lm)
    mean_pts = landmarks_of(basis, FaceParams.zeros(basis))
    if use_refinement:
        pose = refine_pose(basis, lm, coarse)
    else:
        pose = replace(coarse, depth_offset=initial_depth_offset(
            coarse, mean_pts, lm.points_3d))

    params = FaceParams.zeros(basis)
    t_prime = np.array(pose.depth_offset)
    stats: list[IterationStats] = []
    all_converged = True

    for _ in range(cfg.iters):
        model_lm = landmarks_of(basis, params)
        if use_refinement:
            targets = hybrid_image_points(lm, pose.yaw)
        else:
            targets = lm.points_2d
        pose = replace(solve_pose_weak_perspective(model_lm, targets),
                       depth_offset=t_prime)

        weights = _round_weights(variant, pose.yaw, cfg)
        system = _ResidualSystem(basis, lm, pose, weights, cfg)
        theta0 = np.concatenate([params.alpha, params.beta, t_prime])
        theta, _trace, converged = minimize_damped_gauss_newton(system, theta0)
        all_converged = all_converged and converged

        na, nb = basis.num_shape, basis.num_expr
        params = FaceParams(theta[:na], theta[na:na + nb])
        t_prime = theta[na + nb:]
        pose = replace(pose, depth_offset=t_prime)

        l2d, l3d = weights
        e2d = energy_2d(basis, params, pose, lm)
        e3d = energy_3d(basis, params, pose, lm)
        ep = prior_energy(params, l2d, l3d, basis, cfg)
        stats.append(IterationStats(yaw=pose.yaw, lambda_2d=l2d, lambda_3d=l3d,
                                    energy_2d=e2d, energy_3d=e3d, energy_prior=ep,
                                    energy_fit=l2d * e2d + l3d * e3d + ep))

    final_lm = landmarks_of(basis, params)
    res2d = np.linalg.norm(project(pose, final_lm) - lm.points_2d, axis=1)
    res3d = np.linalg.norm(
        to_camera_frame(pose, final_lm) - (lm.points_3d + pose.depth_offset), axis=1)
    return FitReport(params=params, pose=pose, per_iteration=stats,
                     converged=all_converged, residuals_2d=res2d, residuals_3d=res3d)


def fit(basis: ModelBasis, lm: LandmarkSet,
        cfg: WeightConfig | None = None) -> FitReport:
    """Full pipeline: coarse-to-fine pose plus adaptively weighted joint fit."""
    return fit_variant(basis, lm, cfg, "2D+3D+P+W")
