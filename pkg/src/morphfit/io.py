"""File formats for landmarks, meshes (Wavefront OBJ), fitted parameters,
and fit reports."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fitting import FitReport, IterationStats
from .model import LANDMARK_COUNT, FaceParams, Mesh
from .pose import LandmarkSet, Pose

LANDMARK_FORMAT_VERSION = 1
PARAMS_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1


class LandmarkFormatError(ValueError):
    """A landmark file violates the expected JSON schema."""


def load_landmarks(path) -> LandmarkSet:
    """Parse a landmark JSON file.

    Schema: {"format_version": 1, "image_width": int, "image_height": int,
    "points_2d": [[x, y] * 68], "points_3d": [[x, y, z] * 68]}.  Landmark
    ordering is semantic: 1-17 silhouette left-to-right (10 = chin middle),
    18-68 inner features.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LandmarkFormatError(f"invalid landmark JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LandmarkFormatError("landmark file must contain a JSON object")
    for key in ("format_version", "points_2d", "points_3d"):
        if key not in doc:
            raise LandmarkFormatError(f"landmark file missing key '{key}'")
    if doc["format_version"] != LANDMARK_FORMAT_VERSION:
        raise LandmarkFormatError(
            f"unsupported landmark format version {doc['format_version']}")

    def parse(key, width):
        raw = doc[key]
        if not isinstance(raw, list) or len(raw) != LANDMARK_COUNT:
            raise LandmarkFormatError(
                f"'{key}' must list exactly {LANDMARK_COUNT} points, "
                f"got {len(raw) if isinstance(raw, list) else type(raw).__name__}")
        try:
            arr = np.array(raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise LandmarkFormatError(f"'{key}' contains non-numeric entries") from exc
        if arr.shape != (LANDMARK_COUNT, width):
            raise LandmarkFormatError(
                f"'{key}' entries must have {width} coordinates each")
        bad = np.nonzero(~np.isfinite(arr).all(axis=1))[0]
        if bad.size:
            raise LandmarkFormatError(
                f"'{key}' landmark {bad[0] + 1} has a non-finite coordinate")
        return arr

    return LandmarkSet(parse("points_2d", 2), parse("points_3d", 3))


def save_landmarks(lm: LandmarkSet, path, image_width: int | None = None,
                   image_height: int | None = None) -> None:
    """Write the landmark JSON format; image size defaults to the 2D bounding box."""
    if image_width is None:
        image_width = int(np.ceil(lm.points_2d[:, 0].max())) + 1
    if image_height is None:
        image_height = int(np.ceil(lm.points_2d[:, 1].max())) + 1
    doc = {
        "format_version": LANDMARK_FORMAT_VERSION,
        "image_width": image_width,
        "image_height": image_height,
        "points_2d": lm.points_2d.tolist(),
        "points_3d": lm.points_3d.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def export_obj(mesh: Mesh, path) -> None:
    """Write a Wavefront OBJ with 6-decimal vertices and 1-based triangles.
    Byte output is deterministic for a given mesh."""
    if mesh.num_vertices == 0:
        raise ValueError("cannot export an empty mesh")
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path) -> Mesh:
    """Minimal OBJ reader: 'v' and 'f' records, 1-based indices (slash forms
    accepted); everything else is ignored."""
    vertices = []
    faces = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"OBJ line {line_no}: vertex needs 3 coordinates")
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) < 4:
                raise ValueError(f"OBJ line {line_no}: face needs 3 indices")
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not vertices:
        raise ValueError("OBJ file contains no vertices")
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int32).reshape(-1, 3))


def save_params(params: FaceParams, path) -> None:
    doc = {
        "format_version": PARAMS_FORMAT_VERSION,
        "alpha": params.alpha.tolist(),
        "beta": params.beta.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_params(path) -> FaceParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return FaceParams(doc["alpha"], doc["beta"])


def _pose_to_dict(pose: Pose) -> dict:
    return {
        "scale": pose.scale,
        "angles": pose.angles.tolist(),
        "translation": pose.translation.tolist(),
        "depth_offset": pose.depth_offset.tolist(),
    }


def _pose_from_dict(doc: dict) -> Pose:
    return Pose(scale=doc["scale"], angles=doc["angles"],
                translation=doc["translation"], depth_offset=doc["depth_offset"])


def fit_report_to_dict(report: FitReport) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "converged": report.converged,
        "params": {"alpha": report.params.alpha.tolist(),
                   "beta": report.params.beta.tolist()},
        "pose": _pose_to_dict(report.pose),
        "per_iteration": [{
            "yaw": s.yaw,
            "lambda_2d": s.lambda_2d,
            "lambda_3d": s.lambda_3d,
            "energy_2d": s.energy_2d,
            "energy_3d": s.energy_3d,
            "energy_prior": s.energy_prior,
            "energy_fit": s.energy_fit,
        } for s in report.per_iteration],
        "residuals_2d": report.residuals_2d.tolist(),
        "residuals_3d": report.residuals_3d.tolist(),
    }


def save_fit_report(report: FitReport, path) -> None:
    Path(path).write_text(json.dumps(fit_report_to_dict(report), indent=2) + "\n",
                          encoding="utf-8")


def load_fit_report(path) -> FitReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != REPORT_FORMAT_VERSION:
        raise ValueError(f"unsupported report format version {doc.get('format_version')}")
    stats = [IterationStats(yaw=s["yaw"], lambda_2d=s["lambda_2d"],
                            lambda_3d=s["lambda_3d"], energy_2d=s["energy_2d"],
                            energy_3d=s["energy_3d"], energy_prior=s["energy_prior"],
                            energy_fit=s["energy_fit"])
             for s in doc["per_iteration"]]
    return FitReport(params=FaceParams(doc["params"]["alpha"], doc["params"]["beta"]),
                     pose=_pose_from_dict(doc["pose"]),
                     per_iteration=stats,
                     converged=doc["converged"],
                     residuals_2d=np.array(doc["residuals_2d"]),
                     residuals_3d=np.array(doc["residuals_3d"]))
