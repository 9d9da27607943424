"""Linear morphable face model: basis container, mesh synthesis, synthetic
model generation, and the MFIT model file format (binary + JSON mirror)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

MODEL_MAGIC = b"MFIT"
MODEL_FORMAT_VERSION = 1

LANDMARK_COUNT = 68

# Semantic landmark layout (0-based indices into the 68-point set).  The
# 17-point jaw/cheek silhouette runs left to right; semantic numbering is
# 1-based in file formats and error messages.
SILHOUETTE = np.arange(0, 17)
SILHOUETTE_LEFT = np.arange(0, 9)       # semantic landmarks 1-9
SILHOUETTE_MIDDLE = 9                   # semantic landmark 10 (chin middle)
SILHOUETTE_RIGHT = np.arange(10, 17)    # semantic landmarks 11-17
INNER = np.arange(17, 68)               # semantic landmarks 18-68


class ModelFormatError(ValueError):
    """A model file is malformed, truncated, or internally inconsistent."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Mesh:
    """Triangle mesh: vertices in millimeters, 0-based triangle indices."""

    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass(eq=False)
class ModelBasis:
    """PCA face basis: mean shape plus orthogonal shape/expression deformation
    modes, with per-mode variances and the 68 landmark vertex indices.

    Vertex coordinates are stored flat as (x0, y0, z0, x1, ...) in
    millimeters.  Instances are immutable after construction (arrays are
    marked read-only) and safe to share across threads.
    """

    mean: np.ndarray                # (3V,)
    shape_basis: np.ndarray         # (3V, N_shape), mm per unit coefficient
    expr_basis: np.ndarray          # (3V, N_expr)
    shape_eigenvalues: np.ndarray   # (N_shape,), mm^2, strictly positive
    expr_eigenvalues: np.ndarray    # (N_expr,), mm^2, strictly positive
    landmark_indices: np.ndarray    # (68,) vertex indices
    triangles: np.ndarray           # (T, 3) vertex index triples
    nose_tip_index: int

    def __post_init__(self):
        self.mean = _frozen(np.array(self.mean, dtype=np.float64).reshape(-1))
        if self.mean.size % 3 != 0 or self.mean.size == 0:
            raise ValueError("mean length must be a positive multiple of 3")
        v = self.mean.size // 3
        self.shape_basis = _frozen(np.array(self.shape_basis, dtype=np.float64))
        self.expr_basis = _frozen(np.array(self.expr_basis, dtype=np.float64))
        self.shape_eigenvalues = _frozen(np.array(self.shape_eigenvalues, dtype=np.float64).reshape(-1))
        self.expr_eigenvalues = _frozen(np.array(self.expr_eigenvalues, dtype=np.float64).reshape(-1))
        self.landmark_indices = _frozen(np.array(self.landmark_indices, dtype=np.int64).reshape(-1))
        self.triangles = _frozen(np.array(self.triangles, dtype=np.int32).reshape(-1, 3))
        self.nose_tip_index = int(self.nose_tip_index)

        if self.shape_basis.shape != (3 * v, self.shape_eigenvalues.size):
            raise ValueError(
                f"shape basis is {self.shape_basis.shape}, expected "
                f"({3 * v}, {self.shape_eigenvalues.size})")
        if self.expr_basis.shape != (3 * v, self.expr_eigenvalues.size):
            raise ValueError(
                f"expression basis is {self.expr_basis.shape}, expected "
                f"({3 * v}, {self.expr_eigenvalues.size})")
        if not (np.all(self.shape_eigenvalues > 0) and np.all(self.expr_eigenvalues > 0)):
            raise ValueError("eigenvalues must be strictly positive")
        if self.landmark_indices.size != LANDMARK_COUNT:
            raise ValueError(
                f"expected {LANDMARK_COUNT} landmark indices, got {self.landmark_indices.size}")
        if np.unique(self.landmark_indices).size != LANDMARK_COUNT:
            raise ValueError("landmark indices must be distinct")
        if self.landmark_indices.min() < 0 or self.landmark_indices.max() >= v:
            raise ValueError("landmark index out of vertex range")
        if not (0 <= self.nose_tip_index < v):
            raise ValueError("nose tip index out of vertex range")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ValueError("triangle index out of vertex range")

    @property
    def num_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def num_shape(self) -> int:
        return self.shape_eigenvalues.size

    @property
    def num_expr(self) -> int:
        return self.expr_eigenvalues.size


@dataclass(eq=False)
class FaceParams:
    """Dimensionless PCA coefficients for shape (identity) and expression."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("face parameters must be finite")

    @classmethod
    def zeros(cls, basis: ModelBasis) -> "FaceParams":
        return cls(np.zeros(basis.num_shape), np.zeros(basis.num_expr))


def synthesize(basis: ModelBasis, params: FaceParams) -> Mesh:
    """Evaluate the linear model: mean + shape_basis @ alpha + expr_basis @ beta."""
    if params.alpha.size != basis.num_shape:
        raise ValueError(
            f"alpha has {params.alpha.size} entries, basis expects {basis.num_shape}")
    if params.beta.size != basis.num_expr:
        raise ValueError(
            f"beta has {params.beta.size} entries, basis expects {basis.num_expr}")
    flat = basis.mean + basis.shape_basis @ params.alpha + basis.expr_basis @ params.beta
    return Mesh(flat.reshape(-1, 3), np.array(basis.triangles))


def landmarks_of(basis: ModelBasis, params: FaceParams) -> np.ndarray:
    """Model-space positions of the 68 landmark vertices, in index order."""
    return synthesize(basis, params).vertices[basis.landmark_indices]


# --- synthetic model generation ---------------------------------------------
#
# The generator builds a face-like front shell on a regular grid: an
# ellipsoidal depth field over a 140 x 170 mm footprint with a nose bump,
# plus a small seeded low-frequency perturbation so different seeds give
# different mean faces.  Deformation modes are random smooth Gaussian-bump
# fields orthonormalized by a joint QR over shape and expression columns.

_HALF_WIDTH = 70.0
_HALF_HEIGHT = 85.0
_SHELL_RX = 78.0
_SHELL_RY = 92.0
_SHELL_DEPTH = 60.0
_NOSE_XY = (0.0, -10.0)
_NOSE_HEIGHT = 16.0
_NOSE_WIDTH = 16.0


def _ellipse_points(cx, cy, rx, ry, degrees):
    rad = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    return np.column_stack([cx + rx * np.cos(rad), cy + ry * np.sin(rad)])


def _silhouette_targets() -> np.ndarray:
    # Jaw outline on an ellipse slightly inside the face boundary, ordered
    # left to right with the chin middle as the 10th point.
    a = _HALF_WIDTH * 0.95
    b = _HALF_HEIGHT * 0.95
    xs_left = np.linspace(-0.995 * a, -6.0, 9)
    xs_right = np.linspace(8.0, 0.995 * a, 7)

    def on_arc(xs):
        ys = -b * np.sqrt(np.clip(1.0 - (xs / a) ** 2, 0.0, None))
        return np.column_stack([xs, ys])

    chin = np.array([[0.0, -b]])
    return np.vstack([on_arc(xs_left), chin, on_arc(xs_right)])


def _inner_targets() -> np.ndarray:
    pts = []
    brow_y = [44.0, 47.0, 49.0, 47.0, 44.0]
    pts += list(zip([-52.0, -43.0, -34.0, -25.0, -16.0], brow_y))
    pts += list(zip([16.0, 25.0, 34.0, 43.0, 52.0], brow_y))
    pts += [(0.0, 32.0), (0.0, 22.0), (0.0, 12.0), (0.0, 2.0)]           # nose bridge
    pts += [(-14.0, -14.0), (-7.0, -17.0), (0.0, -19.0), (7.0, -17.0), (14.0, -14.0)]
    eye_angles = [180, 120, 60, 0, -60, -120]
    pts += list(map(tuple, _ellipse_points(-31.0, 26.0, 11.0, 5.0, eye_angles)))
    pts += list(map(tuple, _ellipse_points(31.0, 26.0, 11.0, 5.0, eye_angles)))
    pts += list(map(tuple, _ellipse_points(0.0, -45.0, 25.0, 11.0, range(180, -180, -30))))
    pts += list(map(tuple, _ellipse_points(0.0, -45.0, 15.0, 6.0, range(180, -180, -45))))
    return np.array(pts)


def _snap_to_vertices(targets_xy: np.ndarray, verts_xy: np.ndarray) -> np.ndarray:
    """Nearest grid vertex per target, resolving collisions to keep indices distinct."""
    tree = cKDTree(verts_xy)
    k = min(len(verts_xy), 64)
    used: set[int] = set()
    chosen = []
    for t in targets_xy:
        _, idxs = tree.query(t, k=k)
        pick = next((int(i) for i in np.atleast_1d(idxs) if int(i) not in used), None)
        if pick is None:
            order = np.argsort(((verts_xy - t) ** 2).sum(axis=1))
            pick = next(int(i) for i in order if int(i) not in used)
        used.add(pick)
        chosen.append(pick)
    return np.array(chosen, dtype=np.int64)


def _similarity_fields(verts: np.ndarray) -> np.ndarray:
    """Tangent fields of the similarity group at the mean: 3 translations,
    3 infinitesimal rotations about the centroid, 1 uniform scaling."""
    v = verts.shape[0]
    centered = verts - verts.mean(axis=0)
    fields = np.zeros((3 * v, 7))
    for k in range(3):
        f = np.zeros((v, 3))
        f[:, k] = 1.0
        fields[:, k] = f.reshape(-1)
    for k, axis in enumerate(np.eye(3)):
        fields[:, 3 + k] = np.cross(np.broadcast_to(axis, centered.shape),
                                    centered).reshape(-1)
    fields[:, 6] = centered.reshape(-1)
    return fields


def _smooth_fields(rng: np.random.Generator, verts: np.ndarray, n_cols: int,
                   n_bumps: int = 8) -> np.ndarray:
    """Random smooth 3D deformation fields sampled at the mesh vertices."""
    v = verts.shape[0]
    out = np.empty((3 * v, n_cols))
    for k in range(n_cols):
        f = np.zeros((v, 3))
        for _ in range(n_bumps):
            center = verts[rng.integers(v)]
            width = rng.uniform(18.0, 70.0)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            amp = rng.normal()
            d2 = ((verts - center) ** 2).sum(axis=1)
            f += (amp * np.exp(-d2 / (2.0 * width * width)))[:, None] * direction
        out[:, k] = f.reshape(-1)
    return out


def generate_synthetic_basis(seed: int, num_vertices: int = 2000,
                             num_shape: int = 40, num_expr: int = 10) -> ModelBasis:
    """Deterministic synthetic face basis for tests and benchmarks.

    The mean is a ~170 mm tall front-facing shell with the nose tip as the
    frontmost vertex; basis columns are mutually orthonormal smooth
    deformation fields with geometrically decaying eigenvalues; the 68
    landmark vertices follow the standard layout (17-point silhouette
    ordered left to right, then brows/nose/eyes/mouth).
    """
    if num_vertices < 100:
        raise ValueError("num_vertices must be at least 100")
    if num_shape < 1 or num_expr < 1:
        raise ValueError("basis dimensions must be at least 1")
    if num_shape + num_expr > 3 * num_vertices - LANDMARK_COUNT:
        raise ValueError("basis dimensions too large for the vertex count")

    rng = np.random.default_rng(seed)

    cols = max(int(round(np.sqrt(num_vertices * _HALF_WIDTH / _HALF_HEIGHT))), 2)
    rows = -(-num_vertices // cols)
    xs = np.linspace(-_HALF_WIDTH, _HALF_WIDTH, cols)
    ys = np.linspace(-_HALF_HEIGHT, _HALF_HEIGHT, rows)  # bottom row first
    gx, gy = np.meshgrid(xs, ys)
    x = gx.reshape(-1)[:num_vertices]
    y = gy.reshape(-1)[:num_vertices]

    r2 = (x / _SHELL_RX) ** 2 + (y / _SHELL_RY) ** 2
    z = _SHELL_DEPTH * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    nx, ny = _NOSE_XY
    z = z + _NOSE_HEIGHT * np.exp(-((x - nx) ** 2 + (y - ny) ** 2) / (2.0 * _NOSE_WIDTH ** 2))
    for _ in range(2):  # seeded low-frequency relief, small vs. the nose bump
        cx, cy = rng.uniform([-60.0, -75.0], [60.0, 75.0])
        width = rng.uniform(35.0, 60.0)
        amp = rng.uniform(-1.5, 1.5)
        z = z + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width * width))

    verts = np.column_stack([x, y, z])
    nose_tip = int(np.argmax(z))

    tris = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            i00 = r * cols + c
            i01 = i00 + 1
            i10 = i00 + cols
            i11 = i10 + 1
            if i11 < num_vertices:
                tris.append((i00, i10, i11))
                tris.append((i00, i11, i01))
    triangles = np.array(tris, dtype=np.int32)

    verts_xy = verts[:, :2]
    landmark_idx = np.concatenate([
        _snap_to_vertices(_silhouette_targets(), verts_xy),
        _snap_to_vertices(_inner_targets(), verts_xy),
    ])
    # snapping resolves collisions within each group; fix any cross-group reuse
    if np.unique(landmark_idx).size != LANDMARK_COUNT:
        landmark_idx = _snap_to_vertices(
            np.vstack([_silhouette_targets(), _inner_targets()]), verts_xy)

    # Deformation modes of an aligned statistical model carry no rigid or
    # scale motion; project the similarity tangent space out of the fields
    # so pose and shape stay identifiable.
    fields = _smooth_fields(rng, verts, num_shape + num_expr)
    sim_q, _ = np.linalg.qr(_similarity_fields(verts))
    fields -= sim_q @ (sim_q.T @ fields)
    q, _ = np.linalg.qr(fields)
    shape_basis = q[:, :num_shape]
    expr_basis = q[:, num_shape:]

    shape_eig = 400.0 * 0.85 ** np.arange(num_shape)
    expr_eig = 100.0 * 0.8 ** np.arange(num_expr)

    return ModelBasis(
        mean=verts.reshape(-1),
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        shape_eigenvalues=shape_eig,
        expr_eigenvalues=expr_eig,
        landmark_indices=landmark_idx,
        triangles=triangles,
        nose_tip_index=nose_tip,
    )


# --- model file format -------------------------------------------------------
#
# Binary layout (all little-endian):
#   magic "MFIT" | u32 version | u32 V | u32 N_shape | u32 N_expr
#   f64[3V] mean | f64[3V*N_shape] shape basis (column-major)
#   f64[3V*N_expr] expr basis (column-major) | f64[N_shape] shape eigenvalues
#   f64[N_expr] expr eigenvalues | u32[68] landmark indices
#   u32 triangle count | u32[3T] triangles | u32 nose tip index
#
# A ".json" path selects the JSON mirror format (hand-editable fixtures).

_HEADER = struct.Struct("<4sIIII")


def save_model(basis: ModelBasis, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "num_vertices": basis.num_vertices,
            "num_shape": basis.num_shape,
            "num_expr": basis.num_expr,
            "mean": basis.mean.tolist(),
            "shape_basis": [basis.shape_basis[:, k].tolist() for k in range(basis.num_shape)],
            "expr_basis": [basis.expr_basis[:, k].tolist() for k in range(basis.num_expr)],
            "shape_eigenvalues": basis.shape_eigenvalues.tolist(),
            "expr_eigenvalues": basis.expr_eigenvalues.tolist(),
            "landmark_indices": basis.landmark_indices.tolist(),
            "triangles": basis.triangles.tolist(),
            "nose_tip_index": basis.nose_tip_index,
        }
        path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
        return

    with open(path, "wb") as f:
        f.write(_HEADER.pack(MODEL_MAGIC, MODEL_FORMAT_VERSION, basis.num_vertices,
                             basis.num_shape, basis.num_expr))
        f.write(basis.mean.astype("<f8").tobytes())
        f.write(basis.shape_basis.astype("<f8").tobytes(order="F"))
        f.write(basis.expr_basis.astype("<f8").tobytes(order="F"))
        f.write(basis.shape_eigenvalues.astype("<f8").tobytes())
        f.write(basis.expr_eigenvalues.astype("<f8").tobytes())
        f.write(basis.landmark_indices.astype("<u4").tobytes())
        f.write(struct.pack("<I", basis.triangles.shape[0]))
        f.write(basis.triangles.astype("<u4").tobytes())
        f.write(struct.pack("<I", basis.nose_tip_index))


def _read_exact(f, nbytes: int, section: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise ModelFormatError(f"truncated model file: incomplete section '{section}'")
    return data


def _load_binary(path: Path) -> ModelBasis:
    with open(path, "rb") as f:
        header = _read_exact(f, _HEADER.size, "header")
        magic, version, v, n_shape, n_expr = _HEADER.unpack(header)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format version {version}")

        def read_f64(count, section):
            return np.frombuffer(_read_exact(f, 8 * count, section), dtype="<f8")

        def read_u32(count, section):
            return np.frombuffer(_read_exact(f, 4 * count, section), dtype="<u4")

        mean = read_f64(3 * v, "mean")
        shape_basis = read_f64(3 * v * n_shape, "shape_basis").reshape(3 * v, n_shape, order="F")
        expr_basis = read_f64(3 * v * n_expr, "expr_basis").reshape(3 * v, n_expr, order="F")
        shape_eig = read_f64(n_shape, "shape_eigenvalues")
        expr_eig = read_f64(n_expr, "expr_eigenvalues")
        landmarks = read_u32(LANDMARK_COUNT, "landmark_indices").astype(np.int64)
        (tri_count,) = struct.unpack("<I", _read_exact(f, 4, "triangle_count"))
        triangles = read_u32(3 * tri_count, "triangles").astype(np.int32).reshape(-1, 3)
        (nose_tip,) = struct.unpack("<I", _read_exact(f, 4, "nose_tip_index"))
        if f.read(1):
            raise ModelFormatError("trailing bytes after nose_tip_index")

    try:
        return ModelBasis(mean, shape_basis, expr_basis, shape_eig, expr_eig,
                          landmarks, triangles, int(nose_tip))
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model file: {exc}") from exc


def _load_json(path: Path) -> ModelBasis:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"invalid model JSON: {exc}") from exc
    required = ["format_version", "mean", "shape_basis", "expr_basis",
                "shape_eigenvalues", "expr_eigenvalues", "landmark_indices",
                "triangles", "nose_tip_index"]
    for key in required:
        if key not in doc:
            raise ModelFormatError(f"model JSON missing section '{key}'")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {doc['format_version']}")
    try:
        shape_basis = np.array(doc["shape_basis"], dtype=np.float64).T  # columns stored as rows
        expr_basis = np.array(doc["expr_basis"], dtype=np.float64).T
        if shape_basis.size == 0:
            shape_basis = shape_basis.reshape(len(doc["mean"]), 0)
        if expr_basis.size == 0:
            expr_basis = expr_basis.reshape(len(doc["mean"]), 0)
        return ModelBasis(doc["mean"], shape_basis, expr_basis,
                          doc["shape_eigenvalues"], doc["expr_eigenvalues"],
                          doc["landmark_indices"], doc["triangles"],
                          int(doc["nose_tip_index"]))
    except ValueError as exc:
        raise ModelFormatError(f"inconsistent model file: {exc}") from exc


def load_model(path) -> ModelBasis:
    """Load a model file, dispatching on content (binary magic vs. JSON)."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MODEL_MAGIC:
        return _load_binary(path)
    return _load_json(path)
