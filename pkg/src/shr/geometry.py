"""3D head model, weak-perspective camera, pose solver and registration error.

Frame conventions used everywhere in the package: model x points to image
right, model y points to image down (so image y grows downward), z points
toward the camera. Yaw rotates about the model y axis with
``x' = x cos(yaw) + z sin(yaw)``. A surface point faces the camera when its
rotated normal has positive z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyLandmarkSet,
    TooFewCorrespondences,
)

N_FP = 19
N_NFP = 21
N_SP = 3

FP_NAMES = (
    "brow_l_outer", "brow_l_center", "brow_l_inner",
    "brow_r_inner", "brow_r_center", "brow_r_outer",
    "eye_l_outer", "eye_l_inner", "eye_r_inner", "eye_r_outer",
    "nostril_l", "nose_tip", "nostril_r",
    "mouth_l", "mouth_center", "mouth_r",
    "jaw_l", "chin", "jaw_r",
)

# (x, y) of each FP on the face surface, model units, y down.
_FP_XY = np.array([
    [-0.62, -0.55], [-0.40, -0.62], [-0.15, -0.55],
    [0.15, -0.55], [0.40, -0.62], [0.62, -0.55],
    [-0.55, -0.32], [-0.20, -0.32], [0.20, -0.32], [0.55, -0.32],
    [-0.14, 0.22], [0.0, 0.12], [0.14, 0.22],
    [-0.30, 0.52], [0.0, 0.50], [0.30, 0.52],
    [-0.72, 0.55], [0.0, 1.235], [0.72, 0.55],
])
NOSE_TIP = FP_NAMES.index("nose_tip")
CHIN = FP_NAMES.index("chin")
SP_FP_POSITIONS = (FP_NAMES.index("jaw_l"), CHIN, FP_NAMES.index("jaw_r"))

# Head ellipsoid semi-axes and nose bump.
_AXES = np.array([1.0, 1.3, 0.9])
_CONTOUR_RHO = 0.95
_N_CONTOUR = 17
_NOSE_RIDGE_Y = (-0.25, -0.10, 0.03)


def _nose_bump(x, y):
    g = 0.35 * np.exp(-x**2 / (2 * 0.09**2) - (y - 0.05) ** 2 / (2 * 0.22**2))
    gx = g * (-x / 0.09**2)
    gy = g * (-(y - 0.05) / 0.22**2)
    return g, gx, gy


def _surface_normals(pts):
    """Outward normals of x²/a² + y²/b² + (z - B(x,y))²/c² = 1."""
    a, b, c = _AXES
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    bump, bx, by = _nose_bump(x, y)
    dz = z - bump
    grad = np.stack([
        x / a**2 - dz * bx / c**2,
        y / b**2 - dz * by / c**2,
        dz / c**2,
    ], axis=1)
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)


def _front_surface(xy):
    a, b, c = _AXES
    r2 = (xy[:, 0] / a) ** 2 + (xy[:, 1] / b) ** 2
    z0 = c * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    bump, _, _ = _nose_bump(xy[:, 0], xy[:, 1])
    return np.column_stack([xy, z0 + bump])


@dataclass(frozen=True, eq=False)
class Model3D:
    """Dense 3D point set with landmark index tables.

    ``contour_order`` and ``nose_order`` are positions into ``nfp_indices``
    (and therefore also into the NFP confidence-map stack).
    """

    points: np.ndarray
    normals: np.ndarray
    fp_indices: np.ndarray
    nfp_indices: np.ndarray
    sp_indices: np.ndarray
    contour_order: np.ndarray
    nose_order: np.ndarray

    def __post_init__(self):
        for name in ("points", "normals"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("fp_indices", "nfp_indices", "sp_indices", "contour_order", "nose_order"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # views used by the scoring and solving code
    @property
    def fp_points(self) -> np.ndarray:
        return self.points[self.fp_indices]

    @property
    def nfp_points(self) -> np.ndarray:
        return self.points[self.nfp_indices]

    @property
    def sp_points(self) -> np.ndarray:
        return self.points[self.sp_indices]

    @property
    def sp_fp_positions(self) -> np.ndarray:
        """Position of each SP inside ``fp_indices``."""
        lookup = {int(v): i for i, v in enumerate(self.fp_indices)}
        return np.array([lookup[int(v)] for v in self.sp_indices])

    @property
    def landmark_indices(self) -> np.ndarray:
        """The 38 unique evaluation landmarks: FPs, then NFPs not shared with an FP."""
        fp = list(self.fp_indices)
        extra = [int(i) for i in self.nfp_indices if int(i) not in set(fp)]
        return np.array(fp + extra, dtype=np.int64)

    def check(self) -> None:
        assert len(self.fp_indices) == N_FP
        assert len(self.nfp_indices) == N_NFP
        assert len(self.sp_indices) == N_SP
        assert set(self.sp_indices.tolist()) <= set(self.fp_indices.tolist())
        assert len(set(self.fp_indices.tolist()) & set(self.nfp_indices.tolist())) == 2
        assert np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-9)

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "normals": self.normals.tolist(),
            "fp_indices": self.fp_indices.tolist(),
            "nfp_indices": self.nfp_indices.tolist(),
            "sp_indices": self.sp_indices.tolist(),
            "contour_order": self.contour_order.tolist(),
            "nose_order": self.nose_order.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model3D":
        return cls(**{k: np.asarray(d[k]) for k in (
            "points", "normals", "fp_indices", "nfp_indices",
            "sp_indices", "contour_order", "nose_order")})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Model3D":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_synthetic_head(n_points: int = 2000, seed: int = 7) -> Model3D:
    """Deterministic ellipsoidal head with a nose bump and canonical landmarks."""
    if n_points < 500:
        raise ValueError("n_points must be >= 500")
    rng = np.random.default_rng(seed)
    a, b, c = _AXES

    fp_xyz = _front_surface(_FP_XY)
    phis = np.deg2rad(np.linspace(-110.0, 110.0, _N_CONTOUR))
    contour_xy = np.column_stack([
        _CONTOUR_RHO * a * np.sin(phis), _CONTOUR_RHO * b * np.cos(phis)])
    contour_xyz = _front_surface(contour_xy)
    ridge_xyz = _front_surface(np.array([[0.0, y] for y in _NOSE_RIDGE_Y]))

    chin_pos = _N_CONTOUR // 2
    assert np.allclose(contour_xyz[chin_pos], fp_xyz[CHIN])
    landmarks = np.vstack([fp_xyz, np.delete(contour_xyz, chin_pos, axis=0), ridge_xyz])
    n_land = len(landmarks)

    n_dense = n_points - n_land
    dense = []
    while sum(len(d) for d in dense) < n_dense:
        u = rng.normal(size=(2 * n_dense, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        p = u * _AXES
        p = p[p[:, 2] >= -0.3 * c]
        front = p[:, 2] > 0
        p[front, 2] += _nose_bump(p[front, 0], p[front, 1])[0]
        dense.append(p)
    dense = np.vstack(dense)[:n_dense]

    pts = np.vstack([dense, landmarks])
    normals = _surface_normals(pts)
    pts = pts - pts.mean(axis=0)

    fp_idx = n_dense + np.arange(N_FP)
    contour_idx = list(n_dense + N_FP + np.arange(_N_CONTOUR - 1))
    contour_idx.insert(chin_pos, int(fp_idx[CHIN]))
    ridge_idx = list(n_dense + N_FP + _N_CONTOUR - 1 + np.arange(len(_NOSE_RIDGE_Y)))
    nfp_idx = np.array(contour_idx + ridge_idx + [int(fp_idx[NOSE_TIP])])
    model = Model3D(
        points=pts,
        normals=normals,
        fp_indices=fp_idx,
        nfp_indices=nfp_idx,
        sp_indices=fp_idx[list(SP_FP_POSITIONS)],
        contour_order=np.arange(_N_CONTOUR),
        nose_order=np.arange(_N_CONTOUR, N_NFP),
    )
    model.check()
    return model


def fixture_model() -> Model3D:
    """The head model shipped with the package (seed 7, 2000 points)."""
    return Model3D.load(Path(__file__).parent / "data" / "head_model.json")


# ---------------------------------------------------------------------------
# poses


def rot_x(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def euler_to_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """R = Rz(roll) Rx(pitch) Ry(yaw); degrees."""
    return rot_z(roll) @ rot_x(pitch) @ rot_y(yaw)


@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    """Weak-perspective camera: x = scale * R[:2] @ X + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(2)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def matrix(self) -> np.ndarray:
        """2x3 linear part ``scale * R[:2]``."""
        return self.scale * self.rotation[:2]

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (self.scale > 0
                and np.allclose(R @ R.T, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) < tol)

    def shifted(self, delta) -> "PoseHypothesis":
        return PoseHypothesis(self.scale, self.rotation, self.translation + np.asarray(delta))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseHypothesis":
        return cls(d["scale"], np.asarray(d["rotation"]), np.asarray(d["translation"]))


@dataclass(frozen=True)
class Correspondences:
    points2d: np.ndarray
    points3d: np.ndarray

    def __post_init__(self):
        p2 = np.asarray(self.points2d, dtype=np.float64).reshape(-1, 2)
        p3 = np.asarray(self.points3d, dtype=np.float64).reshape(-1, 3)
        if len(p2) != len(p3):
            raise ValueError("points2d and points3d must have equal lengths")
        object.__setattr__(self, "points2d", p2)
        object.__setattr__(self, "points3d", p3)


def project(P: PoseHypothesis, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ P.matrix.T + P.translation


class WeakPerspectiveSolver:
    """Weak-perspective solver for a fixed set of 3D points.

    Fits an unconstrained 2x3 map on centred data, completes it to 3x3 with
    the cross product of its normalised rows, then snaps to the nearest
    rotation (det +1). Scale is the mean row norm of the affine fit. The
    pseudo-inverse of the centred 3D points is computed once, so repeated
    solves against moving 2D points are cheap.
    """

    def __init__(self, points3d):
        x3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
        if len(x3) < 4:
            raise TooFewCorrespondences(f"need >= 4 correspondences, got {len(x3)}")
        self.mean3 = x3.mean(axis=0)
        X = x3 - self.mean3
        if np.linalg.matrix_rank(X) < 2:
            raise DegenerateConfiguration("centred 3D points have rank < 2")
        self.pinv = np.linalg.pinv(X)  # (3, n), minimum-norm least squares
        self.n = len(x3)

    def solve(self, points2d) -> PoseHypothesis:
        x2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
        if len(x2) != self.n:
            raise ValueError("2D and 3D point counts differ")
        m2 = x2.mean(axis=0)
        A = (self.pinv @ (x2 - m2)).T
        n0 = np.sqrt(A[0] @ A[0])
        n1 = np.sqrt(A[1] @ A[1])
        if min(n0, n1) < 1e-12:
            raise DegenerateConfiguration("projection collapsed to zero scale")
        r1 = A[0] / n0
        r2 = A[1] / n1
        r3 = np.array([r1[1] * r2[2] - r1[2] * r2[1],
                       r1[2] * r2[0] - r1[0] * r2[2],
                       r1[0] * r2[1] - r1[1] * r2[0]])
        U, _, Vt = np.linalg.svd(np.array([r1, r2, r3]))
        if np.linalg.det(U @ Vt) < 0:
            U[:, -1] *= -1
        R = U @ Vt
        s = 0.5 * (n0 + n1)
        return PoseHypothesis(s, R, m2 - s * (R[:2] @ self.mean3))


def estimate_weak_perspective(c: Correspondences | tuple) -> PoseHypothesis:
    """Least-squares weak-perspective pose from >= 4 2D-3D pairs."""
    if isinstance(c, Correspondences):
        x2, x3 = c.points2d, c.points3d
    else:
        x2 = np.asarray(c[0], dtype=np.float64).reshape(-1, 2)
        x3 = np.asarray(c[1], dtype=np.float64).reshape(-1, 3)
    if len(x2) != len(x3):
        raise ValueError("2D and 3D point counts differ")
    return WeakPerspectiveSolver(x3).solve(x2)


def yaw_of(P: PoseHypothesis) -> float:
    """Yaw in degrees for the R = Rz(roll) Rx(pitch) Ry(yaw) decomposition."""
    R = P.rotation
    yaw = float(np.degrees(np.arctan2(-R[2, 0], R[2, 2])))
    return 180.0 if yaw == -180.0 else yaw


def nrme(P: PoseHypothesis, y, x_gt, omega: float) -> float:
    """Mean re-projection error of 3D landmarks ``y`` divided by ``omega``."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    x_gt = np.asarray(x_gt, dtype=np.float64).reshape(-1, 2)
    if len(y) == 0:
        raise EmptyLandmarkSet("no landmarks to evaluate")
    if len(y) != len(x_gt):
        raise ValueError("landmark counts differ")
    if omega <= 0:
        raise ValueError("omega must be positive")
    err = np.linalg.norm(project(P, y) - x_gt, axis=1)
    return float(err.mean() / omega)
