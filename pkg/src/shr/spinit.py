"""SensiblePoint initialisation.

Near-frontal faces: solve a pose from the visible FPs and re-project the SP
model points. Large yaw: retrieve reference shapes whose confidence-map
context looks like the query, align each to the visible FPs with a 2D
similarity, and read the SPs off the coordinate-wise median shape.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .confmap import MAP_SIZE
from .errors import (
    DegenerateSource,
    DimensionMismatch,
    EmptyDatabase,
    EmptyInput,
    TooFewPoints,
    TooFewVisible,
)
from .geometry import FP_NAMES, Model3D, estimate_weak_perspective, project, yaw_of

log = logging.getLogger(__name__)

PATCH = MAP_SIZE // 4
# FPs close to the facial symmetry axis.
ANCHOR_FPS = tuple(FP_NAMES.index(n) for n in (
    "eye_l_inner", "eye_r_inner", "nose_tip", "mouth_center", "chin"))
RETRIEVE_K = 5
YAW_THRESHOLD = 30.0


@dataclass(frozen=True, eq=False)
class ReferenceEntry:
    feature: np.ndarray
    shape: np.ndarray  # (19, 2) image coordinates


@dataclass(frozen=True)
class Similarity2D:
    scale: float
    angle: float  # radians
    translation: np.ndarray

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.linear.T + self.translation


def build_context_feature(maps_a: np.ndarray, anchor_points) -> np.ndarray:
    """Concatenated 20x20 crops of the summed FP maps around each anchor.

    ``anchor_points`` are (x, y) map coordinates; windows are zero padded at
    the map border.
    """
    total = np.asarray(maps_a, dtype=np.float64).sum(axis=0)
    padded = np.pad(total, PATCH)
    half = PATCH // 2
    out = []
    for x, y in np.asarray(anchor_points, dtype=np.float64).reshape(-1, 2):
        cx = int(np.clip(np.rint(x), 0, MAP_SIZE - 1)) + PATCH
        cy = int(np.clip(np.rint(y), 0, MAP_SIZE - 1)) + PATCH
        out.append(padded[cy - half:cy + half, cx - half:cx + half].ravel())
    return np.concatenate(out)


def retrieve(db, query, k: int = RETRIEVE_K) -> list[np.ndarray]:
    """Shapes of the k nearest entries (Euclidean); ties keep database order."""
    if len(db) == 0:
        raise EmptyDatabase("reference database is empty")
    feats = db.features if isinstance(db, ReferenceDatabase) else np.array([e.feature for e in db])
    shapes = db.shapes if isinstance(db, ReferenceDatabase) else [e.shape for e in db]
    query = np.asarray(query, dtype=np.float64)
    if feats.shape[1] != query.shape[0]:
        raise DimensionMismatch(f"query length {query.shape[0]} != {feats.shape[1]}")
    d = np.linalg.norm(feats - query, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return [np.asarray(shapes[i]) for i in order]


def estimate_similarity_2d(src, dst) -> Similarity2D:
    """Closed-form least-squares similarity mapping src onto dst (Umeyama, 2D)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 2 or len(src) != len(dst):
        raise TooFewPoints(f"need >= 2 matched pairs, got {len(src)}/{len(dst)}")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    var = (a * a).sum()
    if var < 1e-12:
        raise DegenerateSource("source points coincide")
    # complex-number form: b ~ z * a
    num_re = (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum()
    num_im = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()
    scale = np.hypot(num_re, num_im) / var
    if scale <= 0:
        raise DegenerateSource("no similarity maps source onto target")
    angle = float(np.arctan2(num_im, num_re))
    sim = Similarity2D(float(scale), angle, np.zeros(2))
    return Similarity2D(sim.scale, angle, md - sim.linear @ ms)


def median_shape(shapes) -> np.ndarray:
    if len(shapes) == 0:
        raise EmptyInput("no shapes")
    return np.median(np.stack([np.asarray(s, dtype=np.float64) for s in shapes]), axis=0)


class ReferenceDatabase:
    """Feature matrix plus the matching FP shapes."""

    def __init__(self, features, shapes):
        self.features = np.asarray(features, dtype=np.float64)
        self.shapes = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in shapes]
        if len(self.features) != len(self.shapes):
            raise DimensionMismatch("features and shapes differ in length")

    def __len__(self):
        return len(self.shapes)

    def __iter__(self):
        for f, s in zip(self.features, self.shapes):
            yield ReferenceEntry(f, s)

    @classmethod
    def from_entries(cls, entries) -> "ReferenceDatabase":
        entries = list(entries)
        return cls(np.array([e.feature for e in entries]), [e.shape for e in entries])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.features.astype("<f4").tofile(d / "features.bin")
        (d / "shapes.json").write_text(json.dumps({
            "n": len(self), "dim": int(self.features.shape[1]) if len(self) else 0,
            "shapes": [s.tolist() for s in self.shapes]}))

    @classmethod
    def load(cls, directory) -> "ReferenceDatabase":
        d = Path(directory)
        meta = json.loads((d / "shapes.json").read_text())
        feats = np.fromfile(d / "features.bin", dtype="<f4").astype(np.float64)
        return cls(feats.reshape(meta["n"], meta["dim"]), meta["shapes"])


def detect_landmarks(maps: np.ndarray) -> np.ndarray:
    """Sub-pixel argmax per map, in map coordinates."""
    from .confmap import argmax_subpixel

    return np.array([argmax_subpixel(g) for g in maps])


def scene_context_feature(stack, detections_map=None) -> np.ndarray:
    if detections_map is None:
        detections_map = detect_landmarks(stack.maps_a[list(ANCHOR_FPS)])
    else:
        detections_map = np.asarray(detections_map)[list(ANCHOR_FPS)]
    return build_context_feature(stack.maps_a, detections_map)


def init_sensiblepoints(model: Model3D, x_v, mask, db, stack, roi=None,
                        detections_map=None, k: int = RETRIEVE_K,
                        yaw_threshold: float = YAW_THRESHOLD) -> np.ndarray:
    """Initial SP image coordinates, shape (3, 2).

    ``mask`` marks the visible FPs (``x_v`` lists their detections in FP
    order). ``roi`` is only needed for the degraded fallback.
    """
    x_v = np.asarray(x_v, dtype=np.float64).reshape(-1, 2)
    mask = np.asarray(mask, dtype=bool)
    sp_pos = model.sp_fp_positions
    if len(x_v) >= 4:
        P = estimate_weak_perspective((x_v, model.fp_points[mask]))
        if abs(yaw_of(P)) <= yaw_threshold:
            return project(P, model.sp_points)
    elif db is None or len(db) == 0:
        raise TooFewVisible(f"{len(x_v)} visible FPs and no reference database")
    if db is None or len(db) == 0:
        raise EmptyDatabase("profile initialisation needs a reference database")

    shapes = retrieve(db, scene_context_feature(stack, detections_map), k)
    if len(x_v) < 2:
        log.warning("degraded SP initialisation: %d visible FPs", len(x_v))
        med = median_shape(shapes)
        centre = np.array(roi[:2], dtype=np.float64) + roi[2] / 2.0
        return med[sp_pos] - med.mean(axis=0) + centre
    aligned = []
    for shp in shapes:
        try:
            T = estimate_similarity_2d(shp[mask], x_v)
        except (TooFewPoints, DegenerateSource):
            continue
        aligned.append(T.apply(shp))
    if not aligned:
        raise TooFewVisible("no retrieved shape could be aligned to the visible FPs")
    return median_shape(aligned)[sp_pos]
