"""Alignment score, rewards and the binary state descriptor.

All sampling happens on blurred maps in map coordinates; image points are
converted with the scene's ROI origin and cell size ``q``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .confmap import MAP_SIZE, blur, gather_bilinear, sample_bilinear
from .geometry import N_FP, N_NFP, Model3D, PoseHypothesis

FP_BITS = 20
NFP_BITS = 6
STATE_DIM = N_FP * FP_BITS + N_NFP * NFP_BITS + N_FP * 2

# Two rings inside a 14x14 window: 8 compass points at radius 3, 12 points
# every 30 degrees at radius 6.
_a8 = np.deg2rad(np.arange(0, 360, 45))
_a12 = np.deg2rad(np.arange(0, 360, 30))
FP_OFFSETS = np.vstack([
    3.0 * np.column_stack([np.cos(_a8), np.sin(_a8)]),
    6.0 * np.column_stack([np.cos(_a12), np.sin(_a12)]),
])
NFP_STEPS = np.array([-2.0, -4.0, -6.0, 2.0, 4.0, 6.0])


@dataclass(frozen=True)
class ScoreWeights:
    lambda1: float = 0.21
    lambda2: float = 0.60
    lambda3: float = 0.19

    def __post_init__(self):
        w = (self.lambda1, self.lambda2, self.lambda3)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"score weights must be >= 0 and sum to 1, got {w}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass(frozen=True)
class ScoreBreakdown:
    s1: float
    s2: float
    s3: float
    s: float

    def to_dict(self) -> dict:
        return {"s1": self.s1, "s2": self.s2, "s3": self.s3, "s": self.s}


def reward(s_t: float, s_0: float) -> float:
    return s_t - s_0


def polyline_samples(vertices: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Points every ``spacing`` along a polyline, plus its last vertex."""
    v = np.asarray(vertices, dtype=np.float64)
    seg = np.sqrt((np.diff(v, axis=0) ** 2).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return v[:1].copy()
    s = np.append(np.arange(0.0, total, spacing), total)
    return np.column_stack([np.interp(s, cum, v[:, 0]), np.interp(s, cum, v[:, 1])])


def silhouette_polylines(P: PoseHypothesis, model: Model3D) -> tuple[np.ndarray, np.ndarray]:
    """Projected contour and nose polylines in image coordinates."""
    nfp = model.nfp_points @ P.matrix.T + P.translation
    return nfp[model.contour_order], nfp[model.nose_order]


def polyline_tangents(vertices: np.ndarray) -> np.ndarray:
    """Unit tangent per vertex: mean of adjacent segment directions."""
    v = np.asarray(vertices, dtype=np.float64)
    d = np.diff(v, axis=0)
    n = np.linalg.norm(d, axis=1, keepdims=True)
    u = np.divide(d, n, out=np.zeros_like(d), where=n > 1e-12)
    t = np.zeros_like(v)
    t[:-1] += u
    t[1:] += u
    norm = np.linalg.norm(t, axis=1, keepdims=True)
    return np.where(norm > 1e-12, t / np.maximum(norm, 1e-12), np.array([1.0, 0.0]))


def fp_descriptor(grid: np.ndarray, center, occluded: bool = False) -> np.ndarray:
    """20 comparison bits; 0 where the centre is strictly brighter."""
    if occluded:
        return np.zeros(FP_BITS, dtype=np.uint8)
    center = np.asarray(center, dtype=np.float64)
    c = sample_bilinear(grid, center)
    ring = sample_bilinear(grid, center + FP_OFFSETS)
    return (~(c > ring)).astype(np.uint8)


def nfp_descriptor(sum_map: np.ndarray, point, tangent) -> np.ndarray:
    """6 bits sampled across the polyline: negative side near to far, then positive side."""
    point = np.asarray(point, dtype=np.float64)
    tx, ty = tangent
    normal = np.array([-ty, tx])
    c = sample_bilinear(sum_map, point)
    side = sample_bilinear(sum_map, point + NFP_STEPS[:, None] * normal)
    return (~(c > side)).astype(np.uint8)


@dataclass(frozen=True)
class StateVector:
    bits_fp: np.ndarray
    bits_nfp: np.ndarray
    zscores: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.bits_fp.ravel(), self.bits_nfp.ravel(),
                               self.zscores.ravel()]).astype(np.float64)


def _peak_preserving_blur(grid, sigma_blur):
    # blurring a sigma-2 blob by 1.5 would cut its peak to 0.64; rescaling keeps
    # the detector's confidence while still widening the basin
    g = np.asarray(grid, dtype=np.float64)
    b = blur(g, sigma_blur)
    bmax = b.max()
    return b * (g.max() / bmax) if bmax > 0 else b


class ScoringContext:
    """Per-scene precomputation: blurred maps, normalised sum map, mask."""

    def __init__(self, model: Model3D, stack, mask, roi, weights: ScoreWeights = ScoreWeights(),
                 sigma_blur: float = 1.5):
        self.model = model
        self.mask = np.asarray(mask, dtype=bool)
        self.weights = weights
        self.roi_origin = np.array(roi[:2], dtype=np.float64)
        self.q = float(roi[2]) / stack.maps_a.shape[-1]
        self.maps_a = np.stack([_peak_preserving_blur(g, sigma_blur) for g in stack.maps_a])
        s = stack.sum_b
        smax = s.max()
        norm = s / smax if smax > 0 else s
        b = blur(norm, sigma_blur)
        bmax = b.max()
        self.sum_b = b / bmax if bmax > 0 else b
        self._fp3 = model.fp_points
        self._nfp3 = model.nfp_points
        self._vis = np.flatnonzero(self.mask)
        self._occ = np.flatnonzero(~self.mask)
        self._contour = np.asarray(model.contour_order)
        self._nose = np.asarray(model.nose_order)
        self._lines = np.concatenate([self._contour, self._nose])
        self._ring_offsets = np.vstack([np.zeros((1, 2)), FP_OFFSETS])
        self._nfp_steps = np.concatenate([[0.0], NFP_STEPS])
        # FP maps 0..18 followed by the normalised NFP sum map at index 19
        self._flat = np.concatenate([self.maps_a.ravel(), self.sum_b.ravel()])
        self._fp_which = np.arange(N_FP)
        self._state_which = np.concatenate([
            np.repeat(np.arange(N_FP), 1 + FP_BITS), np.full(N_NFP * (1 + NFP_BITS), N_FP)])

    def with_weights(self, weights: ScoreWeights) -> "ScoringContext":
        new = object.__new__(ScoringContext)
        new.__dict__.update(self.__dict__)
        new.weights = weights
        return new

    def _to_map(self, pts):
        return (pts - self.roi_origin) / self.q

    def _project(self, P: PoseHypothesis):
        A = P.matrix
        t = P.translation
        return self._fp3 @ A.T + t, self._nfp3 @ A.T + t

    def score(self, P: PoseHypothesis) -> ScoreBreakdown:
        fp_img, nfp_img = self._project(P)
        fp = self._to_map(fp_img)
        nfp = self._to_map(nfp_img)
        line = self._line_samples(nfp)
        which = np.concatenate([self._fp_which, np.full(len(line), N_FP)])
        vals = gather_bilinear(self._flat, which, np.vstack([fp, line]))
        fv = vals[:N_FP]
        s1 = float(fv[self._vis].mean()) if len(self._vis) else 0.0
        s2 = float(fv[self._occ].mean()) if len(self._occ) else 0.0
        s3 = float(vals[N_FP:].mean())
        l1, l2, l3 = self.weights.as_tuple()
        return ScoreBreakdown(s1, s2, s3, l1 * s1 + l2 * s2 + l3 * s3)

    def _line_samples(self, nfp):
        # Both polylines in one interpolation; the contour-to-nose junction is
        # given a unit gap that no sample falls into.
        v = nfp[self._lines]
        seg = np.sqrt(((v[1:] - v[:-1]) ** 2).sum(axis=1))
        nc = len(self._contour)
        seg[nc - 1] = 1.0
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        lc, n0, n1 = cum[nc - 1], cum[nc], cum[-1]
        s = np.concatenate([np.arange(0.0, lc, 1.0), [lc], n0 + np.arange(0.0, n1 - n0, 1.0), [n1]])
        return np.column_stack([np.interp(s, cum, v[:, 0]), np.interp(s, cum, v[:, 1])])

    def state(self, P: PoseHypothesis) -> StateVector:
        fp_img, nfp_img = self._project(P)
        fp = self._to_map(fp_img)
        nfp = self._to_map(nfp_img)

        tangents = np.zeros((N_NFP, 2))
        tangents[self._contour] = polyline_tangents(nfp[self._contour])
        tangents[self._nose] = polyline_tangents(nfp[self._nose])
        normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])

        fpts = (fp[:, None, :] + self._ring_offsets[None]).reshape(-1, 2)
        npts = (nfp[:, None, :] + self._nfp_steps[None, :, None] * normals[:, None, :]).reshape(-1, 2)
        vals = gather_bilinear(self._flat, self._state_which, np.vstack([fpts, npts]))
        fv = vals[:len(fpts)].reshape(N_FP, 1 + FP_BITS)
        nv = vals[len(fpts):].reshape(N_NFP, 1 + NFP_BITS)
        bits_fp = (~(fv[:, :1] > fv[:, 1:])).astype(np.uint8)
        bits_fp[~self.mask] = 0
        bits_nfp = (~(nv[:, :1] > nv[:, 1:])).astype(np.uint8)
        return StateVector(bits_fp, bits_nfp, zscore(fp_img))


def zscore(pts: np.ndarray) -> np.ndarray:
    """Per-axis z-scores of a point set; axes with std < 1e-9 map to zero."""
    mu = pts.mean(axis=0)
    sd = pts.std(axis=0)
    safe = np.where(sd < 1e-9, 1.0, sd)
    return np.where(sd < 1e-9, 0.0, (pts - mu) / safe)


def score_components(P, model, stack, mask, roi, weights: ScoreWeights = ScoreWeights(),
                     sigma_blur: float = 1.5) -> ScoreBreakdown:
    """One-shot scoring of a single hypothesis (builds a throwaway context)."""
    return ScoringContext(model, stack, mask, roi, weights, sigma_blur).score(P)


def build_state(P, model, stack, mask, roi, sigma_blur: float = 1.5) -> StateVector:
    return ScoringContext(model, stack, mask, roi, sigma_blur=sigma_blur).state(P)
