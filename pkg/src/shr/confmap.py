"""Confidence maps: rendering, blurring, bilinear sampling, synthetic scenes.

The synthetic scene generator stands in for the two landmark networks. A
visible landmark gets a sharp, high blob; an occluded one gets a broad,
low-contrast response with a smooth noise floor whose peak is displaced from
the true location (the detector still has to guess somewhere).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidOcclusionFraction
from .geometry import N_FP, N_NFP, Model3D, PoseHypothesis, project

MAP_SIZE = 80
OCCLUSION_LEVELS = (0.0, 0.01, 0.04, 0.09, 0.16, 0.25)
NFP_OCCLUDED_GAIN = 0.1

_ys, _xs = np.mgrid[0:MAP_SIZE, 0:MAP_SIZE].astype(np.float64)


def render_blob(center, sigma_blob: float = 2.0, amplitude: float = 1.0) -> np.ndarray:
    """Gaussian blob on the 80x80 grid; ``center`` is (x, y) in map coordinates."""
    cx, cy = center
    d2 = (_xs - cx) ** 2 + (_ys - cy) ** 2
    return np.clip(amplitude * np.exp(-d2 / (2.0 * sigma_blob**2)), 0.0, 1.0)


def render_occluded(center, seed: int) -> np.ndarray:
    """Broad low-contrast response plus a smooth noise floor (long-tailed histogram)."""
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(8.0, 12.0)
    peak = rng.uniform(0.25, 0.4)
    floor = gaussian_filter(rng.random((MAP_SIZE, MAP_SIZE)), 4.0, mode="reflect")
    floor -= floor.min()
    floor *= rng.uniform(0.5, 1.0) * 0.15 / max(floor.max(), 1e-12)
    return np.clip(render_blob(center, sigma, peak) + floor, 0.0, 1.0)


def render_ridge(p0, p1, sigma: float, amplitude: float) -> np.ndarray:
    """Gaussian tube around the segment p0-p1."""
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    L2 = float(d @ d)
    if L2 < 1e-12:
        return render_blob(p0, sigma, amplitude)
    u = np.clip(((_xs - p0[0]) * d[0] + (_ys - p0[1]) * d[1]) / L2, 0.0, 1.0)
    dx = _xs - (p0[0] + u * d[0])
    dy = _ys - (p0[1] + u * d[1])
    return amplitude * np.exp(-(dx**2 + dy**2) / (2.0 * sigma**2))


def sample_bilinear(grid: np.ndarray, p) -> np.ndarray | float:
    """Bilinear lookup at continuous (x, y) map coordinates; zero outside [0, 79]^2.

    Accepts a single point or an (n, 2) array.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    out = _bilinear(grid[None], np.zeros(len(pts), dtype=np.int64), pts)
    return float(out[0]) if single else out


def sample_stack(maps: np.ndarray, which, pts) -> np.ndarray:
    """Sample ``maps[which[i]]`` at ``pts[i]`` for every i."""
    return _bilinear(maps, np.asarray(which, dtype=np.int64), np.asarray(pts, dtype=np.float64).reshape(-1, 2))


def _bilinear(maps, which, pts):
    return gather_bilinear(np.ascontiguousarray(maps).reshape(-1), which, pts)


def gather_bilinear(flat: np.ndarray, which, pts) -> np.ndarray:
    """Bilinear samples from a flattened (k, 80, 80) stack; zero outside the grid."""
    n = MAP_SIZE - 1
    x = pts[:, 0]
    y = pts[:, 1]
    inside = (x >= 0) & (x <= n) & (y >= 0) & (y <= n)
    xc = np.where(inside, x, 0.0)
    yc = np.where(inside, y, 0.0)
    x0 = np.minimum(xc.astype(np.int64), n - 1)
    y0 = np.minimum(yc.astype(np.int64), n - 1)
    fx = xc - x0
    fy = yc - y0
    base = which * (MAP_SIZE * MAP_SIZE) + y0 * MAP_SIZE + x0
    top = flat[base] * (1 - fx) + flat[base + 1] * fx
    bot = flat[base + MAP_SIZE] * (1 - fx) + flat[base + MAP_SIZE + 1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, 0.0)


def blur(grid: np.ndarray, sigma_blur: float = 1.5) -> np.ndarray:
    """Gaussian blur with reflect padding, clamped to [0, 1]."""
    if sigma_blur <= 0:
        raise ValueError("sigma_blur must be positive")
    out = gaussian_filter(np.asarray(grid, dtype=np.float64), sigma_blur, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def argmax_subpixel(grid: np.ndarray) -> np.ndarray:
    """Location (x, y) of the maximum, refined with a 1D parabola per axis.

    The parabola is fitted to log values when all three are positive, which
    is exact for Gaussian peaks; otherwise to the raw values.
    """
    g = np.asarray(grid, dtype=np.float64)
    iy, ix = np.unravel_index(int(np.argmax(g)), g.shape)
    pos = np.array([ix, iy], dtype=np.float64)
    if 0 < ix < MAP_SIZE - 1:
        pos[0] += _parabola_offset(g[iy, ix - 1], g[iy, ix], g[iy, ix + 1])
    if 0 < iy < MAP_SIZE - 1:
        pos[1] += _parabola_offset(g[iy - 1, ix], g[iy, ix], g[iy + 1, ix])
    return pos


def _parabola_offset(l, c, r) -> float:
    if l > 0 and c > 0 and r > 0:
        l, c, r = np.log(l), np.log(c), np.log(r)
    den = float(l) - 2.0 * float(c) + float(r)
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (float(l) - float(r)) / den, -0.5, 0.5))


@dataclass(frozen=True, eq=False)
class ConfidenceStack:
    maps_a: np.ndarray  # (19, 80, 80)
    maps_b: np.ndarray  # (21, 80, 80)
    sum_b: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.maps_a, dtype=np.float32)
        b = np.asarray(self.maps_b, dtype=np.float32)
        if a.shape != (N_FP, MAP_SIZE, MAP_SIZE) or b.shape != (N_NFP, MAP_SIZE, MAP_SIZE):
            raise ValueError(f"bad stack shapes {a.shape} {b.shape}")
        object.__setattr__(self, "maps_a", a)
        object.__setattr__(self, "maps_b", b)
        object.__setattr__(self, "sum_b", b.astype(np.float64).sum(axis=0))


@dataclass(frozen=True, eq=False)
class Scene:
    stack: ConfidenceStack
    roi: tuple  # (x0, y0, side) in image pixels
    gt_pose: PoseHypothesis
    gt_landmarks2d: np.ndarray  # (38, 2)
    gt_visibility: np.ndarray  # (19,) bool
    occlusion_patches: tuple = ()  # ((x0, y0, w, h), ...)
    occlusion_fraction: float = 0.0
    seed: int = 0

    @property
    def q(self) -> float:
        """Image pixels per map cell."""
        return self.roi[2] / MAP_SIZE

    @property
    def omega(self) -> float:
        """Square root of the ROI area."""
        return float(self.roi[2])

    @property
    def roi_origin(self) -> np.ndarray:
        return np.array(self.roi[:2], dtype=np.float64)

    def to_map(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.roi_origin) / self.q

    def to_image(self, m) -> np.ndarray:
        return np.asarray(m, dtype=np.float64) * self.q + self.roi_origin

    def meta(self) -> dict:
        return {
            "roi": list(self.roi),
            "q": self.q,
            "pose": self.gt_pose.to_dict(),
            "gt_landmarks2d": self.gt_landmarks2d.tolist(),
            "gt_visibility": [bool(v) for v in self.gt_visibility],
            "occlusion_patches": [list(r) for r in self.occlusion_patches],
            "occlusion_fraction": self.occlusion_fraction,
            "seed": self.seed,
        }


def _inside_rects(pts, rects):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hit = np.zeros(len(pts), dtype=bool)
    for x0, y0, w, h in rects:
        hit |= ((pts[:, 0] >= x0) & (pts[:, 0] <= x0 + w)
                & (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + h))
    return hit


def synth_scene(model: Model3D, pose: PoseHypothesis, occlusion_fraction: float, seed: int,
                roi=(0.0, 0.0, 160.0), sigma_blob: float = 2.0,
                detection_jitter: float = 0.25, amplitude_range=(0.85, 1.0)) -> Scene:
    """Render one registration problem under ``pose``.

    The occluder is one axis-aligned square of area ``occlusion_fraction``
    times the ROI area, placed uniformly inside the ROI. A noiseless scene
    uses ``detection_jitter=0`` and ``amplitude_range=(1, 1)``.
    """
    if not any(abs(occlusion_fraction - lv) < 1e-12 for lv in OCCLUSION_LEVELS):
        raise InvalidOcclusionFraction(f"{occlusion_fraction} not in {OCCLUSION_LEVELS}")
    rng = np.random.default_rng(seed)
    x0, y0, side = (float(v) for v in roi)
    q = side / MAP_SIZE

    rects = []
    if occlusion_fraction > 0:
        w = np.sqrt(occlusion_fraction) * side
        rects.append((x0 + rng.uniform(0, side - w), y0 + rng.uniform(0, side - w), w, w))
    rects = tuple(rects)

    fp2d = project(pose, model.fp_points)
    nfp2d = project(pose, model.nfp_points)
    facing = (model.normals[model.fp_indices] @ pose.rotation.T)[:, 2] > 0
    visible = facing & ~_inside_rects(fp2d, rects)

    def jitter(n):
        j = rng.normal(0.0, detection_jitter, size=(n, 2))
        norm = np.linalg.norm(j, axis=1, keepdims=True)
        return j * np.minimum(1.0, 0.35 / np.maximum(norm, 1e-12))

    fp_map = (fp2d - (x0, y0)) / q
    maps_a = np.empty((N_FP, MAP_SIZE, MAP_SIZE))
    fp_jit = jitter(N_FP)
    for k in range(N_FP):
        if visible[k]:
            maps_a[k] = render_blob(fp_map[k] + fp_jit[k], sigma_blob, rng.uniform(*amplitude_range))
        else:
            ang = rng.uniform(0, 2 * np.pi)
            off = rng.uniform(2.0, 10.0) * np.array([np.cos(ang), np.sin(ang)])
            maps_a[k] = render_occluded(fp_map[k] + off, int(rng.integers(2**31)))

    nfp_map = (nfp2d - (x0, y0)) / q + jitter(N_NFP)
    neighbours = {k: [] for k in range(N_NFP)}
    for order in (model.contour_order, model.nose_order):
        for a, b in zip(order[:-1], order[1:]):
            neighbours[int(a)].append(int(b))
            neighbours[int(b)].append(int(a))
    rect_mask = np.zeros((MAP_SIZE, MAP_SIZE), dtype=bool)
    for rx, ry, rw, rh in rects:
        mx0, my0 = (rx - x0) / q, (ry - y0) / q
        rect_mask |= ((_xs >= mx0) & (_xs <= mx0 + rw / q) & (_ys >= my0) & (_ys <= my0 + rh / q))
    maps_b = np.empty((N_NFP, MAP_SIZE, MAP_SIZE))
    for k in range(N_NFP):
        amp = rng.uniform(*amplitude_range)
        g = render_blob(nfp_map[k], sigma_blob, amp)
        for nb in neighbours[k]:
            mid = 0.5 * (nfp_map[k] + nfp_map[nb])
            g = np.maximum(g, render_ridge(nfp_map[k], mid, sigma_blob, 0.6 * amp))
        g[rect_mask] *= NFP_OCCLUDED_GAIN
        maps_b[k] = g

    stack = ConfidenceStack(maps_a, maps_b)
    gt = project(pose, model.points[model.landmark_indices])
    return Scene(stack=stack, roi=(x0, y0, side), gt_pose=pose, gt_landmarks2d=gt,
                 gt_visibility=visible, occlusion_patches=rects,
                 occlusion_fraction=float(occlusion_fraction), seed=int(seed))


def random_pose(rng: np.random.Generator, roi=(0.0, 0.0, 160.0), max_yaw: float = 50.0,
                max_pitch: float = 12.0, max_roll: float = 12.0) -> PoseHypothesis:
    from .geometry import euler_to_rotation

    x0, y0, side = roi
    R = euler_to_rotation(rng.uniform(-max_yaw, max_yaw), rng.uniform(-max_pitch, max_pitch),
                          rng.uniform(-max_roll, max_roll))
    s = side * 0.30 * rng.uniform(0.92, 1.08)
    t = np.array([x0, y0]) + side / 2 + rng.uniform(-4, 4, size=2)
    return PoseHypothesis(s, R, t)


# ---------------------------------------------------------------------------
# scene bundles


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps(scene.meta(), indent=1, sort_keys=True))
    scene.stack.maps_a.astype("<f4").tofile(d / "maps_a.bin")
    scene.stack.maps_b.astype("<f4").tofile(d / "maps_b.bin")


def load_scene(directory) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    a = np.fromfile(d / "maps_a.bin", dtype="<f4")
    b = np.fromfile(d / "maps_b.bin", dtype="<f4")
    if a.size != N_FP * MAP_SIZE**2 or b.size != N_NFP * MAP_SIZE**2:
        raise ValueError(f"corrupt map files in {d}")
    stack = ConfidenceStack(a.reshape(N_FP, MAP_SIZE, MAP_SIZE), b.reshape(N_NFP, MAP_SIZE, MAP_SIZE))
    return Scene(
        stack=stack,
        roi=tuple(meta["roi"]),
        gt_pose=PoseHypothesis.from_dict(meta["pose"]),
        gt_landmarks2d=np.asarray(meta["gt_landmarks2d"]),
        gt_visibility=np.asarray(meta["gt_visibility"], dtype=bool),
        occlusion_patches=tuple(tuple(r) for r in meta["occlusion_patches"]),
        occlusion_fraction=meta["occlusion_fraction"],
        seed=meta["seed"],
    )
