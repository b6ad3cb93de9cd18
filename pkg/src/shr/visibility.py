"""Landmark visibility from confidence-map shape.

Two features per FP map: the fraction of pixels above a relative threshold
(``eps1`` times the map maximum) and the share of total mass held by pixels
above an absolute threshold ``t2``. A two-class Gaussian classifier on these
features, shifted per landmark by a likelihood-ratio margin ``zeta``, decides
which detections are reliable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllZeroMap, DegenerateCovariance, InsufficientSamples
from .geometry import N_FP

VISIBLE, OCCLUDED = 0, 1
T2_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
ZETA_GRID = tuple(np.logspace(-1.0, 1.0, 30))


@dataclass(frozen=True)
class VisibilityFeatures:
    f1: float
    f2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f1, self.f2])


def extract_features(grid: np.ndarray, eps1: float = 0.1, t2: float = 0.2) -> VisibilityFeatures:
    g = np.asarray(grid, dtype=np.float64)
    theta = g.max()
    u2 = g.sum()
    if u2 <= 0 or theta <= 0:
        raise AllZeroMap("confidence map has no mass")
    f1 = np.count_nonzero(g > eps1 * theta) / g.size
    u1 = g[g > t2].sum()
    return VisibilityFeatures(float(f1), float(u1 / u2))


def _features_batch(maps: np.ndarray, eps1: float, t2: float) -> tuple[np.ndarray, np.ndarray]:
    """Features for a stack of maps; second output flags all-zero maps."""
    g = np.asarray(maps, dtype=np.float64).reshape(len(maps), -1)
    theta = g.max(axis=1)
    u2 = g.sum(axis=1)
    dead = (u2 <= 0) | (theta <= 0)
    f1 = (g > (eps1 * theta)[:, None]).sum(axis=1) / g.shape[1]
    u1 = np.where(g > t2, g, 0.0).sum(axis=1)
    f2 = np.divide(u1, u2, out=np.zeros_like(u1), where=~dead)
    return np.column_stack([f1, f2]), dead


@dataclass(frozen=True, eq=False)
class GaussianPairClassifier:
    """Full-covariance Gaussian per class; index 0 = visible, 1 = occluded."""

    means: np.ndarray  # (2, 2)
    covs: np.ndarray  # (2, 2, 2)
    priors: np.ndarray  # (2,)

    def log_joint(self, x) -> np.ndarray:
        """log(prior * density) for each class; shape (n, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((len(x), 2))
        for c in range(2):
            L = np.linalg.cholesky(self.covs[c])
            z = np.linalg.solve(L, (x - self.means[c]).T)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            out[:, c] = (np.log(self.priors[c]) - 0.5 * (z * z).sum(axis=0)
                         - 0.5 * logdet - np.log(2 * np.pi))
        return out

    def log_ratio(self, x) -> np.ndarray:
        """log of (prior-weighted occluded density / prior-weighted visible density)."""
        lj = self.log_joint(x)
        return lj[:, OCCLUDED] - lj[:, VISIBLE]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist(),
                "priors": self.priors.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GaussianPairClassifier":
        return cls(np.asarray(d["means"]), np.asarray(d["covs"]), np.asarray(d["priors"]))


def fit_classifier(features, occluded, reg: float = 1e-6) -> GaussianPairClassifier:
    """Per-class maximum-likelihood Gaussians; priors from class frequencies."""
    X = np.asarray(features, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(occluded, dtype=bool)
    means, covs, counts = [], [], []
    for c in (False, True):
        Xc = X[y == c]
        if len(Xc) < 3:
            raise InsufficientSamples(f"class {'occluded' if c else 'visible'} has {len(Xc)} samples")
        mu = Xc.mean(axis=0)
        d = Xc - mu
        cov = d.T @ d / len(Xc) + reg * np.eye(2)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovariance(str(exc)) from exc
        means.append(mu)
        covs.append(cov)
        counts.append(len(Xc))
    priors = np.array(counts, dtype=np.float64) / sum(counts)
    return GaussianPairClassifier(np.array(means), np.array(covs), priors)


@dataclass(frozen=True, eq=False)
class VisibilityModel:
    classifier: GaussianPairClassifier
    t2: float
    zeta: np.ndarray  # (19,)
    eps1: float = 0.1

    def to_dict(self) -> dict:
        return {**self.classifier.to_dict(), "t2": self.t2,
                "zeta": np.asarray(self.zeta).tolist(), "eps1": self.eps1}

    @classmethod
    def from_dict(cls, d) -> "VisibilityModel":
        return cls(GaussianPairClassifier.from_dict(d), float(d["t2"]),
                   np.asarray(d["zeta"], dtype=np.float64), float(d.get("eps1", 0.1)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "VisibilityModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def classify(model: VisibilityModel, features, landmark_index: int) -> bool:
    """True when the landmark is judged occluded."""
    x = features.as_array() if isinstance(features, VisibilityFeatures) else features
    lr = model.classifier.log_ratio(x)[0]
    return bool(lr > np.log(model.zeta[landmark_index]))


def _split_objective(log_ratio, nme, zeta):
    occ = log_ratio > np.log(zeta)
    if occ.all() or not occ.any():
        return None
    return nme[occ].mean() - nme[~occ].mean()


def learn_zeta(log_ratios, nmes, grid=ZETA_GRID) -> np.ndarray:
    """Per-landmark margin maximising mean NME(predicted occluded) - mean NME(predicted visible).

    ``log_ratios[k]`` and ``nmes[k]`` hold the training samples of landmark k.
    ``zeta = 1`` (the plain classifier) is always a candidate and is the
    fallback when no candidate splits the samples. Ties go to the smallest zeta.
    """
    candidates = sorted(set(float(z) for z in grid) | {1.0})
    out = np.ones(len(log_ratios))
    for k, (lr, e) in enumerate(zip(log_ratios, nmes)):
        lr = np.asarray(lr, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        best, best_val = 1.0, -np.inf
        for z in candidates:
            val = _split_objective(lr, e, z)
            # tolerance keeps rounding noise from overriding the tie rule
            if val is not None and val > best_val + 1e-12:
                best, best_val = z, val
        out[k] = best
    return out


def _accuracy(maps, occluded, eps1, t2):
    feats, dead = _features_batch(maps, eps1, t2)
    keep = ~dead
    clf = fit_classifier(feats[keep], occluded[keep])
    pred = np.ones(len(maps), dtype=bool)
    pred[keep] = clf.log_ratio(feats[keep]) > 0
    return float((pred == occluded).mean())


def learn_t2(maps, occluded, grid=T2_GRID, eps1: float = 0.1) -> float:
    """Threshold whose refit classifier has the best training accuracy (ties: smallest)."""
    maps = np.asarray(maps)
    occluded = np.asarray(occluded, dtype=bool)
    if len(maps) == 0:
        raise InsufficientSamples("no labelled maps")
    best, best_acc = None, -1.0
    for t2 in sorted(grid):
        try:
            acc = _accuracy(maps, occluded, eps1, t2)
        except (InsufficientSamples, DegenerateCovariance):
            continue
        if acc > best_acc:
            best, best_acc = float(t2), acc
    if best is None:
        raise InsufficientSamples("no threshold produced a usable classifier")
    return best


def landmark_log_ratios(model: VisibilityModel, maps_a: np.ndarray) -> np.ndarray:
    """log likelihood ratio per FP map; +inf for all-zero maps."""
    feats, dead = _features_batch(maps_a, model.eps1, model.t2)
    lr = np.full(len(maps_a), np.inf)
    if (~dead).any():
        lr[~dead] = model.classifier.log_ratio(feats[~dead])
    return lr


def select_visible(model: VisibilityModel, stack, x_a) -> tuple[np.ndarray, np.ndarray]:
    """Return (x_v, mask) where mask[k] is True for FPs judged visible."""
    x_a = np.asarray(x_a, dtype=np.float64).reshape(N_FP, 2)
    lr = landmark_log_ratios(model, stack.maps_a)
    mask = ~(lr > np.log(np.asarray(model.zeta)))
    return x_a[mask], mask


def fit_visibility_model(maps, occluded, landmark_ids, nme, eps1: float = 0.1,
                         t2_grid=T2_GRID, zeta_grid=ZETA_GRID) -> VisibilityModel:
    """Full training pass: t2 line search, classifier fit, per-landmark zeta."""
    maps = np.asarray(maps)
    occluded = np.asarray(occluded, dtype=bool)
    landmark_ids = np.asarray(landmark_ids)
    nme = np.asarray(nme, dtype=np.float64)
    t2 = learn_t2(maps, occluded, t2_grid, eps1)
    feats, dead = _features_batch(maps, eps1, t2)
    clf = fit_classifier(feats[~dead], occluded[~dead])
    lr = np.full(len(maps), np.inf)
    lr[~dead] = clf.log_ratio(feats[~dead])
    per_lr = [lr[landmark_ids == k] for k in range(N_FP)]
    per_nme = [nme[landmark_ids == k] for k in range(N_FP)]
    zeta = learn_zeta(per_lr, per_nme, zeta_grid)
    return VisibilityModel(clf, t2, zeta, eps1)
