"""Hypothesis generation and the SensiblePoint refinement loop.

A hypothesis is the weak-perspective pose solved from the three SP positions
plus the visible non-SP FP detections. Each iteration runs one episode per
SP from the best configuration found so far, moving only that SP; every
visited configuration is scored and the best over all iterations wins.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .confmap import Scene
from .errors import (
    DegenerateConfiguration,
    EmptyDatabase,
    RegistrationInfeasible,
    TooFewCorrespondences,
    TooFewVisible,
)
from .geometry import Model3D, PoseHypothesis, WeakPerspectiveSolver, estimate_weak_perspective, nrme
from .policy import ACTIONS, N_ACTIONS, RecurrentState, Trajectory, apply_action, forward, sample_action
from .scoring import ScoreBreakdown, ScoreWeights, ScoringContext, reward
from .spinit import detect_landmarks, init_sensiblepoints
from .visibility import select_visible

log = logging.getLogger(__name__)

_SOLVE_ERRORS = (TooFewCorrespondences, DegenerateConfiguration)


@dataclass(frozen=True, eq=False)
class HypothesisRecord:
    sp_positions: np.ndarray
    pose: PoseHypothesis
    score: ScoreBreakdown
    provenance: tuple | None = None  # (iteration, sp, step); None for the initial one

    @property
    def order_key(self) -> tuple:
        return (-1, -1, -1) if self.provenance is None else self.provenance


def hypothesize(x_c, x_v, model: Model3D, mask) -> PoseHypothesis:
    """Pose from [SPs; visible non-SP FPs]. ``x_v`` lists visible FP detections in FP order."""
    mask = np.asarray(mask, dtype=bool)
    x_v = np.asarray(x_v, dtype=np.float64).reshape(-1, 2)
    sp_pos = model.sp_fp_positions
    vis_idx = np.flatnonzero(mask)
    keep = ~np.isin(vis_idx, sp_pos)
    pts2 = np.vstack([np.asarray(x_c, dtype=np.float64).reshape(-1, 2), x_v[keep]])
    pts3 = np.vstack([model.sp_points, model.fp_points[vis_idx[keep]]])
    return estimate_weak_perspective((pts2, pts3))


class Registration:
    """Everything needed to score SP configurations on one scene."""

    def __init__(self, scene: Scene, model: Model3D, mask, x_a, config: RunConfig,
                 weights: ScoreWeights | None = None):
        self.scene = scene
        self.model = model
        self.config = config
        self.mask = np.asarray(mask, dtype=bool)
        self.x_a = np.asarray(x_a, dtype=np.float64)
        self.x_v = self.x_a[self.mask]
        self.ctx = ScoringContext(model, scene.stack, self.mask, scene.roi,
                                  weights or config.weights, config.sigma_blur)
        vis_idx = np.flatnonzero(self.mask)
        keep = ~np.isin(vis_idx, model.sp_fp_positions)
        self._fixed2 = self.x_a[vis_idx[keep]]
        self._fixed3 = model.fp_points[vis_idx[keep]]
        self._sp3 = model.sp_points
        self._solver = None
        try:
            self._solver = WeakPerspectiveSolver(np.vstack([self._sp3, self._fixed3]))
        except (TooFewCorrespondences, DegenerateConfiguration) as exc:
            self._solver_error = exc
        self._eval3 = model.points[model.landmark_indices]
        self.step = config.eps2 * scene.omega

    def hypothesize(self, x_c) -> PoseHypothesis:
        if self._solver is None:
            raise self._solver_error
        return self._solver.solve(np.vstack([x_c, self._fixed2]))

    def evaluate(self, x_c) -> tuple[PoseHypothesis, ScoreBreakdown]:
        P = self.hypothesize(x_c)
        return P, self.ctx.score(P)

    def move(self, x_c, j: int, action: int) -> np.ndarray:
        out = np.array(x_c, dtype=np.float64)
        out[j] = apply_action(out[j], action, self.config.eps2, self.scene.omega, self.scene.roi)
        return out

    def nrme(self, P: PoseHypothesis) -> float:
        return nrme(P, self._eval3, self.scene.gt_landmarks2d, self.scene.omega)


def detect_fps(scene: Scene) -> np.ndarray:
    """FP detections in image coordinates (sub-pixel argmax of each map)."""
    return scene.to_image(detect_landmarks(scene.stack.maps_a))


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    records: list
    best: HypothesisRecord
    actions: list = field(default_factory=list)
    aborted: bool = False


def _best(records):
    best = records[0]
    for r in records[1:]:
        if r.score.s > best.score.s:
            best = r
    return best


def refine_episode(j: int, reg: Registration, start: HypothesisRecord, T1: int,
                   params=None, rng: np.random.Generator | None = None,
                   iteration: int = 0, greedy: bool = False) -> EpisodeResult:
    """Move SP ``j`` for T1 steps with the policy (or greedily) from ``start``.

    ``best`` is the highest-scoring record visited in this episode (earliest
    on ties); if the episode aborts before its first step it is ``start``.
    """
    if T1 < 1:
        raise ValueError("T1 must be >= 1")
    traj = Trajectory()
    records, actions = [], []
    x_c = np.array(start.sp_positions, dtype=np.float64)
    P = start.pose
    s0 = start.score.s
    rs = RecurrentState()
    aborted = False
    for t in range(1, T1 + 1):
        try:
            if greedy:
                action, x_next, P_next, sc = greedy_step(x_c, j, reg)
                logp, tau = 0.0, None
            else:
                tau = reg.ctx.state(P).as_array()
                probs, rs = forward(params, tau, rs)
                action = sample_action(probs, rng)
                logp = float(np.log(probs[action]))
                x_next = reg.move(x_c, j, action)
                P_next, sc = reg.evaluate(x_next)
        except _SOLVE_ERRORS as exc:
            log.info("episode sp=%d aborted at step %d: %s", j, t, exc)
            aborted = True
            break
        if tau is not None:
            traj.append(tau, action, logp, reward(sc.s, s0))
        x_c, P = x_next, P_next
        records.append(HypothesisRecord(x_c.copy(), P, sc, (iteration, j, t)))
        actions.append(action)
    best = _best(records) if records else start
    return EpisodeResult(traj, records, best, actions, aborted)


def greedy_step(x_c, j: int, reg: Registration):
    """Try all four moves of SP ``j``; keep the best (ties: up, down, left, right)."""
    best = None
    for a in range(N_ACTIONS):
        cand = reg.move(x_c, j, a)
        P, sc = reg.evaluate(cand)
        if best is None or sc.s > best[3].s:
            best = (a, cand, P, sc)
    return best


@dataclass
class InferenceResult:
    pose: PoseHypothesis
    best: HypothesisRecord
    initial: HypothesisRecord
    audit: list
    mask: np.ndarray
    x_a: np.ndarray
    n_scored: int
    accepted: list = field(default_factory=list)  # successive global bests, initial first


def prepare(scene: Scene, model: Model3D, vis_model, db, config: RunConfig,
            weights: ScoreWeights | None = None) -> tuple[Registration, HypothesisRecord]:
    """Alg. steps 1-4: detect, select visible FPs, initialise SPs, score the first hypothesis."""
    x_a = detect_fps(scene)
    _, mask = select_visible(vis_model, scene.stack, x_a)
    reg = Registration(scene, model, mask, x_a, config, weights)
    try:
        x_c0 = init_sensiblepoints(model, reg.x_v, mask, db, scene.stack, roi=scene.roi,
                                   detections_map=scene.to_map(x_a), k=config.retrieve_k,
                                   yaw_threshold=config.yaw_threshold)
        P0, s0 = reg.evaluate(x_c0)
    except (TooFewVisible, EmptyDatabase) + _SOLVE_ERRORS as exc:
        raise RegistrationInfeasible(
            f"scene seed={scene.seed}: {int(mask.sum())} visible FPs; {exc}") from exc
    return reg, HypothesisRecord(np.asarray(x_c0, dtype=np.float64), P0, s0, None)


def _audit_entry(reg, rec, action=None, with_gt=True):
    it, sp, step = rec.provenance if rec.provenance else (None, None, 0)
    e = {"iteration": it, "sp": sp, "step": step,
         "action": None if action is None else ACTIONS[action], **rec.score.to_dict()}
    if with_gt:
        e["nrme"] = reg.nrme(rec.pose)
    return e


def run_inference(scene: Scene, model: Model3D, policies, vis_model, db, config: RunConfig,
                  rng: np.random.Generator | None = None, greedy: bool = False,
                  weights: ScoreWeights | None = None, with_gt: bool = True) -> InferenceResult:
    """Full refinement loop; ``policies`` holds one parameter set per SP (ignored when greedy)."""
    if not greedy and len(policies) != len(model.sp_indices):
        raise ValueError("one policy per SensiblePoint is required")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    reg, initial = prepare(scene, model, vis_model, db, config, weights)
    audit = [_audit_entry(reg, initial, None, with_gt)]
    best = initial
    accepted = [initial]
    n_scored = 1
    for it in range(1, config.T2 + 1):
        start = best
        for j in range(len(model.sp_indices)):
            ep = refine_episode(j, reg, start, config.T1, None if greedy else policies[j],
                                rng, iteration=it, greedy=greedy)
            for rec, a in zip(ep.records, ep.actions):
                audit.append(_audit_entry(reg, rec, a, with_gt))
            n_scored += len(ep.records)
            if ep.records and ep.best.score.s > best.score.s:
                best = ep.best
                accepted.append(best)
    return InferenceResult(best.pose, best, initial, audit, reg.mask, reg.x_a, n_scored, accepted)


def register_baseline(scene: Scene, model: Model3D, mode: str = "all_fps", vis_model=None,
                      x_a=None, mask=None) -> PoseHypothesis:
    """FP(All) or FP(Vis): weak-perspective solve on detected FPs."""
    x_a = detect_fps(scene) if x_a is None else np.asarray(x_a)
    if mode == "all_fps":
        return estimate_weak_perspective((x_a, model.fp_points))
    if mode != "visible_fps":
        raise ValueError(f"unknown mode {mode!r}")
    if mask is None:
        _, mask = select_visible(vis_model, scene.stack, x_a)
    mask = np.asarray(mask, dtype=bool)
    return estimate_weak_perspective((x_a[mask], model.fp_points[mask]))
