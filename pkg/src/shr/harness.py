"""Dataset synthesis, training, lambda tuning and evaluation drivers.

Output layout under ``config.out``::

    config.json
    scenes/<split>/L<pct>/<index>/      scene bundles
    refdb/                              reference shape database
    visibility.json
    policy_sp<j>.bin                    one recurrent policy per SP
    lambdas.json, train_log.jsonl
    eval/report.json, eval/report.csv, eval/audit/L<pct>/<index>.jsonl
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import ndcg_score

from .config import RunConfig
from .confmap import load_scene, random_pose, save_scene, synth_scene
from .errors import (
    DivergenceDetected,
    IoError,
    NonFiniteActivation,
    NonFiniteGradient,
    NoTrajectories,
    RegistrationInfeasible,
    TooFewCorrespondences,
)
from .geometry import N_FP, fixture_model
from .policy import OptimizerState, init_params, load_policy, reinforce_update, save_policy
from .refine import Registration, detect_fps, prepare, refine_episode, register_baseline, run_inference
from .scoring import ScoreWeights, silhouette_polylines
from .spinit import ReferenceDatabase, ReferenceEntry, scene_context_feature
from .visibility import VisibilityModel, fit_visibility_model, select_visible

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METHODS = ("FP(All)", "FP(Vis)", "FP(Vis)+SHR", "FP(Vis)+Greedy")
LAMBDA_GRID = np.round(np.arange(0, 101) / 100.0, 2)

# stream tags for seed derivation
_SHR_STREAM, _TRAIN_STREAM = 1, 2


# ---------------------------------------------------------------------------
# seeds and paths


def scene_seed(root: int, split: str, level_index: int, index: int) -> int:
    """Counter-based scene seed; split and level blocks never overlap."""
    if not 0 <= index < 1_000_000:
        raise ValueError("scene index out of range")
    return ((int(root) * len(SPLITS) + SPLITS.index(split)) * 6 + level_index) * 1_000_000 + index


def child_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _level_tag(level: float) -> str:
    return f"L{int(round(level * 100)):02d}"


def _split_size(config: RunConfig, split: str) -> int:
    return {"train": config.n_train, "val": config.n_val, "test": config.n_test}[split]


def scene_dir(config: RunConfig, split: str, level: float, index: int) -> Path:
    return Path(config.out) / "scenes" / split / _level_tag(level) / f"{index:05d}"


def _level_index(level: float) -> int:
    from .confmap import OCCLUSION_LEVELS

    return min(range(len(OCCLUSION_LEVELS)), key=lambda i: abs(OCCLUSION_LEVELS[i] - level))


def iter_scenes(config: RunConfig, split: str, levels=None):
    """Yield (level, index, Scene) for every bundle of ``split``."""
    for level in levels if levels is not None else config.occlusion_levels:
        for i in range(_split_size(config, split)):
            d = scene_dir(config, split, level, i)
            try:
                yield level, i, load_scene(d)
            except OSError as exc:
                raise IoError(f"cannot read scene bundle {d}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synth


def make_scene(config: RunConfig, split: str, level: float, index: int, model=None):
    model = model or fixture_model()
    seed = scene_seed(config.seed, split, _level_index(level), index)
    roi = (0.0, 0.0, config.roi_side)
    pose = random_pose(np.random.default_rng(seed), roi, max_yaw=config.max_yaw)
    return synth_scene(model, pose, level, seed, roi=roi, sigma_blob=config.sigma_blob)


def build_reference_db(scenes) -> ReferenceDatabase:
    entries = [ReferenceEntry(scene_context_feature(sc.stack), sc.gt_landmarks2d[:N_FP])
               for sc in scenes]
    return ReferenceDatabase.from_entries(entries)


def cmd_synth(config: RunConfig) -> Path:
    """Write train/val/test bundles and the reference database."""
    out = Path(config.out)
    model = fixture_model()
    try:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
        clean = []
        for split in SPLITS:
            for level in config.occlusion_levels:
                for i in range(_split_size(config, split)):
                    sc = make_scene(config, split, level, i, model)
                    save_scene(sc, scene_dir(config, split, level, i))
                    if split == "train" and level == 0.0:
                        clean.append(sc)
        if not clean:
            # no clean level configured: render clean twins of the training poses
            clean = [make_scene(config, "train", 0.0, i, model) for i in range(config.n_train)]
        build_reference_db(clean).save(out / "refdb")
    except OSError as exc:
        raise IoError(f"cannot write scene bundles under {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# training


def visibility_training_data(scenes):
    """Per-FP maps with oracle occlusion labels and detection NME."""
    maps, occluded, ids, nme = [], [], [], []
    for sc in scenes:
        x_a = detect_fps(sc)
        err = np.linalg.norm(x_a - sc.gt_landmarks2d[:N_FP], axis=1) / sc.omega
        for k in range(N_FP):
            maps.append(sc.stack.maps_a[k])
            occluded.append(not sc.gt_visibility[k])
            ids.append(k)
            nme.append(err[k])
    return np.array(maps), np.array(occluded), np.array(ids), np.array(nme)


def load_artifacts(config: RunConfig):
    """(visibility model, reference db, policies, weights) from ``config.out``."""
    out = Path(config.out)
    try:
        vis = VisibilityModel.load(out / "visibility.json")
        db = ReferenceDatabase.load(out / "refdb")
        policies = [load_policy(out / f"policy_sp{j}.bin") for j in range(3)]
    except OSError as exc:
        raise IoError(f"missing training artifacts in {out}: {exc}") from exc
    lam = out / "lambdas.json"
    weights = ScoreWeights(*json.loads(lam.read_text())["lambdas"]) if lam.exists() else config.weights
    return vis, db, policies, weights


def _train_epochs(config, scenes, model, vis, db, policies, opts, weights, phase, log_fh):
    n_sp = len(model.sp_indices)
    for epoch in range(config.epochs):
        rng = child_rng(config.seed, _TRAIN_STREAM, phase, epoch)
        order = rng.permutation(len(scenes))
        for b, start in enumerate(range(0, len(order), config.batch_episodes)):
            batch = [[] for _ in range(n_sp)]
            for idx in order[start:start + config.batch_episodes]:
                try:
                    reg, initial = prepare(scenes[idx], model, vis, db, config, weights)
                except RegistrationInfeasible:
                    continue
                for j in range(n_sp):
                    try:
                        ep = refine_episode(j, reg, initial, config.T1, policies[j], rng, iteration=1)
                    except NonFiniteActivation as exc:
                        raise DivergenceDetected(
                            f"phase {phase} epoch {epoch} batch {b} sp {j}: {exc}") from exc
                    if len(ep.trajectory):
                        batch[j].append(ep.trajectory)
            for j in range(n_sp):
                if not batch[j]:
                    continue
                try:
                    policies[j], opts[j], info = reinforce_update(policies[j], batch[j], opts[j])
                except NonFiniteGradient as exc:
                    raise DivergenceDetected(
                        f"phase {phase} epoch {epoch} batch {b} sp {j}: {exc}") from exc
                rec = {"phase": phase, "epoch": epoch, "batch": b, "sp": j,
                       "episodes": len(batch[j]), **info}
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return policies, opts


def cmd_train(config: RunConfig) -> dict:
    """Fit the visibility model, train the policies, tune lambdas, retrain."""
    out = Path(config.out)
    model = fixture_model()
    train = [sc for _, _, sc in iter_scenes(config, "train")]
    maps, occluded, ids, nme = visibility_training_data(train)
    vis = fit_visibility_model(maps, occluded, ids, nme, eps1=config.eps1)
    vis.save(out / "visibility.json")
    db = ReferenceDatabase.load(out / "refdb")

    policies = [init_params(config.seed * 16 + j, config.leaky_slope) for j in range(3)]
    # one independent network per SP
    if len(policies) != len(model.sp_indices) or len({id(p) for p in policies}) != len(policies):
        raise ValueError("expected one independent policy per SensiblePoint")
    opts = [OptimizerState(lr=config.learning_rate, clip_norm=config.clip_norm,
                           baseline_momentum=config.baseline_momentum) for _ in range(3)]
    weights = ScoreWeights(*(config.lambdas_init if config.tune_lambdas else config.lambdas))
    with open(out / "train_log.jsonl", "w") as fh:
        policies, opts = _train_epochs(config, train, model, vis, db, policies, opts,
                                       weights, 0, fh)
        if config.tune_lambdas:
            _save_policies(out, policies)
            weights = cmd_tune_lambdas(config, policies=policies, vis=vis, db=db, weights=weights)
            policies, opts = _train_epochs(config, train, model, vis, db, policies, opts,
                                           weights, 1, fh)
    _save_policies(out, policies)
    _write_json(out / "lambdas.json", {"lambdas": list(weights.as_tuple())})
    return {"t2": vis.t2, "lambdas": list(weights.as_tuple())}


def _save_policies(out: Path, policies) -> None:
    for j, p in enumerate(policies):
        save_policy(p, out / f"policy_sp{j}.bin", {"sp": j})


# ---------------------------------------------------------------------------
# lambda tuning


def ndcg(scores, nrmes) -> float:
    """NDCG of ranking stages by ``scores`` against relevance from low NRME."""
    nrmes = np.asarray(nrmes, dtype=np.float64)
    lo, hi = nrmes.min(), nrmes.max()
    if hi - lo <= 0:
        return 1.0
    rel = (hi - nrmes) / (hi - lo)
    return float(ndcg_score(rel[None, :], np.asarray(scores, dtype=np.float64)[None, :]))


def _best_on_grid(objective) -> float:
    vals = np.array([objective(w) for w in LAMBDA_GRID])
    return float(LAMBDA_GRID[int(np.argmax(np.round(vals, 12)))])


def tune_lambdas(stages) -> ScoreWeights:
    """Two-phase grid search over recorded stages.

    ``stages`` holds one (s, nrme) pair per image: ``s`` of shape (n, 3) with
    columns s1, s2, s3 and ``nrme`` of shape (n,).
    """
    stages = [(np.asarray(s, dtype=np.float64), np.asarray(e, dtype=np.float64))
              for s, e in stages if len(e) > 1]
    if not stages:
        raise NoTrajectories("no recorded stages to tune on")
    l1 = float(np.mean([_best_on_grid(lambda w: ndcg(w * s[:, 0] + (1 - w) * s[:, 2], e))
                        for s, e in stages]))

    def mixed(w, s):
        return (1 - w) * (l1 * s[:, 0] + (1 - l1) * s[:, 2]) + w * s[:, 1]

    l2 = float(np.mean([_best_on_grid(lambda w: ndcg(mixed(w, s), e)) for s, e in stages]))
    lam = np.array([(1 - l2) * l1, l2, (1 - l2) * (1 - l1)])
    lam = lam / lam.sum()
    return ScoreWeights(*lam.tolist())


def cmd_tune_lambdas(config: RunConfig, policies=None, vis=None, db=None,
                     weights: ScoreWeights | None = None) -> ScoreWeights:
    """Record validation trajectories with the trained policies and tune lambdas."""
    model = fixture_model()
    if policies is None:
        vis, db, policies, _ = load_artifacts(config)
    weights = weights or ScoreWeights(*config.lambdas_init)
    stages = []
    for level, i, sc in iter_scenes(config, "val"):
        rng = child_rng(sc.seed, _SHR_STREAM)
        try:
            res = run_inference(sc, model, policies, vis, db, config, rng, weights=weights)
        except RegistrationInfeasible:
            continue
        s = np.array([[e["s1"], e["s2"], e["s3"]] for e in res.audit])
        stages.append((s, np.array([e["nrme"] for e in res.audit])))
    tuned = tune_lambdas(stages)
    _write_json(Path(config.out) / "lambdas.json", {"lambdas": list(tuned.as_tuple())})
    return tuned


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: list
    score_curves: dict
    levels: list
    methods: list

    def to_dict(self) -> dict:
        return {"methods": self.methods, "levels": self.levels, "rows": self.rows,
                "score_curves": self.score_curves}


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"q1": float(q1), "median": float(med), "q3": float(q3), "mean": float(v.mean())}


def _running_best(audit) -> list:
    return np.maximum.accumulate([e["s"] for e in audit]).tolist()


def evaluate_scene(scene, model, policies, vis, db, config, weights):
    """All four methods on one scene; returns (results, audit lines)."""
    x_a = detect_fps(scene)
    _, mask = select_visible(vis, scene.stack, x_a)
    reg = Registration(scene, model, mask, x_a, config, weights)
    p_all = register_baseline(scene, model, "all_fps", x_a=x_a)
    results = {"FP(All)": {"nrme": reg.nrme(p_all), "failure": False}}
    try:
        p_vis = register_baseline(scene, model, "visible_fps", x_a=x_a, mask=mask)
        results["FP(Vis)"] = {"nrme": reg.nrme(p_vis), "failure": False}
    except TooFewCorrespondences:
        results["FP(Vis)"] = {"nrme": results["FP(All)"]["nrme"], "failure": True}
    lines = []
    for name, greedy in (("FP(Vis)+SHR", False), ("FP(Vis)+Greedy", True)):
        try:
            res = run_inference(scene, model, policies, vis, db, config,
                                child_rng(scene.seed, _SHR_STREAM), greedy=greedy, weights=weights)
        except RegistrationInfeasible as exc:
            log.info("%s infeasible on scene %d: %s", name, scene.seed, exc)
            results[name] = {"nrme": results["FP(All)"]["nrme"], "failure": True}
            continue
        results[name] = {"nrme": reg.nrme(res.pose), "failure": False,
                         "score": res.best.score.s, "curve": _running_best(res.audit)}
        lines += [{"kind": "step", "method": name, **e} for e in res.audit]
    for name in METHODS:
        r = results[name]
        lines.append({"kind": "result", "method": name, "nrme": r["nrme"], "failure": r["failure"],
                      "score": r.get("score")})
    return results, lines


def cmd_eval(config: RunConfig) -> EvalReport:
    """Run every method on the test split and write report.json/csv plus audit logs."""
    model = fixture_model()
    vis, db, policies, weights = load_artifacts(config)
    eval_dir = Path(config.out) / "eval"
    rows, curves = [], {m: {} for m in METHODS[2:]}
    for level in config.occlusion_levels:
        per = {m: [] for m in METHODS}
        for _, i, sc in iter_scenes(config, "test", [level]):
            results, lines = evaluate_scene(sc, model, policies, vis, db, config, weights)
            path = eval_dir / "audit" / _level_tag(level) / f"{i:05d}.jsonl"
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in lines))
            except OSError as exc:
                raise IoError(f"cannot write {path}: {exc}") from exc
            for m in METHODS:
                per[m].append(results[m])
        for m in METHODS:
            rs = per[m]
            if not rs:
                continue
            row = {"method": m, "occlusion": level, "n": len(rs),
                   **summarize([r["nrme"] for r in rs]),
                   "failures": int(sum(r["failure"] for r in rs))}
            scored = [r for r in rs if "score" in r]
            row["mean_score"] = float(np.mean([r["score"] for r in scored])) if scored else None
            rows.append(row)
            if m in curves and scored:
                curves[m][_level_tag(level)] = np.mean([r["curve"] for r in scored], axis=0).tolist()
    report = EvalReport(rows, curves, list(config.occlusion_levels), list(METHODS))
    _write_json(eval_dir / "report.json", report.to_dict())
    try:
        with open(eval_dir / "report.csv", "w", newline="") as fh:
            cols = ["method", "occlusion", "n", "q1", "median", "q3", "mean", "failures"]
            w = csv.DictWriter(fh, cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write report.csv: {exc}") from exc
    return report


# ---------------------------------------------------------------------------
# single scene


def cmd_register(config: RunConfig, scene_path, out_path=None) -> dict:
    """Register one bundle; writes pose.json and overlay.json next to ``out_path``."""
    model = fixture_model()
    try:
        scene = load_scene(scene_path)
    except OSError as exc:
        raise IoError(f"cannot read scene bundle {scene_path}: {exc}") from exc
    vis, db, policies, weights = load_artifacts(config)
    res = run_inference(scene, model, policies, vis, db, config,
                        child_rng(scene.seed, _SHR_STREAM), weights=weights, with_gt=False)
    P = res.pose
    contour, nose = silhouette_polylines(P, model)
    out = Path(out_path or Path(config.out) / "register")
    pose = {"pose": P.to_dict(), "score": res.best.score.to_dict(),
            "visible": [bool(v) for v in res.mask]}
    overlay = {"fp_points": (model.fp_points @ P.matrix.T + P.translation).tolist(),
               "polylines": {"contour": contour.tolist(), "nose": nose.tolist()},
               "sp_points": res.best.sp_positions.tolist(),
               "score": res.best.score.to_dict()}
    _write_json(out / "pose.json", pose)
    _write_json(out / "overlay.json", overlay)
    return {"pose": pose, "overlay": overlay}
