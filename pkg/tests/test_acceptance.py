"""Acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary. Run standalone with ``python tests/test_acceptance.py``.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from shr.config import RunConfig
from shr.confmap import OCCLUSION_LEVELS, random_pose, synth_scene
from shr.errors import RegistrationInfeasible
from shr.geometry import PoseHypothesis, estimate_weak_perspective, project
from shr.harness import cmd_eval, cmd_synth, cmd_train, visibility_training_data
from shr.policy import (
    PARAM_SHAPES,
    OptimizerState,
    Trajectory,
    forward,
    init_params,
    reinforce_update,
    trajectory_grad,
)
from shr.refine import run_inference
from shr.scoring import STATE_DIM
from shr.visibility import _features_batch, _split_objective, fit_visibility_model, learn_zeta

from tests_acceptance_log import report

# desk-scale dataset for the end-to-end criteria (see README)
E2E = dict(n_train=50, n_val=20, n_test=200)


# ---------------------------------------------------------------------------
# 1. pose solver


def test_c1_pose_solver_recovery():
    rng = np.random.default_rng(2024)
    poses = []
    for _ in range(100):
        R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        P = PoseHypothesis(rng.uniform(0.5, 2.0), R, rng.uniform(-40, 40, 2))
        X = rng.normal(size=(10, 3))
        poses.append((P, X, project(P, X)))
    t0 = time.perf_counter()
    worst = 0.0
    for P, X, x in poses:
        Q = estimate_weak_perspective((x, X))
        worst = max(worst, float(np.linalg.norm(project(Q, X) - x, axis=1).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 1.0
    report(1, ok, f"max reprojection error {worst:.2e} (< 1e-8), {dt * 1e3:.1f} ms (< 1 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient check against an independent batched forward


def _lrelu(x, a):
    return np.where(x > 0, x, a * x)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _oracle_losses(p, a, X, actions, adv, name, rows, cols, h):
    """Loss for a batch of single-coordinate perturbations of parameter ``name``.

    Written independently of the package: plain per-layer algebra, LSTM gates
    in i, f, o, g order. Returns (losses, activation sign patterns per layer).
    """
    B = len(rows)
    T = len(X)
    ar = np.arange(B)

    def bump(z, src):
        # z: (B, T, n); add h * src[b, :, col_b] to row_b
        if src is None:
            z[ar, :, rows] += h
        else:
            z[ar, :, rows] += h * src[ar, :, cols]
        return z

    def layer(inp, W, b, tag):
        z = np.broadcast_to(inp @ W.T + b, (B, T, len(b))).copy() if inp.ndim == 2 else inp @ W.T + b
        if name == "W" + tag:
            z = bump(z, np.broadcast_to(inp, (B,) + inp.shape[-2:]) if inp.ndim == 2 else inp)
        elif name == "b" + tag:
            z = bump(z, None)
        return z

    z1 = layer(X, p["W1"], p["b1"], "1")
    h1 = _lrelu(z1, a)
    z2 = layer(h1, p["W2"], p["b2"], "2")
    h2 = _lrelu(z2, a)
    z3 = layer(h2, p["W3"], p["b3"], "3")
    h3 = _lrelu(z3, a)
    xin = h3 @ p["Wx"].T + p["bl"]
    if name == "Wx":
        xin = bump(xin, h3)
    elif name == "bl":
        xin = bump(xin, None)
    H = p["Wh"].shape[1]
    hprev = np.zeros((B, H))
    cprev = np.zeros((B, H))
    hs = np.zeros((B, T, H))
    for t in range(T):
        z = xin[:, t] + hprev @ p["Wh"].T
        if name == "Wh":
            z[ar, rows] += h * hprev[ar, cols]
        i, f, o = _sig(z[:, :H]), _sig(z[:, H:2 * H]), _sig(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        cprev = f * cprev + i * g
        hprev = o * np.tanh(cprev)
        hs[:, t] = hprev
    logits = hs @ p["Wo"].T + p["bo"]
    if name == "Wo":
        logits = bump(logits, hs)
    elif name == "bo":
        logits = bump(logits, None)
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    chosen = logp[:, np.arange(T), actions]
    losses = -(chosen * adv).sum(axis=1)
    signs = np.concatenate([(z1 > 0).reshape(B, -1), (z2 > 0).reshape(B, -1),
                            (z3 > 0).reshape(B, -1)], axis=1)
    return losses, signs


def _fd_check(params, traj, baseline, h=1e-4):
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.arrays.items()}
    a = params.slope
    X = np.asarray(traj.states)
    actions = np.asarray(traj.actions)
    adv = np.asarray(traj.rewards) - baseline
    grads = trajectory_grad(params, traj, baseline)
    _, base_signs = _oracle_losses(p, a, X, actions, adv, "bo", np.array([0]), np.array([0]), 0.0)
    checked = skipped = 0
    worst = 0.0
    for name, shape in PARAM_SHAPES.items():
        g = grads[name].reshape(shape if len(shape) == 2 else (shape[0], 1))
        R, C = np.nonzero(np.abs(g) > 1e-6)
        for s in range(0, len(R), 4096):
            rows, cols = R[s:s + 4096], C[s:s + 4096]
            lp, sp = _oracle_losses(p, a, X, actions, adv, name, rows, cols, h)
            lm, sm = _oracle_losses(p, a, X, actions, adv, name, rows, cols, -h)
            fd = (lp - lm) / (2 * h)
            an = g[rows, cols]
            # a Leaky-ReLU kink inside the stencil makes the central difference meaningless
            kink = (sp != base_signs).any(axis=1) | (sm != base_signs).any(axis=1)
            rel = np.abs(an - fd) / np.maximum(np.abs(an), np.abs(fd))
            skipped += int(kink.sum())
            checked += int((~kink).sum())
            if (~kink).any():
                worst = max(worst, float(rel[~kink].max()))
    return worst, checked, skipped


def test_c2_gradient_matches_finite_differences():
    worst, checked, skipped = 0.0, 0, 0
    for k in range(10):
        rng = np.random.default_rng(100 + k)
        params = init_params(200 + k, dtype=np.float64)
        traj = Trajectory()
        for _ in range(int(rng.integers(3, 8))):
            tau = np.concatenate([rng.integers(0, 2, STATE_DIM - 38), rng.normal(size=38)])
            traj.append(tau, int(rng.integers(4)), 0.0, float(rng.normal()))
        w, c, s = _fd_check(params, traj, baseline=float(rng.normal(0, 0.1)))
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    ok = worst < 1e-4 and checked > 0
    report(2, ok, f"max relative error {worst:.2e} (< 1e-4) over {checked} coordinates; "
                  f"{skipped} skipped at Leaky-ReLU kinks")
    assert ok


# ---------------------------------------------------------------------------
# 3. bandit


def _bandit(seed, target, max_updates=2000, batch=8):
    rng = np.random.default_rng(seed)
    tau = np.concatenate([rng.integers(0, 2, STATE_DIM - 38), rng.normal(size=38)])
    params = init_params(seed)
    opt = OptimizerState()
    for step in range(1, max_updates + 1):
        trajs = []
        for _ in range(batch):
            probs, _ = forward(params, tau)
            act = int(rng.choice(4, p=probs))
            tr = Trajectory()
            tr.append(tau, act, np.log(probs[act]), 1.0 if act == target else 0.0)
            trajs.append(tr)
        params, opt, _ = reinforce_update(params, trajs, opt)
        if forward(params, tau)[0][target] >= 0.9:
            return step
    return None


def test_c3_bandit_convergence():
    t0 = time.perf_counter()
    steps = [_bandit(seed, target=seed % 4) for seed in range(5)]
    dt = time.perf_counter() - t0
    ok = all(s is not None for s in steps) and dt < 30
    report(3, ok, f"updates to p>=0.9 per seed {steps} (<= 2000), {dt:.1f} s (< 30 s)")
    assert ok


# ---------------------------------------------------------------------------
# 4. monotone selection


@pytest.fixture(scope="module")
def fitted(model):
    from shr.harness import build_reference_db

    rng = np.random.default_rng(77)
    scenes = [synth_scene(model, random_pose(rng), OCCLUSION_LEVELS[i % 6], 70_000 + i)
              for i in range(120)]
    vis = fit_visibility_model(*visibility_training_data(scenes))
    db = build_reference_db([s for s in scenes if s.occlusion_fraction == 0])
    return vis, db


def test_c4_monotone_selection(model, fitted):
    vis, db = fitted
    cfg = RunConfig()
    policies = [init_params(j) for j in range(3)]
    rng = np.random.default_rng(4)
    n = infeasible = violations = 0
    seed = 80_000
    while n < 100:
        sc = synth_scene(model, random_pose(rng), OCCLUSION_LEVELS[seed % 6], seed)
        seed += 1
        try:
            res = run_inference(sc, model, policies, vis, db, cfg, np.random.default_rng(seed))
        except RegistrationInfeasible:
            infeasible += 1
            continue
        n += 1
        violations += not (res.best.score.s >= res.initial.score.s)
    ok = violations == 0
    report(4, ok, f"final >= initial score on {n - violations}/{n} scenes "
                  f"({infeasible} infeasible scenes replaced)")
    assert ok


# ---------------------------------------------------------------------------
# 5. visibility


def _map_stream(model, seed0, n_each):
    """Oracle-labelled visible and occluded FP maps with their detection NME."""
    rng = np.random.default_rng(seed0)
    vis_maps, occ_maps = [], []
    i = 0
    while len(vis_maps) < n_each or len(occ_maps) < n_each:
        sc = synth_scene(model, random_pose(rng), OCCLUSION_LEVELS[1 + i % 5], seed0 + i)
        i += 1
        maps, occ, ids, nme = visibility_training_data([sc])
        for m, o, k, e in zip(maps, occ, ids, nme):
            (occ_maps if o else vis_maps).append((m, k, e))
    sel = vis_maps[:n_each] + occ_maps[:n_each]
    maps = np.array([s[0] for s in sel])
    occluded = np.r_[np.zeros(n_each, bool), np.ones(n_each, bool)]
    return maps, occluded, np.array([s[1] for s in sel]), np.array([s[2] for s in sel])


def test_c5_visibility(model):
    maps, occ, ids, nme = _map_stream(model, 10_000, 500)
    vm = fit_visibility_model(maps, occ, ids, nme)
    hmaps, hocc, hids, _ = _map_stream(model, 20_000, 500)
    feats, dead = _features_batch(hmaps, vm.eps1, vm.t2)
    lr = np.full(len(hmaps), np.inf)
    lr[~dead] = vm.classifier.log_ratio(feats[~dead])
    acc = float(((lr > 0) == hocc).mean())
    acc_zeta = float(((lr > np.log(vm.zeta[hids])) == hocc).mean())

    tfeats, tdead = _features_batch(maps, vm.eps1, vm.t2)
    tlr = np.full(len(maps), np.inf)
    tlr[~tdead] = vm.classifier.log_ratio(tfeats[~tdead])
    worse = compared = 0
    for k in range(19):
        sel = ids == k
        at_one = _split_objective(tlr[sel], nme[sel], 1.0)
        at_star = _split_objective(tlr[sel], nme[sel], vm.zeta[k])
        if at_one is None:
            continue
        compared += 1
        worse += at_star is None or at_star < at_one
    # the learner itself must also agree with this check on the raw stream
    again = learn_zeta([tlr[ids == k] for k in range(19)], [nme[ids == k] for k in range(19)])
    ok = acc >= 0.9 and worse == 0 and np.array_equal(again, vm.zeta)
    report(5, ok, f"held-out accuracy {acc:.3f} (>= 0.90; zeta-adjusted {acc_zeta:.3f}); "
                  f"zeta never lowers the NME split on {compared - worse}/{compared} landmarks "
                  f"where zeta=1 splits")
    assert ok


# ---------------------------------------------------------------------------
# 6, 7. end-to-end trend and policy vs greedy


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run")
    cfg = RunConfig(out=str(out), **E2E)
    t0 = time.perf_counter()
    cmd_synth(cfg)
    t1 = time.perf_counter()
    cmd_train(cfg)
    t2 = time.perf_counter()
    report_ = cmd_eval(cfg)
    t3 = time.perf_counter()
    timing = {"synth": t1 - t0, "train": t2 - t1, "eval": t3 - t2}
    (out / "timing.json").write_text(json.dumps(timing))
    return cfg, report_, timing


def _row(rep, method, level):
    return next(r for r in rep.rows if r["method"] == method and abs(r["occlusion"] - level) < 1e-12)


@pytest.mark.slow
def test_c6_occlusion_trend(e2e_run):
    cfg, rep, timing = e2e_run
    parts, ok = [], True
    for level in (0.09, 0.16, 0.25):
        shr = _row(rep, "FP(Vis)+SHR", level)
        base = _row(rep, "FP(All)", level)
        good = shr["median"] <= base["median"] and shr["n"] == 200
        ok &= good
        parts.append(f"{int(level * 100)}%: {shr['median']:.4f} vs {base['median']:.4f}")
    shr25, base25 = _row(rep, "FP(Vis)+SHR", 0.25)["median"], _row(rep, "FP(All)", 0.25)["median"]
    gain = 1.0 - shr25 / base25
    total = sum(timing.values())
    ok &= gain >= 0.10 and total <= 1800
    report(6, ok, "median NRME SHR vs FP(All) " + ", ".join(parts)
           + f"; gain at 25% {gain:.1%} (>= 10%); synth+train+eval {total / 60:.1f} min (<= 30)")
    assert ok


@pytest.mark.slow
def test_c7_policy_beats_greedy(e2e_run):
    _, rep, _ = e2e_run
    # the policy-vs-greedy comparison is run without synthetic occlusion
    shr = _row(rep, "FP(Vis)+SHR", 0.0)
    greedy = _row(rep, "FP(Vis)+Greedy", 0.0)
    ok = shr["mean_score"] >= greedy["mean_score"]
    report(7, ok, f"mean final score on the 200 clean test scenes: policy {shr['mean_score']:.5f} "
                  f"vs greedy {greedy['mean_score']:.5f}")
    assert ok


# ---------------------------------------------------------------------------
# 8. structural constants


def test_c8_structural_constants(model, fitted):
    cfg = RunConfig()
    vis, db = fitted
    sc = synth_scene(model, random_pose(np.random.default_rng(8)), 0.09, 88)
    res = run_inference(sc, model, [init_params(j) for j in range(3)], vis, db, cfg,
                        np.random.default_rng(8))
    per_iter = [sum(1 for e in res.audit if e["iteration"] == it) for it in range(1, cfg.T2 + 1)]
    state = len(json.dumps(None)) and STATE_DIM
    checks = {
        "state length 544": state == 544,
        "pool 90 per iteration": per_iter == [90] * 4,
        "4 iterations": cfg.T2 == 4 and max(e["iteration"] or 0 for e in res.audit) == 4,
        "lambda defaults": cfg.lambdas == (0.21, 0.60, 0.19),
        "eps1 0.1": cfg.eps1 == 0.1,
        "eps2 0.01": cfg.eps2 == 0.01,
        "T1 30": cfg.T1 == 30,
    }
    ok = all(checks.values())
    report(8, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism


def test_c9_eval_determinism(tmp_path):
    cfg = RunConfig(out=str(tmp_path / "run"), n_train=6, n_val=2, n_test=3, epochs=1,
                    batch_episodes=4)
    cmd_synth(cfg)
    cmd_train(cfg)
    cmd_eval(cfg)
    first = (tmp_path / "run" / "eval" / "report.json").read_bytes()
    cmd_eval(cfg)
    second = (tmp_path / "run" / "eval" / "report.json").read_bytes()
    ok = first == second
    report(9, ok, f"report.json byte-identical across two cmd_eval runs ({len(first)} bytes)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
