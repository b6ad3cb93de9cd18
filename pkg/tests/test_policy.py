import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shr.errors import CorruptFile, ShapeMismatch
from shr.policy import (
    HIDDEN,
    PARAM_SHAPES,
    OptimizerState,
    PolicyParams,
    RecurrentState,
    Trajectory,
    _sequence_forward,
    apply_action,
    batch_grad,
    clip_global_norm,
    forward,
    init_params,
    load_policy,
    reinforce_update,
    sample_action,
    save_policy,
    trajectory_grad,
)
from shr.scoring import STATE_DIM


def random_state(rng):
    return np.concatenate([rng.integers(0, 2, STATE_DIM - 38), rng.normal(size=38)]).astype(float)


def random_traj(rng, T=6):
    tr = Trajectory()
    for _ in range(T):
        tr.append(random_state(rng), int(rng.integers(4)), 0.0, float(rng.normal()))
    return tr


def test_forward_probabilities():
    rng = np.random.default_rng(0)
    params = init_params(1)
    probs, rs = forward(params, random_state(rng))
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all((probs > 0) & (probs < 1))
    assert rs.hidden.shape == (HIDDEN,)
    again, _ = forward(init_params(1), random_state(np.random.default_rng(0)))
    assert np.array_equal(probs, again)


def test_zero_params_uniform():
    zero = PolicyParams({k: np.zeros(s) for k, s in PARAM_SHAPES.items()})
    probs, _ = forward(zero, np.ones(STATE_DIM), RecurrentState())
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


def test_forward_matches_sequence_forward():
    rng = np.random.default_rng(3)
    params = init_params(4, dtype=np.float64)
    tr = random_traj(rng, 5)
    logp, _ = _sequence_forward(params, tr.states)
    rs = RecurrentState()
    for t, s in enumerate(tr.states):
        probs, rs = forward(params, s, rs)
        np.testing.assert_allclose(np.log(probs), logp[t], atol=1e-9)


def test_sample_action():
    rng = np.random.default_rng(0)
    assert all(sample_action(np.array([1.0, 0, 0, 0]), rng) == 0 for _ in range(200))
    draws = np.array([sample_action(np.full(4, 0.25), rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.all(np.abs(freq - 0.25) < 0.01)
    a = [sample_action(np.full(4, 0.25), np.random.default_rng(9)) for _ in range(3)]
    assert len(set(a)) == 1


def test_apply_action():
    roi = (0.0, 0.0, 80.0)
    np.testing.assert_allclose(apply_action((40, 40), 3, 0.01, 80, roi), (40.8, 40))
    up = apply_action((40, 40), 0, 0.01, 80, roi)
    assert up[1] < 40
    np.testing.assert_allclose(apply_action(up, 1, 0.01, 80, roi), (40, 40))
    np.testing.assert_allclose(apply_action((80, 12), 3, 0.01, 80, roi), (80, 12))


def test_zero_advantage_zero_gradient():
    rng = np.random.default_rng(5)
    tr = random_traj(rng)
    tr.rewards = [0.3] * len(tr)
    g = trajectory_grad(init_params(2, dtype=np.float64), tr, baseline=0.3)
    assert all(not v.any() for v in g.values())


def test_lr_zero_leaves_params():
    rng = np.random.default_rng(6)
    params = init_params(3)
    new, opt, info = reinforce_update(params, [random_traj(rng)], OptimizerState(lr=0.0))
    for k in PARAM_SHAPES:
        assert np.array_equal(new[k], params[k])
    assert opt.step == 1


def test_clip_global_norm():
    rng = np.random.default_rng(7)
    g = {k: rng.normal(size=s) * 10 for k, s in PARAM_SHAPES.items()}
    clipped, raw = clip_global_norm(g, 5.0)
    norm = np.sqrt(sum((v**2).sum() for v in clipped.values()))
    assert raw > 5.0 and norm <= 5.0 + 1e-9
    small = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    assert clip_global_norm(small, 5.0)[0]["W1"] is small["W1"]


def test_batch_grad_is_episode_mean():
    rng = np.random.default_rng(8)
    params = init_params(5, dtype=np.float64)
    trs = [random_traj(rng, 3) for _ in range(3)]
    mean = batch_grad(params, trs, 0.1)
    each = [trajectory_grad(params, t, 0.1) for t in trs]
    for k in PARAM_SHAPES:
        np.testing.assert_allclose(mean[k], sum(e[k] for e in each) / 3, rtol=1e-12, atol=1e-15)


def test_baseline_running_mean():
    rng = np.random.default_rng(9)
    tr = random_traj(rng, 4)
    _, opt, info = reinforce_update(init_params(0), [tr], OptimizerState(baseline=1.0))
    assert info["baseline"] == 1.0
    assert opt.baseline == pytest.approx(0.9 * 1.0 + 0.1 * np.mean(tr.rewards))


def test_save_load_roundtrip(tmp_path):
    p = init_params(11)
    save_policy(p, tmp_path / "p.bin")
    q = load_policy(tmp_path / "p.bin")
    for k in PARAM_SHAPES:
        assert q[k].dtype == np.float32 and np.array_equal(q[k], p[k])
    assert q.slope == p.slope


def test_load_rejects_bad_files(tmp_path):
    p = init_params(12)
    save_policy(p, tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-100])
    with pytest.raises(CorruptFile):
        load_policy(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptFile):
        load_policy(tmp_path / "magic.bin")
    bad = raw.replace(b'"W2": [64, 64]', b'"W2": [64, 65]')
    assert bad != raw
    (tmp_path / "shape.bin").write_bytes(bad)
    with pytest.raises(ShapeMismatch):
        load_policy(tmp_path / "shape.bin")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_forward_logprob_consistency(seed):
    rng = np.random.default_rng(seed)
    params = init_params(seed % 97)
    probs, _ = forward(params, random_state(rng))
    assert np.all(probs > 0)
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)
