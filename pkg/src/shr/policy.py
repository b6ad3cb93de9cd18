"""Recurrent SP-moving policy and its REINFORCE update, in plain numpy.

Network: three Leaky-ReLU fully connected layers (544 -> 64 -> 64 -> 64),
an LSTM cell with 64 units, and a 4-way softmax over the moves
up / down / left / right. Gradients are computed by backpropagation through
time over one episode and applied with Adam after global-norm clipping.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, NonFiniteActivation, NonFiniteGradient, ShapeMismatch
from .scoring import STATE_DIM

HIDDEN = 64
N_ACTIONS = 4
ACTIONS = ("up", "down", "left", "right")
_MOVES = np.array([[0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])

PARAM_SHAPES = {
    "W1": (HIDDEN, STATE_DIM), "b1": (HIDDEN,),
    "W2": (HIDDEN, HIDDEN), "b2": (HIDDEN,),
    "W3": (HIDDEN, HIDDEN), "b3": (HIDDEN,),
    "Wx": (4 * HIDDEN, HIDDEN), "Wh": (4 * HIDDEN, HIDDEN), "bl": (4 * HIDDEN,),
    "Wo": (N_ACTIONS, HIDDEN), "bo": (N_ACTIONS,),
}
_FAN_IN = {"W1": STATE_DIM, "b1": STATE_DIM, "W2": HIDDEN, "b2": HIDDEN, "W3": HIDDEN,
           "b3": HIDDEN, "Wx": HIDDEN, "Wh": HIDDEN, "bl": HIDDEN, "Wo": HIDDEN, "bo": HIDDEN}
_MAGIC = b"SHRPOL01"


@dataclass
class PolicyParams:
    """Named parameter arrays, in the fixed order of ``PARAM_SHAPES``."""

    arrays: dict
    slope: float = 0.01

    def __post_init__(self):
        for name, shape in PARAM_SHAPES.items():
            if name not in self.arrays:
                raise ShapeMismatch(f"missing parameter {name}")
            if tuple(self.arrays[name].shape) != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self, dtype=None) -> "PolicyParams":
        return PolicyParams({k: np.array(v, dtype=dtype or v.dtype) for k, v in self.arrays.items()},
                            self.slope)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_SHAPES])

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays.values())


def init_params(seed: int, slope: float = 0.01, dtype=np.float32) -> PolicyParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in PARAM_SHAPES.items():
        bound = 1.0 / np.sqrt(_FAN_IN[name])
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    arrays["bl"][HIDDEN:2 * HIDDEN] += 1.0  # forget gate
    return PolicyParams({k: v.astype(dtype) for k, v in arrays.items()}, slope)


@dataclass
class RecurrentState:
    hidden: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    cell: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))


def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, tau, rs: RecurrentState | None = None):
    """One policy step. Returns (probs, new recurrent state)."""
    p = params.arrays
    a = params.slope
    rs = rs or RecurrentState()
    x = np.asarray(tau, dtype=np.float64)
    if x.shape != (STATE_DIM,):
        raise ValueError(f"state must have length {STATE_DIM}, got {x.shape}")
    h = _lrelu(p["W1"] @ x + p["b1"], a)
    h = _lrelu(p["W2"] @ h + p["b2"], a)
    h = _lrelu(p["W3"] @ h + p["b3"], a)
    z = p["Wx"] @ h + p["Wh"] @ rs.hidden + p["bl"]
    H = HIDDEN
    i, f, o = _sigmoid(z[:H]), _sigmoid(z[H:2 * H]), _sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * rs.cell + i * g
    hn = o * np.tanh(c)
    logp = _log_softmax(p["Wo"] @ hn + p["bo"])
    probs = np.exp(logp)
    if not (np.isfinite(probs).all() and np.isfinite(c).all()):
        raise NonFiniteActivation("policy activations diverged")
    return probs, RecurrentState(hn, c)


def sample_action(probs, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def apply_action(x, action: int, eps2: float, omega: float, roi) -> np.ndarray:
    """Move a point by eps2*omega pixels; 'up' is -y. Result stays inside the ROI."""
    x0, y0, side = roi
    p = np.asarray(x, dtype=np.float64) + eps2 * omega * _MOVES[action]
    return np.array([np.clip(p[0], x0, x0 + side), np.clip(p[1], y0, y0 + side)])


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def append(self, state, action, log_prob, r):
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(r))

    def __len__(self):
        return len(self.actions)


# ---------------------------------------------------------------------------
# loss and gradient


def _sequence_forward(params, states):
    p = params.arrays
    a = params.slope
    X = np.asarray(states, dtype=np.float64)
    T = len(X)
    H = HIDDEN
    z1 = X @ p["W1"].T + p["b1"]
    h1 = _lrelu(z1, a)
    z2 = h1 @ p["W2"].T + p["b2"]
    h2 = _lrelu(z2, a)
    z3 = h2 @ p["W3"].T + p["b3"]
    h3 = _lrelu(z3, a)
    xin = h3 @ p["Wx"].T + p["bl"]
    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    gates = np.zeros((T, 4 * H))
    Wh = p["Wh"]
    for t in range(T):
        z = xin[t] + Wh @ hs[t]
        i, f, o = _sigmoid(z[:H]), _sigmoid(z[H:2 * H]), _sigmoid(z[2 * H:3 * H])
        g = np.tanh(z[3 * H:])
        gates[t] = np.concatenate([i, f, o, g])
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
    logp = _log_softmax(hs[1:] @ p["Wo"].T + p["bo"])
    cache = (X, z1, h1, z2, h2, z3, h3, hs, cs, gates)
    return logp, cache


def trajectory_loss(params: PolicyParams, traj: Trajectory, baseline: float = 0.0) -> float:
    """-sum_t (r_t - b) log pi(a_t | tau_t) for one episode."""
    logp, _ = _sequence_forward(params, traj.states)
    adv = np.asarray(traj.rewards) - baseline
    return float(-(adv * logp[np.arange(len(traj)), traj.actions]).sum())


def trajectory_grad(params: PolicyParams, traj: Trajectory, baseline: float = 0.0) -> dict:
    """Gradient of :func:`trajectory_loss` by backpropagation through time."""
    p = params.arrays
    a = params.slope
    H = HIDDEN
    logp, (X, z1, h1, z2, h2, z3, h3, hs, cs, gates) = _sequence_forward(params, traj.states)
    T = len(X)
    adv = np.asarray(traj.rewards, dtype=np.float64) - baseline
    onehot = np.zeros((T, N_ACTIONS))
    onehot[np.arange(T), traj.actions] = 1.0
    dlogits = -adv[:, None] * (onehot - np.exp(logp))

    g = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    g["Wo"] = dlogits.T @ hs[1:]
    g["bo"] = dlogits.sum(axis=0)
    dh_out = dlogits @ p["Wo"]

    dz_all = np.zeros((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    Wh = p["Wh"]
    for t in range(T - 1, -1, -1):
        i, f, o, gg = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        dc = dh * o * (1.0 - tc**2) + dc_next
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * cs[t] * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - gg**2),
        ])
        dz_all[t] = dz
        dh_next = Wh.T @ dz
        dc_next = dc * f
    g["Wx"] = dz_all.T @ h3
    g["Wh"] = dz_all.T @ hs[:-1]
    g["bl"] = dz_all.sum(axis=0)

    dh3 = dz_all @ p["Wx"]
    dz3 = dh3 * np.where(z3 > 0, 1.0, a)
    g["W3"] = dz3.T @ h2
    g["b3"] = dz3.sum(axis=0)
    dz2 = (dz3 @ p["W3"]) * np.where(z2 > 0, 1.0, a)
    g["W2"] = dz2.T @ h1
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["W2"]) * np.where(z1 > 0, 1.0, a)
    g["W1"] = dz1.T @ X
    g["b1"] = dz1.sum(axis=0)
    return g


@dataclass
class OptimizerState:
    """Adam moments plus the running reward baseline."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    baseline: float = 0.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    baseline_momentum: float = 0.9


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float((v * v).sum()) for v in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: v * scale for k, v in grads.items()}
    return grads, norm


def batch_grad(params: PolicyParams, trajectories, baseline: float) -> dict:
    """Mean over episodes of the per-episode gradients."""
    total = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    for traj in trajectories:
        for k, v in trajectory_grad(params, traj, baseline).items():
            total[k] += v
    n = len(trajectories)
    return {k: v / n for k, v in total.items()}


def reinforce_update(params: PolicyParams, trajectories, opt: OptimizerState):
    """One policy-gradient step on a batch of episodes.

    Returns (new params, new optimizer state, info dict). The baseline used
    for the advantages is the running mean *before* this batch.
    """
    trajectories = [t for t in trajectories if len(t)]
    if not trajectories:
        raise ValueError("empty batch")
    grads = batch_grad(params, trajectories, opt.baseline)
    if not all(np.isfinite(v).all() for v in grads.values()):
        raise NonFiniteGradient("non-finite policy gradient")
    grads, raw_norm = clip_global_norm(grads, opt.clip_norm)

    step = opt.step + 1
    new_m, new_v, new_arrays = {}, {}, {}
    for k in PARAM_SHAPES:
        gk = grads[k]
        m = opt.beta1 * opt.m.get(k, 0.0) + (1 - opt.beta1) * gk
        v = opt.beta2 * opt.v.get(k, 0.0) + (1 - opt.beta2) * gk * gk
        mhat = m / (1 - opt.beta1**step)
        vhat = v / (1 - opt.beta2**step)
        upd = opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        dtype = params.arrays[k].dtype
        new_arrays[k] = (params.arrays[k] - upd).astype(dtype) if opt.lr else params.arrays[k].copy()
        new_m[k], new_v[k] = m, v
    mean_r = float(np.mean(np.concatenate([t.rewards for t in trajectories])))
    baseline = opt.baseline_momentum * opt.baseline + (1 - opt.baseline_momentum) * mean_r
    new_opt = OptimizerState(new_m, new_v, step, baseline, opt.lr, opt.beta1, opt.beta2,
                             opt.eps, opt.clip_norm, opt.baseline_momentum)
    loss = float(np.mean([trajectory_loss(params, t, opt.baseline) for t in trajectories]))
    info = {"loss": loss, "grad_norm": raw_norm, "baseline": opt.baseline, "mean_reward": mean_r}
    return PolicyParams(new_arrays, params.slope), new_opt, info


# ---------------------------------------------------------------------------
# files


def save_policy(params: PolicyParams, path, meta: dict | None = None) -> None:
    header = {
        "shapes": {k: list(s) for k, s in PARAM_SHAPES.items()},
        "order": list(PARAM_SHAPES),
        "slope": params.slope,
        **(meta or {}),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = np.concatenate([np.asarray(params.arrays[k], dtype="<f4").ravel() for k in PARAM_SHAPES])
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(hb)) + hb + blob.tobytes())


def load_policy(path) -> PolicyParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != _MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    for k, s in PARAM_SHAPES.items():
        if tuple(header.get("shapes", {}).get(k, ())) != s:
            raise ShapeMismatch(f"{path}: {k} has shape {header.get('shapes', {}).get(k)}, expected {s}")
    blob = raw[12 + hlen:]
    n = sum(int(np.prod(s)) for s in PARAM_SHAPES.values())
    if len(blob) != 4 * n:
        raise CorruptFile(f"{path}: expected {4 * n} parameter bytes, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    arrays, off = {}, 0
    for k, s in PARAM_SHAPES.items():
        size = int(np.prod(s))
        arrays[k] = flat[off:off + size].reshape(s).copy()
        off += size
    return PolicyParams(arrays, float(header.get("slope", 0.01)))
