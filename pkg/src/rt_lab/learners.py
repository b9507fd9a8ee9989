"""Offline learners: behaviour cloning and discrete batch-constrained Q-learning.

Both act on one-hot state inputs through small MLPs trained with the numkit
tape. Evaluation runs greedy episodes in the true environment.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, envs
from .numkit import Adam, Rng, Tape, Tensor, no_tape, ops
from .numkit.ops import softmax_np
from .trajdata import GAMMA, Trajectory

EVAL_COLUMNS = ("run_id", "dataset_id", "learner", "seed", "return", "success", "length")


class LearnerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 64
    bc_steps: int = 3000
    bcq_steps: int = 20000
    tau: float = 0.3               # BCQ action-filter threshold
    target_sync: int = 500         # BCQ target-network period
    gamma: float = GAMMA

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


@dataclass
class PolicyParams:
    kind: str                       # "bc" or "bcq"
    n_states: int
    n_actions: int
    nets: dict[str, dict[str, Tensor]]
    tau: float = 0.3
    losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")

    def action_probs(self, s: int) -> np.ndarray:
        return softmax_np(_mlp_np(self.nets["bc"], _onehot([s], self.n_states))[0])

    def allowed(self, s: int) -> np.ndarray:
        p = self.action_probs(s)
        return p / p.max() >= self.tau

    def act(self, s: int) -> int:
        if self.kind == "bc":
            return int(np.argmax(self.action_probs(s)))
        q = _mlp_np(self.nets["q"], _onehot([s], self.n_states))[0]
        q = np.where(self.allowed(s), q, -np.inf)
        return int(np.argmax(q))


def _onehot(states, n: int) -> np.ndarray:
    x = np.zeros((len(states), n))
    x[np.arange(len(states)), np.asarray(states, dtype=np.int64)] = 1.0
    return x


def _init_mlp(n_in: int, hidden: int, n_out: int, rng: Rng, prefix: str) -> dict[str, Tensor]:
    dims = [(n_in, hidden), (hidden, hidden), (hidden, n_out)]
    out = {}
    for i, (a, b) in enumerate(dims):
        out[f"{prefix}.l{i}.w"] = Tensor(rng.normal((a, b), scale=1.0 / math.sqrt(a)),
                                         requires_grad=True, name=f"{prefix}.l{i}.w")
        out[f"{prefix}.l{i}.b"] = Tensor(np.zeros(b), requires_grad=True, name=f"{prefix}.l{i}.b")
    return out


def _mlp(w: dict[str, Tensor], x) -> Tensor:
    names = sorted({k.rsplit(".", 1)[0] for k in w})
    h = Tensor(x) if isinstance(x, np.ndarray) else x
    for i, n in enumerate(names):
        h = h @ w[n + ".w"] + w[n + ".b"]
        if i < len(names) - 1:
            h = ops.relu(h)
    return h


def _mlp_np(w: dict[str, Tensor], x: np.ndarray) -> np.ndarray:
    names = sorted({k.rsplit(".", 1)[0] for k in w})
    h = x
    for i, n in enumerate(names):
        h = h @ w[n + ".w"].data + w[n + ".b"].data
        if i < len(names) - 1:
            h = np.maximum(h, 0.0)
    return h


# -- data ---------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


def state_actions(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    s = np.array([x for t in trajs for x in t.states], dtype=np.int64)
    a = np.array([x for t in trajs for x in t.actions], dtype=np.int64)
    return s, a


def q_transitions(trajs: Sequence[Trajectory], goal: int | None = None) -> TransitionBatch:
    """(s, a, r, s', done) tuples with a known successor.

    The last step of a terminated trajectory is terminal (its successor only
    matters through ``done``); the last step of a time-limit cut is dropped.
    """
    rows = []
    for t in trajs:
        n = len(t)
        for i in range(n - 1):
            rows.append((t.states[i], t.actions[i], t.rewards[i], t.states[i + 1], 0.0))
        if n and t.done:
            rows.append((t.states[-1], t.actions[-1], t.rewards[-1],
                         goal if goal is not None else t.states[-1], 1.0))
    if not rows:
        raise ValueError("no transitions with known successors")
    arr = np.array(rows, dtype=np.float64)
    return TransitionBatch(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                           arr[:, 3].astype(np.int64), arr[:, 4])


# -- training -------------------------------------------------------------------------

def _fit_bc(net: dict[str, Tensor], s: np.ndarray, a: np.ndarray, n_states: int,
            steps: int, cfg: LearnerConfig, rng: Rng) -> tuple[list[float], float]:
    names = sorted(net)
    plist = [net[k] for k in names]
    opt = Adam(net, lr=cfg.lr, clip_norm=1.0)
    with no_tape():
        initial = float(ops.cross_entropy(_mlp(net, _onehot(s, n_states)), a).data)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(s), size=min(cfg.batch_size, len(s)))
        with Tape() as tape:
            loss = ops.cross_entropy(_mlp(net, _onehot(s[idx], n_states)), a[idx])
        grads = tape.gradient(loss, plist)
        opt.step(dict(zip(names, grads)))
        losses.append(float(loss.data))
    return losses, initial


def train_bc(dataset: Sequence[Trajectory], n_states: int, rng: Rng,
             cfg: LearnerConfig = LearnerConfig(), n_actions: int = 4) -> PolicyParams:
    s, a = state_actions(dataset)
    if not len(s):
        raise ValueError("empty dataset")
    net = _init_mlp(n_states, cfg.hidden, n_actions, rng.derive(0), "bc")
    losses, initial = _fit_bc(net, s, a, n_states, cfg.bc_steps, cfg, rng.derive(1))
    return PolicyParams("bc", n_states, n_actions, {"bc": net}, cfg.tau, losses, initial)


def train_bcq(dataset: Sequence[Trajectory], n_states: int, rng: Rng,
              cfg: LearnerConfig = LearnerConfig(), n_actions: int = 4,
              goal: int | None = None, log=None) -> PolicyParams:
    """Discrete BCQ: Q-learning whose argmax is restricted to actions the
    cloned behaviour policy gives at least ``tau`` of its top probability."""
    s_all, a_all = state_actions(dataset)
    if not len(s_all):
        raise ValueError("empty dataset")
    data = q_transitions(dataset, goal)
    bc = _init_mlp(n_states, cfg.hidden, n_actions, rng.derive(0), "bc")
    _fit_bc(bc, s_all, a_all, n_states, cfg.bc_steps, cfg, rng.derive(1))
    q = _init_mlp(n_states, cfg.hidden, n_actions, rng.derive(2), "q")
    names = sorted(q)
    plist = [q[k] for k in names]
    opt = Adam(q, lr=cfg.lr, clip_norm=1.0)
    # the filter depends only on s', so precompute it per state
    probs = softmax_np(_mlp_np(bc, np.eye(n_states)))
    allowed = probs / probs.max(axis=1, keepdims=True) >= cfg.tau
    sample_rng = rng.derive(3)
    losses: list[float] = []
    n = len(data.s)
    tq: dict[str, Tensor] = {}
    for it in range(cfg.bcq_steps):
        if it % cfg.target_sync == 0:
            tq = {k: Tensor(v.data.copy()) for k, v in q.items()}
        idx = sample_rng.integers(0, n, size=min(cfg.batch_size, n))
        s, a, r = data.s[idx], data.a[idx], data.r[idx]
        sn, done = data.s_next[idx], data.done[idx]
        xn = _onehot(sn, n_states)
        q_next_online = np.where(allowed[sn], _mlp_np(q, xn), -np.inf)
        a_star = q_next_online.argmax(axis=1)
        q_next = _mlp_np(tq, xn)[np.arange(len(idx)), a_star]
        y = r + cfg.gamma * (1.0 - done) * q_next
        with Tape() as tape:
            pred = _mlp(q, _onehot(s, n_states))[np.arange(len(idx)), a]
            loss = ops.mean(ops.square(pred - y))
        val = float(loss.data)
        if not math.isfinite(val) or val > 1e6:
            raise LearnerError(f"BCQ diverged at step {it} (loss {val})")
        grads = tape.gradient(loss, plist)
        opt.step(dict(zip(names, grads)))
        losses.append(val)
        if log and (it + 1) % 5000 == 0:
            log(f"bcq step {it + 1}/{cfg.bcq_steps} loss {np.mean(losses[-500:]):.5f}")
    return PolicyParams("bcq", n_states, n_actions, {"bc": bc, "q": q}, cfg.tau, losses,
                        losses[0] if losses else float("nan"))


def save_policy(path, policy: PolicyParams) -> str:
    flat = {f"{net}/{k}": v for net, ws in sorted(policy.nets.items()) for k, v in ws.items()}
    return checkpoint.save(path, flat, "policy",
                           {"kind": policy.kind, "n_states": policy.n_states,
                            "n_actions": policy.n_actions, "tau": policy.tau})


def load_policy(path) -> PolicyParams:
    arrs, header = checkpoint.load(path, kind="policy")
    cfg = header["config"]
    nets: dict[str, dict[str, Tensor]] = {}
    for key, arr in arrs.items():
        net, name = key.split("/", 1)
        nets.setdefault(net, {})[name] = Tensor(arr)
    return PolicyParams(cfg["kind"], cfg["n_states"], cfg["n_actions"], nets, cfg["tau"])


# -- evaluation -------------------------------------------------------------------------

@dataclass
class Episode:
    seed: int
    ret: float
    success: bool
    length: int


@dataclass
class EvalReport:
    episodes: int
    mean_return: float
    success_rate: float | None      # None when there are no episodes
    mean_length: float
    seeds: list[int]
    records: list[Episode] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.success_rate is not None


Policy = Callable[[int, Rng], int]


def as_policy(p) -> Policy:
    if isinstance(p, PolicyParams):
        return lambda s, rng: p.act(s)
    return p


def evaluate(policy, env: envs.GridEnv, episodes: int = 100, rng: Rng | None = None,
             gamma: float = GAMMA) -> EvalReport:
    """Roll ``policy`` from the start state; episode i uses stream ``rng.derive(i)``."""
    act = as_policy(policy)
    base = rng if rng is not None else Rng(0)
    recs = []
    for i in range(episodes):
        traj = envs.rollout(env, act, base.derive(i), gamma)
        recs.append(Episode(i, traj.ret, traj.done, len(traj)))
    if not recs:
        return EvalReport(0, float("nan"), None, float("nan"), [], [])
    return EvalReport(len(recs), float(np.mean([r.ret for r in recs])),
                      float(np.mean([r.success for r in recs])),
                      float(np.mean([r.length for r in recs])), [r.seed for r in recs], recs)


def random_policy(s: int, rng: Rng) -> int:
    return int(rng.integers(envs.N_ACTIONS))


def tabular_policy(q: np.ndarray) -> Policy:
    return lambda s, rng: int(np.argmax(q[s]))


def report_row(report: EvalReport, run_id: str, dataset_id: str, learner: str, seed: int) -> list:
    sr = "nan" if report.success_rate is None else repr(report.success_rate)
    return [run_id, dataset_id, learner, seed, repr(report.mean_return), sr,
            repr(report.mean_length)]


def rows_to_csv(rows: Sequence[Sequence], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(EVAL_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()
