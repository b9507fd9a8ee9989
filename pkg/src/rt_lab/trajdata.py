"""Trajectories, reward-to-go, tokenization, and dataset files.

A step is tokenized as four slots in the order (state, action, reward,
reward-to-go). Backward sequences reverse the order of steps, never the order
of slots within a step, and keep forward-time reward-to-go values.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GAMMA = 0.99
N_RTG_BINS = 32
SLOTS = ("state", "action", "reward", "rtg")
ORIGINAL, GENERATED = "original", "generated"


class EncodingError(ValueError):
    pass


class DatasetLoadError(ValueError):
    pass


def compute_rtg(rewards: Sequence[float], gamma: float = GAMMA) -> list[float]:
    """R_T = r_T and R_t = r_t + gamma * R_{t+1}, evaluated back to front."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    out = [0.0] * len(rewards)
    acc = None
    for i in range(len(rewards) - 1, -1, -1):
        r = float(rewards[i])
        acc = r if acc is None else r + gamma * acc
        out[i] = acc
    return out


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    rtgs: tuple[float, ...]
    done: bool = False
    provenance: str = ORIGINAL
    splice_index: int | None = None

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.rtgs) == n):
            raise ValueError("states/actions/rewards/rtgs lengths differ")
        if self.provenance not in (ORIGINAL, GENERATED):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == GENERATED and self.splice_index is None:
            raise ValueError("generated trajectories need a splice_index")

    @classmethod
    def from_rewards(cls, states, actions, rewards, *, done=False, gamma=GAMMA,
                     provenance=ORIGINAL, splice_index=None) -> "Trajectory":
        rewards = tuple(float(r) for r in rewards)
        return cls(tuple(int(s) for s in states), tuple(int(a) for a in actions), rewards,
                   tuple(compute_rtg(rewards, gamma)), bool(done), provenance, splice_index)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def ret(self) -> float:
        """Discounted return from the first step."""
        return self.rtgs[0] if self.rtgs else 0.0

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        sl = slice(start, stop)
        return replace(self, states=self.states[sl], actions=self.actions[sl],
                       rewards=self.rewards[sl], rtgs=self.rtgs[sl])

    def rtg_consistent(self, gamma: float = GAMMA) -> bool:
        return list(self.rtgs) == compute_rtg(self.rewards, gamma)


# -- vocabulary ------------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    n_states: int
    n_actions: int
    rewards: tuple[float, ...]
    rtg_edges: tuple[float, ...]
    terminal_rewards: tuple[float, ...] = ()
    initial_states: tuple[int, ...] = ()

    @classmethod
    def build(cls, trajs: Iterable[Trajectory], n_states: int, n_actions: int = 4,
              n_bins: int = N_RTG_BINS) -> "Vocab":
        trajs = list(trajs)
        rewards = sorted({r for t in trajs for r in t.rewards})
        rtgs = [g for t in trajs for g in t.rtgs]
        lo, hi = (min(rtgs), max(rtgs)) if rtgs else (0.0, 1.0)
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = tuple(float(e) for e in np.linspace(lo, hi, n_bins + 1))
        # rewards seen only on the last step of terminated trajectories
        last = {t.rewards[-1] for t in trajs if t.done and len(t)}
        inner = {r for t in trajs for r in (t.rewards if not t.done else t.rewards[:-1])}
        terminal = tuple(sorted(last - inner))
        initial = tuple(sorted({t.states[0] for t in trajs if len(t)}))
        return cls(n_states, n_actions, tuple(rewards), edges, terminal, initial)

    @property
    def n_bins(self) -> int:
        return len(self.rtg_edges) - 1

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return self.n_states, self.n_actions, len(self.rewards), self.n_bins

    @property
    def bin_centers(self) -> np.ndarray:
        e = np.asarray(self.rtg_edges)
        return 0.5 * (e[:-1] + e[1:])

    @property
    def bin_width(self) -> float:
        return self.rtg_edges[1] - self.rtg_edges[0]

    def encode_reward(self, r: float) -> int:
        try:
            return self.rewards.index(float(r))
        except ValueError:
            raise EncodingError(f"reward {r!r} not in vocabulary {self.rewards}") from None

    def decode_reward(self, tok: int) -> float:
        return self.rewards[tok]

    def encode_rtg(self, g: float) -> tuple[int, bool]:
        """Bin index and whether the value had to be clamped into range."""
        lo, hi = self.rtg_edges[0], self.rtg_edges[-1]
        clamped = g < lo or g > hi
        idx = int(np.searchsorted(self.rtg_edges, g, side="right")) - 1
        return min(max(idx, 0), self.n_bins - 1), clamped

    def decode_rtg(self, tok: int) -> float:
        return float(self.bin_centers[tok])

    def to_json(self) -> str:
        return json.dumps({
            "n_states": self.n_states, "n_actions": self.n_actions,
            "rewards": [_fmt(r) for r in self.rewards],
            "rtg_edges": [_fmt(e) for e in self.rtg_edges],
            "terminal_rewards": [_fmt(r) for r in self.terminal_rewards],
            "initial_states": list(self.initial_states),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls(d["n_states"], d["n_actions"], tuple(float(x) for x in d["rewards"]),
                   tuple(float(x) for x in d["rtg_edges"]),
                   tuple(float(x) for x in d.get("terminal_rewards", [])),
                   tuple(int(x) for x in d.get("initial_states", [])))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class TokenSequence:
    tokens: np.ndarray
    step_count: int
    direction: str = "forward"
    clamped: int = 0

    def __post_init__(self):
        if len(self.tokens) != 4 * self.step_count:
            raise ValueError("token count must be 4 * step_count")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def steps(self) -> np.ndarray:
        return self.tokens.reshape(self.step_count, 4)


def tokenize(traj: Trajectory, vocab: Vocab, direction: str = "forward") -> TokenSequence:
    rows = np.empty((len(traj), 4), dtype=np.int64)
    clamped = 0
    for i in range(len(traj)):
        s, a = traj.states[i], traj.actions[i]
        if not 0 <= s < vocab.n_states:
            raise EncodingError(f"state {s} outside vocabulary")
        if not 0 <= a < vocab.n_actions:
            raise EncodingError(f"action {a} outside vocabulary")
        g, c = vocab.encode_rtg(traj.rtgs[i])
        clamped += c
        rows[i] = (s, a, vocab.encode_reward(traj.rewards[i]), g)
    if direction == "backward":
        rows = rows[::-1]
    elif direction != "forward":
        raise ValueError(f"unknown direction {direction!r}")
    return TokenSequence(rows.reshape(-1).copy(), len(traj), direction, clamped)


def detokenize(seq: TokenSequence, vocab: Vocab, done: bool = False) -> Trajectory:
    """Inverse of :func:`tokenize`; reward-to-go comes back as bin centres."""
    rows = seq.steps()
    if seq.direction == "backward":
        rows = rows[::-1]
    return Trajectory(tuple(int(x) for x in rows[:, 0]), tuple(int(x) for x in rows[:, 1]),
                      tuple(vocab.decode_reward(int(x)) for x in rows[:, 2]),
                      tuple(vocab.decode_rtg(int(x)) for x in rows[:, 3]), done)


# -- persistence -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _encode(t: Trajectory) -> str:
    nums = lambda xs: "[" + ",".join(_fmt(x) for x in xs) + "]"  # noqa: E731
    ints = lambda xs: "[" + ",".join(str(int(x)) for x in xs) + "]"  # noqa: E731
    si = "null" if t.splice_index is None else str(int(t.splice_index))
    return (f'{{"states":{ints(t.states)},"actions":{ints(t.actions)},'
            f'"rewards":{nums(t.rewards)},"rtgs":{nums(t.rtgs)},'
            f'"done":{"true" if t.done else "false"},"provenance":"{t.provenance}",'
            f'"splice_index":{si}}}')


def dumps_dataset(trajs: Iterable[Trajectory]) -> str:
    return "".join(_encode(t) + "\n" for t in trajs)


def save_dataset(trajs: Iterable[Trajectory], path) -> None:
    Path(path).write_text(dumps_dataset(trajs), encoding="utf-8")


def loads_dataset(text: str) -> list[Trajectory]:
    out = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(Trajectory(
                tuple(int(x) for x in d["states"]), tuple(int(x) for x in d["actions"]),
                tuple(float(x) for x in d["rewards"]), tuple(float(x) for x in d["rtgs"]),
                bool(d["done"]), d["provenance"], d["splice_index"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetLoadError(f"line {lineno}: malformed trajectory record ({exc})") from exc
    return out


def load_dataset(path) -> list[Trajectory]:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


@dataclass
class DatasetSummary:
    trajectories: int
    transitions: int
    success_fraction: float
    return_quantiles: dict[str, float] = field(default_factory=dict)


def summarize(trajs: Sequence[Trajectory]) -> DatasetSummary:
    rets = np.array([t.ret for t in trajs]) if trajs else np.zeros(0)
    q = {}
    if len(rets):
        for name, p in (("min", 0), ("p25", 25), ("median", 50), ("p75", 75), ("max", 100)):
            q[name] = float(np.percentile(rets, p))
    return DatasetSummary(len(trajs), sum(len(t) for t in trajs),
                          float(np.mean([t.done for t in trajs])) if trajs else 0.0, q)
