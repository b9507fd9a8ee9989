"""Deterministic gridworlds, a transition-validity oracle, and data collection.

Cells are indexed ``y * width + x`` with ``y`` growing upward. Actions are
0=up, 1=down, 2=left, 3=right. Layouts are stored as text maps at double
resolution: even (row, col) positions are cells, odd positions sit on the
boundary between two cells, and ``#`` on a boundary blocks that crossing. A
``#`` on a cell position marks a solid cell (every crossing into it blocked).
The top line of the map is the highest ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from .numkit import Rng
from .trajdata import GAMMA, Trajectory

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
N_ACTIONS = 4
ACTION_NAMES = ("up", "down", "left", "right")
_DELTA = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    done: bool


@dataclass(frozen=True)
class GridEnv:
    name: str
    width: int
    height: int
    walls: frozenset  # frozenset of (cell, cell) pairs, stored both ways
    start: int
    goal: int
    step_limit: int
    step_reward: float = 0.0
    goal_reward: float = 1.0
    solid: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.start == self.goal:
            raise DomainError("start and goal must differ")
        for c in (self.start, self.goal):
            if not 0 <= c < self.n_states:
                raise DomainError(f"cell {c} outside grid")
            if c in self.solid:
                raise DomainError(f"cell {c} is inside a wall")
        for a, b in self.walls:
            (ax, ay), (bx, by) = self.xy(a), self.xy(b)
            if abs(ax - bx) + abs(ay - by) != 1:
                raise DomainError(f"wall crossing {a}-{b} joins non-adjacent cells")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def xy(self, s: int) -> tuple[int, int]:
        return s % self.width, s // self.width

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def blocked(self, s: int, t: int) -> bool:
        return (s, t) in self.walls

    def neighbours(self, s: int) -> list[int]:
        return [step(self, s, a).s_next for a in range(N_ACTIONS)]


def step(env: GridEnv, s: int, a: int, rng: Rng | None = None) -> Transition:
    """Deterministic move; blocked or off-grid moves leave the position unchanged.

    ``rng`` is accepted for interface symmetry with stochastic environments and
    is never consumed.
    """
    if not 0 <= s < env.n_states:
        raise DomainError(f"invalid cell {s}")
    if a not in _DELTA:
        raise DomainError(f"invalid action {a}")
    x, y = env.xy(s)
    dx, dy = _DELTA[a]
    nx, ny = x + dx, y + dy
    nxt = s
    if 0 <= nx < env.width and 0 <= ny < env.height:
        cand = env.cell(nx, ny)
        if not env.blocked(s, cand):
            nxt = cand
    if nxt == env.goal:
        return Transition(s, a, env.goal_reward, nxt, True)
    return Transition(s, a, env.step_reward, nxt, False)


def is_possible(env: GridEnv, s: int, a: int, s_next: int) -> bool:
    if not (0 <= s < env.n_states and 0 <= s_next < env.n_states and 0 <= a < N_ACTIONS):
        return False
    return step(env, s, a).s_next == s_next


# -- layouts -------------------------------------------------------------------

def parse_layout(text: str, name: str, step_limit: int) -> GridEnv:
    rows = [ln.rstrip() for ln in text.splitlines() if not ln.startswith(";")]
    while rows and not rows[-1]:
        rows.pop()
    h2, w2 = len(rows), max(len(r) for r in rows)
    w2 += 1 - w2 % 2
    if h2 % 2 == 0:
        raise DomainError("layout map must have an odd number of lines")
    rows = [r.ljust(w2) for r in rows]
    width, height = (w2 + 1) // 2, (h2 + 1) // 2
    walls: set[tuple[int, int]] = set()
    solid: set[int] = set()
    start = goal = None
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            y = height - 1 - r // 2 if r % 2 == 0 else None
            if r % 2 == 0 and c % 2 == 0:
                cell = y * width + c // 2
                if ch == "S":
                    start = cell
                elif ch == "G":
                    goal = cell
                elif ch == "#":
                    solid.add(cell)
            elif ch == "#":
                if r % 2 == 0:  # vertical boundary between two columns
                    a, b = y * width + (c - 1) // 2, y * width + (c + 1) // 2
                elif c % 2 == 0:  # horizontal boundary between two rows
                    yb = height - 1 - (r + 1) // 2
                    a, b = yb * width + c // 2, (yb + 1) * width + c // 2
                else:
                    continue
                walls.update({(a, b), (b, a)})
    for cell in solid:
        x, y = cell % width, cell // width
        for dx, dy in _DELTA.values():
            nx, ny = x + dx, y + dy
            if 0 <= nx < width and 0 <= ny < height:
                other = ny * width + nx
                walls.update({(cell, other), (other, cell)})
    if start is None or goal is None:
        raise DomainError("layout needs an S and a G")
    return GridEnv(name, width, height, frozenset(walls), start, goal, step_limit,
                   solid=frozenset(solid))


def render_layout(env: GridEnv) -> str:
    """Inverse of :func:`parse_layout`."""
    w2, h2 = 2 * env.width - 1, 2 * env.height - 1
    grid = [["." if (r % 2 == 0 and c % 2 == 0) else " " for c in range(w2)] for r in range(h2)]
    for s in range(env.n_states):
        x, y = env.xy(s)
        r, c = 2 * (env.height - 1 - y), 2 * x
        if s in env.solid:
            grid[r][c] = "#"
        elif s == env.start:
            grid[r][c] = "S"
        elif s == env.goal:
            grid[r][c] = "G"
    for a, b in env.walls:
        if a in env.solid or b in env.solid or a > b:
            continue
        (ax, ay), (bx, by) = env.xy(a), env.xy(b)
        r = 2 * (env.height - 1) - (ay + by)
        c = ax + bx
        grid[r][c] = "#"
    return "\n".join("".join(row).rstrip() for row in grid) + "\n"


def load_layout(name: str) -> str:
    return resources.files("rt_lab.layouts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def boxball() -> GridEnv:
    """10x10 BoxBall: start (1,1), goal (8,8), wall under the goal spanning x=5..8."""
    return parse_layout(load_layout("boxball"), "boxball", step_limit=50)


def fourrooms() -> GridEnv:
    """11x11 four-rooms layout used for truncation-length ablations."""
    return parse_layout(load_layout("fourrooms"), "fourrooms", step_limit=100)


ENVS: dict[str, Callable[[], GridEnv]] = {"boxball": boxball, "fourrooms": fourrooms}


def make_env(name: str) -> GridEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise DomainError(f"unknown env layout '{name}'") from None


def shortest_path_length(env: GridEnv) -> int:
    """BFS step count from start to goal."""
    dist = {env.start: 0}
    frontier = [env.start]
    while frontier:
        nxt = []
        for s in frontier:
            for t in env.neighbours(s):
                if t not in dist:
                    dist[t] = dist[s] + 1
                    nxt.append(t)
        frontier = nxt
    return dist[env.goal]


# -- data collection -----------------------------------------------------------

EPSILON = {"random": 1.0, "medium": 0.3, "expert": 0.05}


def _greedy(q_row: np.ndarray) -> int:
    return int(np.argmax(q_row))


def greedy_return(env: GridEnv, q: np.ndarray, gamma: float = GAMMA) -> float:
    s, ret = env.start, 0.0
    for t in range(env.step_limit):
        tr = step(env, s, _greedy(q[s]))
        ret += gamma ** t * tr.r
        s = tr.s_next
        if tr.done:
            break
    return ret


def q_learning(env: GridEnv, rng: Rng, *, episodes: int = 4000, lr: float = 0.5,
               epsilon: float = 0.2, gamma: float = GAMMA,
               stop_at: float | None = None) -> np.ndarray:
    """Online tabular Q-learning with random tie-breaking during exploration.

    With ``stop_at`` set, training halts at the first episode whose greedy
    return reaches ``stop_at`` and that Q-table is returned.
    """
    q = np.zeros((env.n_states, N_ACTIONS))
    for _ in range(episodes):
        s = env.start
        for _t in range(env.step_limit):
            if rng.random() < epsilon:
                a = int(rng.integers(N_ACTIONS))
            else:
                row = q[s]
                best = np.flatnonzero(row == row.max())
                a = int(best[rng.integers(len(best))])
            tr = step(env, s, a)
            target = tr.r if tr.done else tr.r + gamma * q[tr.s_next].max()
            q[s, a] += lr * (target - q[s, a])
            s = tr.s_next
            if tr.done:
                break
        if stop_at is not None and greedy_return(env, q, gamma) >= stop_at:
            return q
    return q


def rollout(env: GridEnv, policy: Callable[[int, Rng], int], rng: Rng,
            gamma: float = GAMMA) -> Trajectory:
    states, actions, rewards = [], [], []
    s, done = env.start, False
    for _ in range(env.step_limit):
        a = policy(s, rng)
        tr = step(env, s, a)
        assert is_possible(env, tr.s, tr.a, tr.s_next)
        states.append(s)
        actions.append(a)
        rewards.append(tr.r)
        s = tr.s_next
        if tr.done:
            done = True
            break
    return Trajectory.from_rewards(states, actions, rewards, done=done, gamma=gamma)


def epsilon_greedy(q: np.ndarray, epsilon: float) -> Callable[[int, Rng], int]:
    def act(s: int, rng: Rng) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(N_ACTIONS))
        return _greedy(q[s])
    return act


def train_collector(env: GridEnv, quality: str, rng: Rng) -> np.ndarray:
    """Q-table behind each data regime (zeros for ``random``)."""
    if quality == "random":
        return np.zeros((env.n_states, N_ACTIONS))
    expert = q_learning(env, rng.derive(0))
    if quality == "expert":
        return expert
    converged = greedy_return(env, expert)
    return q_learning(env, rng.derive(1), stop_at=0.5 * converged)


def collect_dataset(env: GridEnv, policy_quality: str, n_traj: int, rng: Rng) -> list[Trajectory]:
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if policy_quality not in EPSILON:
        raise ValueError(f"policy_quality must be one of {sorted(EPSILON)}")
    q = train_collector(env, policy_quality, rng.derive(0))
    act = epsilon_greedy(q, EPSILON[policy_quality])
    roll_rng = rng.derive(1)
    return [rollout(env, act, roll_rng) for _ in range(n_traj)]


def transitions(env: GridEnv, traj: Trajectory) -> list[tuple[int, int, int]]:
    """(s, a, s') triples with a known successor.

    Consecutive steps give s'. The final step's successor is the goal when the
    trajectory terminated there; a time-limit cut leaves it unknown.
    """
    out = [(traj.states[i], traj.actions[i], traj.states[i + 1]) for i in range(len(traj) - 1)]
    if len(traj) and traj.done:
        out.append((traj.states[-1], traj.actions[-1], env.goal))
    return out
