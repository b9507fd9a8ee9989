"""SVG drawings of gridworld layouts and trajectories.

Segments whose transition the true dynamics cannot produce are drawn thick
and red; everything else is coloured by provenance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import envs
from .trajdata import GENERATED, Trajectory

CELL = 32
PAD = 8
COLORS = {"original": "#2b6cb0", "generated": "#dd8a1a", "impossible": "#d62728",
          "wall": "#8b4513", "grid": "#dddddd", "start": "#2f9e44", "goal": "#c92a2a"}


@dataclass
class RenderStats:
    trajectories: int = 0
    segments: int = 0
    highlighted: int = 0


def _center(env: envs.GridEnv, s: int) -> tuple[float, float]:
    x, y = env.xy(s)
    return PAD + (x + 0.5) * CELL, PAD + (env.height - 1 - y + 0.5) * CELL


def _grid(env: envs.GridEnv) -> list[str]:
    w, h = env.width * CELL, env.height * CELL
    out = [f'<rect x="{PAD}" y="{PAD}" width="{w}" height="{h}" fill="white" '
           f'stroke="{COLORS["grid"]}"/>']
    for i in range(1, env.width):
        x = PAD + i * CELL
        out.append(f'<line x1="{x}" y1="{PAD}" x2="{x}" y2="{PAD + h}" stroke="{COLORS["grid"]}"/>')
    for j in range(1, env.height):
        y = PAD + j * CELL
        out.append(f'<line x1="{PAD}" y1="{y}" x2="{PAD + w}" y2="{y}" stroke="{COLORS["grid"]}"/>')
    for s in sorted(env.solid):
        cx, cy = _center(env, s)
        out.append(f'<rect x="{cx - CELL / 2}" y="{cy - CELL / 2}" width="{CELL}" '
                   f'height="{CELL}" fill="{COLORS["wall"]}"/>')
    for a, b in sorted(env.walls):
        if a > b or a in env.solid or b in env.solid:
            continue
        (ax, ay), (bx, by) = env.xy(a), env.xy(b)
        if ay == by:   # vertical wall between columns
            x = PAD + max(ax, bx) * CELL
            y0 = PAD + (env.height - 1 - ay) * CELL
            out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + CELL}" '
                       f'stroke="{COLORS["wall"]}" stroke-width="4"/>')
        else:
            y = PAD + (env.height - max(ay, by)) * CELL
            x0 = PAD + ax * CELL
            out.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + CELL}" y2="{y}" '
                       f'stroke="{COLORS["wall"]}" stroke-width="4"/>')
    for s, key in ((env.start, "start"), (env.goal, "goal")):
        cx, cy = _center(env, s)
        out.append(f'<rect x="{cx - 9}" y="{cy - 9}" width="18" height="18" '
                   f'fill="{COLORS[key]}" opacity="0.8"/>')
    return out


def segments(env: envs.GridEnv, traj: Trajectory) -> list[tuple[int, int, bool, bool]]:
    """(from, to, generated, impossible) for every transition with a known successor."""
    out = []
    for i, (s, a, sn) in enumerate(envs.transitions(env, traj)):
        gen = traj.provenance == GENERATED and traj.splice_index is not None and i < traj.splice_index
        out.append((s, sn, gen, not envs.is_possible(env, s, a, sn)))
    return out


def _paths(env: envs.GridEnv, traj: Trajectory, stats: RenderStats, jitter: float = 0.0) -> list[str]:
    out = []
    for s, sn, gen, bad in segments(env, traj):
        (x1, y1), (x2, y2) = _center(env, s), _center(env, sn)
        x1, y1, x2, y2 = x1 + jitter, y1 + jitter, x2 + jitter, y2 + jitter
        stats.segments += 1
        if bad:
            stats.highlighted += 1
            out.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                       f'stroke="{COLORS["impossible"]}" stroke-width="4" class="impossible"/>')
        else:
            color = COLORS["generated" if gen else "original"]
            out.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                       f'stroke="{color}" stroke-width="2" opacity="0.6"/>')
    stats.trajectories += 1
    return out


def _svg(env: envs.GridEnv, body: list[str], title: str) -> str:
    w, h = env.width * CELL + 2 * PAD, env.height * CELL + 2 * PAD
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">')
    return "\n".join([head, f"<title>{title}</title>", *body, "</svg>"]) + "\n"


def render_trajectory(env: envs.GridEnv, traj: Trajectory, title: str = "trajectory",
                      stats: RenderStats | None = None) -> str:
    stats = stats if stats is not None else RenderStats()
    return _svg(env, _grid(env) + _paths(env, traj, stats), title)


def render_summary(env: envs.GridEnv, trajs: Sequence[Trajectory], title: str = "summary",
                   stats: RenderStats | None = None) -> str:
    stats = stats if stats is not None else RenderStats()
    body = _grid(env)
    for i, t in enumerate(trajs):
        body += _paths(env, t, stats, jitter=((i % 7) - 3) * 0.8)
    return _svg(env, body, title)


def render_dir(env: envs.GridEnv, trajs: Sequence[Trajectory], out_dir,
               limit: int | None = None) -> RenderStats:
    """One SVG per trajectory plus ``summary.svg``; returns segment counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chosen = list(trajs)[:limit] if limit is not None else list(trajs)
    for i, t in enumerate(chosen):
        (out / f"traj_{i:04d}.svg").write_text(render_trajectory(env, t, f"trajectory {i}"),
                                               encoding="utf-8")
    stats = RenderStats()
    (out / "summary.svg").write_text(render_summary(env, chosen, env.name, stats),
                                     encoding="utf-8")
    return stats
