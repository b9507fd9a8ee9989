"""Augmentation loop: sample a splice point, generate, gate, splice, relabel.

Each of the H generations is an independent task whose random stream is
derived from (seed, task index), so the assembled dataset does not depend on
how tasks are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envs, rtmodel
from .numkit import Rng
from .reliability import ReliabilityGate, ReliabilityTrace, Threshold, VaeParams, pessimistic_relabel
from .trajdata import GENERATED, Trajectory, Vocab, compute_rtg, save_dataset

GATES = ("reliability", "fixed", "none")
ANALYSIS_COLUMNS = ("generation", "traj_index", "splice_index", "generated_length", "truncated",
                    "gamma_stop", "gamma_retained_max", "impossible")


@dataclass(frozen=True)
class AugmentConfig:
    H: int = 500
    max_steps: int | None = None
    gamma_mode: str = "weighted"
    beta: float = 0.5
    direction: str = "backward"
    gate: str = "reliability"
    fixed_length: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}")
        if (self.gate == "fixed") != (self.fixed_length is not None):
            raise ValueError("fixed_length goes with gate='fixed' and only with it")
        if self.fixed_length is not None and self.fixed_length < 1:
            raise ValueError("fixed_length must be >= 1")
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def splice(prefix: Trajectory | None, original: Trajectory, t_prime: int,
           gamma: float = 0.99) -> Trajectory:
    """Generated steps (forward time order) followed by ``original[t_prime:]``.

    The result's ``splice_index`` is the offset where the original suffix
    starts. RTGs are recomputed over the whole trajectory.
    """
    if not 0 <= t_prime <= len(original):
        raise ValueError(f"t_prime {t_prime} outside [0, {len(original)}]")
    tail = original.slice(t_prime)
    n = len(prefix) if prefix is not None else 0
    states = (prefix.states if n else ()) + tail.states
    actions = (prefix.actions if n else ()) + tail.actions
    rewards = (prefix.rewards if n else ()) + tail.rewards
    done = original.done if len(tail) else (prefix.done if n else original.done)
    return Trajectory(states, actions, rewards, tuple(compute_rtg(rewards, gamma)),
                      done, GENERATED, n)


def splice_forward(original: Trajectory, k: int, continuation: Trajectory | None,
                   gamma: float = 0.99) -> Trajectory:
    """``original[:k]`` followed by generated steps; ``splice_index`` = k."""
    head = original.slice(0, k)
    n = len(continuation) if continuation is not None else 0
    rewards = head.rewards + (continuation.rewards if n else ())
    return Trajectory(head.states + (continuation.states if n else ()),
                      head.actions + (continuation.actions if n else ()),
                      rewards, tuple(compute_rtg(rewards, gamma)),
                      continuation.done if n else False, GENERATED, k)


@dataclass
class GenerationRecord:
    index: int
    traj_index: int
    splice_index: int
    trajectory: Trajectory | None       # None for degenerate (no headroom) tasks
    trace: ReliabilityTrace | None
    generated_length: int               # retained generated steps
    truncated: bool
    gamma_stop: float
    gamma_retained_max: float
    impossible: int
    links: int
    raw_rewards: tuple[float, ...] = ()  # retained generated rewards before relabeling, generation order
    stop: str = "none"


@dataclass
class AugmentedDataset:
    env_trajectories: list[Trajectory]
    model_trajectories: list[Trajectory]
    trace_digests: list[str]
    config: AugmentConfig
    records: list[GenerationRecord] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def all(self) -> list[Trajectory]:
        return list(self.env_trajectories) + list(self.model_trajectories)

    def analysis_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ANALYSIS_COLUMNS)
        for r in self.records:
            w.writerow([r.index, r.traj_index, r.splice_index, r.generated_length,
                        int(r.truncated), repr(r.gamma_stop), repr(r.gamma_retained_max),
                        r.impossible])
        return buf.getvalue()


def _retained_links(steps: list[rtmodel.GeneratedStep], keep: int) -> list[tuple[int, int, int]]:
    return [st.link for st in steps[:keep]]


def _one(task: int, rt_params, rt_config: rtmodel.RtConfig, vocab: Vocab,
         vae: VaeParams | None, alpha: float, dataset: Sequence[Trajectory],
         cfg: AugmentConfig, env: envs.GridEnv | None) -> GenerationRecord:
    rng = Rng(cfg.seed, stream=(task,))
    ti = int(rng.integers(len(dataset)))
    orig = dataset[ti]
    # a spliced trajectory never outgrows the context or the episode limit
    horizon = rt_config.context_steps if env is None else min(rt_config.context_steps,
                                                               env.step_limit)
    if cfg.direction == "backward":
        k = int(rng.integers(len(orig)))          # suffix orig[k:] is never empty
        room = horizon - (len(orig) - k)
    else:
        top = len(orig) - 1 if orig.done and len(orig) > 1 else len(orig)
        k = 1 + int(rng.integers(top))            # prefix orig[:k] is never empty
        room = horizon - k
    limit = cfg.fixed_length if cfg.gate == "fixed" else cfg.max_steps
    limit = room if limit is None else min(limit, room)
    if limit <= 0:
        return GenerationRecord(task, ti, k, None, None, 0, False, 0.0, 0.0, 0, 0, (), "no_room")
    gate = None
    if vae is not None:
        gate = ReliabilityGate(vae, alpha, cfg.gamma_mode, truncate=cfg.gate == "reliability")
    gen_rng = rng.derive(0)
    if cfg.direction == "backward":
        # a fixed-length ablation means exactly that many steps, episode start or not
        gen = rtmodel.generate_backward(rt_params, orig.slice(k), limit, gen_rng, gate,
                                        rt_config, vocab, stop_at_initial=cfg.gate != "fixed")
        spliced = splice(gen.prefix, orig, k)
    else:
        gen = rtmodel.generate_forward(rt_params, orig.slice(0, k), limit, gen_rng, gate,
                                       rt_config, vocab)
        spliced = splice_forward(orig, k, gen.prefix)
    n_gen = len(gen.steps)
    trace = gate.trace if gate is not None else None
    truncated = gen.stop == "gate"
    keep = n_gen - 1 if truncated else n_gen
    if trace is not None:
        out = pessimistic_relabel(spliced, trace, alpha, cfg.beta, cfg.direction)
        kept_gammas = trace.gamma[:keep]
        gamma_stop = trace.gamma[n_gen - 1]
    else:
        out, kept_gammas, gamma_stop = spliced, [], 0.0
    links = _retained_links(gen.steps, keep)
    bad = sum(not envs.is_possible(env, *ln) for ln in links) if env is not None else 0
    return GenerationRecord(task, ti, k, out, trace, keep, truncated, float(gamma_stop),
                            float(max(kept_gammas, default=0.0)), bad, len(links),
                            tuple(st.r for st in gen.steps[:keep]), gen.stop)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RT_LAB_THREADS", "1")))
    except ValueError:
        return 1


def run_rt(rt_params, rt_config: rtmodel.RtConfig, vocab: Vocab, vae: VaeParams | None,
           threshold: Threshold | None, dataset: Sequence[Trajectory], cfg: AugmentConfig,
           env: envs.GridEnv | None = None, workers: int | None = None) -> AugmentedDataset:
    """Run H generation tasks and assemble D_env plus the model trajectories."""
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.gate == "reliability" and (vae is None or threshold is None):
        raise ValueError("the reliability gate needs a VAE and a threshold")
    if rt_config.direction != cfg.direction:
        raise ValueError(f"model direction {rt_config.direction!r} != {cfg.direction!r}")
    alpha = threshold.alpha if threshold is not None else 1.0
    dataset = list(dataset)
    args = (rt_params, rt_config, vocab, vae, alpha, dataset, cfg, env)
    n_workers = workers or worker_count()
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            records = list(pool.map(lambda i: _one(i, *args), range(cfg.H)))
    else:
        records = [_one(i, *args) for i in range(cfg.H)]
    model = [r.trajectory for r in records if r.trajectory is not None]
    digests = [r.trace.digest() if r.trace is not None else "" for r in records
               if r.trajectory is not None]
    live = [r for r in records if r.trajectory is not None]
    links = sum(r.links for r in live)
    stats = {
        "generations": cfg.H,
        "model_trajectories": len(model),
        "degenerate": cfg.H - len(model),
        "mean_generated_length": float(np.mean([r.generated_length for r in live])) if live else 0.0,
        "truncation_rate": float(np.mean([r.truncated for r in live])) if live else 0.0,
        "impossible_transitions": sum(r.impossible for r in live),
        "generated_transitions": links,
        "impossible_rate": (sum(r.impossible for r in live) / links) if links else 0.0,
    }
    return AugmentedDataset(dataset, model, digests, cfg, records, stats)


# -- run manifests ----------------------------------------------------------------------

def _flat(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flat(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = value


def format_manifest(entries: dict) -> str:
    """Sorted ``key=value`` lines; nested dicts become dotted keys."""
    flat: dict = {}
    _flat("", entries, flat)
    lines = []
    for k in sorted(flat):
        v = flat[k]
        if isinstance(v, float):
            v = repr(v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_manifest(path, entries: dict) -> None:
    Path(path).write_text(format_manifest(entries), encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_augmented(aug: AugmentedDataset, out_dir, extra: dict | None = None) -> dict[str, Path]:
    """Write the composite dataset, its manifest, and the per-generation analysis CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"dataset": out / "augmented.jsonl", "manifest": out / "augment_manifest.txt",
             "analysis": out / "analysis.csv"}
    save_dataset(aug.all(), paths["dataset"])
    paths["analysis"].write_text(aug.analysis_csv(), encoding="utf-8")
    write_manifest(paths["manifest"], {"config": aug.config.to_dict(), "stats": aug.stats,
                                       **(extra or {})})
    return paths


__all__ = [
    "ANALYSIS_COLUMNS", "AugmentConfig", "AugmentedDataset", "GenerationRecord", "format_manifest",
    "read_manifest", "run_rt", "save_augmented", "splice", "splice_forward", "write_manifest",
]
