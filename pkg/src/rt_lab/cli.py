"""Command-line entry point: ``rt-lab <command> [options]``.

Every command takes ``--seed`` (mandatory, either as a flag or in the config
file), ``--out`` and ``--config``. A config file holds ``key=value`` lines
whose keys are option names; flags override it. Exit status is 0 on success,
1 for usage or configuration errors and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import envs, learners, pipeline, reliability, render, rtmodel, trajdata
from .checkpoint import CheckpointError, file_digest
from .numkit import Rng


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- config resolution -----------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if value.lower() == "none":
        return None
    try:
        return int(value)
    except ValueError:
        return value


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            cfg[k] = _coerce(v, defaults.get(k))
    for k, v in vars(args).items():
        if k in ("config", "command", "func") or v is None:
            continue
        cfg[k] = v
    if cfg.get("seed") is None:
        raise ConfigError("a seed is required (--seed or seed= in the config file)")
    cfg["seed"] = int(cfg["seed"])
    if cfg.get("out") is None:
        cfg["out"] = "."
    return cfg


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _manifest(out: Path, name: str, cfg: dict, extra: dict | None = None) -> Path:
    path = out / f"{name}_manifest.txt"
    pipeline.write_manifest(path, {"command": name, "config": cfg, **(extra or {})})
    return path


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands --------------------------------------------------------------------------

COLLECT = {"env": "boxball", "quality": "medium", "n": 500}


def cmd_collect(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    env = envs.make_env(cfg["env"])
    data = envs.collect_dataset(env, cfg["quality"], int(cfg["n"]), Rng(cfg["seed"]))
    vocab = trajdata.Vocab.build(data, env.n_states)
    ds, vp = out / "dataset.jsonl", out / "vocab.json"
    trajdata.save_dataset(data, ds)
    vocab.save(vp)
    summ = trajdata.summarize(data)
    _manifest(out, "collect", cfg, {"dataset_sha256": file_digest(ds),
                                    "trajectories": summ.trajectories,
                                    "transitions": summ.transitions,
                                    "success_fraction": summ.success_fraction})
    _say(f"trajectories={summ.trajectories} transitions={summ.transitions} "
         f"success_fraction={summ.success_fraction:.3f}")
    _say("returns " + " ".join(f"{k}={v:.4f}" for k, v in summ.return_quantiles.items()))
    return {"dataset": ds, "vocab": vp, "summary": summ}


TRAIN_RT = {"dataset": None, "vocab": None, "direction": "backward", "epochs": 60,
            "context_steps": 64, "lr": 2e-3}


def _vocab_for(cfg: dict, data) -> trajdata.Vocab:
    vp = Path(cfg["vocab"]) if cfg.get("vocab") else Path(cfg["dataset"]).with_name("vocab.json")
    vocab = trajdata.Vocab.load(_need(vp, "vocabulary"))
    states = {s for t in data for s in t.states}
    if max(states) >= vocab.n_states:
        raise ConfigError("dataset uses states outside the vocabulary")
    for t in data:
        for r in t.rewards:
            if float(r) not in vocab.rewards:
                raise ConfigError(f"dataset reward {r} missing from the vocabulary")
    return vocab


def cmd_train_rt(cfg: dict) -> dict:
    if not cfg.get("dataset"):
        raise ConfigError("train-rt needs --dataset")
    data = trajdata.load_dataset(_need(cfg["dataset"], "dataset"))
    vocab = _vocab_for(cfg, data)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rc = rtmodel.RtConfig(direction=cfg["direction"], epochs=int(cfg["epochs"]),
                          context_steps=int(cfg["context_steps"]), lr=float(cfg["lr"]),
                          lr_final=float(cfg["lr"]) / 10)
    if max(len(t) for t in data) > rc.context_steps:
        raise ConfigError("a trajectory is longer than context_steps")
    rng = Rng(cfg["seed"])
    params = rtmodel.init_params(vocab, rc, rng.derive(0))
    res = rtmodel.train(params, data, vocab, rc, rng.derive(1), log=_say)
    ho = [data[i] for i in res.holdout_idx]
    acc = rtmodel.teacher_forced_accuracy(res.params, ho, vocab, rc, "action")
    tag = "rt" if rc.direction == "backward" else "ft"
    ck = out / f"{tag}.ckpt"
    digest = rtmodel.save_model(ck, res.params, rc, vocab)
    _write_csv(out / f"{tag}_loss.csv", ("epoch", "loss"),
               [(i + 1, repr(v)) for i, v in enumerate(res.epoch_losses)])
    _manifest(out, f"train_{tag}", cfg, {"checkpoint_sha256": digest,
                                         "initial_loss": res.initial_loss,
                                         "final_loss": res.epoch_losses[-1],
                                         "holdout_action_accuracy": acc})
    _say(f"{tag}: holdout next-action accuracy {acc:.4f}")
    return {"checkpoint": ck, "accuracy": acc, "result": res}


TRAIN_VAE = {"dataset": None, "env": "boxball", "steps": 12000, "percentile": 100.0}


def cmd_train_vae(cfg: dict) -> dict:
    if not cfg.get("dataset"):
        raise ConfigError("train-vae needs --dataset")
    data = trajdata.load_dataset(_need(cfg["dataset"], "dataset"))
    env = envs.make_env(cfg["env"])
    trans = [x for t in data for x in envs.transitions(env, t)]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    vc = reliability.VaeConfig(env.n_states, steps=int(cfg["steps"]))
    res = reliability.train_vae(trans, vc, Rng(cfg["seed"]), log=_say)
    th = reliability.calibrate_alpha(res.params, trans, float(cfg["percentile"]))
    ck = out / "vae.ckpt"
    digest = reliability.save_vae(ck, res.params)
    th.save(out / "threshold.txt")
    _write_csv(out / "vae_loss.csv", ("window", "loss"),
               [(i + 1, repr(v)) for i, v in enumerate(res.window_losses)])
    _manifest(out, "train_vae", cfg, {"checkpoint_sha256": digest, "alpha": th.alpha,
                                      "initial_loss": res.initial_loss})
    _say(f"vae: alpha={th.alpha:.6f} (p={th.percentile:g})")
    return {"checkpoint": ck, "threshold": th, "params": res.params}


AUGMENT = {"dataset": None, "env": "boxball", "rt_ckpt": None, "vae_ckpt": None,
           "threshold": None, "gate": "reliability", "fixed_length": None, "H": 500,
           "beta": 0.5, "gamma_mode": "weighted", "max_steps": None}


def cmd_augment(cfg: dict) -> dict:
    for key in ("dataset", "rt_ckpt"):
        if not cfg.get(key):
            raise ConfigError(f"augment needs --{key.replace('_', '-')}")
    data = trajdata.load_dataset(_need(cfg["dataset"], "dataset"))
    env = envs.make_env(cfg["env"])
    params, rc, vocab = rtmodel.load_model(_need(cfg["rt_ckpt"], "RT checkpoint"))
    vae = th = None
    if cfg.get("vae_ckpt"):
        vae = reliability.load_vae(_need(cfg["vae_ckpt"], "VAE checkpoint"))
    if cfg.get("threshold"):
        th = reliability.Threshold.load(_need(cfg["threshold"], "threshold record"))
    fixed = cfg.get("fixed_length")
    if fixed is not None:
        cfg = {**cfg, "gate": "fixed"}
    gate = cfg["gate"]
    try:
        ac = pipeline.AugmentConfig(H=int(cfg["H"]), beta=float(cfg["beta"]),
                                    gamma_mode=cfg["gamma_mode"], direction=rc.direction,
                                    gate=gate, fixed_length=None if fixed is None else int(fixed),
                                    max_steps=None if cfg.get("max_steps") is None
                                    else int(cfg["max_steps"]),
                                    seed=cfg["seed"])
        aug = pipeline.run_rt(params, rc, vocab, vae, th, data, ac, env)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    digests = {"rt_ckpt_sha256": file_digest(cfg["rt_ckpt"])}
    if cfg.get("vae_ckpt"):
        digests["vae_ckpt_sha256"] = file_digest(cfg["vae_ckpt"])
    paths = pipeline.save_augmented(aug, cfg["out"], {"inputs": digests, "run": cfg,
                                                      "alpha": th.alpha if th else None})
    s = aug.stats
    _say(f"augment: {s['model_trajectories']} model trajectories, mean generated length "
         f"{s['mean_generated_length']:.2f}, truncation rate {s['truncation_rate']:.3f}, "
         f"impossible rate {s['impossible_rate']:.4f}")
    return {"augmented": aug, **paths}


TRAIN_POLICY = {"dataset": None, "env": "boxball", "learner": "bc", "bc_steps": 3000,
                "bcq_steps": 20000}


def _learner_cfg(cfg: dict) -> learners.LearnerConfig:
    return learners.LearnerConfig(bc_steps=int(cfg["bc_steps"]), bcq_steps=int(cfg["bcq_steps"]))


def cmd_train_policy(cfg: dict) -> dict:
    if not cfg.get("dataset"):
        raise ConfigError("train-policy needs --dataset")
    data = trajdata.load_dataset(_need(cfg["dataset"], "dataset"))
    env = envs.make_env(cfg["env"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lc = _learner_cfg(cfg)
    rng = Rng(cfg["seed"])
    if cfg["learner"] == "bc":
        pol = learners.train_bc(data, env.n_states, rng, lc)
    elif cfg["learner"] == "bcq":
        pol = learners.train_bcq(data, env.n_states, rng, lc, goal=env.goal, log=_say)
    else:
        raise ConfigError(f"unknown learner {cfg['learner']!r}")
    ck = out / f"policy_{cfg['learner']}.ckpt"
    digest = learners.save_policy(ck, pol)
    _manifest(out, f"train_policy_{cfg['learner']}", cfg, {"checkpoint_sha256": digest})
    _say(f"{cfg['learner']}: checkpoint {ck}")
    return {"checkpoint": ck, "policy": pol}


EVALUATE = {"policy": None, "env": "boxball", "episodes": 10, "run_id": "run",
            "dataset_id": "dataset", "results": None}


def _append_rows(path: Path, rows) -> None:
    new = not path.exists()
    text = learners.rows_to_csv(rows, header=new)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(text)


def cmd_evaluate(cfg: dict) -> dict:
    if not cfg.get("policy"):
        raise ConfigError("evaluate needs --policy")
    pol = learners.load_policy(_need(cfg["policy"], "policy checkpoint"))
    env = envs.make_env(cfg["env"])
    rep = learners.evaluate(pol, env, int(cfg["episodes"]), Rng(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    res = Path(cfg["results"]) if cfg.get("results") else out / "results.csv"
    row = learners.report_row(rep, cfg["run_id"], cfg["dataset_id"], pol.kind, cfg["seed"])
    _append_rows(res, [row])
    sr = "undefined" if rep.success_rate is None else f"{rep.success_rate:.3f}"
    _say(f"evaluate: success={sr} return={rep.mean_return:.4f} length={rep.mean_length:.1f}")
    return {"report": rep, "results": res}


RENDER = {"dataset": None, "env": "boxball", "limit": 50, "only_generated": True}


def cmd_render(cfg: dict) -> dict:
    if not cfg.get("dataset"):
        raise ConfigError("render needs --dataset")
    try:
        env = envs.make_env(cfg["env"])
    except envs.DomainError as exc:
        raise ConfigError(str(exc)) from exc
    data = trajdata.load_dataset(_need(cfg["dataset"], "dataset"))
    if cfg.get("only_generated") and any(t.provenance == trajdata.GENERATED for t in data):
        data = [t for t in data if t.provenance == trajdata.GENERATED]
    limit = cfg.get("limit")
    stats = render.render_dir(env, data, cfg["out"], None if limit is None else int(limit))
    _say(f"render: {stats.trajectories} trajectories, {stats.segments} segments, "
         f"{stats.highlighted} highlighted impossible")
    return {"stats": stats}


# -- full recipe ---------------------------------------------------------------------------

REPRO = {"env": "boxball", "quality": "medium", "n": 500, "epochs": 60, "vae_steps": 12000,
         "H": 500, "beta": 0.5, "gamma_mode": "weighted", "policy_seeds": 10,
         "bc_steps": 3000, "bcq_steps": 5000, "episodes": 10, "render_limit": 50,
         "context_steps": 64}


def cmd_repro(cfg: dict) -> dict:
    """Collect, train RT/FT/VAE, augment, render, and compare learners on raw vs RT data."""
    root = Path(cfg["out"])
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    t0 = time.monotonic()
    timings: dict[str, float] = {}

    def lap(name, t_start):
        timings[name] = time.monotonic() - t_start
        return time.monotonic()

    base = {"seed": seed, "env": cfg["env"]}
    col = cmd_collect({**base, "out": str(root / "data"), "quality": cfg["quality"],
                       "n": cfg["n"]})
    ds = str(col["dataset"])
    t = lap("collect", t0)
    common_rt = {**base, "dataset": ds, "vocab": None, "epochs": cfg["epochs"],
                 "context_steps": cfg["context_steps"], "lr": TRAIN_RT["lr"]}
    rt = cmd_train_rt({**common_rt, "out": str(root / "rt"), "direction": "backward"})
    t = lap("train_rt", t)
    ft = cmd_train_rt({**common_rt, "out": str(root / "ft"), "direction": "forward"})
    t = lap("train_ft", t)
    vae = cmd_train_vae({**base, "dataset": ds, "out": str(root / "vae"),
                         "steps": cfg["vae_steps"], "percentile": 100.0})
    t = lap("train_vae", t)
    aug_common = {**base, "dataset": ds, "vae_ckpt": str(vae["checkpoint"]),
                  "threshold": str(root / "vae" / "threshold.txt"), "H": cfg["H"],
                  "beta": cfg["beta"], "gamma_mode": cfg["gamma_mode"], "fixed_length": None,
                  "max_steps": None}
    aug_rt = cmd_augment({**aug_common, "out": str(root / "aug_rt"),
                          "rt_ckpt": str(rt["checkpoint"]), "gate": "reliability"})
    aug_ft = cmd_augment({**aug_common, "out": str(root / "aug_ft"),
                          "rt_ckpt": str(ft["checkpoint"]), "gate": "none"})
    t = lap("augment", t)
    r_rt = cmd_render({**base, "dataset": str(aug_rt["dataset"]), "out": str(root / "render_rt"),
                       "limit": cfg["render_limit"], "only_generated": True})
    r_ft = cmd_render({**base, "dataset": str(aug_ft["dataset"]), "out": str(root / "render_ft"),
                       "limit": cfg["render_limit"], "only_generated": True})

    env = envs.make_env(cfg["env"])
    raw = trajdata.load_dataset(ds)
    augmented = trajdata.load_dataset(aug_rt["dataset"])
    lc = learners.LearnerConfig(bc_steps=int(cfg["bc_steps"]), bcq_steps=int(cfg["bcq_steps"]))
    rows = []
    for i in range(int(cfg["policy_seeds"])):
        prng = Rng(seed, stream=(100, i))
        for dname, data in (("raw", raw), ("rt", augmented)):
            for lname in ("bc", "bcq"):
                r = prng.derive(0 if lname == "bc" else 1)
                if lname == "bc":
                    pol = learners.train_bc(data, env.n_states, r, lc)
                else:
                    pol = learners.train_bcq(data, env.n_states, r, lc, goal=env.goal)
                rep = learners.evaluate(pol, env, int(cfg["episodes"]), prng.derive(2))
                rows.append(learners.report_row(rep, f"{lname}-{dname}-{i}", dname, lname, i))
        _say(f"policy seed {i + 1}/{cfg['policy_seeds']} done")
    t = lap("policies", t)
    results = root / "results.csv"
    results.write_text(learners.rows_to_csv(rows), encoding="utf-8")

    def mean_success(learner, dname):
        vals = [float(r[5]) for r in rows if r[2] == learner and r[1] == dname]
        return float(np.mean(vals)) if vals else float("nan")

    metrics = {
        "rt_holdout_action_accuracy": rt["accuracy"],
        "ft_holdout_action_accuracy": ft["accuracy"],
        "alpha": vae["threshold"].alpha,
        "rt_impossible_rate": aug_rt["augmented"].stats["impossible_rate"],
        "rt_mean_generated_length": aug_rt["augmented"].stats["mean_generated_length"],
        "rt_truncation_rate": aug_rt["augmented"].stats["truncation_rate"],
        "ft_impossible_rate": aug_ft["augmented"].stats["impossible_rate"],
        "ft_mean_generated_length": aug_ft["augmented"].stats["mean_generated_length"],
        "rt_render_highlighted": r_rt["stats"].highlighted,
        "ft_render_highlighted": r_ft["stats"].highlighted,
        "bc_raw_success": mean_success("bc", "raw"),
        "bc_rt_success": mean_success("bc", "rt"),
        "bcq_raw_success": mean_success("bcq", "raw"),
        "bcq_rt_success": mean_success("bcq", "rt"),
    }
    _write_csv(root / "metrics.csv", ("metric", "value"),
               [(k, repr(v) if isinstance(v, float) else v) for k, v in metrics.items()])
    _manifest(root, "repro", cfg, {"metrics": metrics})
    timings["total"] = time.monotonic() - t0
    # wall-clock record; deliberately kept out of the manifest and metric files
    (root / "timings.txt").write_text("".join(f"{k}={v:.1f}\n" for k, v in timings.items()),
                                      encoding="utf-8")
    _say(f"repro finished in {time.monotonic() - t0:.0f}s")
    for k, v in metrics.items():
        _say(f"  {k} = {v}")
    return {"metrics": metrics, "root": root, "timings": timings}


# -- argument parsing ----------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable[[dict], dict], dict]] = {
    "collect": (cmd_collect, COLLECT),
    "train-rt": (cmd_train_rt, TRAIN_RT),
    "train-vae": (cmd_train_vae, TRAIN_VAE),
    "augment": (cmd_augment, AUGMENT),
    "train-policy": (cmd_train_policy, TRAIN_POLICY),
    "evaluate": (cmd_evaluate, EVALUATE),
    "render": (cmd_render, RENDER),
    "repro": (cmd_repro, REPRO),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p = _Parser(prog="rt-lab", parents=[common],
                description="Gated backward trajectory augmentation on gridworlds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    c = add("collect", "collect an offline dataset")
    c.add_argument("--env")
    c.add_argument("--quality", choices=sorted(envs.EPSILON))
    c.add_argument("--n", type=int)

    c = add("train-rt", "train the trajectory transformer")
    c.add_argument("--dataset")
    c.add_argument("--vocab")
    c.add_argument("--direction", choices=("backward", "forward"))
    c.add_argument("--epochs", type=int)
    c.add_argument("--context-steps", type=int, dest="context_steps")
    c.add_argument("--lr", type=float)

    c = add("train-vae", "train the transition VAE and calibrate alpha")
    c.add_argument("--dataset")
    c.add_argument("--env")
    c.add_argument("--steps", type=int)
    c.add_argument("--percentile", type=float)

    c = add("augment", "generate, gate, splice and relabel trajectories")
    c.add_argument("--dataset")
    c.add_argument("--env")
    c.add_argument("--rt-ckpt", dest="rt_ckpt")
    c.add_argument("--vae-ckpt", dest="vae_ckpt")
    c.add_argument("--threshold")
    c.add_argument("--gate", choices=pipeline.GATES)
    c.add_argument("--fixed-length", type=int, dest="fixed_length")
    c.add_argument("--H", type=int)
    c.add_argument("--beta", type=float)
    c.add_argument("--gamma-mode", choices=reliability.GAMMA_MODES, dest="gamma_mode")
    c.add_argument("--max-steps", type=int, dest="max_steps")

    c = add("train-policy", "train BC or BCQ")
    c.add_argument("--dataset")
    c.add_argument("--env")
    c.add_argument("--learner", choices=("bc", "bcq"))
    c.add_argument("--bc-steps", type=int, dest="bc_steps")
    c.add_argument("--bcq-steps", type=int, dest="bcq_steps")

    c = add("evaluate", "evaluate a policy checkpoint")
    c.add_argument("--policy")
    c.add_argument("--env")
    c.add_argument("--episodes", type=int)
    c.add_argument("--run-id", dest="run_id")
    c.add_argument("--dataset-id", dest="dataset_id")
    c.add_argument("--results", help="cumulative results CSV (default OUT/results.csv)")

    c = add("render", "draw trajectories as SVG")
    c.add_argument("--dataset")
    c.add_argument("--env")
    c.add_argument("--limit", type=int)
    c.add_argument("--all", dest="only_generated", action="store_false", default=None,
                   help="draw original trajectories too")

    c = add("repro", "run the full BoxBall recipe")
    c.add_argument("--epochs", type=int)
    c.add_argument("--H", type=int)
    c.add_argument("--policy-seeds", type=int, dest="policy_seeds")
    c.add_argument("--bcq-steps", type=int, dest="bcq_steps")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:       # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    func, defaults = COMMANDS[args.command]
    try:
        cfg = resolve(args, defaults)
        func(cfg)
    except (ConfigError, CheckpointError, envs.DomainError, trajdata.DatasetLoadError) as exc:
        print(f"rt-lab: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"rt-lab: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
