"""A scaled-down BoxBall run through the library API.

Collect medium-quality data, train the backward model and the transition VAE,
augment with and without the reliability gate, and look at what comes out.
Small enough to finish in a few minutes on one core; the full recipe lives
behind ``rt-lab repro``.
"""
import sys
import tempfile
from pathlib import Path

from rt_lab import envs, learners, pipeline, reliability, render, rtmodel
from rt_lab.numkit import Rng
from rt_lab.trajdata import Vocab, summarize

rng = Rng(11)
env = envs.boxball()
print(envs.render_layout(env))

data = envs.collect_dataset(env, "medium", 300, rng.derive(0))
s = summarize(data)
print(f"{s.trajectories} trajectories, {s.transitions} steps, "
      f"{s.success_fraction:.0%} reach the goal")

vocab = Vocab.build(data, env.n_states)
cfg = rtmodel.RtConfig(direction="backward", epochs=30)
res = rtmodel.train(rtmodel.init_params(vocab, cfg, rng.derive(1)), data, vocab, cfg,
                    rng.derive(2), log=print)
held = [data[i] for i in res.holdout_idx]
print("held-out next-action accuracy",
      round(rtmodel.teacher_forced_accuracy(res.params, held, vocab, cfg, "action"), 4))

trans = [x for t in data for x in envs.transitions(env, t)]
vae = reliability.train_vae(trans, reliability.VaeConfig(env.n_states, steps=4000),
                            rng.derive(3)).params
th = reliability.calibrate_alpha(vae, trans)
print(f"alpha = {th.alpha:.4f}")

# one wall crossing versus one ordinary step
below, above = env.cell(6, 7), env.cell(6, 8)
print("wall crossing score", round(reliability.recon_error(vae, below, envs.UP, above), 3))
print("ordinary step score", round(reliability.recon_error(vae, *trans[0]), 3))

runs = {}
for gate in ("reliability", "none"):
    ac = pipeline.AugmentConfig(H=100, gate=gate, seed=5)
    runs[gate] = pipeline.run_rt(res.params, cfg, vocab, vae, th, data, ac, env)
    st = runs[gate].stats
    print(f"{gate:>11}: mean length {st['mean_generated_length']:.1f}, "
          f"truncated {st['truncation_rate']:.0%}, impossible {st['impossible_rate']:.2%}")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="walkthrough_"))
for gate, aug in runs.items():
    stats = render.render_dir(env, aug.model_trajectories, out / gate, limit=20)
    print(f"{gate}: {stats.highlighted} impossible segments drawn in {out / gate}")

# does the extra data help a cloned policy?
lc = learners.LearnerConfig(bc_steps=1500)
for name, d in (("raw", data), ("augmented", runs["reliability"].all())):
    pol = learners.train_bc(d, env.n_states, rng.derive(4), lc)
    rep = learners.evaluate(pol, env, 10, rng.derive(5))
    print(f"BC on {name}: success {rep.success_rate:.2f}, mean length {rep.mean_length:.1f}")
