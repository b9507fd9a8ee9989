import pytest

from rt_lab import envs, pipeline
from rt_lab.pipeline import AugmentConfig, run_rt, splice, splice_forward
from rt_lab.reliability import Threshold
from rt_lab.trajdata import GENERATED, Trajectory, load_dataset

from conftest import make_traj


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(H=0)
    with pytest.raises(ValueError):
        AugmentConfig(gate="fixed")
    with pytest.raises(ValueError):
        AugmentConfig(fixed_length=3)
    with pytest.raises(ValueError):
        AugmentConfig(gate="fixed", fixed_length=0)
    with pytest.raises(ValueError):
        AugmentConfig(beta=-1.0)
    with pytest.raises(ValueError):
        AugmentConfig(gate="maybe")


def test_splice_without_prefix_is_suffix():
    orig = make_traj([0, 1, 2, 3], [1, 1, 1, 1], [0, 0, 0, 1], done=True)
    out = splice(None, orig, 2)
    assert out.states == (2, 3) and out.splice_index == 0 and out.done
    assert out.rtgs == orig.rtgs[2:]
    assert out.provenance == GENERATED


def test_splice_at_zero_keeps_whole_original():
    orig = make_traj([0, 1, 2], [1, 1, 1], [0, 0, 1], done=True)
    pre = make_traj([7, 8], [2, 2], [0, 0])
    out = splice(pre, orig, 0)
    assert out.states == (7, 8, 0, 1, 2) and out.splice_index == 2
    assert out.rtg_consistent()


def test_splice_bounds():
    orig = make_traj([0, 1], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        splice(None, orig, 3)
    with pytest.raises(ValueError):
        splice(None, orig, -1)


def test_splice_forward():
    orig = make_traj([0, 1, 2], [1, 1, 1], [0, 0, 1], done=True)
    cont = make_traj([5, 6], [3, 3], [0, 1], done=True)
    out = splice_forward(orig, 2, cont)
    assert out.states == (0, 1, 5, 6) and out.splice_index == 2 and out.done


@pytest.fixture(scope="module")
def aug_args(tiny_rt, vocab_small, tiny_vae, medium_small, boxball):
    params, cfg = tiny_rt
    vae, th = tiny_vae
    return params, cfg, vocab_small, vae, th, medium_small, boxball


def _run(aug_args, workers=1, th=None, **kw):
    params, cfg, vocab, vae, th0, data, env = aug_args
    return run_rt(params, cfg, vocab, vae, th or th0, data, AugmentConfig(**kw), env,
                  workers=workers)


def test_always_truncating_gate_yields_bare_suffix(aug_args):
    aug = _run(aug_args, H=1, th=Threshold(1e-300), seed=2)
    (rec,) = aug.records
    orig = aug.env_trajectories[rec.traj_index]
    assert rec.truncated and rec.generated_length == 0 and rec.stop == "gate"
    assert rec.trajectory.states == orig.states[rec.splice_index:]
    assert rec.trajectory.splice_index == 0


def test_fixed_length_generates_exactly(aug_args):
    params, cfg, vocab, vae, th, data, env = aug_args
    aug = _run(aug_args, H=20, gate="fixed", fixed_length=3, seed=4)
    for rec in aug.records:
        orig = data[rec.traj_index]
        headroom = min(cfg.context_steps, env.step_limit) - (len(orig) - rec.splice_index)
        assert rec.generated_length == min(3, max(headroom, 0))
        assert not rec.truncated


def test_worker_count_does_not_change_output(aug_args):
    a = _run(aug_args, workers=1, H=12, seed=8)
    b = _run(aug_args, workers=3, H=12, seed=8)
    assert a.model_trajectories == b.model_trajectories
    assert a.trace_digests == b.trace_digests
    assert a.analysis_csv() == b.analysis_csv()


def test_seed_changes_output(aug_args):
    a = _run(aug_args, H=6, seed=1)
    b = _run(aug_args, H=6, seed=2)
    assert a.analysis_csv() != b.analysis_csv()


def test_retained_steps_stay_under_threshold(aug_args):
    th = aug_args[4]
    aug = _run(aug_args, H=15, seed=3)
    for rec in aug.records:
        if rec.trace is None:
            continue
        assert all(g <= th.alpha for g in rec.trace.gamma[:rec.generated_length])
        if rec.truncated:
            assert rec.gamma_stop > th.alpha


def test_model_trajectories_have_consistent_rtgs(aug_args):
    aug = _run(aug_args, H=10, seed=5)
    for t in aug.model_trajectories:
        assert t.provenance == GENERATED and t.rtg_consistent()
    assert aug.env_trajectories == list(aug_args[5])


def test_relabelled_rewards_match_trace(aug_args):
    beta = 0.5
    alpha = aug_args[4].alpha
    aug = _run(aug_args, H=10, seed=6, beta=beta)
    for rec in aug.records:
        if rec.trajectory is None:
            continue
        n = rec.generated_length
        gen_rewards = rec.trajectory.rewards[:n][::-1]      # generation order
        for i, (r_new, r_raw) in enumerate(zip(gen_rewards, rec.raw_rewards)):
            assert r_new == pytest.approx(r_raw - beta * rec.trace.gamma[i] / alpha, abs=1e-12)


def test_impossible_count_matches_env(aug_args):
    env = aug_args[6]
    aug = _run(aug_args, gate="none", H=8, seed=7)
    for rec in aug.records:
        t = rec.trajectory
        if t is None:
            continue
        links = list(zip(t.states[:rec.generated_length], t.actions[:rec.generated_length],
                         t.states[1:rec.generated_length + 1]))
        assert rec.impossible == sum(not envs.is_possible(env, *ln) for ln in links)


def test_reliability_gate_needs_vae(aug_args):
    params, cfg, vocab, vae, th, data, env = aug_args
    with pytest.raises(ValueError):
        run_rt(params, cfg, vocab, None, None, data, AugmentConfig(H=1))


def test_direction_mismatch(aug_args):
    params, cfg, vocab, vae, th, data, env = aug_args
    with pytest.raises(ValueError):
        run_rt(params, cfg, vocab, vae, th, data, AugmentConfig(H=1, direction="forward"))


def test_save_augmented_roundtrip(aug_args, tmp_path):
    aug = _run(aug_args, H=5, seed=9)
    paths = pipeline.save_augmented(aug, tmp_path, {"alpha": 0.25})
    assert load_dataset(paths["dataset"]) == aug.all()
    man = pipeline.read_manifest(paths["manifest"])
    assert man["config.H"] == "5" and man["alpha"] == "0.25"
    assert man["config.fixed_length"] == "none"
    rows = paths["analysis"].read_text().splitlines()
    assert rows[0].split(",") == list(pipeline.ANALYSIS_COLUMNS)
    assert len(rows) == 6


def test_manifest_format_sorted_and_nested():
    text = pipeline.format_manifest({"b": 1, "a": {"y": 0.1, "x": True}})
    assert text == "a.x=true\na.y=0.1\nb=1\n"
