import numpy as np
import pytest

from rt_lab import envs, reliability, rtmodel
from rt_lab.numkit import Rng
from rt_lab.trajdata import Trajectory, Vocab

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one summary line for criterion n."""
    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE][n] = line
        print(line)
    return record


@pytest.fixture(scope="session")
def boxball():
    return envs.boxball()


@pytest.fixture(scope="session")
def medium_small(boxball):
    return envs.collect_dataset(boxball, "medium", 60, Rng(3))


@pytest.fixture(scope="session")
def vocab_small(boxball, medium_small):
    return Vocab.build(medium_small, boxball.n_states)


TINY_RT = dict(layers=1, heads=2, model_dim=16, context_steps=64, dropout=0.0, epochs=3,
               batch_size=8, lr=3e-3, holdout=0.1)


@pytest.fixture(scope="session")
def tiny_rt(medium_small, vocab_small):
    """A briefly trained backward model; quality is irrelevant, shapes and plumbing are not."""
    cfg = rtmodel.RtConfig(direction="backward", **TINY_RT)
    params = rtmodel.init_params(vocab_small, cfg, Rng(5))
    res = rtmodel.train(params, medium_small, vocab_small, cfg, Rng(6))
    return res.params, cfg


@pytest.fixture(scope="session")
def tiny_ft(medium_small, vocab_small):
    cfg = rtmodel.RtConfig(direction="forward", **TINY_RT)
    params = rtmodel.init_params(vocab_small, cfg, Rng(5))
    res = rtmodel.train(params, medium_small, vocab_small, cfg, Rng(6))
    return res.params, cfg


@pytest.fixture(scope="session")
def small_transitions(boxball, medium_small):
    return [tr for t in medium_small for tr in envs.transitions(boxball, t)]


@pytest.fixture(scope="session")
def tiny_vae(boxball, small_transitions):
    cfg = reliability.VaeConfig(n_states=boxball.n_states, steps=400, window=100)
    res = reliability.train_vae(small_transitions, cfg, Rng(9))
    th = reliability.calibrate_alpha(res.params, small_transitions)
    return res.params, th


def make_traj(states, actions, rewards, done=False, **kw):
    return Trajectory.from_rewards(states, actions, rewards, done=done, **kw)


def random_logits(rng, shape):
    return np.asarray(rng.normal(shape), dtype=np.float64)
