import math

import numpy as np
import pytest

from rt_lab import rtmodel
from rt_lab.numkit import Rng, Tensor, grad_check
from rt_lab.numkit.ops import softmax_np
from rt_lab.rtmodel import ContextError, RtConfig
from rt_lab.trajdata import Trajectory, Vocab, tokenize

SMALL = dict(layers=2, heads=2, model_dim=16, context_steps=12, dropout=0.0)


@pytest.fixture(scope="module")
def toy():
    trajs = [Trajectory.from_rewards([0, 1, 2, 3], [3, 3, 0, 0], [0, 0, 0, 1], done=True),
             Trajectory.from_rewards([5, 6, 7], [1, 2, 3], [0, 0, 0])]
    vocab = Vocab.build(trajs, 10)
    return trajs, vocab


def _model(vocab, seed=0, **kw):
    cfg = RtConfig(**{**SMALL, **kw})
    return rtmodel.init_params(vocab, cfg, Rng(seed)), cfg


def test_config_validation():
    with pytest.raises(ValueError):
        RtConfig(model_dim=10, heads=4)
    with pytest.raises(ValueError):
        RtConfig(direction="sideways")


def test_causality_random_pairs(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab)
    rng = Rng(21)
    sizes = vocab.sizes
    for _ in range(100):
        n = int(rng.integers(1, cfg.context_steps + 1))
        tok = np.stack([rng.integers(0, v, size=n) for v in sizes], axis=1).reshape(-1)
        p = int(rng.integers(0, 4 * n))
        seq = rtmodel.TokenSequence(tok, n)
        base = rtmodel.forward_pass(params, seq, cfg)
        pert = tok.copy()
        pert[p] = (pert[p] + 1 + int(rng.integers(0, sizes[p % 4] - 1))) % sizes[p % 4]
        out = rtmodel.forward_pass(params, rtmodel.TokenSequence(pert, n), cfg)
        for q in range(p):
            a = rtmodel.position_logits(base, q)
            b = rtmodel.position_logits(out, q)
            assert a.tobytes() == b.tobytes()


def test_attention_rows_sum_to_one(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab)
    out = rtmodel.forward_pass(params, tokenize(trajs[0], vocab, "backward"), cfg)
    att = out.attention[0]
    np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(np.triu(att, k=1) == 0.0)


def test_untrained_loss_near_uniform(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab)
    batch = rtmodel.make_batch([tokenize(t, vocab, "backward") for t in trajs])
    _, terms, _ = rtmodel.loss_terms(params, batch, cfg)
    n_s, n_a, n_r, n_g = vocab.sizes
    assert terms["state"].item() == pytest.approx(math.log(n_s), abs=0.15)
    assert terms["action"].item() == pytest.approx(math.log(n_a), abs=0.15)
    assert terms["reward"].item() == pytest.approx(math.log(n_r), abs=0.15)
    assert terms["rtg"].item() == pytest.approx(math.log(n_g), abs=0.15)


def test_boxball_state_baseline(vocab_small):
    params, cfg = _model(vocab_small, context_steps=64)
    assert vocab_small.n_states == 100
    t = Trajectory.from_rewards(list(range(10)), [0] * 10, [0.0] * 10)
    _, terms, _ = rtmodel.loss_terms(params, rtmodel.make_batch([tokenize(t, vocab_small)]), cfg)
    assert terms["state"].item() == pytest.approx(math.log(100), abs=0.15)


def test_full_loss_gradient_check(toy):
    trajs, vocab = toy
    cfg = RtConfig(layers=1, heads=2, model_dim=8, context_steps=4, dropout=0.0)
    params = rtmodel.init_params(vocab, cfg, Rng(3))
    two = Trajectory.from_rewards([0, 1], [3, 3], [0, 1], done=True)
    batch = rtmodel.make_batch([tokenize(two, vocab, "backward")], [1])
    names = sorted(params)

    def loss(*ws):
        return rtmodel.loss_terms(dict(zip(names, ws)), batch, cfg)[0]

    err = grad_check(loss, *[params[k] for k in names], max_coords=12, rng=Rng(4))
    assert err < 1e-4


def test_context_error(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab, context_steps=2)
    with pytest.raises(ContextError):
        rtmodel.forward_pass(params, tokenize(trajs[0], vocab), cfg)


def test_memorises_single_trajectory(toy):
    trajs, vocab = toy
    data = [trajs[0]] * 4
    params, cfg = _model(vocab, epochs=200, batch_size=4, lr=3e-3, holdout=0.0,
                         direction="backward")
    res = rtmodel.train(params, data, vocab, cfg, Rng(1))
    assert res.epoch_losses[-1] < res.initial_loss
    for slot in ("state", "action", "reward", "rtg"):
        assert rtmodel.teacher_forced_accuracy(res.params, data, vocab, cfg, slot) == 1.0


def test_training_is_bit_reproducible(toy):
    trajs, vocab = toy
    outs = []
    for _ in range(2):
        params, cfg = _model(vocab, epochs=3, batch_size=1, holdout=0.0, dropout=0.1)
        res = rtmodel.train(params, trajs, vocab, cfg, Rng(2))
        outs.append(b"".join(res.params[k].data.tobytes() for k in sorted(res.params)))
    assert outs[0] == outs[1]


def test_high_labels_top_quantile():
    trajs = [Trajectory.from_rewards([0], [0], [r]) for r in np.linspace(0, 1, 20)]
    labels = rtmodel.high_labels(trajs, 0.1)
    assert labels.tolist() == [0] * 18 + [1, 1]


# -- guidance ----------------------------------------------------------------------

def test_guidance_off_equals_unguided():
    logits = np.array([0.3, -1.0, 2.0, 0.0])
    high = np.array([5.0, -5.0, 0.0, 1.0])
    p = rtmodel.guided_rtg_distribution(logits, high, 0.0)
    np.testing.assert_array_equal(p, softmax_np(logits))


def test_guidance_two_bin_bayes_posterior():
    prior = np.array([0.3, 0.7])
    lik = np.array([0.9, 0.2])     # P(H=1 | R)
    post = prior * lik / (prior * lik).sum()
    p = rtmodel.guided_rtg_distribution(np.log(prior), np.log(lik / (1 - lik)), 1.0)
    np.testing.assert_allclose(p, post, atol=1e-12)


def test_guidance_strong_limit_selects_bin():
    logits = np.zeros(5)
    high = np.array([-3.0, -3.0, 4.0, -3.0, -3.0])
    p = rtmodel.guided_rtg_distribution(logits, high, 200.0)
    assert p[2] > 1 - 1e-12


def test_guided_sample_step_greedy_is_deterministic(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab, temperature=0.0)
    prefix = tokenize(trajs[0].slice(2), vocab, "backward")
    a, e1 = rtmodel.guided_sample_step(params, prefix, Rng(1), cfg)
    b, e2 = rtmodel.guided_sample_step(params, prefix, Rng(99), cfg)
    assert a.tolist() == b.tolist()
    assert len(e1) == prefix.step_count + 1
    assert e1.sum() == pytest.approx(1.0, abs=1e-9)


def test_guided_sample_step_tokens_in_vocab(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab)
    rng = Rng(4)
    for _ in range(20):
        toks, _ = rtmodel.guided_sample_step(params, tokenize(trajs[1], vocab), rng, cfg)
        assert all(0 <= t < v for t, v in zip(toks, vocab.sizes))


def test_incremental_decoder_matches_full_pass(toy):
    trajs, vocab = toy
    params, cfg = _model(vocab)
    seq = tokenize(trajs[0], vocab, "backward")
    full = rtmodel.forward_pass(params, seq, cfg)
    dec = rtmodel.Decoder(params, cfg)
    dec.extend(seq.tokens[:-1])
    slot, logits = dec.next_logits()
    assert slot == "rtg"
    np.testing.assert_allclose(logits, full.logits["rtg"].data[0, -1], atol=1e-10)


# -- generation ------------------------------------------------------------------------

def test_generate_backward_zero_steps(tiny_rt, medium_small, vocab_small):
    params, cfg = tiny_rt
    gen = rtmodel.generate_backward(params, medium_small[0].slice(3), 0, Rng(0), None, cfg,
                                    vocab_small)
    assert gen.prefix is None and gen.steps == []


def test_generate_backward_always_truncating_gate(tiny_rt, medium_small, vocab_small):
    params, cfg = tiny_rt
    calls = []

    def gate(e_row, step):
        calls.append(len(e_row))
        return True

    gen = rtmodel.generate_backward(params, medium_small[0].slice(3), 10, Rng(0), gate, cfg,
                                    vocab_small)
    assert len(gen.steps) <= 1 and gen.stop == "gate"
    assert calls == [1]


def test_generate_backward_links_and_order(tiny_rt, medium_small, vocab_small):
    params, cfg = tiny_rt
    suffix = medium_small[1].slice(4)
    gen = rtmodel.generate_backward(params, suffix, 6, Rng(3), None, cfg, vocab_small)
    steps = gen.steps
    assert steps[0].link[2] == suffix.states[0]
    for newer, older in zip(steps, steps[1:]):
        assert older.link[2] == newer.s
    assert gen.prefix.states == tuple(s.s for s in reversed(steps))
    assert gen.prefix.splice_index == len(steps)


def test_generate_backward_stops_at_initial_state(tiny_rt, medium_small, vocab_small):
    params, cfg = tiny_rt
    for seed in range(5):
        gen = rtmodel.generate_backward(params, medium_small[2].slice(5), None, Rng(seed), None,
                                        cfg, vocab_small)
        if gen.stop == "initial":
            assert gen.steps[-1].s in vocab_small.initial_states
            assert all(s.s not in vocab_small.initial_states for s in gen.steps[:-1])


def test_generate_forward_links(tiny_ft, medium_small, vocab_small):
    params, cfg = tiny_ft
    prefix = medium_small[0].slice(0, 2)
    gen = rtmodel.generate_forward(params, prefix, 5, Rng(1), None, cfg, vocab_small)
    assert gen.steps[0].link[:2] == (prefix.states[-1], prefix.actions[-1])
    assert len(gen.steps) <= 5


def test_generation_is_seeded(tiny_rt, medium_small, vocab_small):
    params, cfg = tiny_rt
    suffix = medium_small[0].slice(3)
    a = rtmodel.generate_backward(params, suffix, 8, Rng(5), None, cfg, vocab_small)
    b = rtmodel.generate_backward(params, suffix, 8, Rng(5), None, cfg, vocab_small)
    assert a.steps == b.steps


def test_checkpoint_roundtrip(tiny_rt, vocab_small, tmp_path):
    params, cfg = tiny_rt
    d1 = rtmodel.save_model(tmp_path / "m.ckpt", params, cfg, vocab_small)
    p2, cfg2, v2 = rtmodel.load_model(tmp_path / "m.ckpt")
    assert cfg2 == cfg and v2 == vocab_small
    for k in params:
        assert p2[k].data.tobytes() == params[k].data.tobytes()
    d2 = rtmodel.save_model(tmp_path / "m2.ckpt", p2, cfg2, v2)
    assert d1 == d2
    assert isinstance(next(iter(p2.values())), Tensor)
