"""Decoder-only causal transformer over (s, a, r, R) token streams.

Each position carries a slot-specific token embedding plus a per-step
position embedding and a slot-type embedding. The hidden state at slot k of a
step predicts the next token, so the four output heads read from:

    state token  -> action head   (a_t)
    action token -> reward head   (r_t)
    reward token -> RTG head      (R_t)
    RTG token    -> state head    (s_{t+1}) and the high-return classifier

Training uses the tape in :mod:`rt_lab.numkit`. Sampling goes through
:class:`Decoder`, a numpy-only incremental path with a key/value cache that
reproduces :func:`forward_pass` to round-off.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .numkit import Adam, Rng, Tape, Tensor, ops
from .numkit.ops import softmax_np
from .trajdata import GENERATED, TokenSequence, Trajectory, Vocab, tokenize


class ContextError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RtConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    context_steps: int = 64
    dropout: float = 0.1
    direction: str = "backward"
    high_reward_quantile: float = 0.1
    guidance_strength: float = 1.0
    temperature: float = 1.0
    classifier_weight: float = 0.1
    # training schedule
    epochs: int = 60
    batch_size: int = 8
    lr: float = 2e-3
    lr_final: float = 2e-4      # cosine decay target over the whole run
    holdout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters ---------------------------------------------------------------------

def param_shapes(vocab: Vocab, config: RtConfig) -> dict[str, tuple[int, ...]]:
    d = config.model_dim
    ns, na, nr, nb = vocab.sizes
    shapes = {
        "emb.state": (ns, d), "emb.action": (na, d), "emb.reward": (nr, d), "emb.rtg": (nb, d),
        "emb.pos": (config.context_steps, d), "emb.slot": (4, d),
        "ln_f.g": (d,), "ln_f.b": (d,),
        "head.state.w": (d, ns), "head.state.b": (ns,),
        "head.action.w": (d, na), "head.action.b": (na,),
        "head.reward.w": (d, nr), "head.reward.b": (nr,),
        "head.rtg.w": (d, nb), "head.rtg.b": (nb,),
        "head.high.w": (d, 1), "head.high.b": (1,),
    }
    for i in range(config.layers):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.qkv.w": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
            p + "attn.out.w": (d, d), p + "attn.out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc.w": (d, 4 * d), p + "mlp.fc.b": (4 * d,),
            p + "mlp.proj.w": (4 * d, d), p + "mlp.proj.b": (d,),
        })
    return shapes


def init_params(vocab: Vocab, config: RtConfig, rng: Rng) -> dict[str, Tensor]:
    params = {}
    for name, shape in sorted(param_shapes(vocab, config).items()):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            std = 0.02
            if name.endswith("proj.w") or name.endswith("out.w"):
                std = 0.02 / math.sqrt(2 * config.layers)
            data = rng.normal(shape, scale=std)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- batched forward (tape) ---------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray      # (B, T, 4) int
    valid: np.ndarray       # (B, T) bool
    high: np.ndarray        # (B,) 0/1 labels

    @property
    def steps(self) -> int:
        return self.tokens.shape[1]


def make_batch(seqs: Sequence[TokenSequence], high: Sequence[int] | None = None) -> Batch:
    t_max = max(s.step_count for s in seqs)
    tok = np.zeros((len(seqs), t_max, 4), dtype=np.int64)
    valid = np.zeros((len(seqs), t_max), dtype=bool)
    for i, s in enumerate(seqs):
        tok[i, :s.step_count] = s.steps()
        valid[i, :s.step_count] = True
    h = np.zeros(len(seqs)) if high is None else np.asarray(high, dtype=np.float64)
    return Batch(tok, valid, h)


@dataclass
class ForwardOutput:
    logits: dict[str, Tensor]   # per slot, (B, T, V); state logits at t predict s_{t+1}
    high_logits: Tensor         # (B, T) classifier logit read at each RTG token
    attention: np.ndarray       # (B, T, T) per-step attention trace, see attention_trace
    hidden: Tensor              # (B, 4T, d) final-layer hidden states


def _embed(params, tok: np.ndarray) -> Tensor:
    b, t, _ = tok.shape
    parts = [ops.embedding(params[f"emb.{k}"], tok[..., i])
             for i, k in enumerate(("state", "action", "reward", "rtg"))]
    x = ops.stack(parts, axis=2)                                # (B, T, 4, d)
    pos = ops.reshape(params["emb.pos"][:t], (t, 1, -1))
    x = x + pos + params["emb.slot"]
    return ops.reshape(x, (b, 4 * t, -1))


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _block(params, p: str, x: Tensor, heads: int, mask: np.ndarray, drop: float, rng):
    b, n, d = x.shape
    dh = d // heads
    h = ops.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    qkv = h @ params[p + "attn.qkv.w"] + params[p + "attn.qkv.b"]
    qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q * (1.0 / math.sqrt(dh))) @ ops.transpose(k, (0, 1, 3, 2))
    att = ops.softmax(scores, axis=-1, mask=mask)
    o = ops.reshape(ops.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
    o = o @ params[p + "attn.out.w"] + params[p + "attn.out.b"]
    x = x + ops.dropout(o, drop, rng)
    h = ops.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = ops.gelu(h @ params[p + "mlp.fc.w"] + params[p + "mlp.fc.b"])
    h = h @ params[p + "mlp.proj.w"] + params[p + "mlp.proj.b"]
    x = x + ops.dropout(h, drop, rng)
    return x, att.data


def attention_trace(att: np.ndarray) -> np.ndarray:
    """Per-step attention from each step's state token, mean over heads.

    ``att`` is (B, H, 4T, 4T). Row t of the result holds e_i for steps
    i <= t, with the four within-step token attentions of step i summed.
    """
    b, _, n, _ = att.shape
    t = n // 4
    rows = att.mean(axis=1)[:, 0::4, :]                # queries at state tokens
    return rows.reshape(b, t, t, 4).sum(axis=-1)


def forward_pass(params, seq, config: RtConfig, rng: Rng | None = None) -> ForwardOutput:
    """Run the transformer on one :class:`TokenSequence` or a :class:`Batch`.

    ``rng`` enables dropout (training); leave it None for evaluation.
    """
    batch = seq if isinstance(seq, Batch) else make_batch([seq])
    t = batch.steps
    if t > config.context_steps:
        raise ContextError(f"sequence of {t} steps exceeds context of {config.context_steps}")
    drop = config.dropout if rng is not None else 0.0
    x = _embed(params, batch.tokens)
    mask = _causal_mask(4 * t)
    att = None
    for i in range(config.layers):
        x, att = _block(params, f"block{i}.", x, config.heads, mask, drop, rng)
    x = ops.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    b = x.shape[0]
    h4 = ops.reshape(x, (b, t, 4, -1))
    logits = {}
    for slot, src in (("action", 0), ("reward", 1), ("rtg", 2), ("state", 3)):
        hs = h4[:, :, src, :]
        logits[slot] = hs @ params[f"head.{slot}.w"] + params[f"head.{slot}.b"]
    hr = h4[:, :, 3, :]
    high = ops.reshape(hr @ params["head.high.w"] + params["head.high.b"], (b, t))
    return ForwardOutput(logits, high, attention_trace(att), x)


def position_logits(out: ForwardOutput, p: int, b: int = 0) -> np.ndarray:
    """Logits emitted at token position ``p`` (for causality checks)."""
    t, k = divmod(p, 4)
    slot = ("action", "reward", "rtg", "state")[k]
    return out.logits[slot].data[b, t]


def loss_terms(params, batch: Batch, config: RtConfig, rng: Rng | None = None):
    """Per-slot cross-entropies, classifier BCE, and their weighted total."""
    out = forward_pass(params, batch, config, rng)
    tok, valid = batch.tokens, batch.valid
    w = valid.astype(np.float64)
    terms = {
        "action": ops.cross_entropy(out.logits["action"], tok[..., 1], w),
        "reward": ops.cross_entropy(out.logits["reward"], tok[..., 2], w),
        "rtg": ops.cross_entropy(out.logits["rtg"], tok[..., 3], w),
    }
    if batch.steps > 1 and valid[:, 1:].any():
        terms["state"] = ops.cross_entropy(out.logits["state"][:, :-1], tok[:, 1:, 0],
                                           valid[:, 1:].astype(np.float64))
    labels = np.broadcast_to(batch.high[:, None], valid.shape)
    terms["high"] = ops.bce_with_logits(out.high_logits, labels, w)
    total = terms["action"] + terms["reward"] + terms["rtg"]
    if "state" in terms:
        total = total + terms["state"]
    total = total + terms["high"] * config.classifier_weight
    return total, terms, out


def high_labels(trajs: Sequence[Trajectory], q: float) -> np.ndarray:
    """1 for trajectories whose return lies in the top ``q`` fraction."""
    rets = np.array([t.ret for t in trajs])
    thr = np.quantile(rets, 1.0 - q)
    return (rets >= thr).astype(np.int64)


def split_holdout(n: int, frac: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    k = int(round(frac * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    losses: list[float]                 # one entry per optimizer step
    epoch_losses: list[float]
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    initial_loss: float = float("nan")
    history: list[dict] = field(default_factory=list)


def _length_bucketed(idx: np.ndarray, lengths: np.ndarray, batch_size: int, rng: Rng):
    """Shuffled minibatches of similar-length sequences (less padding)."""
    perm = idx[rng.permutation(len(idx))]
    group = 8 * batch_size
    batches = []
    for g in range(0, len(perm), group):
        chunk = perm[g:g + group]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train(params, trajs: Sequence[Trajectory], vocab: Vocab, config: RtConfig, rng: Rng,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Teacher-forced training on ``trajs`` tokenized in ``config.direction``.

    A ``config.holdout`` fraction of trajectories is kept out for evaluation.
    """
    if not trajs:
        raise ValueError("empty dataset")
    if max(len(t) for t in trajs) > config.context_steps:
        raise ContextError("a trajectory is longer than context_steps")
    seqs = [tokenize(t, vocab, config.direction) for t in trajs]
    labels = high_labels(trajs, config.high_reward_quantile)
    tr_idx, ho_idx = split_holdout(len(trajs), config.holdout, rng.derive(0))
    opt = Adam(params, lr=config.lr, clip_norm=1.0)
    names = sorted(params)
    plist = [params[k] for k in names]
    losses: list[float] = []
    epoch_losses: list[float] = []
    with_eval = make_batch([seqs[i] for i in tr_idx[:64]], labels[tr_idx[:64]])
    initial = float(loss_terms(params, with_eval, config)[0].data)
    order_rng, drop_rng = rng.derive(1), rng.derive(2)
    lengths = np.array([len(t) for t in trajs])
    per_epoch = -(-len(tr_idx) // config.batch_size)
    total_steps = max(1, config.epochs * per_epoch)
    for epoch in range(config.epochs):
        ep = []
        for idx in _length_bucketed(tr_idx, lengths, config.batch_size, order_rng):
            frac = min(len(losses) / total_steps, 1.0)
            opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))
            batch = make_batch([seqs[i] for i in idx], labels[idx])
            with Tape() as tape:
                loss, _, _ = loss_terms(params, batch, config, drop_rng)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            grads = tape.gradient(loss, plist)
            opt.step(dict(zip(names, grads)))
            losses.append(val)
            ep.append(val)
        epoch_losses.append(float(np.mean(ep)))
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {epoch_losses[-1]:.4f}")
    return TrainResult(params, losses, epoch_losses, tr_idx, ho_idx, initial)


def teacher_forced_accuracy(params, trajs: Sequence[Trajectory], vocab: Vocab,
                            config: RtConfig, slot: str = "action") -> float:
    """Argmax next-token accuracy for one slot under teacher forcing."""
    col = {"state": 0, "action": 1, "reward": 2, "rtg": 3}[slot]
    hits = total = 0
    for start in range(0, len(trajs), 32):
        seqs = [tokenize(t, vocab, config.direction) for t in trajs[start:start + 32]]
        batch = make_batch(seqs)
        out = forward_pass(params, batch, config)
        pred = out.logits[slot].data.argmax(-1)
        tgt, valid = batch.tokens[..., col], batch.valid
        if slot == "state":
            pred, tgt, valid = pred[:, :-1], tgt[:, 1:], valid[:, 1:]
        hits += int(((pred == tgt) & valid).sum())
        total += int(valid.sum())
    return hits / max(total, 1)


# -- incremental decoding (numpy only) ----------------------------------------------

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


_SLOT_EMB = ("emb.state", "emb.action", "emb.reward", "emb.rtg")
_HEAD_AFTER = ("action", "reward", "rtg", "state")


class Decoder:
    """Key/value-cached evaluation of a growing token stream.

    Tokens are appended in stream order; after each append the hidden state of
    the newest position is available for the head that reads from it.
    """

    def __init__(self, params, config: RtConfig):
        self.p = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
        self.config = config
        d, h = config.model_dim, config.heads
        n = 4 * config.context_steps
        self.k = np.zeros((config.layers, h, n, d // h))
        self.v = np.zeros((config.layers, h, n, d // h))
        self.n = 0
        self.last_hidden: np.ndarray | None = None
        self.last_attention: np.ndarray | None = None   # (heads, n) for newest position
        self.state_rows: dict[int, np.ndarray] = {}      # step -> attention row at its state token

    @property
    def steps(self) -> int:
        return self.n // 4

    def _embed(self, tokens: np.ndarray, slot: int, pos: int) -> np.ndarray:
        p = self.p
        return p[_SLOT_EMB[slot]][tokens] + p["emb.pos"][pos] + p["emb.slot"][slot]

    def _run(self, x: np.ndarray, commit: bool):
        """Evaluate ``x`` (C, d) as C alternatives for the next position."""
        cfg, p = self.config, self.p
        c, d = x.shape
        hds = cfg.heads
        dh = d // hds
        n = self.n
        att_last = None
        for i in range(cfg.layers):
            pre = f"block{i}."
            h = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = (h @ p[pre + "attn.qkv.w"] + p[pre + "attn.qkv.b"]).reshape(c, 3, hds, dh)
            q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]          # (C, H, dh)
            kc, vc = self.k[i, :, :n], self.v[i, :, :n]        # (H, n, dh)
            s_cache = np.einsum("chd,hnd->chn", q, kc)
            s_self = (q * k).sum(-1)[..., None]
            scores = np.concatenate([s_cache, s_self], axis=-1) / math.sqrt(dh)
            att = softmax_np(scores, axis=-1)                   # (C, H, n+1)
            o = np.einsum("chn,hnd->chd", att[..., :n], vc) + att[..., n:] * v
            o = o.reshape(c, d) @ p[pre + "attn.out.w"] + p[pre + "attn.out.b"]
            x = x + o
            h = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = _gelu(h @ p[pre + "mlp.fc.w"] + p[pre + "mlp.fc.b"])
            x = x + h @ p[pre + "mlp.proj.w"] + p[pre + "mlp.proj.b"]
            if commit:
                self.k[i, :, n] = k[0]
                self.v[i, :, n] = v[0]
            att_last = att
        x = _ln(x, p["ln_f.g"], p["ln_f.b"])
        return x, att_last

    def append(self, token: int) -> np.ndarray:
        """Append one token; returns the final hidden state at its position."""
        if self.n >= self.k.shape[2]:
            raise ContextError("context exhausted")
        slot = self.n % 4
        x = self._embed(np.array([token]), slot, self.n // 4)
        hid, att = self._run(x, commit=True)
        self.last_hidden = hid[0]
        self.last_attention = att[0]
        if slot == 0:
            self.state_rows[self.n // 4] = att[0].mean(0)
        self.n += 1
        return hid[0]

    def extend(self, tokens) -> None:
        for tok in tokens:
            self.append(int(tok))

    def peek(self, candidates: np.ndarray) -> np.ndarray:
        """Hidden states for each candidate token at the next position, uncommitted."""
        slot = self.n % 4
        x = self._embed(np.asarray(candidates), slot, self.n // 4)
        return self._run(x, commit=False)[0]

    def head_logits(self, hidden: np.ndarray, slot: str) -> np.ndarray:
        return hidden @ self.p[f"head.{slot}.w"] + self.p[f"head.{slot}.b"]

    def next_logits(self) -> tuple[str, np.ndarray]:
        """Slot name and logits of the token that follows the stream."""
        slot = _HEAD_AFTER[(self.n - 1) % 4]
        return slot, self.head_logits(self.last_hidden, slot)

    def step_attention(self, step: int) -> np.ndarray:
        """e_i over steps i <= ``step`` from that step's state-token query."""
        row = self.state_rows[step]
        full = np.zeros(4 * (step + 1))
        full[: len(row)] = row
        return full.reshape(step + 1, 4).sum(-1)


# -- guided sampling ------------------------------------------------------------------

@dataclass
class SampleStats:
    guidance_fallbacks: int = 0


def _sample(logits: np.ndarray, temperature: float, rng: Rng) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = softmax_np(z)
    return rng.choice(len(p), p)


def guided_rtg_distribution(rtg_logits: np.ndarray, high_logits: np.ndarray,
                            strength: float) -> np.ndarray | None:
    """Normalised P(R | prefix) * P(H=1 | prefix, R)^strength over every bin.

    Returns None when the product underflows to zero everywhere.
    """
    if strength == 0.0:
        return softmax_np(rtg_logits)
    logp = rtg_logits - np.logaddexp.reduce(rtg_logits)
    g = logp + strength * _log_sigmoid(high_logits)
    if not np.isfinite(g).any():
        return None
    g = np.where(np.isfinite(g), g, -np.inf)
    w = np.exp(g - g.max())
    s = w.sum()
    if not np.isfinite(s) or s <= 0.0:
        return None
    return w / s


def _sample_step(dec: Decoder, config: RtConfig, rng: Rng, stats: SampleStats):
    """Draw (s, a, r, R) for the next step in Eq.-1 slot order; R is guided."""
    temp = config.temperature
    slot, logits = dec.next_logits()
    assert slot == "state"
    s = _sample(logits, temp, rng)
    dec.append(s)
    e_row = dec.step_attention(dec.n // 4)
    a = _sample(dec.next_logits()[1], temp, rng)
    dec.append(a)
    r = _sample(dec.next_logits()[1], temp, rng)
    dec.append(r)
    rtg_logits = dec.next_logits()[1]
    n_bins = len(rtg_logits)
    cand_hidden = dec.peek(np.arange(n_bins))
    high = dec.head_logits(cand_hidden, "high")[:, 0]
    base = rtg_logits / temp if temp > 0 else rtg_logits
    probs = guided_rtg_distribution(base, high, config.guidance_strength)
    if probs is None:
        stats.guidance_fallbacks += 1
        probs = softmax_np(base)
    if temp <= 0.0:
        g = int(np.argmax(probs))
    else:
        g = rng.choice(n_bins, probs)
    dec.append(g)
    return np.array([s, a, r, g]), e_row


def guided_sample_step(params, prefix: TokenSequence, rng: Rng, config: RtConfig,
                       stats: SampleStats | None = None):
    """Next step's four tokens and the attention row e_i from its state token."""
    if prefix.step_count < 1:
        raise ValueError("prefix must hold at least one step")
    if prefix.step_count >= config.context_steps:
        raise ContextError("prefix fills the context")
    dec = Decoder(params, config)
    dec.extend(prefix.tokens)
    return _sample_step(dec, config, rng, stats or SampleStats())


# -- rollouts -------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratedStep:
    """One generated step and the single transition it introduces."""
    s: int
    a: int
    r: float
    rtg: float
    link: tuple[int, int, int]   # (s, a, s') made known by this step
    terminal: bool = False


Gate = Callable[[np.ndarray, GeneratedStep], bool]


@dataclass
class Generation:
    prefix: Trajectory | None            # generated steps in forward time order
    steps: list[GeneratedStep]           # in generation order
    trace: object | None                 # the gate's ReliabilityTrace, if any
    stop: str    # "gate" | "max_steps" | "context" | "terminal" | "initial"
    fallbacks: int = 0


def _gen_trajectory(steps: list[GeneratedStep], splice_index: int, done: bool) -> Trajectory:
    return Trajectory(tuple(s.s for s in steps), tuple(s.a for s in steps),
                      tuple(s.r for s in steps), tuple(s.rtg for s in steps),
                      done, GENERATED, splice_index)


def generate_backward(params, suffix: Trajectory, max_steps: int | None, rng: Rng,
                      gate: Gate | None, config: RtConfig, vocab: Vocab,
                      stop_at_initial: bool = True) -> Generation:
    """Generate the steps that precede ``suffix``, newest-first, until stopped.

    After each step the gate sees the attention row restricted to generated
    steps and the step's transition into its successor; a True return
    truncates at that step (the step is still reported, flagged in the trace).
    Unless ``stop_at_initial`` is off, generation also ends on a state that
    opens trajectories in the data (``vocab.initial_states``), since nothing
    precedes an episode start.
    """
    if len(suffix) < 1:
        raise ValueError("suffix must be non-empty")
    seq = tokenize(suffix, vocab, "backward")
    room = config.context_steps - len(suffix)
    limit = room if max_steps is None else min(max_steps, room)
    dec = Decoder(params, config)
    dec.extend(seq.tokens)
    stats = SampleStats()
    steps: list[GeneratedStep] = []
    successor = suffix.states[0]
    m = len(suffix)
    stop = "context" if max_steps is None or max_steps >= room else "max_steps"
    initial = set(vocab.initial_states) if stop_at_initial else set()
    for j in range(max(limit, 0)):
        toks, e_row = _sample_step(dec, config, rng, stats)
        s, a = int(toks[0]), int(toks[1])
        st = GeneratedStep(s, a, vocab.decode_reward(int(toks[2])), vocab.decode_rtg(int(toks[3])),
                           (s, a, successor))
        steps.append(st)
        successor = s
        if gate is not None and gate(e_row[m:m + j + 1], st):
            stop = "gate"
            break
        if s in initial:
            stop = "initial"
            break
    ordered = steps[::-1]
    prefix = _gen_trajectory(ordered, len(ordered), suffix.done) if ordered else None
    return Generation(prefix, steps, getattr(gate, "trace", None), stop, stats.guidance_fallbacks)


def generate_forward(params, prefix: Trajectory, max_steps: int | None, rng: Rng,
                     gate: Gate | None, config: RtConfig, vocab: Vocab) -> Generation:
    """Continue ``prefix`` forward in time (the FT ablation).

    Generation ends early on a reward that only ever appears on terminal
    steps of the data; that step is marked terminal.
    """
    if len(prefix) < 1:
        raise ValueError("prefix must be non-empty")
    seq = tokenize(prefix, vocab, "forward")
    room = config.context_steps - len(prefix)
    limit = room if max_steps is None else min(max_steps, room)
    dec = Decoder(params, config)
    dec.extend(seq.tokens)
    stats = SampleStats()
    steps: list[GeneratedStep] = []
    prev_s, prev_a = prefix.states[-1], prefix.actions[-1]
    m = len(prefix)
    stop = "context" if max_steps is None or max_steps >= room else "max_steps"
    terminal_rewards = set(vocab.terminal_rewards)
    for j in range(max(limit, 0)):
        toks, e_row = _sample_step(dec, config, rng, stats)
        s, a = int(toks[0]), int(toks[1])
        r = vocab.decode_reward(int(toks[2]))
        term = r in terminal_rewards
        st = GeneratedStep(s, a, r, vocab.decode_rtg(int(toks[3])), (prev_s, prev_a, s), term)
        steps.append(st)
        prev_s, prev_a = s, a
        if gate is not None and gate(e_row[m:m + j + 1], st):
            stop = "gate"
            break
        if term:
            stop = "terminal"
            break
    done = bool(steps and steps[-1].terminal)
    gen = _gen_trajectory(steps, 0, done) if steps else None
    return Generation(gen, steps, getattr(gate, "trace", None), stop, stats.guidance_fallbacks)


# -- persistence ----------------------------------------------------------------------

def save_model(path, params, config: RtConfig, vocab: Vocab) -> str:
    cfg = {"rt": config.to_dict(), "vocab": vocab.to_json()}
    return checkpoint.save(path, params, "rtmodel", cfg)


def load_model(path) -> tuple[dict[str, Tensor], RtConfig, Vocab]:
    arrs, header = checkpoint.load(path, "rtmodel")
    config = RtConfig(**header["config"]["rt"])
    vocab = Vocab.from_json(header["config"]["vocab"])
    expected = param_shapes(vocab, config)
    checkpoint.loads(checkpoint.dumps(arrs, "rtmodel"), "rtmodel", expected)
    return checkpoint.to_tensors(arrs), config, vocab


def with_direction(config: RtConfig, direction: str) -> RtConfig:
    return replace(config, direction=direction)
