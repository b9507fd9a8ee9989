"""Transition VAE, reliability threshold, cumulative reliability, and relabeling.

The VAE scores a transition (s, a, s') by how badly it reconstructs the
one-hot blocks from the posterior mean. That score stands in for a distance
between true and learned dynamics. Along a generated trajectory the scores
are pooled with attention-derived weights into a cumulative reliability, and
generation is cut at the first step where it exceeds the threshold.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .numkit import Adam, Rng, Tape, Tensor, ops
from .numkit.ops import softmax_np
from .trajdata import GENERATED, Trajectory, compute_rtg

GAMMA_MODES = ("weighted", "sum")


class VaeTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    n_states: int
    n_actions: int = 4
    hidden: int = 64
    latent: int = 8
    steps: int = 12000
    batch_size: int = 64
    lr: float = 1e-3
    dedupe: bool = True     # fit the distinct transitions with equal weight
    window: int = 500       # optimizer steps per reported loss window

    @property
    def blocks(self) -> tuple[int, int, int]:
        return self.n_states, self.n_actions, self.n_states

    @property
    def input_dim(self) -> int:
        return sum(self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VaeParams:
    config: VaeConfig
    weights: dict[str, Tensor]


def vae_shapes(cfg: VaeConfig) -> dict[str, tuple[int, ...]]:
    d, h, z = cfg.input_dim, cfg.hidden, cfg.latent
    return {
        "enc.l1.w": (d, h), "enc.l1.b": (h,), "enc.l2.w": (h, h), "enc.l2.b": (h,),
        "enc.mu.w": (h, z), "enc.mu.b": (z,), "enc.logvar.w": (h, z), "enc.logvar.b": (z,),
        "dec.l1.w": (z, h), "dec.l1.b": (h,), "dec.l2.w": (h, h), "dec.l2.b": (h,),
        "dec.out.w": (h, d), "dec.out.b": (d,),
    }


def init_vae(cfg: VaeConfig, rng: Rng) -> VaeParams:
    w = {}
    for name, shape in sorted(vae_shapes(cfg).items()):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(shape, scale=1.0 / math.sqrt(shape[0]))
            if name == "enc.logvar.w":
                data *= 0.1
        w[name] = Tensor(data, requires_grad=True, name=name)
    return VaeParams(cfg, w)


def encode_inputs(cfg: VaeConfig, trans: np.ndarray) -> np.ndarray:
    """(N, 3) int array of (s, a, s') -> concatenated one-hots."""
    trans = np.asarray(trans, dtype=np.int64).reshape(-1, 3)
    ns, na, _ = cfg.blocks
    if trans.size and ((trans[:, [0, 2]] < 0).any() or (trans[:, [0, 2]] >= ns).any()
                       or (trans[:, 1] < 0).any() or (trans[:, 1] >= na).any()):
        raise ValueError("transition outside the state/action vocabulary")
    x = np.zeros((len(trans), cfg.input_dim))
    rows = np.arange(len(trans))
    x[rows, trans[:, 0]] = 1.0
    x[rows, ns + trans[:, 1]] = 1.0
    x[rows, ns + na + trans[:, 2]] = 1.0
    return x


def _encode(w, x):
    h = ops.relu(x @ w["enc.l1.w"] + w["enc.l1.b"])
    h = ops.relu(h @ w["enc.l2.w"] + w["enc.l2.b"])
    return h @ w["enc.mu.w"] + w["enc.mu.b"], h @ w["enc.logvar.w"] + w["enc.logvar.b"]


def _decode(w, z):
    h = ops.relu(z @ w["dec.l1.w"] + w["dec.l1.b"])
    h = ops.relu(h @ w["dec.l2.w"] + w["dec.l2.b"])
    return h @ w["dec.out.w"] + w["dec.out.b"]


def _block_nll(cfg: VaeConfig, logits: Tensor, trans: np.ndarray) -> Tensor:
    """Mean over rows of the summed per-block cross-entropies."""
    total = None
    off = 0
    for col, size in enumerate(cfg.blocks):
        ce = ops.cross_entropy(logits[:, off:off + size], trans[:, col])
        total = ce if total is None else total + ce
        off += size
    return total


def vae_loss(params: VaeParams, trans: np.ndarray, eps: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Negative ELBO per datum with a reparameterised sample ``mu + exp(lv/2)*eps``.

    Returns (total, reconstruction, kl), each averaged over the batch.
    """
    cfg, w = params.config, params.weights
    trans = np.asarray(trans, dtype=np.int64).reshape(-1, 3)
    x = Tensor(encode_inputs(cfg, trans))
    mu, logvar = _encode(w, x)
    z = mu + ops.exp(logvar * 0.5) * eps
    recon = _block_nll(cfg, _decode(w, z), trans)
    kl = ops.kl_diag_gaussian(mu, logvar) * (1.0 / len(trans))
    return recon + kl, recon, kl


@dataclass
class VaeTrainResult:
    params: VaeParams
    losses: list[float]          # one per optimizer step
    window_losses: list[float]   # mean over consecutive windows of ``cfg.window`` steps
    initial_loss: float


def train_vae(transitions: Sequence[tuple[int, int, int]], cfg: VaeConfig, rng: Rng,
              log=None) -> VaeTrainResult:
    """Minimise the negative ELBO with one reparameterised sample per datum.

    With ``cfg.dedupe`` each distinct transition is one datum, so rare but
    valid transitions are fit as tightly as common ones.
    """
    trans = np.asarray(transitions, dtype=np.int64).reshape(-1, 3)
    if len(trans) < 100:
        raise ValueError(f"train_vae needs at least 100 transitions, got {len(trans)}")
    if cfg.dedupe:
        trans = np.unique(trans, axis=0)
    params = init_vae(cfg, rng.derive(0))
    names = sorted(params.weights)
    plist = [params.weights[k] for k in names]
    opt = Adam(params.weights, lr=cfg.lr, clip_norm=1.0)
    order_rng, noise_rng = rng.derive(1), rng.derive(2)
    probe = trans[:512]
    initial = float(vae_loss(params, probe, np.zeros((len(probe), cfg.latent)))[0].data)
    losses: list[float] = []
    windows: list[float] = []
    perm, pos = order_rng.permutation(len(trans)), 0
    for it in range(cfg.steps):
        if pos >= len(perm):
            perm, pos = order_rng.permutation(len(trans)), 0
        b = trans[perm[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size
        eps = noise_rng.normal((len(b), cfg.latent))
        with Tape() as tape:
            loss, _, _ = vae_loss(params, b, eps)
        val = float(loss.data)
        if not math.isfinite(val):
            raise VaeTrainingError(f"VAE loss diverged at step {it}")
        grads = tape.gradient(loss, plist)
        opt.step(dict(zip(names, grads)))
        losses.append(val)
        if (it + 1) % cfg.window == 0 or it + 1 == cfg.steps:
            start = len(windows) * cfg.window
            windows.append(float(np.mean(losses[start:])))
            if log:
                log(f"vae step {it + 1}/{cfg.steps} loss {windows[-1]:.4f}")
    return VaeTrainResult(params, losses, windows, initial)


def recon_errors(params: VaeParams, trans) -> np.ndarray:
    """Posterior-mean reconstruction NLL of each (s, a, s') row; KL excluded."""
    cfg, w = params.config, {k: v.data for k, v in params.weights.items()}
    trans = np.asarray(trans, dtype=np.int64).reshape(-1, 3)
    x = encode_inputs(cfg, trans)
    h = np.maximum(x @ w["enc.l1.w"] + w["enc.l1.b"], 0.0)
    h = np.maximum(h @ w["enc.l2.w"] + w["enc.l2.b"], 0.0)
    mu = h @ w["enc.mu.w"] + w["enc.mu.b"]
    h = np.maximum(mu @ w["dec.l1.w"] + w["dec.l1.b"], 0.0)
    h = np.maximum(h @ w["dec.l2.w"] + w["dec.l2.b"], 0.0)
    logits = h @ w["dec.out.w"] + w["dec.out.b"]
    out = np.zeros(len(trans))
    off = 0
    rows = np.arange(len(trans))
    for col, size in enumerate(cfg.blocks):
        z = logits[:, off:off + size]
        m = z.max(axis=1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
        out += lse - z[rows, trans[:, col]]
        off += size
    return np.maximum(out, 0.0)


def recon_error(params: VaeParams, s: int, a: int, s_next: int) -> float:
    return float(recon_errors(params, [(s, a, s_next)])[0])


def save_vae(path, params: VaeParams) -> str:
    return checkpoint.save(path, params.weights, "vae", params.config.to_dict())


def load_vae(path) -> VaeParams:
    arrs, header = checkpoint.load(path, kind="vae")
    cfg = VaeConfig(**header["config"])
    want = vae_shapes(cfg)
    got = {k: tuple(v.shape) for k, v in arrs.items()}
    if got != want:
        raise checkpoint.CheckpointError("VAE checkpoint does not match its config")
    return VaeParams(cfg, checkpoint.to_tensors(arrs))


# -- threshold ---------------------------------------------------------------------

@dataclass(frozen=True)
class Threshold:
    alpha: float
    percentile: float = 100.0
    dataset_digest: str = ""

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def dumps(self) -> str:
        return (f"alpha={self.alpha!r}\npercentile={self.percentile!r}\n"
                f"dataset_digest={self.dataset_digest}\n")

    @classmethod
    def loads(cls, text: str) -> "Threshold":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["alpha"]), float(kv["percentile"]), kv.get("dataset_digest", ""))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Threshold":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def transitions_digest(trans) -> str:
    arr = np.ascontiguousarray(np.asarray(trans, dtype="<i8").reshape(-1, 3))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def calibrate_alpha(params: VaeParams, transitions, percentile: float = 100.0) -> Threshold:
    trans = np.asarray(transitions, dtype=np.int64).reshape(-1, 3)
    if not len(trans):
        raise ValueError("calibration needs at least one transition")
    scores = recon_errors(params, trans)
    alpha = float(np.percentile(scores, percentile))
    # a perfectly memorised dataset scores 0; keep the threshold strictly positive
    alpha = max(alpha, np.finfo(float).tiny)
    return Threshold(alpha, float(percentile), transitions_digest(trans))


# -- cumulative reliability ----------------------------------------------------------

@dataclass
class ReliabilityTrace:
    alpha: float
    mode: str = "weighted"
    truncating: bool = True
    e: list[np.ndarray] = field(default_factory=list)        # attention row used at step t
    d: list[float] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    u: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.d)

    @property
    def stop_index(self) -> int | None:
        """First step with U=1, if any."""
        for i, flag in enumerate(self.u):
            if flag:
                return i
        return None

    def digest(self) -> str:
        h = hashlib.sha256()
        for g, u, d in zip(self.gamma, self.u, self.d):
            h.update(f"{g!r},{u},{d!r};".encode())
        return h.hexdigest()[:16]


def gamma_update(trace: ReliabilityTrace, e_new, d_new: float) -> ReliabilityTrace:
    """Append step t with distance ``d_new``; recompute weights, Γ_t and U_t.

    ``e_new`` is either the full attention row e_1..e_t seen from step t, or a
    scalar e_t appended to the previous row.
    """
    if trace.mode not in GAMMA_MODES:
        raise ValueError(f"unknown gamma mode {trace.mode!r}")
    if d_new < 0 or not math.isfinite(d_new):
        raise ValueError(f"distance must be finite and >= 0, got {d_new}")
    if trace.truncating and trace.stop_index is not None:
        raise ValueError("trace already truncated; no later steps allowed")
    t = len(trace.d) + 1
    e_arr = np.atleast_1d(np.asarray(e_new, dtype=np.float64))
    if e_arr.size == 1 and t > 1:
        e_arr = np.append(trace.e[-1], e_arr)
    if e_arr.size != t:
        raise ValueError(f"expected {t} attention values, got {e_arr.size}")
    trace.d.append(float(d_new))
    d = np.asarray(trace.d)
    if trace.mode == "weighted":
        w = softmax_np(e_arr)
        g = float(w @ d)
    else:
        w = np.ones(t)
        g = float(d.sum())
    trace.e.append(e_arr)
    trace.weights.append(w)
    trace.gamma.append(g)
    trace.u.append(0 if g <= trace.alpha else 1)
    return trace


class ReliabilityGate:
    """Gate for :func:`rtmodel.generate_backward` backed by a VAE and threshold.

    With ``truncate=False`` the trace is still recorded but never stops
    generation (fixed-length ablations).
    """

    def __init__(self, vae: VaeParams, alpha: float, mode: str = "weighted",
                 truncate: bool = True):
        self.vae = vae
        self.alpha = alpha
        self.truncate = truncate
        self.trace = ReliabilityTrace(alpha, mode, truncating=truncate)

    def __call__(self, e_row: np.ndarray, step) -> bool:
        d = recon_error(self.vae, *step.link)
        gamma_update(self.trace, e_row, d)
        return self.truncate and bool(self.trace.u[-1])


# -- pessimistic relabeling -------------------------------------------------------------

def pessimistic_relabel(traj: Trajectory, trace: ReliabilityTrace, alpha: float, beta: float,
                        direction: str = "backward", gamma: float = 0.99) -> Trajectory:
    """Penalise generated rewards by ``beta * Γ_t / alpha`` and drop the cut step.

    ``traj`` is a spliced trajectory whose ``splice_index`` marks the boundary
    between generated and original steps: generated steps come first for
    backward generation and last for forward generation. Trace entries are in
    generation order.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if traj.provenance != GENERATED:
        raise ValueError("only generated trajectories are relabeled")
    k = traj.splice_index
    n_gen = k if direction == "backward" else len(traj) - k
    if len(trace) < n_gen:
        raise ValueError(f"trace covers {len(trace)} steps, trajectory has {n_gen} generated")
    keep = n_gen
    if trace.truncating and trace.stop_index is not None and trace.stop_index < n_gen:
        keep = trace.stop_index
    rewards = list(traj.rewards)
    for j in range(keep):
        i = k - 1 - j if direction == "backward" else k + j
        if beta != 0.0:
            rewards[i] = rewards[i] - beta * trace.gamma[j] / alpha
    if direction == "backward":
        lo, hi, new_k = n_gen - keep, len(traj), keep
    else:
        lo, hi, new_k = 0, k + keep, k
    sl = slice(lo, hi)
    rewards = tuple(rewards[sl])
    rtgs = traj.rtgs[sl] if beta == 0.0 and keep == n_gen else tuple(compute_rtg(rewards, gamma))
    done = traj.done if (direction == "backward" or keep == n_gen) else False
    return replace(traj, states=traj.states[sl], actions=traj.actions[sl], rewards=rewards,
                   rtgs=rtgs, splice_index=new_k, done=done)
