"""Desk-scale networks: feature extractor, region splitter, GRU attention
policy, attention embedding, classifier heads and domain discriminator."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Dataclass mixin: every Tensor field (or list of Tensors) is a parameter."""

    def parameters(self) -> list[Tensor]:
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, Tensor):
                out.append(val)
            elif isinstance(val, list):
                out.extend(v for v in val if isinstance(v, Tensor))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values, strict=True):
            p.values[...] = v


# ---------------------------------------------------------------- feature extractor


@dataclass
class FeatureNet(Module):
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, d_in: int, d_out: int, hidden=(64, 64), rng=None) -> "FeatureNet":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [d_in, *hidden, d_out]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            ws.append(_uniform(rng, a, (a, b)))
            bs.append(_uniform(rng, a, (b,)))
        return cls(ws, bs)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]


def extract_features(net: FeatureNet, x) -> Tensor:
    """tanh on every hidden layer, linear output layer."""
    x = ad.as_tensor(x)
    if x.values.ndim != 2 or x.shape[1] != net.d_in:
        raise ShapeError(f"extract_features: input {x.shape} does not match D_in={net.d_in}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.linear(h, w, b)
        if i < last:
            h = ad.tanh(h)
    return h


# ---------------------------------------------------------------- regions


@dataclass
class RegionSet:
    regions: Tensor  # (B, T, D_r), head-major then grid
    H: int
    N: int

    @property
    def T(self) -> int:
        return self.H * self.N

    @property
    def d_region(self) -> int:
        return self.regions.shape[2]


def region_split(features: Tensor, H: int, N: int) -> RegionSet:
    """Split channels into H heads of N grid cells each; T = H*N regions."""
    B, d_f = features.shape
    if H < 1 or N < 1 or d_f % H or (d_f // H) % N:
        raise ShapeError(f"region_split: D_f={d_f} is not divisible into H={H} heads of N={N} grids")
    # A contiguous head-major, grid-minor layout is exactly a reshape.
    return RegionSet(ad.reshape(features, (B, H * N, d_f // (H * N))), H, N)


def merge_regions(rs: RegionSet) -> Tensor:
    B = rs.regions.shape[0]
    return ad.reshape(rs.regions, (B, rs.T * rs.d_region))


# ---------------------------------------------------------------- attention policy


@dataclass
class AttentionPolicy(Module):
    w_x: Tensor  # (D_r, 3 D_h)
    w_h: Tensor  # (D_h, 3 D_h)
    w_mu: Tensor  # (D_h, n)

    @classmethod
    def init(cls, d_region: int, d_hidden: int, n_actions: int, rng=None) -> "AttentionPolicy":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            _uniform(rng, d_region, (d_region, 3 * d_hidden)),
            _uniform(rng, d_hidden, (d_hidden, 3 * d_hidden)),
            _uniform(rng, d_hidden, (d_hidden, n_actions)),
        )

    @property
    def d_hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def n_actions(self) -> int:
        return self.w_mu.shape[1]

    @property
    def gate_bias(self) -> Tensor:
        # the gate convention has no bias terms; the fused ops take a constant zero
        return Tensor(np.zeros(3 * self.d_hidden))


def gru_step(policy: AttentionPolicy, region, h_prev) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (h, action_probs, action_logprobs).

    Accepts a single region vector or a (B, D_r) batch; outputs follow.
    """
    region, h_prev = ad.as_tensor(region), ad.as_tensor(h_prev)
    single = region.values.ndim == 1
    if single:
        region = ad.reshape(region, (1, -1))
        h_prev = ad.reshape(h_prev, (1, -1))
    h = ad.gru_cell(region, h_prev, policy.w_x, policy.w_h, policy.gate_bias)
    logits = ad.matmul(h, policy.w_mu)
    probs = ad.softmax(logits)
    logp = ad.log_softmax(logits)
    if single:
        return ad.reshape(h, (-1,)), ad.reshape(probs, (-1,)), ad.reshape(logp, (-1,))
    return h, probs, logp


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical draw for each row of a (B, n) probability matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_action(action_probs, rng: np.random.Generator) -> tuple[int, Tensor]:
    """Multinomial draw from one probability vector; logprob stays on the tape."""
    action_probs = ad.as_tensor(action_probs)
    idx = int(_draw(action_probs.values.reshape(1, -1), rng)[0])
    return idx, ad.log(action_probs[idx])


def normalize_attention(actions) -> np.ndarray:
    """Softmax over the sampled integer action levels along the last axis."""
    a = np.asarray(actions, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attend_embed(hidden_states, weights) -> Tensor:
    """Weighted sum over the step axis; weights are constants.

    hidden_states: (T, D_h) or (B, T, D_h); weights: (T,) or (B, T).
    """
    hidden_states = ad.as_tensor(hidden_states)
    w = np.asarray(weights, dtype=np.float64)[..., None]
    return ad.tsum(ad.mul(hidden_states, w), axis=-2)


@dataclass
class AttentionTrajectory:
    actions: np.ndarray  # (B, T) int
    logprobs: Tensor  # (B, T), on the tape
    hidden: Tensor  # (B, T, D_h)
    weights: np.ndarray  # (B, T)
    reward: np.ndarray | None = None

    @property
    def logprob_sum(self) -> Tensor:
        return ad.tsum(self.logprobs, axis=1)


def run_policy(
    policy: AttentionPolicy,
    rs: RegionSet,
    rng: np.random.Generator | None,
    greedy: bool = False,
    actions: np.ndarray | None = None,
) -> AttentionTrajectory:
    """One trajectory per sample over its T regions, batched across samples.

    Sampled actions do not feed back into the recurrence, so the GRU runs
    over the whole sequence first and every step's action is drawn
    afterwards from its own distribution.  ``greedy`` takes the most
    probable action instead of drawing; passing ``actions`` replays a
    fixed (B, T) action sequence.
    """
    B, T, _ = rs.regions.shape
    hidden = ad.gru_sequence(
        rs.regions, Tensor(np.zeros((B, policy.d_hidden))), policy.w_x, policy.w_h, policy.gate_bias
    )
    logits = ad.matmul(ad.reshape(hidden, (B * T, policy.d_hidden)), policy.w_mu)
    logp = ad.log_softmax(logits)
    if actions is not None:
        flat = np.asarray(actions).reshape(B * T)
    elif greedy:
        flat = logp.values.argmax(axis=1)
    else:
        flat = _draw(np.exp(logp.values), rng)
    actions = flat.reshape(B, T)
    return AttentionTrajectory(
        actions=actions,
        logprobs=ad.reshape(logp[np.arange(B * T), flat], (B, T)),
        hidden=hidden,
        weights=normalize_attention(actions),
    )


# ---------------------------------------------------------------- heads


@dataclass
class ClassifierHead(Module):
    w_src: Tensor
    b_src: Tensor
    w_tgt: Tensor
    b_tgt: Tensor
    w_joint: Tensor
    b_joint: Tensor
    w_dis_hidden: Tensor
    b_dis_hidden: Tensor
    w_dis: Tensor
    b_dis: Tensor

    @classmethod
    def init(cls, d_f: int, n_classes: int, rng=None, d_dis: int = 64) -> "ClassifierHead":
        rng = rng if rng is not None else np.random.default_rng(0)
        K = n_classes
        return cls(
            _uniform(rng, d_f, (d_f, K)),
            _uniform(rng, d_f, (K,)),
            _uniform(rng, d_f, (d_f, K)),
            _uniform(rng, d_f, (K,)),
            _uniform(rng, d_f, (d_f, 2 * K)),
            _uniform(rng, d_f, (2 * K,)),
            _uniform(rng, d_f, (d_f, d_dis)),
            _uniform(rng, d_f, (d_dis,)),
            _uniform(rng, d_dis, (d_dis, 1)),
            _uniform(rng, d_dis, (1,)),
        )

    @property
    def n_classes(self) -> int:
        return self.w_src.shape[1]

    def weights_for(self, which: str) -> tuple[Tensor, Tensor]:
        try:
            return {
                "source": (self.w_src, self.b_src),
                "target": (self.w_tgt, self.b_tgt),
                "joint": (self.w_joint, self.b_joint),
                "discriminator": (self.w_dis, self.b_dis),
            }[which]
        except KeyError:
            raise ValueError(f"unknown head {which!r}") from None


def classify(head: ClassifierHead, V, which: str, frozen: bool = False) -> Tensor:
    """Raw logits of one head.  ``frozen`` uses detached weights so only V gets gradient.

    The classifiers are linear; the discriminator has one ReLU hidden layer.
    """
    w, b = head.weights_for(which)
    if frozen:
        w, b = ad.detach(w), ad.detach(b)
    if which == "discriminator":
        V = ad.relu(ad.linear(V, head.w_dis_hidden, head.b_dis_hidden))
    return ad.linear(V, w, b)
