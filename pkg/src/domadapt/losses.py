"""Training objectives: adaptive cross-domain triplet, REINFORCE with an AP
reward, adversarial domain alignment, the simplified three-classifier
baseline losses, and the weighted combination of all of them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import cross_domain_ap_batch
from .nets import AttentionTrajectory, ClassifierHead, classify

TRIPLET_WEIGHTS = ("uncertainty", "certainty", "unit")


def l2_normalize(x: Tensor) -> Tensor:
    return ad.div(x, ad.sqrt(ad.tsum(ad.mul(x, x), axis=1, keepdims=True)))


# ---------------------------------------------------------------- triplet


@dataclass
class TripletBatch:
    source: Tensor  # (B, D)
    source_labels: np.ndarray
    target: Tensor  # (B, D)
    pseudo_labels: np.ndarray
    uncertainty: Tensor  # (B,), U = 1 - C
    mask: np.ndarray  # (B,) selection of target sample i / pair i
    beta_m: float = 0.5
    weight: str = "uncertainty"
    normalize: bool = True


def triplet_direction(
    dist: Tensor,
    anchor_labels: np.ndarray,
    other_labels: np.ndarray,
    margin: Tensor,
    weight: Tensor,
    mask: np.ndarray,
) -> Tensor:
    """Sum over selected anchors of weight * [d_pos - d_neg + margin]_+.

    ``dist`` is (anchors, others); batch-hard mining picks the farthest
    same-label and nearest different-label other for each anchor.  Anchors
    lacking either are skipped.
    """
    d = dist.values
    same = anchor_labels[:, None] == other_labels[None, :]
    rows = np.flatnonzero(np.asarray(mask, bool) & same.any(axis=1) & (~same).any(axis=1))
    if rows.size == 0:
        return Tensor(0.0)
    pos = np.where(same[rows], d[rows], -np.inf).argmax(axis=1)
    neg = np.where(~same[rows], d[rows], np.inf).argmin(axis=1)
    hinge = ad.relu(dist[rows, pos] - dist[rows, neg] + margin[rows])
    return ad.tsum(ad.mul(weight[rows], hinge))


def adaptive_triplet_loss(batch: TripletBatch) -> Tensor:
    """Symmetric source->target and target->source terms, averaged over B.

    Margin per anchor is beta_m + U_i.  Only anchors whose pair is selected
    contribute; ``weight`` picks the per-anchor factor (U_i, C_i or 1).
    """
    if batch.weight not in TRIPLET_WEIGHTS:
        raise ValueError(f"triplet weight must be one of {TRIPLET_WEIGHTS}, got {batch.weight!r}")
    vs, vt = batch.source, batch.target
    if batch.normalize:
        vs, vt = l2_normalize(vs), l2_normalize(vt)
    B = vs.shape[0]
    U = batch.uncertainty
    margin = ad.add(U, batch.beta_m)
    if batch.weight == "uncertainty":
        w = U
    elif batch.weight == "certainty":
        w = ad.sub(1.0, U)
    else:
        w = Tensor(np.ones(B))
    ys, yt = np.asarray(batch.source_labels), np.asarray(batch.pseudo_labels)
    dist = ad.sq_dist(vs, vt)
    st = triplet_direction(dist, ys, yt, margin, w, batch.mask)
    ts = triplet_direction(ad.transpose(dist), yt, ys, margin, w, batch.mask)
    return ad.mul(ad.add(st, ts), 1.0 / B)


# ---------------------------------------------------------------- reinforced attention


@dataclass
class RewardRecord:
    reward: np.ndarray  # R_i in [0, 2]
    certainty: np.ndarray
    ap_st: np.ndarray
    ap_ts: np.ndarray


def reward(V_s, y_s, V_t, y_pseudo, certainty) -> RewardRecord:
    """R_i = C_i * (AP(source_i vs target batch) + AP(target_i vs source batch))."""
    vs = V_s.values if isinstance(V_s, Tensor) else np.asarray(V_s, float)
    vt = V_t.values if isinstance(V_t, Tensor) else np.asarray(V_t, float)
    c = certainty.values if isinstance(certainty, Tensor) else np.asarray(certainty, float)
    ap_st = cross_domain_ap_batch(vs, y_s, vt, y_pseudo)
    ap_ts = cross_domain_ap_batch(vt, y_pseudo, vs, y_s)
    return RewardRecord(c * (ap_st + ap_ts), c.copy(), ap_st, ap_ts)


def pg_loss(trajectories: Sequence[AttentionTrajectory], rewards) -> Tensor:
    """-sum_i (sum of logprobs of sample i over all its trajectories) * R_i."""
    R = rewards.reward if isinstance(rewards, RewardRecord) else np.asarray(rewards, float)
    total = None
    for traj in trajectories:
        term = ad.tsum(ad.mul(traj.logprob_sum, R))
        total = term if total is None else ad.add(total, term)
    return ad.neg(total)


# ---------------------------------------------------------------- adversarial


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    y = np.asarray(targets, dtype=float).reshape(logits.shape)
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, y)))


def adversarial_loss(head: ClassifierHead, V: Tensor, domain_labels, lam: float = 1.0) -> Tensor:
    """BCE of the discriminator on reversed-gradient features (source 0, target 1)."""
    logits = classify(head, ad.grad_reverse(V, lam), "discriminator")
    return bce_with_logits(logits, domain_labels)


# ---------------------------------------------------------------- baseline losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    logp = ad.log_softmax(logits)
    return ad.neg(ad.mean(logp[np.arange(labels.size), labels]))


def _block_logmass(logp: Tensor, start: int, stop: int) -> Tensor:
    """log of the probability mass in columns [start, stop)."""
    return ad.log(ad.tsum(ad.exp(logp[:, start:stop]), axis=1))


@dataclass
class SymNetsParts:
    source_ce: Tensor
    target_ce: Tensor
    joint_ce: Tensor
    confusion: Tensor

    @property
    def total(self) -> Tensor:
        return ad.add(ad.add(self.source_ce, self.target_ce), ad.add(self.joint_ce, self.confusion))


def symnets_losses(head: ClassifierHead, V_s: Tensor, y_s, V_t: Tensor) -> SymNetsParts:
    """Source/target heads trained on labelled source; joint 2K-way head trained
    as a domain-category discriminator; target features trained to confuse it.

    The joint head sees detached features for its own loss, and the
    confusion term sees frozen joint weights, so the two pull on disjoint
    parameters instead of cancelling.
    """
    K = head.n_classes
    y_s = np.asarray(y_s)
    source_ce = cross_entropy(classify(head, V_s, "source"), y_s)
    target_ce = cross_entropy(classify(head, V_s, "target"), y_s)

    lp_s = ad.log_softmax(classify(head, ad.detach(V_s), "joint"))
    lp_t = ad.log_softmax(classify(head, ad.detach(V_t), "joint"))
    joint_src = ad.neg(ad.mean(lp_s[np.arange(y_s.size), y_s]))
    joint_tgt = ad.neg(ad.mean(_block_logmass(lp_t, K, 2 * K)))
    joint_ce = ad.add(joint_src, joint_tgt)

    lp_c = ad.log_softmax(classify(head, V_t, "joint", frozen=True))
    confusion = ad.neg(
        ad.mean(ad.mul(ad.add(_block_logmass(lp_c, 0, K), _block_logmass(lp_c, K, 2 * K)), 0.5))
    )
    return SymNetsParts(source_ce, target_ce, joint_ce, confusion)


# ---------------------------------------------------------------- combination


def total_loss(sym, pg=None, triplet=None, adv=None, alpha: float = 10.0) -> Tensor:
    """sym + alpha * (pg + triplet + adv); missing parts count as zero."""
    sym = sym.total if isinstance(sym, SymNetsParts) else ad.as_tensor(sym)
    extra = [ad.as_tensor(p) for p in (pg, triplet, adv) if p is not None]
    if not extra or alpha == 0:
        return sym
    acc = extra[0]
    for p in extra[1:]:
        acc = ad.add(acc, p)
    return ad.add(sym, ad.mul(acc, alpha))
