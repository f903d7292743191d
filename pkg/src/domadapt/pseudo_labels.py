"""Source prototypes, target pseudo-labels, cosine certainty and the
Gumbel-Softmax trainable Top-k selector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PrototypeBank:
    """One running-average source feature per class.

    Features are stored detached; the bank is never part of the tape.
    """

    n_classes: int
    dim: int
    beta_run: float = 0.5
    protos: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.beta_run <= 1.0:
            raise ValueError(f"beta_run must lie in [0, 1], got {self.beta_run}")
        self.reset()

    def reset(self) -> None:
        self.protos = np.zeros((self.n_classes, self.dim))
        self.counts = np.zeros(self.n_classes, dtype=np.int64)

    def update(self, features, labels) -> None:
        feats = features.values if isinstance(features, Tensor) else np.asarray(features, float)
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"label out of range [0, {self.n_classes}): {labels.tolist()}")
        b = self.beta_run
        # sequential in batch order, so the result depends on sample order
        for f, c in zip(feats, labels):
            self.protos[c] = b * self.protos[c] + (1.0 - b) * f
            self.counts[c] += 1


def prototype_update(bank: PrototypeBank, features, labels) -> None:
    bank.update(features, labels)


def prototype_reset(bank: PrototypeBank) -> None:
    bank.reset()


def pseudo_label(target_logits) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the first (lowest) index on ties."""
    logits = target_logits.values if isinstance(target_logits, Tensor) else np.asarray(target_logits)
    return np.argmax(logits, axis=1)


def certainty_scores(bank: PrototypeBank, target_features, pseudo_labels) -> Tensor:
    """Cosine similarity of each target feature to its pseudo-class prototype, clamped to [0, 1]."""
    target_features = ad.as_tensor(target_features)
    protos = Tensor(bank.protos[np.asarray(pseudo_labels)])
    return ad.clip(ad.cosine_similarity(protos, target_features), 0.0, 1.0)


def _gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator) -> tuple[Tensor, int]:
    """Reparameterised relaxed categorical sample.

    ``soft`` = softmax((logits + g) / tau) stays on the tape; ``hard_index``
    is its argmax and carries no gradient.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = ad.as_tensor(logits)
    g = _gumbel_noise(logits.shape, rng)
    soft = ad.softmax(ad.mul(ad.add(logits, g), 1.0 / tau))
    return soft, int(np.argmax(soft.values))


@dataclass
class SelectionResult:
    pseudo_labels: np.ndarray
    similarities: np.ndarray
    sort_order: np.ndarray
    k: int
    mask: np.ndarray  # original order
    certainty: Tensor
    uncertainty: Tensor
    soft: Tensor | None = None

    @property
    def selected(self) -> np.ndarray:
        return self.mask.astype(bool)

    @property
    def mean_selected_certainty(self) -> float:
        sel = self.selected
        return float(self.certainty.values[sel].mean()) if sel.any() else 0.0


def select_topk(
    similarities,
    tau: float,
    rng: np.random.Generator | None,
    forced_k: int | None = None,
    pseudo_labels=None,
) -> SelectionResult:
    """Keep the k most similar samples, with k drawn by Gumbel-Softmax.

    The Gumbel logits are the similarities in descending order, so the
    sampled position p gives k = p + 1.  Reverse-cumsumming a one-hot at p
    yields the prefix mask of k ones; the same transform of the soft sample
    is the straight-through gradient route.  ``forced_k`` skips sampling.
    """
    s = ad.as_tensor(similarities)
    B = s.size
    if B < 1:
        raise ValueError("select_topk needs at least one sample")
    order = np.argsort(-s.values, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(B)

    soft = None
    if forced_k is not None:
        if not 1 <= forced_k <= B:
            raise ValueError(f"forced k={forced_k} outside [1, {B}]")
        k = int(forced_k)
    else:
        soft, p = gumbel_softmax(s[order], tau, rng)
        k = p + 1

    hard_sorted = (np.arange(B) < k).astype(np.float64)
    if soft is None:
        mask_sorted = Tensor(hard_sorted)
    else:
        upper = np.triu(np.ones((B, B)))  # row j sums positions >= j
        soft_prefix = ad.reshape(ad.matmul(Tensor(upper), ad.reshape(soft, (B, 1))), (B,))
        mask_sorted = ad.straight_through(hard_sorted, soft_prefix)
    mask = mask_sorted[inv]
    certainty = ad.mul(mask, ad.detach(s))
    uncertainty = ad.sub(1.0, certainty)
    return SelectionResult(
        pseudo_labels=None if pseudo_labels is None else np.asarray(pseudo_labels),
        similarities=s.values.copy(),
        sort_order=order,
        k=k,
        mask=hard_sorted[inv],
        certainty=certainty,
        uncertainty=uncertainty,
        soft=soft,
    )
