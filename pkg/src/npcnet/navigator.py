"""Training-time target navigator: a focal-weighted status classifier plus a
triplet margin loss on discharge status.  Neither is used at inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netcore import autodiff as ad
from .netcore.autodiff import Parameter, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


def inverse_frequency_weights(statuses: Sequence[int], n_classes: int) -> np.ndarray:
    """Inverse class frequency, normalised to mean 1 over observed classes.

    Classes absent from ``statuses`` get weight 1.
    """
    counts = np.bincount(np.asarray(statuses, dtype=np.int64), minlength=n_classes).astype(float)
    w = np.ones(n_classes)
    present = counts > 0
    inv = 1.0 / counts[present]
    w[present] = inv / inv.mean()
    return w


class NavigatorHead:
    def __init__(
        self,
        embed_dim: int,
        n_classes: int,
        class_weights: Sequence[float] | None = None,
        gamma: float = 2.0,
        margin: float = 1.0,
        kappa1: float = 1.0,
        kappa2: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        if margin <= 0:
            raise ValueError(f"margin must be positive, got {margin}")
        if gamma < 0:
            raise ValueError(f"focal modulating factor must be >= 0, got {gamma}")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(embed_dim)
        self.W = Parameter(rng.uniform(-bound, bound, size=(embed_dim, n_classes)), name="navigator.W")
        self.b = Parameter(np.zeros(n_classes), name="navigator.b")
        self.class_weights = np.ones(n_classes) if class_weights is None else np.asarray(class_weights, dtype=float)
        if self.class_weights.shape != (n_classes,) or np.any(self.class_weights <= 0):
            raise ValueError("need one positive class weight per status")
        self.gamma = float(gamma)
        self.margin = float(margin)
        self.kappa1 = float(kappa1)
        self.kappa2 = float(kappa2)

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def predict_status(E: Tensor, head: NavigatorHead) -> Tensor:
    """Row-wise ``softmax(E W + b)``."""
    return ad.softmax(ad.add(ad.matmul(E, head.W), head.b), axis=-1)


def prob_loss(p: Tensor, y: Sequence[int], class_weights: Sequence[float], gamma: float, eps: float = PROB_EPS) -> Tensor:
    """Focal-style loss summed over every class term, averaged over rows.

    For the true class the term uses ``p_i``; for every other class it uses
    ``1 - p_i``.  Probabilities are clipped to ``[eps, 1 - eps]`` first.
    """
    y = np.asarray(y, dtype=np.int64)
    n, c = p.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    pc = ad.clip(p, eps, 1.0 - eps)
    p_t = ad.add(ad.mul(pc, 2.0 * onehot - 1.0), 1.0 - onehot)
    modulating = ad.power(ad.sub(1.0, p_t), gamma)
    terms = ad.mul(ad.mul(modulating, ad.log(p_t)), np.asarray(class_weights, dtype=float))
    return ad.mul(ad.sum(terms), -1.0 / max(n, 1))


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


def sample_triplets(
    statuses: Sequence[int], anchors: Sequence[int], rng: np.random.Generator
) -> tuple[list[Triplet], int]:
    """One triplet per anchor, drawing the positive uniformly from the other
    same-status episodes and the negative uniformly from different-status ones.

    Returns the triplets and the number of anchors skipped because no valid
    positive or negative exists.
    """
    statuses = np.asarray(statuses, dtype=np.int64)
    groups = {s: np.flatnonzero(statuses == s) for s in np.unique(statuses)}
    others = {s: np.flatnonzero(statuses != s) for s in groups}
    triplets, skipped = [], 0
    for a in anchors:
        s = int(statuses[a])
        same = groups[s]
        diff = others[s]
        if len(same) < 2 or len(diff) < 1:
            skipped += 1
            continue
        # uniform over same-status indices other than the anchor
        j = int(rng.integers(len(same) - 1))
        pos_slot = int(np.searchsorted(same, a))
        if j >= pos_slot:
            j += 1
        neg = int(diff[int(rng.integers(len(diff)))])
        triplets.append(Triplet(int(a), int(same[j]), neg))
    if skipped:
        log.warning("skipped %d anchor(s) without a valid positive/negative", skipped)
    return triplets, skipped


def euclidean(a: Tensor, b: Tensor) -> Tensor:
    return ad.sqrt(ad.squared_norm(ad.sub(a, b), axis=-1))


def dist_loss(E_a: Tensor, E_p: Tensor, E_n: Tensor, margin: float) -> Tensor:
    """Mean over triplets of ``max(d(a, p) - d(a, n) + margin, 0)`` with plain Euclidean ``d``."""
    hinge = ad.maximum(ad.add(ad.sub(euclidean(E_a, E_p), euclidean(E_a, E_n)), margin), 0.0)
    return ad.mean(hinge)


def navigator_loss(L_prob, L_dist, kappa1: float, kappa2: float) -> Tensor:
    return ad.add(ad.mul(L_prob, kappa1), ad.mul(L_dist, kappa2))
