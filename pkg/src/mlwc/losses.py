"""Training objectives: softmax, cosine softmax, weight-centric and their sum."""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import tensor as T
from .heads import LEVELS, cosine_logits


@dataclass(frozen=True)
class LossConfig:
    weight_decay: float = 1e-4  # lambda on ||W||_F^2
    epsilon: float = 1e-3  # plateau threshold on validation L_cs
    patience: int = 3
    centric_weight: float = 1.0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.centric_weight < 0:
            raise ValueError("centric_weight must be >= 0")


class FrozenWeights:
    """Read-only snapshot of each branch's classifier matrix."""

    def __init__(self, weights: Mapping[str, np.ndarray]):
        frozen = {}
        for level, w in weights.items():
            w = np.array(w, dtype=np.float64, copy=True)
            w.setflags(write=False)
            frozen[level] = w
        self._weights = MappingProxyType(frozen)

    def __getitem__(self, level: str) -> np.ndarray:
        return self._weights[level]

    def __iter__(self):
        return iter(self._weights)

    def __len__(self):
        return len(self._weights)

    def items(self):
        return self._weights.items()

    def __eq__(self, other):
        if not isinstance(other, FrozenWeights):
            return NotImplemented
        return set(self) == set(other) and all(np.array_equal(self[k], other[k]) for k in self)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= n_classes)):
        raise ValueError(f"labels must be indices in [0, {n_classes})")
    return labels


def softmax_loss(logits: np.ndarray, labels) -> T.Grad:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = _check_labels(labels, logits.shape[1])
    n = logits.shape[0]
    logp = T.log_softmax(logits, axis=1)
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def pullback(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (float(g) * d / n,)

    return T.Grad(np.array(value), pullback)


def cosine_softmax_loss(features, weight, scale, labels, weight_decay: float = 0.0) -> T.Grad:
    """Softmax loss over scaled cosine logits plus ``weight_decay * ||W||_F^2``.

    Pullback returns gradients for (features, weight, scale).
    """
    if not float(scale) > 0:
        raise ValueError(f"scale must be positive, got {float(scale)}")
    logits = cosine_logits(features, weight, scale)
    ce = softmax_loss(logits.value, labels)
    value = ce.value + weight_decay * np.sum(weight * weight)

    def pullback(g):
        (dlogits,) = ce.pullback(g)
        df, dw, ds = logits.pullback(dlogits)
        return df, dw + 2.0 * weight_decay * float(g) * weight, ds

    return T.Grad(np.array(value), pullback)


def weight_centric_loss(features, frozen_weight, labels) -> T.Grad:
    """Mean squared distance between normalized features and their class's normalized frozen column."""
    labels = _check_labels(labels, frozen_weight.shape[1])
    fn = T.l2_normalize(features, axis=1)
    targets = T.l2_normalize(frozen_weight, axis=0).value[:, labels].T
    diff = fn.value - targets
    n = features.shape[0]
    value = np.sum(diff * diff) / n

    def pullback(g):
        return fn.pullback(2.0 * float(g) * diff / n)

    return T.Grad(np.array(value), pullback)


def combined_cost(features, weights, frozen, labels, config: LossConfig, stage: int) -> T.Grad:
    """Sum over branches of cosine softmax loss, plus the weighted centric term in stage 2.

    ``features`` and ``weights`` map level -> array, ``weights`` also holding
    ``scales`` under the key ``(level, "scale")``. Pullback returns a dict
    level -> (d_features, d_weight, d_scale).
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and frozen is None:
        raise ValueError("stage 2 requires frozen classifier weights")
    levels = [lv for lv in LEVELS if lv in features]
    parts = {}
    value = 0.0
    for lv in levels:
        cs = cosine_softmax_loss(features[lv], weights[lv], weights[(lv, "scale")], labels, config.weight_decay)
        cen = None
        value += float(cs.value)
        if stage == 2 and config.centric_weight > 0:
            cen = weight_centric_loss(features[lv], frozen[lv], labels)
            value += config.centric_weight * float(cen.value)
        parts[lv] = (cs, cen)

    def pullback(g):
        out = {}
        for lv, (cs, cen) in parts.items():
            df, dw, ds = cs.pullback(g)
            if cen is not None:
                (dc,) = cen.pullback(config.centric_weight * float(g))
                df = df + dc
            out[lv] = (df, dw, ds)
        return out

    return T.Grad(np.array(value), pullback)
