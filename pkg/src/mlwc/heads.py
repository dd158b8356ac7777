"""Mid-, high- and relation-level embedding heads and the cosine classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import fan_in_uniform

LEVELS = ("mid", "high", "relation")


@dataclass(frozen=True)
class HeadConfig:
    embed_dim: int = 64
    relation_temperature: float = 4.0
    mid_channels: int = 16
    relation_hidden: int = 64
    relation_input: str = "scaled"  # scaled | unscaled
    init_scale: float = 10.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.mid_channels < 1 or self.relation_hidden < 1:
            raise ValueError("head sizes must be positive")
        if not self.relation_temperature > 0:
            raise ValueError("relation_temperature must be positive")
        if self.relation_input not in ("scaled", "unscaled"):
            raise ValueError("relation_input must be 'scaled' or 'unscaled'")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


SCALE_FLOOR = 1e-3


def init_heads(config: HeadConfig, trunk_channels, tap_channels, n_classes: int, rng: np.random.Generator) -> dict:
    d = config.embed_dim
    p = {"head.high.weight": fan_in_uniform(rng, (d, trunk_channels), trunk_channels)}
    for t, c in enumerate(tap_channels):
        p[f"head.mid.tap{t}.weight"] = fan_in_uniform(rng, (config.mid_channels, c, 1, 1), c)
        p[f"head.mid.tap{t}.bias"] = np.zeros(config.mid_channels)
    width = config.mid_channels * len(tap_channels)
    p["head.mid.weight"] = fan_in_uniform(rng, (d, width), width)
    h = config.relation_hidden
    p["head.relation.fc1.weight"] = fan_in_uniform(rng, (h, n_classes), n_classes)
    p["head.relation.fc1.bias"] = np.zeros(h)
    p["head.relation.fc2.weight"] = fan_in_uniform(rng, (d, h), h)
    p["head.relation.fc2.bias"] = np.zeros(d)
    for level in LEVELS:
        p[f"cls.{level}.weight"] = rng.standard_normal((d, n_classes)) / np.sqrt(d)
        p[f"cls.{level}.scale"] = np.array(config.init_scale)
    return p


def high_head(final_map: np.ndarray, params: dict) -> T.Grad:
    """Global-average pool then a linear map to the embedding space."""
    pooled = T.global_pool(final_map, "avg")
    emb = T.linear(pooled.value, params["head.high.weight"])

    def pullback(g):
        g, dw = emb.pullback(g)
        (dmap,) = pooled.pullback(g)
        return dmap, {"head.high.weight": dw}

    return T.Grad(emb.value, pullback)


def mid_head(taps, params: dict) -> T.Grad:
    """Per tap: 1x1 conv, relu, global-max pool; concatenate; linear map."""
    if not taps:
        raise T.ShapeError("mid_head needs at least one tap")
    stages = []
    for t, tap in enumerate(taps):
        conv = T.conv2d(tap, params[f"head.mid.tap{t}.weight"], padding="valid")
        biased = T.bias_add(conv.value, params[f"head.mid.tap{t}.bias"])
        act = T.relu(biased.value)
        pooled = T.global_pool(act.value, "max")
        stages.append((conv, biased, act, pooled))
    cat = T.concat([s[3].value for s in stages])
    emb = T.linear(cat.value, params["head.mid.weight"])

    def pullback(g):
        grads = {}
        g, grads["head.mid.weight"] = emb.pullback(g)
        d_taps = []
        for t, (conv, biased, act, pooled), gp in zip(range(len(stages)), stages, cat.pullback(g)):
            (gt,) = pooled.pullback(gp)
            (gt,) = act.pullback(gt)
            gt, grads[f"head.mid.tap{t}.bias"] = biased.pullback(gt)
            gt, grads[f"head.mid.tap{t}.weight"] = conv.pullback(gt)
            d_taps.append(gt)
        return d_taps, grads

    return T.Grad(emb.value, pullback)


def relation_head(high_logits: np.ndarray, params: dict, temperature: float) -> T.Grad:
    """Temperature-softened class distribution fed through a two-layer perceptron.

    The logits are treated as constants: the pullback reports a gradient for
    them (used by tests) but callers must not route it into the high branch.
    """
    soft = T.softmax_temp(high_logits, temperature)
    fc1 = T.linear(soft.value, params["head.relation.fc1.weight"])
    b1 = T.bias_add(fc1.value, params["head.relation.fc1.bias"])
    act = T.relu(b1.value)
    fc2 = T.linear(act.value, params["head.relation.fc2.weight"])
    b2 = T.bias_add(fc2.value, params["head.relation.fc2.bias"])

    def pullback(g):
        grads = {}
        g, grads["head.relation.fc2.bias"] = b2.pullback(g)
        g, grads["head.relation.fc2.weight"] = fc2.pullback(g)
        (g,) = act.pullback(g)
        g, grads["head.relation.fc1.bias"] = b1.pullback(g)
        g, grads["head.relation.fc1.weight"] = fc1.pullback(g)
        (g,) = soft.pullback(g)
        return g, grads

    return T.Grad(b2.value, pullback)


def cosine_logits(features: np.ndarray, weight: np.ndarray, scale) -> T.Grad:
    """``scale * <f_i / |f_i|, w_j / |w_j|>`` for feature rows and weight columns.

    Pullback returns gradients for (features, weight, scale).
    """
    scale = float(scale)
    fn = T.l2_normalize(features, axis=1)
    wn = T.l2_normalize(weight, axis=0)
    cos = fn.value @ wn.value

    def pullback(g):
        dcos = scale * g
        (df,) = fn.pullback(dcos @ wn.value.T)
        (dw,) = wn.pullback(fn.value.T @ dcos)
        ds = np.array(np.sum(g * cos))
        return df, dw, ds

    return T.Grad(scale * cos, pullback)


def branch_logits(features: np.ndarray, weight: np.ndarray, scale) -> np.ndarray:
    return cosine_logits(features, weight, scale).value
