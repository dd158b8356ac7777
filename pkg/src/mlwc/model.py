"""The three-branch network: shared trunk, level heads, per-level cosine classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig, BackboneState, backbone_forward, backbone_init
from .heads import LEVELS, HeadConfig, cosine_logits, high_head, init_heads, mid_head, relation_head


@dataclass
class MultiLevelNet:
    params: dict[str, np.ndarray]
    backbone: BackboneConfig
    heads: HeadConfig
    n_classes: int
    label_space: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, backbone: BackboneConfig, heads: HeadConfig, n_classes: int, rng: np.random.Generator, label_space=()):
        trunk = backbone_init(backbone, rng)
        tap_channels = [backbone.stage_channels[s] for s in backbone.taps]
        params = dict(trunk.params)
        params.update(init_heads(heads, backbone.stage_channels[-1], tap_channels, n_classes, rng))
        return cls(params, backbone, heads, n_classes, tuple(label_space))

    def copy(self) -> "MultiLevelNet":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, meta=dict(self.meta))

    def classifier(self, level: str) -> np.ndarray:
        return self.params[f"cls.{level}.weight"]

    def scale(self, level: str) -> float:
        return float(self.params[f"cls.{level}.scale"])

    def _relation_input(self, high_features: np.ndarray, high_weight: np.ndarray) -> np.ndarray:
        scale = self.scale("high") if self.heads.relation_input == "scaled" else 1.0
        return cosine_logits(high_features, high_weight, scale).value

    def forward(self, x: np.ndarray, classifier_weights=None):
        """Features per level and a pullback from feature gradients to parameter gradients.

        ``classifier_weights`` overrides the high-level matrix used to form
        the (detached) relation-head input, e.g. the frozen copy in stage 2.
        """
        trunk = backbone_forward(BackboneState(self.params, self.backbone), x)
        high = high_head(trunk.final_map, self.params)
        mid = mid_head(trunk.taps, self.params)
        w_high = self.classifier("high") if classifier_weights is None else classifier_weights["high"]
        rel = relation_head(self._relation_input(high.value, w_high), self.params, self.heads.relation_temperature)
        features = {"mid": mid.value, "high": high.value, "relation": rel.value}

        def pullback(dfeat: dict) -> dict[str, np.ndarray]:
            grads = {}
            d_map = np.zeros_like(trunk.final_map)
            d_taps = None
            if "high" in dfeat:
                d_map, g = high.pullback(dfeat["high"])
                grads.update(g)
            if "mid" in dfeat:
                d_taps, g = mid.pullback(dfeat["mid"])
                grads.update(g)
            if "relation" in dfeat:
                _, g = rel.pullback(dfeat["relation"])  # logits input is detached
                grads.update(g)
            grads.update(trunk.pullback(d_map, d_taps))
            return grads

        return features, pullback

    def embed(self, x: np.ndarray, batch_size: int = 200) -> dict[str, np.ndarray]:
        """Inference-only features per level, computed in chunks."""
        chunks = {lv: [] for lv in LEVELS}
        for start in range(0, len(x), batch_size):
            feats, _ = self.forward(x[start : start + batch_size])
            for lv in LEVELS:
                chunks[lv].append(feats[lv])
        return {lv: np.concatenate(chunks[lv]) if chunks[lv] else np.zeros((0, self.heads.embed_dim)) for lv in LEVELS}

    def logits(self, x: np.ndarray) -> dict[str, np.ndarray]:
        feats = self.embed(x)
        return {lv: cosine_logits(feats[lv], self.classifier(lv), self.scale(lv)).value for lv in LEVELS}


def param_count(params: dict[str, np.ndarray], prefix: str = "") -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))


def is_finite(params: dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())

