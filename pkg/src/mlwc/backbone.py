"""Small convolutional trunk with tapped intermediate stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    tap_stages: tuple[int, ...] | None = None  # None: every stage but the last
    in_channels: int = 3
    detach_taps: bool = True

    def __post_init__(self):
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be a nonempty sequence of positive ints")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        last = len(self.stage_channels) - 1
        for t in self.taps:
            if not 0 <= t < last:
                raise ValueError(f"tap stage {t} invalid; taps must come from stages 0..{last - 1}")

    @property
    def taps(self) -> tuple[int, ...]:
        if self.tap_stages is None:
            return tuple(range(len(self.stage_channels) - 1))
        return tuple(self.tap_stages)

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.stage_channels)


@dataclass
class BackboneState:
    params: dict[str, np.ndarray]
    config: BackboneConfig = field(default_factory=BackboneConfig)


def conv_name(stage: int, block: int) -> str:
    return f"trunk.s{stage}.b{block}"


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He-style uniform draw: std = sqrt(2 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def backbone_init(config: BackboneConfig, rng: np.random.Generator) -> BackboneState:
    params = {}
    c_in = config.in_channels
    for s, c_out in enumerate(config.stage_channels):
        for b in range(config.blocks_per_stage):
            name = conv_name(s, b)
            params[name + ".weight"] = fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
            params[name + ".bias"] = np.zeros(c_out)
            c_in = c_out
    return BackboneState(params, config)


class TrunkOutput(NamedTuple):
    final_map: np.ndarray
    taps: list[np.ndarray]
    pullback: Callable[..., dict[str, np.ndarray]]


def backbone_forward(state: BackboneState, batch: np.ndarray) -> TrunkOutput:
    """Run every stage; return the last map, the tapped stage outputs and a pullback.

    ``pullback(d_final, d_taps=None)`` returns gradients for the trunk
    parameters. Tap gradients are ignored when the config detaches taps.
    """
    cfg = state.config
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {batch.shape}")
    h, w = batch.shape[2:]
    if h % cfg.downsampling or w % cfg.downsampling:
        raise T.ShapeError(f"input size {h}x{w} not divisible by downsampling factor {cfg.downsampling}")
    x = batch
    tape = []  # (name, conv grad, bias grad, relu grad)
    stage_ends = []
    for s in range(len(cfg.stage_channels)):
        for b in range(cfg.blocks_per_stage):
            name = conv_name(s, b)
            conv = T.conv2d(x, state.params[name + ".weight"], stride=2 if b == 0 else 1)
            biased = T.bias_add(conv.value, state.params[name + ".bias"])
            act = T.relu(biased.value)
            tape.append((name, conv, biased, act))
            x = act.value
        stage_ends.append(len(tape) - 1)
    taps = [tape[stage_ends[s]][3].value.copy() for s in cfg.taps]
    tap_at = {stage_ends[s]: i for i, s in enumerate(cfg.taps)}

    def pullback(d_final, d_taps=None):
        grads = {}
        g = d_final
        for pos in range(len(tape) - 1, -1, -1):
            if d_taps is not None and not cfg.detach_taps and pos in tap_at:
                g = g + d_taps[tap_at[pos]]
            name, conv, biased, act = tape[pos]
            (g,) = act.pullback(g)
            g, grads[name + ".bias"] = biased.pullback(g)
            g, grads[name + ".weight"] = conv.pullback(g)
        return grads

    return TrunkOutput(x, taps, pullback)
