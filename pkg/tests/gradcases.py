"""Finite-difference cases: every differentiable op and loss, as (op, point) factories.

Each factory takes a Generator and returns ``(op, point)`` where ``op(*point)``
returns a Grad whose pullback yields one gradient per point entry. Shapes are
kept tiny so 100 points per case stay fast.
"""
import numpy as np

from mlwc import tensor as T
from mlwc.backbone import BackboneConfig, BackboneState, backbone_forward, backbone_init
from mlwc.heads import LEVELS, cosine_logits, high_head, mid_head, relation_head
from mlwc.losses import LossConfig, combined_cost, cosine_softmax_loss, softmax_loss, weight_centric_loss
from mlwc.weightgen import AttGenParams, _att_forward


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _linear(rng):
    return T.linear, [rng.standard_normal((3, 4)), rng.standard_normal((5, 4))]


def _bias2(rng):
    return T.bias_add, [rng.standard_normal((3, 4)), rng.standard_normal(4)]


def _bias4(rng):
    return T.bias_add, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3)]


def _relu(rng):
    return T.relu, [away_from_zero(rng, (4, 5))]


def _concat(rng):
    def op(a, b, c):
        out = T.concat([a, b, c], axis=1)
        return T.Grad(out.value, lambda g: tuple(out.pullback(g)))

    return op, [rng.standard_normal((2, 1)), rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]


def _conv(stride, padding):
    def factory(rng):
        return (lambda x, w: T.conv2d(x, w, stride=stride, padding=padding)), [
            rng.standard_normal((1, 2, 4, 4)),
            rng.standard_normal((2, 2, 3, 3)),
        ]

    return factory


def _pool(mode):
    def factory(rng):
        # distinct values keep the max away from ties
        x = rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1 + 0.01 * rng.standard_normal((2, 3, 4, 4))
        return (lambda x: T.global_pool(x, mode)), [x]

    return factory


def _l2(axis):
    def factory(rng):
        return (lambda v: T.l2_normalize(v, axis=axis)), [rng.standard_normal((3, 4))]

    return factory


def _softmax_temp(rng):
    return (lambda z: T.softmax_temp(z, 4.0, axis=1)), [3 * rng.standard_normal((3, 5))]


def _cosine_logits(rng):
    return cosine_logits, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), np.array(rng.uniform(1, 10))]


def _softmax_loss(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda z: softmax_loss(z, labels)), [rng.standard_normal((4, 5))]


def _cosine_softmax_loss(rng):
    labels = rng.integers(0, 5, size=4)

    def op(f, w, s):
        return cosine_softmax_loss(f, w, s, labels, weight_decay=1e-2)

    return op, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), np.array(rng.uniform(1, 10))]


def _centric_loss(rng):
    labels = rng.integers(0, 5, size=4)
    frozen = rng.standard_normal((3, 5))
    return (lambda f: weight_centric_loss(f, frozen, labels)), [rng.standard_normal((4, 3))]


def _combined(stage):
    def factory(rng):
        n, d, c = 3, 2, 3
        labels = rng.integers(0, c, size=n)
        frozen = {lv: rng.standard_normal((d, c)) for lv in LEVELS}
        cfg = LossConfig(weight_decay=1e-2, centric_weight=0.7)

        def op(*args):
            feats = dict(zip(LEVELS, args[0:3]))
            weights = dict(zip(LEVELS, args[3:6]))
            weights.update({(lv, "scale"): s for lv, s in zip(LEVELS, args[6:9])})
            cost = combined_cost(feats, weights, frozen if stage == 2 else None, labels, cfg, stage)

            def pullback(g):
                parts = cost.pullback(g)
                return tuple(parts[lv][0] for lv in LEVELS) + tuple(parts[lv][1] for lv in LEVELS) + tuple(parts[lv][2] for lv in LEVELS)

            return T.Grad(cost.value, pullback)

        point = [rng.standard_normal((n, d)) for _ in LEVELS] + [rng.standard_normal((d, c)) for _ in LEVELS]
        point += [np.array(rng.uniform(1, 10)) for _ in LEVELS]
        return op, point

    return factory


def _high_head(rng):
    def op(fmap, w):
        out = high_head(fmap, {"head.high.weight": w})
        return T.Grad(out.value, lambda g: (lambda r: (r[0], r[1]["head.high.weight"]))(out.pullback(g)))

    return op, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((4, 3))]


def _mid_head(rng):
    names = ["head.mid.tap0.weight", "head.mid.tap0.bias", "head.mid.tap1.weight", "head.mid.tap1.bias", "head.mid.weight"]

    def op(t0, t1, *ps):
        out = mid_head([t0, t1], dict(zip(names, ps)))

        def pullback(g):
            d_taps, grads = out.pullback(g)
            return tuple(d_taps) + tuple(grads[n] for n in names)

        return T.Grad(out.value, pullback)

    t0 = rng.permutation(2 * 2 * 3 * 3).reshape(2, 2, 3, 3) * 0.1
    t1 = rng.permutation(2 * 2 * 2 * 2).reshape(2, 2, 2, 2) * 0.1
    point = [t0, t1, rng.standard_normal((2, 2, 1, 1)), rng.uniform(0.5, 1, 2), rng.standard_normal((2, 2, 1, 1)), rng.uniform(0.5, 1, 2), rng.standard_normal((3, 4))]
    return op, point


def _relation_head(rng):
    names = ["head.relation.fc1.weight", "head.relation.fc1.bias", "head.relation.fc2.weight", "head.relation.fc2.bias"]

    def op(logits, *ps):
        out = relation_head(logits, dict(zip(names, ps)), 4.0)

        def pullback(g):
            d_logits, grads = out.pullback(g)
            return (d_logits,) + tuple(grads[n] for n in names)

        return T.Grad(out.value, pullback)

    point = [3 * rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.uniform(0.5, 1.0, 4), rng.standard_normal((2, 4)), rng.standard_normal(2)]
    return op, point


_TRUNK = BackboneConfig(stage_channels=(2, 3), in_channels=1, detach_taps=False)


def _backbone(rng):
    names = sorted(backbone_init(_TRUNK, rng).params)

    def op(*ps):
        out = backbone_forward(BackboneState(dict(zip(names, ps)), _TRUNK), x)
        return T.Grad(out.final_map, lambda g: tuple(out.pullback(g)[n] for n in names))

    x = rng.standard_normal((1, 1, 4, 4))
    state = backbone_init(_TRUNK, rng)
    point = [state.params[n] + (0.1 * rng.standard_normal(state.params[n].shape) if n.endswith("bias") else 0) for n in names]
    return op, point


def _backbone_taps(rng):
    names = sorted(backbone_init(_TRUNK, rng).params)
    x = rng.standard_normal((1, 1, 4, 4))

    def op(*ps):
        out = backbone_forward(BackboneState(dict(zip(names, ps)), _TRUNK), x)
        value = np.concatenate([out.final_map.reshape(-1), out.taps[0].reshape(-1)])
        n_final = out.final_map.size

        def pullback(g):
            grads = out.pullback(g[:n_final].reshape(out.final_map.shape), [g[n_final:].reshape(out.taps[0].shape)])
            return tuple(grads[n] for n in names)

        return T.Grad(value, pullback)

    state = backbone_init(_TRUNK, rng)
    point = [state.params[n] + (0.1 * rng.standard_normal(state.params[n].shape) if n.endswith("bias") else 0) for n in names]
    return op, point


def _attgen(rng):
    n, k, d, kb = 2, 3, 4, 5
    support = rng.standard_normal((n, k, d))
    base_w = rng.standard_normal((d, kb))
    allowed = np.array([0, 2, 3, 4])

    def op(phi_avg, phi_att, phi_q, keys, att_scale):
        params = AttGenParams(phi_avg, phi_att, phi_q, keys, float(att_scale))
        out, _ = _att_forward(support, base_w, params, allowed)

        def pullback(g):
            gp = out.pullback(g)
            return gp.phi_avg, gp.phi_att, gp.phi_q, gp.keys, np.array(gp.att_scale)

        return T.Grad(out.value, pullback)

    point = [rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((d, d)), rng.standard_normal((kb, d)), np.array(rng.uniform(1, 5))]
    return op, point


CASES = {
    "linear": _linear,
    "bias_add/2d": _bias2,
    "bias_add/4d": _bias4,
    "relu": _relu,
    "concat": _concat,
    "conv2d/s1-same": _conv(1, "same"),
    "conv2d/s2-same": _conv(2, "same"),
    "conv2d/s1-valid": _conv(1, "valid"),
    "global_pool/avg": _pool("avg"),
    "global_pool/max": _pool("max"),
    "l2_normalize/rows": _l2(-1),
    "l2_normalize/cols": _l2(0),
    "softmax_temp": _softmax_temp,
    "cosine_logits": _cosine_logits,
    "softmax_loss": _softmax_loss,
    "cosine_softmax_loss": _cosine_softmax_loss,
    "weight_centric_loss": _centric_loss,
    "combined_cost/stage1": _combined(1),
    "combined_cost/stage2": _combined(2),
    "high_head": _high_head,
    "mid_head": _mid_head,
    "relation_head": _relation_head,
    "backbone": _backbone,
    "backbone/taps": _backbone_taps,
    "attgen": _attgen,
}

TOLERANCE = 1e-4
POINTS = 100


def worst_error(name: str, points: int = POINTS) -> float:
    worst = 0.0
    for i in range(points):
        rng = np.random.default_rng([i, len(name)])
        op, point = CASES[name](rng)
        worst = max(worst, T.grad_check(op, point, step=1e-5, seed=i))
    return worst
