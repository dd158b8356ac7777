"""Novel-class classifier weights from few support features: averaging and attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import softmax_loss
from .trainer import NumericError


class DegeneratePrototypeError(ValueError):
    """The normalized support features of a class average to (almost) zero."""


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return T.l2_normalize(np.asarray(x, dtype=np.float64), axis=-1).value


def avg_gen(support: np.ndarray, name: str = "?", floor: float = T.NORM_FLOOR) -> np.ndarray:
    """Normalize each of the k support features, average them, normalize the mean.

    ``support`` has shape (k, d).
    """
    support = np.asarray(support, dtype=np.float64)
    if support.ndim != 2 or len(support) < 1:
        raise ValueError(f"support must have shape (k >= 1, d), got {support.shape}")
    norms = np.linalg.norm(support, axis=1)
    if np.any(norms < floor):
        raise DegeneratePrototypeError(f"class {name}: a support feature has norm below {floor}")
    proto = _unit_rows(support).mean(axis=0)
    if np.linalg.norm(proto) < floor:
        raise DegeneratePrototypeError(f"class {name}: normalized support features cancel out")
    return proto / np.linalg.norm(proto)


def avg_gen_matrix(support: np.ndarray, names=None) -> np.ndarray:
    """Stack :func:`avg_gen` over classes: (n_classes, k, d) -> (d, n_classes)."""
    names = names if names is not None else [str(i) for i in range(len(support))]
    return np.stack([avg_gen(s, n) for s, n in zip(support, names)], axis=1)


@dataclass
class AttGenParams:
    phi_avg: np.ndarray  # (d,)
    phi_att: np.ndarray  # (d,)
    phi_q: np.ndarray  # (d, d)
    keys: np.ndarray  # (K_b, d)
    att_scale: float = 10.0  # inverse attention temperature

    @classmethod
    def init(cls, base_weight: np.ndarray, att_scale: float = 10.0) -> "AttGenParams":
        """Start from the averaging solution: gates (1, 0), identity query map, keys = base columns."""
        d, kb = base_weight.shape
        return cls(
            phi_avg=np.ones(d),
            phi_att=np.zeros(d),
            phi_q=np.eye(d),
            keys=_unit_rows(base_weight.T).copy(),
            att_scale=float(att_scale),
        )

    @property
    def dim(self) -> int:
        return self.phi_avg.shape[0]

    def copy(self) -> "AttGenParams":
        return AttGenParams(self.phi_avg.copy(), self.phi_att.copy(), self.phi_q.copy(), self.keys.copy(), self.att_scale)

    def as_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.phi_avg": self.phi_avg,
            f"{prefix}.phi_att": self.phi_att,
            f"{prefix}.phi_q": self.phi_q,
            f"{prefix}.keys": self.keys,
            f"{prefix}.att_scale": np.array(self.att_scale),
        }

    @classmethod
    def from_dict(cls, tensors: dict, prefix: str) -> "AttGenParams":
        return cls(
            phi_avg=np.array(tensors[f"{prefix}.phi_avg"], dtype=np.float64),
            phi_att=np.array(tensors[f"{prefix}.phi_att"], dtype=np.float64),
            phi_q=np.array(tensors[f"{prefix}.phi_q"], dtype=np.float64),
            keys=np.array(tensors[f"{prefix}.keys"], dtype=np.float64),
            att_scale=float(tensors[f"{prefix}.att_scale"]),
        )


def _att_forward(support: np.ndarray, base_weight: np.ndarray, params: AttGenParams, allowed=None):
    """Unnormalized generated weights for every class, with attention maps and a pullback.

    support: (n, k, d); base_weight: (d, K_b). ``allowed`` restricts the
    attended base classes. Returns (Grad of (n, d) weights, attention (n, k, K)).
    """
    support = np.asarray(support, dtype=np.float64)
    if support.ndim != 3:
        raise T.ShapeError(f"support must have shape (n, k, d), got {support.shape}")
    n, k, d = support.shape
    if d != params.dim or base_weight.shape[0] != d or params.keys.shape != (base_weight.shape[1], d):
        raise T.ShapeError(
            f"dimension mismatch: features {d}, gates {params.dim}, base weight {base_weight.shape}, keys {params.keys.shape}"
        )
    allowed = np.arange(base_weight.shape[1]) if allowed is None else np.asarray(allowed)
    z = _unit_rows(support).reshape(n * k, d)
    w_avg = z.reshape(n, k, d).mean(axis=1)
    wb = _unit_rows(base_weight[:, allowed].T)  # (K, d)
    q = T.linear(z, params.phi_q)
    qn = T.l2_normalize(q.value, axis=1)
    kn = T.l2_normalize(params.keys[allowed], axis=1)
    cos = qn.value @ kn.value.T
    att = T.softmax_temp(params.att_scale * cos, 1.0, axis=1)
    attended = (att.value @ wb).reshape(n, k, d).mean(axis=1)
    out = params.phi_avg * w_avg + params.phi_att * attended

    def pullback(g):
        d_phi_avg = np.sum(g * w_avg, axis=0)
        d_phi_att = np.sum(g * attended, axis=0)
        d_att_rows = np.repeat((g * params.phi_att)[:, None, :] / k, k, axis=1).reshape(n * k, d)
        (d_logits,) = att.pullback(d_att_rows @ wb.T)
        d_scale = float(np.sum(d_logits * cos))
        d_cos = params.att_scale * d_logits
        (dq,) = qn.pullback(d_cos @ kn.value)
        (dk_sub,) = kn.pullback(d_cos.T @ qn.value)
        _, d_phi_q = q.pullback(dq)
        d_keys = np.zeros_like(params.keys)
        d_keys[allowed] = dk_sub
        return AttGenParams(d_phi_avg, d_phi_att, d_phi_q, d_keys, d_scale)

    return T.Grad(out, pullback), att.value.reshape(n, k, len(allowed))


def att_gen(support: np.ndarray, base_weight: np.ndarray, params: AttGenParams, normalize: bool = True, allowed=None):
    """Attention-based generated weight for one class.

    ``support`` is (k, d). Returns (weight vector (d,), attention (k, K)).
    """
    support = np.asarray(support, dtype=np.float64)
    grad, att = _att_forward(support[None], base_weight, params, allowed)
    w = grad.value[0]
    if normalize:
        w = w / max(np.linalg.norm(w), T.NORM_FLOOR)
    return w, att[0]


def att_gen_matrix(support: np.ndarray, base_weight: np.ndarray, params: AttGenParams, allowed=None):
    """Generated unit columns for all classes: (n, k, d) -> ((d, n), attention (n, k, K))."""
    grad, att = _att_forward(support, base_weight, params, allowed)
    return T.l2_normalize(grad.value, axis=1).value.T, att


# ---------------------------------------------------------------------------
# episodic training on fake-novel splits of the base classes


@dataclass(frozen=True)
class AttGenConfig:
    episodes: int = 300
    n_way: int = 4
    shots: int = 1
    queries: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    scale: float = 10.0  # cosine-classifier scale used for the episode loss
    eval_episodes: int = 200
    scope: str = "per-branch"  # per-branch | combined
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0 or self.n_way < 2 or self.shots < 1 or self.queries < 1:
            raise ValueError("invalid AttGen episode configuration")
        if self.scope not in ("per-branch", "combined"):
            raise ValueError("scope must be 'per-branch' or 'combined'")


def _fake_novel_episode(labels: np.ndarray, n_classes: int, cfg: AttGenConfig, rng: np.random.Generator, query_labels=None):
    """Sample fake-novel classes, their support indices and query indices.

    Queries come from ``query_labels`` (a disjoint set) when given, otherwise
    from the remaining samples of the same array.
    """
    classes = np.sort(rng.choice(n_classes, size=cfg.n_way, replace=False))
    support, queries, qlab = [], [], []
    for j, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        support.append(idx[: cfg.shots])
        if query_labels is None:
            q = idx[cfg.shots : cfg.shots + cfg.queries]
        else:
            q = rng.permutation(np.flatnonzero(query_labels == c))[: cfg.queries]
        queries.append(q)
        qlab.append(np.full(len(q), j))
    return classes, np.stack(support), np.concatenate(queries), np.concatenate(qlab)


def episode_loss(support_feats, query_feats, query_labels, base_weight, params: AttGenParams, allowed, scale: float):
    """Cross-entropy of queries under cosine logits against generated weights; returns (loss, grads, accuracy)."""
    gen, att = _att_forward(support_feats, base_weight, params, allowed)
    wn = T.l2_normalize(gen.value, axis=1)
    qn = _unit_rows(query_feats)
    logits = scale * qn @ wn.value.T
    ce = softmax_loss(logits, query_labels)
    (dlogits,) = ce.pullback(1.0)
    (dw,) = wn.pullback(scale * dlogits.T @ qn)
    grads = gen.pullback(dw)
    acc = float(np.mean(logits.argmax(1) == query_labels))
    return float(ce.value), grads, acc, att


def episode_accuracy(features, labels, base_weight, params: AttGenParams | None, cfg: AttGenConfig, seed: int, query_features=None, query_labels=None, attention_sink: list | None = None) -> float:
    """Mean fake-novel accuracy (percent) of AttGen, or AvgGen when ``params`` is None.

    With ``attention_sink``, each episode's (n, k, allowed) attention is appended to it.
    """
    rng = np.random.default_rng([seed, 1])
    n_classes = base_weight.shape[1]
    accs = []
    for _ in range(cfg.eval_episodes):
        classes, sup, qry, qlab = _fake_novel_episode(labels, n_classes, cfg, rng, query_labels)
        qsrc = features if query_features is None else query_features
        sfeat = features[sup]
        if params is None:
            w = avg_gen_matrix(sfeat)
        else:
            allowed = np.setdiff1d(np.arange(n_classes), classes)
            w, att = att_gen_matrix(sfeat, base_weight, params, allowed)
            if attention_sink is not None:
                attention_sink.append(att)
        scores = _unit_rows(qsrc[qry]) @ w
        accs.append(np.mean(scores.argmax(1) == qlab))
    return 100.0 * float(np.mean(accs))


def att_gen_train(features: np.ndarray, labels: np.ndarray, base_weight: np.ndarray, params: AttGenParams, cfg: AttGenConfig):
    """Episodic SGD on fake-novel episodes drawn from base classes.

    The classes of each episode are removed from the attended base set so
    the generator cannot look up their own weights. ``features`` are frozen
    embeddings of the base training images.
    """
    params = params.copy()
    rng = np.random.default_rng([cfg.seed, 0])
    n_classes = base_weight.shape[1]
    if cfg.n_way >= n_classes:
        raise ValueError(f"n_way={cfg.n_way} leaves no base classes to attend over ({n_classes} total)")
    velocity = None
    history = []
    for _ in range(cfg.episodes):
        classes, sup, qry, qlab = _fake_novel_episode(labels, n_classes, cfg, rng)
        allowed = np.setdiff1d(np.arange(n_classes), classes)
        loss, g, acc, _ = episode_loss(features[sup], features[qry], qlab, base_weight, params, allowed, cfg.scale)
        if not np.isfinite(loss):
            raise NumericError("non-finite AttGen episode loss")
        flat_g = (g.phi_avg, g.phi_att, g.phi_q, g.keys, np.array(g.att_scale))
        if velocity is None:
            velocity = [x.copy() for x in flat_g]
        else:
            velocity = [cfg.momentum * v + x for v, x in zip(velocity, flat_g)]
        params.phi_avg = params.phi_avg - cfg.lr * velocity[0]
        params.phi_att = params.phi_att - cfg.lr * velocity[1]
        params.phi_q = params.phi_q - cfg.lr * velocity[2]
        params.keys = params.keys - cfg.lr * velocity[3]
        params.att_scale = max(float(params.att_scale - cfg.lr * velocity[4]), 1e-3)
        history.append((loss, acc))
    return params, history
