"""Dense float64 arithmetic with hand-written pullbacks.

Every op returns a :class:`Grad`: the forward value plus a ``pullback`` that
maps an upstream gradient (same shape as the value) to a tuple of gradients,
one per differentiable input, in the order the inputs were given.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not fit the requested op."""


class Grad(NamedTuple):
    value: np.ndarray
    pullback: Callable[[np.ndarray], tuple]


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# layers


def linear(x: np.ndarray, weight: np.ndarray) -> Grad:
    """``x @ weight.T`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear input dim 1 is {x.shape[1]} but weight dim 1 (fan-in) is {weight.shape[1]}"
        )
    out = x @ weight.T

    def pullback(g):
        return g @ weight, g.T @ x

    return Grad(out, pullback)


def bias_add(x: np.ndarray, bias: np.ndarray) -> Grad:
    """Add a per-feature (2-d input) or per-channel (4-d input) bias."""
    if bias.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not match input dim 1 of {x.shape}")
    if x.ndim == 2:
        out = x + bias
        axes = (0,)
    else:
        out = x + bias[None, :, None, None]
        axes = (0, 2, 3)

    def pullback(g):
        return g, g.sum(axis=axes)

    return Grad(out, pullback)


def relu(x: np.ndarray) -> Grad:
    mask = x > 0
    out = np.where(mask, x, 0.0)

    def pullback(g):
        return (np.where(mask, g, 0.0),)

    return Grad(out, pullback)


def concat(xs: Sequence[np.ndarray], axis: int = 1) -> Grad:
    if not xs:
        raise ShapeError("concat needs at least one input")
    widths = [x.shape[axis] for x in xs]
    out = np.concatenate(xs, axis=axis)

    def pullback(g):
        return tuple(split(g, widths, axis=axis))

    return Grad(out, pullback)


def split(x: np.ndarray, widths: Sequence[int], axis: int = 1) -> list[np.ndarray]:
    """Inverse of :func:`concat` given the original widths."""
    if sum(widths) != x.shape[axis]:
        raise ShapeError(f"widths {list(widths)} do not sum to dim {axis} = {x.shape[axis]}")
    cuts = np.cumsum(widths)[:-1]
    return [part.copy() for part in np.split(x, cuts, axis=axis)]


def _conv_padding(kernel: int, padding: str) -> int:
    if padding == "same":
        return kernel // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}; expected 'same' or 'valid'")


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: str = "same") -> Grad:
    """2-d cross-correlation, NCHW input and OIHW kernel, zero padded."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d input channels (dim 1) = {x.shape[1]} but kernel expects {weight.shape[1]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = _conv_padding(kh, padding), _conv_padding(kw, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]  # N C Ho Wo kh kw
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def pullback(g):
        dweight = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        dwin = np.tensordot(g, weight, axes=([1], [0]))  # N Ho Wo C kh kw
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else dxp
        return dx, dweight

    return Grad(out, pullback)


_LAYERS = {
    "linear": lambda params, x, **kw: linear(x, *params),
    "conv2d": lambda params, x, **kw: conv2d(x, *params, **kw),
    "relu": lambda params, x, **kw: relu(x),
    "bias-add": lambda params, x, **kw: bias_add(x, *params),
    "concat": lambda params, x, **kw: concat(x, **kw),
}


def layer_apply(kind: str, params: Sequence[np.ndarray], x, **options) -> Grad:
    """Dispatch to one of the layer ops by name."""
    try:
        fn = _LAYERS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {sorted(_LAYERS)}") from None
    return fn(params, x, **options)


# ---------------------------------------------------------------------------
# pooling, normalization, softmax


def global_pool(x: np.ndarray, mode: str = "avg") -> Grad:
    """Pool an NCHW map over its spatial extent to (N, C).

    Max pooling sends the gradient to the first maximal cell in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"global_pool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_pool over an empty spatial extent")
    flat = x.reshape(n, c, h * w)
    if mode == "avg":
        out = flat.mean(axis=2)

        def pullback(g):
            return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    elif mode == "max":
        idx = flat.argmax(axis=2)  # argmax returns the first occurrence
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def pullback(g):
            d = np.zeros_like(flat)
            np.put_along_axis(d, idx[:, :, None], g[:, :, None], axis=2)
            return (d.reshape(x.shape),)

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return Grad(out, pullback)


def l2_normalize(v: np.ndarray, floor: float = NORM_FLOOR, axis: int = -1) -> Grad:
    """``v / max(||v||, floor)`` along ``axis``."""
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    denom = np.maximum(norm, floor)
    u = v / denom
    live = norm > floor

    def pullback(g):
        radial = np.sum(g * u, axis=axis, keepdims=True)
        return (np.where(live, (g - u * radial) / denom, g / floor),)

    return Grad(u, pullback)


def softmax_temp(logits: np.ndarray, temperature: float = 1.0, axis: int = -1) -> Grad:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def pullback(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - inner) / temperature,)

    return Grad(p, pullback)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(op: Callable[..., Grad], point: Sequence[np.ndarray], step: float = 1e-5, seed: int = 0) -> float:
    """Largest relative disagreement between ``op``'s pullback and central differences.

    The op output is reduced to a scalar with a fixed random projection so
    every output component contributes. Components are compared as
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if not 0 < step < 1:
        raise ValueError("step must lie in (0, 1)")
    point = [as_tensor(p).copy() for p in point]
    result = op(*point)
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal(np.shape(result.value))
    analytic = result.pullback(upstream)

    def scalar(args):
        return float(np.sum(op(*args).value * upstream))

    worst = 0.0
    for k, p in enumerate(point):
        if k >= len(analytic) or analytic[k] is None:
            continue
        a_grad = np.asarray(analytic[k])
        if a_grad.shape != p.shape:
            raise ShapeError(f"pullback gradient {k} has shape {a_grad.shape}, input has {p.shape}")
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar(point)
            flat[i] = orig - step
            down = scalar(point)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = a_grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
