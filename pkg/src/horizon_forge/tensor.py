"""Minimal reverse-mode autodiff over 4-axis (batch, channel, row, col) arrays.

Operations record themselves on the active :class:`Graph` (entered with a
``with`` block) whenever at least one input requires a gradient. Outside a
graph every op runs as a plain numpy computation, which is what inference
uses.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "horizon_forge_graph", default=None
)


class ShapeError(ValueError):
    pass


class Tensor:
    """Array plus autodiff bookkeeping.

    Leaves are created by the user; op outputs carry ``is_leaf=False``.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of recorded ops in execution (hence topological) order."""

    nodes: list[Node] = field(default_factory=list)
    _done: bool = False
    _token: contextvars.Token | None = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        if self._done:
            raise RuntimeError("graph already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self._done = False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def current_graph() -> Graph | None:
    return _active_graph.get()


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph._done:
        raise RuntimeError("backward() already ran on this graph; call reset() first")
    graph._done = True
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    # free saved contexts
    graph.nodes = []


def custom_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` as the output of an op and record it if a graph is active."""
    out = Tensor(out_data)
    graph = _active_graph.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        graph.record(Node(name, tuple(inputs), out, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix from a padded channels-last array; column order is (kh, kw, c)."""
    n, _, _, c = xp.shape
    if kh == 1 and kw == 1:
        return xp[:, ::stride, ::stride, :].reshape(n * oh * ow, c)
    taps = [xp[:, a:a + stride * oh:stride, b:b + stride * ow:stride, :]
            for a in range(kh) for b in range(kw)]
    return np.concatenate(taps, axis=-1).reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation; ``kernel`` is laid out (out_c, in_c, kh, kw)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check4(x, "conv2d input")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oc, ic, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if ic != c:
        raise ShapeError(f"kernel expects {ic} input channels, input has {c}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same padding needs odd kernel extents")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    # channels-last internally so every tap slice is contiguous in c
    xh = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else np.ascontiguousarray(xh)
    hp, wp = xp.shape[1:3]
    if hp < kh or wp < kw:
        raise ShapeError("input smaller than kernel")
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(oc, -1)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    del cols

    def _backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gk = None
        if kernel.requires_grad:
            cols_b = _im2col(xp, kh, kw, stride, oh, ow)
            gk = (gmat.T @ cols_b).reshape(oc, kh, kw, c).transpose(0, 3, 1, 2)
            del cols_b
        gb = gmat.sum(axis=0) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, kh * kw * c)
            if kh == 1 and kw == 1 and stride == 1:
                gx = dcols.transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                i = 0
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, a:a + stride * oh:stride, b:b + stride * ow:stride, :] += dcols[..., i:i + c]
                        i += c
                gx = gxp[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, _as_tensor(bias))
    return custom_op("conv2d", inputs, out, _backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Learned x2 upsampling; ``kernel`` is laid out (in_c, out_c, 2, 2).

    This is the adjoint of ``conv2d(., kernel, stride=2, padding='valid')``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check4(x, "conv2d_transpose input")
    ic, oc, kh, kw = kernel.shape
    if stride != 2 or kh != 2 or kw != 2:
        raise ValueError("conv2d_transpose supports only a 2x2 kernel with stride 2")
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(f"kernel expects {ic} input channels, input has {c}")
    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = kernel.data.reshape(ic, oc * 4)
    out = (xmat @ wmat).reshape(n, h, w, oc, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        gr = g.reshape(n, oc, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, oc * 4)
        gx = (gr @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gk = (xmat.T @ gr).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, _as_tensor(bias))
    return custom_op("conv2d_transpose", inputs, out, _backward)


# ---------------------------------------------------------------- pooling / resampling

def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling. Ties go to the first element in row-major order."""
    x = _as_tensor(x)
    _check4(x, "maxpool2d input")
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def _backward(g):
        g4 = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(g4, idx, g[..., None], axis=-1)
        g4 = g4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (g4.reshape(n, c, h, w),)

    return custom_op("maxpool2d", (x,), out, _backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check4(x, "upsample input")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return custom_op("upsample_nearest2x", (x,), out, _backward)


# ---------------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics normalize the input and the running
    arrays are updated in place: ``running = momentum * running + (1 - momentum) * batch``.
    Variances below ``eps`` are clamped to ``eps``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check4(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")
    xd = x.data
    gb = gamma.data[None, :, None, None]
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError("train-mode batchnorm needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc) / m
        clamped = var < eps
        inv_std = 1.0 / np.sqrt(np.maximum(var, eps))
        xhat = xc * inv_std[None, :, None, None]
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(np.maximum(running_var, eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gb + beta.data[None, :, None, None]

    def _backward(g):
        ggamma = np.einsum("nchw,nchw->c", g, xhat) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gb
            if train:
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = np.einsum("nchw,nchw->c", dxhat, xhat)
                s2 = np.where(clamped, 0.0, s2)  # clamped variance is a constant
                gx = (dxhat - (s1 / m)[None, :, None, None]
                      - xhat * (s2 / m)[None, :, None, None]) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return custom_op("batchnorm2d", (x, gamma, beta), out, _backward)


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def _backward(g):
        return (g * mask,)

    return custom_op("relu", (x,), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.data)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return custom_op("sigmoid", (x,), out, _backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may have a single channel broadcast over ``a``'s channels."""
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = b.shape != a.shape
    if bcast and not (b.data.ndim == 4 and b.shape[1] == 1
                      and b.shape[:1] + b.shape[2:] == a.shape[:1] + a.shape[2:]):
        raise ShapeError(f"mul cannot broadcast {b.shape} onto {a.shape}")
    out = a.data * b.data

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bcast:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return custom_op("mul", (a, b), out, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    return custom_op("scale", (x,), x.data * factor, lambda g: (g * factor,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return custom_op("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- channel plumbing

def concat_channels(*tensors: Tensor) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_channels needs at least one tensor")
    for t in ts:
        _check4(t, "concat input")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {t.shape} with {ref}: batch/spatial mismatch")
    out = np.concatenate([t.data for t in ts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return custom_op("concat_channels", tuple(ts), out, _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[:, start:stop]

    def _backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return custom_op("slice_channels", (x,), out, _backward)


# ---------------------------------------------------------------- fixed filters

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def _depthwise3x3(xp: np.ndarray, k: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros(xp.shape[:2] + (h, w), dtype=xp.dtype)
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                out += k[a, b] * xp[:, :, a:a + h, b:b + w]
    return out


def sobel(x: Tensor) -> Tensor:
    """Depthwise Sobel responses, zero padded: channels ``[Gx(x), Gy(x)]``.

    The kernels are constants; no gradient is ever produced for them.
    """
    x = _as_tensor(x)
    _check4(x, "sobel input")
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.concatenate([_depthwise3x3(xp, SOBEL_X, h, w), _depthwise3x3(xp, SOBEL_Y, h, w)], axis=1)

    def _backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k, gk in ((SOBEL_X, g[:, :c]), (SOBEL_Y, g[:, c:])):
            for a in range(3):
                for b in range(3):
                    if k[a, b] != 0.0:
                        gxp[:, :, a:a + h, b:b + w] += k[a, b] * gk
        return (gxp[:, :, 1:1 + h, 1:1 + w],)

    return custom_op("sobel", (x,), out, _backward)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return custom_op("sum", (x,), out, lambda g: (np.full(x.shape, g.reshape(()), dtype=x.dtype),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant ``weights`` array; handy as a probe loss."""
    x = _as_tensor(x)
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return custom_op("weighted_sum", (x,), out, lambda g: (g.reshape(()) * weights,))


def add_scalars(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op("add_scalars", (a, b), a.data + b.data, lambda g: (g, g))


# ---------------------------------------------------------------- gradient checking

def finite_diff_check(closure: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
                      max_coords: int | None = 40, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``closure`` must rebuild the scalar output from ``inputs`` on every call.
    At most ``max_coords`` coordinates per input are probed (all if ``None``).
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    with Graph() as graph:
        out = closure()
    graph.backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = closure().item()
            flat[i] = orig - eps
            fm = closure().item()
            flat[i] = orig
            cd = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
