"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each :class:`Tensor` produced by an op remembers its parents and a closure
mapping the output gradient to per-parent gradients. :func:`backward` walks
the graph in reverse topological order, visiting every node once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DICE_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """An op produced NaN/Inf from finite inputs, or a gradient went non-finite."""


class ShapeError(ValueError):
    pass


_creation = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_seq")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        # creation order is a topological order; using it (rather than DFS finish
        # order) makes gradient accumulation order independent of how much of the
        # graph is reachable, so a split backward matches the unsplit one bit for bit
        self._seq = next(_creation)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self):
        return tensor_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(out).all() and all(np.isfinite(p.data).all() for p in parents):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(out, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------- graph

class Graph:
    """Topologically ordered view of everything reachable from ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.sort(key=lambda n: n._seq)
        return order


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Without ``grad`` the root must be a scalar. Passing ``grad`` seeds a
    non-scalar root, which is how a split stage resumes backprop from a
    gradient it received over the link.
    """
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward() without a seed gradient needs a scalar root, got {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != root.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(Graph(root).nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ------------------------------------------------------------ elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), _bw, "mul")


def tensor_sum(a: Tensor) -> Tensor:
    def _bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(a.data.sum()), (a,), _bw, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)
    return _make(np.where(mask, x.data, 0.0), (x,), _bw, "relu")


# ----------------------------------------------------------------- conv ops

def _check_nchw(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name} expects an NCHW tensor, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*K*K, N*H*W) patch matrix for a 'same' stride-1 conv."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _conv_same(x: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    o, _, k, _ = kernel.shape
    cols = _im2col(x, k)
    out = (kernel.reshape(o, -1) @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    # canonical C layout: reductions downstream then sum in the same order whether
    # the array came from here or from a copy received over a link
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with 'same' zero padding (odd square kernels)."""
    _check_nchw(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be OIKK, got {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    out, cols = _conv_same(x.data, kernel.data)
    out = out + bias.data.reshape(1, o, 1, 1)

    def _bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            # input gradient of a 'same' conv = 'same' conv of g with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_same(g, flipped)
        if kernel.requires_grad:
            gk = (g.transpose(1, 0, 2, 3).reshape(o, -1) @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb
    return _make(out, (x, kernel, bias), _bw, "conv2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running arrays are
    updated in place (``r <- 0.9 r + 0.1 batch``, unbiased variance). In eval
    mode the running statistics are used; a running variance pushed below
    zero (e.g. by channel noise on transmitted weights) is floored at zero.
    """
    _check_nchw(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    shape = (1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batchnorm2d in train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * inv_std.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def _bw(g):
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(shape)
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = (inv_std.reshape(shape) / count) * (count * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
        result = _make(out, (x, gamma, beta), _bw, "batchnorm2d")
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var * (count / (count - 1))
        return result

    inv_std = 1.0 / np.sqrt(np.maximum(running_var, 0.0) + BN_EPS)
    xhat = (x.data - running_mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def _bw_eval(g):
        gx = g * (gamma.data * inv_std).reshape(shape) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _make(out, (x, gamma, beta), _bw_eval, "batchnorm2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties go to the first window entry in row-major order."""
    _check_nchw(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even H and W, got {x.shape}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)
    return _make(out, (x,), _bw, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_nchw(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _make(out, (x,), _bw, "upsample")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels N/H/W mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def _bw(g):
        return g[:, :ca], g[:, ca:]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), _bw, "concat")


def softmax_channels(x: Tensor) -> Tensor:
    _check_nchw(x, "softmax_channels")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    return _make(s, (x,), _bw, "softmax")


# -------------------------------------------------------------------- loss

def dice_per_sample(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Soft macro Dice loss for each sample of a batch (no graph)."""
    if probs.shape != target.shape:
        raise ShapeError(f"dice shape mismatch: probs {probs.shape} vs target {target.shape}")
    inter = (probs * target).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + target.sum(axis=(2, 3)) + DICE_EPS
    return 1.0 - ((2.0 * inter + DICE_EPS) / denom).mean(axis=1)


def dice_loss(probs: Tensor, target) -> Tensor:
    """1 - mean over classes of soft Dice, pooled over the whole batch."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    _check_nchw(probs, "dice_loss")
    if probs.shape != t.shape:
        raise ShapeError(f"dice shape mismatch: probs {probs.shape} vs target {t.shape}")
    c = probs.shape[1]
    inter = (probs.data * t).sum(axis=(0, 2, 3))
    denom = probs.data.sum(axis=(0, 2, 3)) + t.sum(axis=(0, 2, 3)) + DICE_EPS
    num = 2.0 * inter + DICE_EPS
    loss = 1.0 - (num / denom).mean()

    def _bw(g):
        dp = (2.0 * t / denom.reshape(1, c, 1, 1) - (num / denom ** 2).reshape(1, c, 1, 1)) * (-g / c)
        return (dp,)
    return _make(np.asarray(loss), (probs,), _bw, "dice")
