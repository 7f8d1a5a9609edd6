"""Reverse-mode automatic differentiation over numpy arrays.

Exactly the operation set an encoder-decoder image regressor needs:
same-size 2D convolution (zero or circular padding), ReLU, sigmoid,
2x2 max pooling, nearest-neighbor 2x upsampling, channel concatenation,
dense layers for the coordinate regressor, and (weighted) MSE losses.

Tensors wrap numpy arrays and remember how they were produced; calling
``backward`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into every reachable Parameter.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False, parents=(), backprop=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backprop = backprop  # callable(out_grad) -> per-parent grads

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Leaf tensor that collects gradients and feeds the optimizer."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _needs(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backprop) -> Tensor:
    if _needs(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backprop=backprop)
    return Tensor(data)


# --- convolution ---------------------------------------------------------

def _pad2d(a: np.ndarray, p: int, padding: str) -> np.ndarray:
    if p == 0:
        return a
    mode = {"zeros": "constant", "circular": "wrap"}[padding]
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, C*k*k, H*W) column matrix via k*k slice copies."""
    n, c, hp, wp = xp.shape
    h, w = hp - k + 1, wp - k + 1
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + h, v:v + w]
    return cols.reshape(n, c * k * k, h * w)


def _xcorr(xp: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of padded input (N,C,Hp,Wp) with (M,C,k,k)."""
    m, c, k, _ = kernels.shape
    n = xp.shape[0]
    h, w = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if k == 1:
        flat = kernels.reshape(m, c) @ xp.reshape(n, c, h * w)
    else:
        flat = kernels.reshape(m, c * k * k) @ _im2col(xp, k)
    return flat.reshape(n, m, h, w)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "zeros") -> Tensor:
    """Same-size 2D cross-correlation: (N,C,H,W) x (M,C,k,k) -> (N,M,H,W)."""
    if padding not in ("zeros", "circular"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.data.ndim != 4:
        raise ValueError("conv2d input must be rank 4 (N,C,H,W)")
    m, cin, k, k2 = kernels.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernels must be square with odd size")
    if x.data.shape[1] != cin:
        raise ValueError(f"input has {x.data.shape[1]} channels, kernels expect {cin}")
    if bias.data.shape != (m,):
        raise ValueError("bias shape must be (out_channels,)")
    p = k // 2
    xp = _pad2d(x.data, p, padding)
    out = _xcorr(xp, kernels.data) + bias.data[None, :, None, None]

    def backprop(g):
        n, _, h, w = g.shape
        gf = g.reshape(n, m, h * w)
        if k == 1:
            cols = xp.reshape(n, cin, h * w)
        else:
            cols = _im2col(xp, k)
        gk = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(m, cin, k, k)
        gb = g.sum(axis=(0, 2, 3))
        flipped = np.flip(kernels.data, axis=(2, 3)).transpose(1, 0, 2, 3)
        gx = _xcorr(_pad2d(g, p, padding), np.ascontiguousarray(flipped))
        return gx, gk, gb

    return _result(out, (x, kernels, bias), backprop)


# --- elementwise ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backprop(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), backprop)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backprop(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backprop)


# --- resolution ----------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """Max over each 2x2 patch; gradient goes to the first max in
    row-major scan order within the patch."""
    h, w = x.data.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    lead = x.data.shape[:-2]
    v = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    v = np.moveaxis(v, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    out = v.max(axis=-1)
    idx = v.argmax(axis=-1)

    def backprop(g):
        gw = np.zeros_like(v)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, h // 2, w // 2, 2, 2)
        gw = np.moveaxis(gw, -2, -3).reshape(*lead, h, w)
        return (gw,)

    return _result(out, (x,), backprop)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x duplication of the last two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    lead = x.data.shape[:-2]
    h, w = x.data.shape[-2:]

    def backprop(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _result(out, (x,), backprop)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (third from the end)."""
    if a.data.shape[-2:] != b.data.shape[-2:]:
        raise ValueError(f"spatial mismatch: {a.data.shape} vs {b.data.shape}")
    out = np.concatenate([a.data, b.data], axis=-3)
    na = a.data.shape[-3]

    def backprop(g):
        return g[..., :na, :, :], g[..., na:, :, :]

    return _result(out, (a, b), backprop)


# --- dense ---------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(N,F) @ (F,O) + (O,)."""
    out = x.data @ weight.data + bias.data

    def backprop(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(out, (x, weight, bias), backprop)


# --- losses --------------------------------------------------------------

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff))

    def backprop(g):
        scale = g * (2.0 / diff.size)
        return scale * diff, -scale * diff

    return _result(out, (pred, target), backprop)


def weighted_mse_loss(pred: Tensor, target: Tensor, weights) -> Tensor:
    """Sum of w_i (pred_i - target_i)^2; uniform w = 1/size gives mse_loss."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {target.data.shape}")
    if w.shape != pred.data.shape:
        raise ValueError(f"weights shape {w.shape} must match {pred.data.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    diff = pred.data - target.data
    out = np.asarray(np.sum(w * diff * diff))

    def backprop(g):
        scale = g * 2.0 * w
        return scale * diff, -scale * diff

    return _result(out, (pred, target), backprop)


# --- graph walk ----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable Parameter; grads accumulate
    across calls until zeroed."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backprop is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backprop(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
