"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape is implicit: every operation whose inputs require gradients records
its parents and a backward closure on the output tensor. ``backward()`` on a
scalar walks the graph once in reverse topological order with a fresh local
gradient map, then adds the result into each tensor's ``grad``. Calling
``backward()`` again without clearing therefore accumulates.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (inference, running-stat updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array plus an optional accumulated gradient.

    Tensors are written once during a forward pass and treated as immutable
    afterwards; optimizers mutate parameter ``data`` in place between passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(node) into every reachable node's ``grad``."""
        if self.data.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        grads = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                # leaves (parameters, gradient-requiring inputs) keep their
                # accumulated gradient; intermediate grads stay transient
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64)
                else:
                    node.grad = node.grad + g

    # small conveniences; heavy lifting stays in module functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on deep training graphs
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return topo


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _reduce_like(g: np.ndarray, shape) -> np.ndarray:
    # only scalar-vs-array mixing is supported; no general broadcasting
    if shape == ():
        return np.asarray(g.sum())
    return g


def _check_same_or_scalar(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")

    def backward(g):
        return [(a, _reduce_like(g, a.shape)), (b, _reduce_like(g, b.shape))]

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")

    def backward(g):
        return [(a, _reduce_like(g, a.shape)), (b, _reduce_like(-g, b.shape))]

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")

    def backward(g):
        return [
            (a, _reduce_like(g * b.data, a.shape)),
            (b, _reduce_like(g * a.data, b.shape)),
        ]

    return _node(a.data * b.data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return [(x, g * mask)]

    return _node(np.where(mask, x.data, 0.0), (x,), backward)


def sqrt(x) -> Tensor:
    """Elementwise square root with a guarded subgradient at zero."""
    x = _as_tensor(x)
    y = np.sqrt(np.maximum(x.data, 0.0))

    def backward(g):
        return [(x, g * 0.5 / np.maximum(y, 1e-12))]

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _node(a.data @ b.data, (a, b), backward)


def add_bias(x, b) -> Tensor:
    """Add a length-C vector to the last axis of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match input {x.shape}")

    def backward(g):
        return [(x, g), (b, g.reshape(-1, b.shape[0]).sum(axis=0))]

    return _node(x.data + b.data, (x, b), backward)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        def backward(g):
            return [(x, np.full_like(x.data, float(g)))]

        return _node(x.data.sum(), (x,), backward)

    def backward_axis(g):
        return [(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())]

    return _node(x.data.sum(axis=axis), (x,), backward_axis)


def tmean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reduce_max(x, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first argmax on ties."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(
            dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return [(x, dx)]

    return _node(y, (x,), backward)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((p, g[tuple(sl)].copy()))
        return out

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def _scatter_add_rows(shape, idx, g) -> np.ndarray:
    # sort + reduceat segment sum; much faster than np.add.at for wide rows
    out = np.zeros(shape)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_g = g[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_idx[1:] != sorted_idx[:-1]]))
    sums = np.add.reduceat(sorted_g, starts, axis=0)
    out[sorted_idx[starts]] = sums
    return out


def gather_rows(x, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate on backward."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        return [(x, _scatter_add_rows(x.shape, idx, g))]

    return _node(x.data[idx], (x,), backward)


def repeat_rows(x, k: int) -> Tensor:
    """Each row repeated k times consecutively; backward sums each row group."""
    x = _as_tensor(x)
    n = x.shape[0]

    def backward(g):
        return [(x, g.reshape(n, k, *x.shape[1:]).sum(axis=1))]

    return _node(np.repeat(x.data, k, axis=0), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def backward(g):
        return [(x, g.reshape(old))]

    return _node(x.data.reshape(shape), (x,), backward)


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between row sets: out[i, j] = |a_i - b_j|^2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: shapes {a.shape} and {b.shape} mismatch")
    aa = (a.data * a.data).sum(axis=1)
    bb = (b.data * b.data).sum(axis=1)
    q = np.maximum(aa[:, None] + bb[None, :] - 2.0 * (a.data @ b.data.T), 0.0)

    def backward(g):
        da = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        db = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return [(a, da), (b, db)]

    return _node(q, (a, b), backward)


# ---------------------------------------------------------------------------
# spatial ops on NHWC images


def _check_nhwc(x: Tensor, opname: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{opname}: expected NHWC input, got shape {x.shape}")


def _im2col3x3(img: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) sliding 3x3 windows over the padded image."""
    n, h, w, c = img.shape
    xp = np.pad(img, ((0, 0), (1, 1), (1, 1), (0, 0)))
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(n, h, w, 3, 3, c), strides=(s[0], s[1], s[2], s[1], s[2], s[3])
    )
    return windows.reshape(n * h * w, 9 * c)


def conv3x3(x, w, b) -> Tensor:
    """3x3 convolution, stride 1, same padding. x: NHWC, w: (3,3,Cin,Cout).

    One im2col matmul forward; the input gradient is the same-padded
    convolution of the upstream gradient with the spatially flipped kernel,
    so the backward pass is two matmuls as well.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_nhwc(x, "conv3x3")
    if w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv3x3: kernel {w.shape} does not match input {x.shape}")
    if b.shape != (w.shape[3],):
        raise ShapeError(f"conv3x3: bias {b.shape} does not match kernel {w.shape}")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    cols = _im2col3x3(x.data)
    w2 = w.data.reshape(9 * cin, cout)
    out = (cols @ w2 + b.data).reshape(n, h, wd, cout)

    def backward(g):
        gf = g.reshape(-1, cout)
        dw = (cols.T @ gf).reshape(3, 3, cin, cout)
        w_flip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
        dx = (_im2col3x3(g) @ w_flip).reshape(n, h, wd, cin)
        return [(x, dx), (w, dw), (b, gf.sum(axis=0))]

    return _node(out, (x, w, b), backward)


def maxpool2x2(x) -> Tensor:
    x = _as_tensor(x)
    _check_nhwc(x, "maxpool2x2")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: H and W must be even, got {x.shape}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)  # first max wins on ties
    y = np.take_along_axis(win, idx[..., None], axis=-1).squeeze(-1)

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return [(x, dx.reshape(n, h, w, c).copy())]

    return _node(y, (x,), backward)


def upsample2x2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling on NHWC."""
    x = _as_tensor(x)
    _check_nhwc(x, "upsample2x2")
    n, h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        dx = g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
        return [(x, dx)]

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and classification heads


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over all axes but the last (channel).

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    for the caller's running-average update and are not on the tape.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: scale/shift must be ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    m = x.size // c
    flat = x.data.reshape(m, c)
    mu = flat.mean(axis=0)
    # one-pass variance; clipped against roundoff-negative values
    var = np.maximum(np.einsum("ij,ij->j", flat, flat) / m - mu * mu, 0.0)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gamma.data * xhat + beta.data

    def backward(g):
        gf = g.reshape(m, c)
        xhat_flat = xhat.reshape(m, c)
        dbeta = gf.sum(axis=0)
        dgamma = np.einsum("ij,ij->j", gf, xhat_flat)
        dx = (gamma.data / std) / m * (m * g - dbeta - xhat * dgamma)
        return [(x, dx), (gamma, dgamma), (beta, dbeta)]

    return _node(out, (x, gamma, beta), backward), mu, var


def batchnorm_eval(x, gamma, beta, mean, var, eps: float = 1e-5) -> Tensor:
    """Batch normalization with frozen statistics (inference mode)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    std = np.sqrt(var + eps)
    xhat = (x.data - mean) / std
    axes = tuple(range(x.data.ndim - 1))

    def backward(g):
        return [
            (x, g * (gamma.data / std)),
            (gamma, (g * xhat).sum(axis=axes)),
            (beta, g.sum(axis=axes)),
        ]

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta), backward)


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return [(x, (g - (g * y).sum(axis=-1, keepdims=True)) * y)]

    return _node(y, (x,), backward)


def cross_entropy(logits, labels, class_weights) -> Tensor:
    """Weighted mean negative log-softmax of the true class.

    The mean is weighted: sum_i w[y_i] * nll_i / sum_i w[y_i].
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(class_weights, dtype=np.float64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be NxK, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    if w.shape != (k,) or np.any(w <= 0):
        raise ValueError("cross_entropy: class_weights must be positive, length K")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1)
    lse = m[:, 0] + np.log(se)
    nll = lse - z[np.arange(n), labels]
    wy = w[labels]
    wsum = wy.sum()
    loss = float((wy * nll).sum() / wsum)

    def backward(g):
        p = e / se[:, None]
        p[np.arange(n), labels] -= 1.0
        return [(logits, p * (wy / wsum * float(g))[:, None])]

    return _node(loss, (logits,), backward)
