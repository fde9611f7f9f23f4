"""Dense matrix ops with reverse-mode differentiation.

Every op works on whole float64 matrices. A ``Tensor`` records the op that
produced it so ``backward`` can walk the graph once in reverse topological
order. Plain ``numpy`` arrays stand in for the Matrix type.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ARCCOS_CLAMP = 1e-7


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


class Tensor:
    """A node in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: Callable[[np.ndarray], None] | None = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every upstream node."""
    if root.value.size != 1:
        raise DimensionError("backward needs a scalar root")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is not None:
            node.backward_fn(node.grad)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same value, cut from the graph."""
    return Tensor(x.value.copy())


# ---------------------------------------------------------------- layers


def affine(x, W, b) -> Tensor:
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x{x.shape} @ W{W.shape}")
    if b.value.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} vs {W.shape[1]} outputs")
    out = x.value @ W.value + b.value

    def bw(g):
        _acc(x, g @ W.value.T)
        _acc(W, x.value.T @ g)
        _acc(b, g.sum(axis=0))

    return _node(out, (x, W, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _node(out, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _acc(a, g.T)

    return _node(a.value.T.copy(), (a,), bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-column standardization then scale/shift.

    In train mode batch moments are used and the running moments are updated
    in place (unbiased variance for the running estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B = x.shape[0]
    if train:
        if B < 2:
            raise DegenerateBatchError("batch_norm in train mode needs at least 2 rows")
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * B / (B - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    out = xhat * gamma.value + beta.value

    def bw(g):
        _acc(gamma, (g * xhat).sum(axis=0))
        _acc(beta, g.sum(axis=0))
        if not x.requires_grad:
            return
        gx = g * gamma.value
        if train:
            gx = inv_std / B * (B * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        else:
            gx = gx * inv_std
        x.grad += gx

    return _node(out, (x, gamma, beta), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    out = np.where(mask, x.value, 0.0)

    def bw(g):
        _acc(x, g * mask)

    return _node(out, (x,), bw)


def l2_normalize(x) -> Tensor:
    x = as_tensor(x)
    norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise NormalizationError("cannot normalize an all-zero row")
    y = x.value / norms

    def bw(g):
        _acc(x, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    return _node(y, (x,), bw)


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.value + b.value, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _acc(a, c * g)

    return _node(c * a.value, (a,), bw)


def mean(v) -> Tensor:
    v = as_tensor(v)
    n = v.value.size

    def bw(g):
        _acc(v, np.full_like(v.value, g / n))

    return _node(np.asarray(v.value.mean()), (v,), bw)


def weighted_sum(v, w: np.ndarray) -> Tensor:
    """Σ w_i v_i with ``w`` treated as a constant."""
    v = as_tensor(v)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != v.shape:
        raise DimensionError(f"weights {w.shape} vs values {v.shape}")

    def bw(g):
        _acc(v, g * w)

    return _node(np.asarray((v.value * w).sum()), (v,), bw)


def rowwise_dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot: {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g[:, None] * b.value)
        _acc(b, g[:, None] * a.value)

    return _node((a.value * b.value).sum(axis=1), (a, b), bw)


def one_minus(v) -> Tensor:
    v = as_tensor(v)

    def bw(g):
        _acc(v, -g)

    return _node(1.0 - v.value, (v,), bw)


def select_rows(x, mask: np.ndarray) -> Tensor:
    x = as_tensor(x)
    idx = np.flatnonzero(mask)

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _node(x.value[idx], (x,), bw)


# -------------------------------------------------------------- softmax


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Per-row −log softmax(logits)[label]; returns a length-B vector."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError("one label per row expected")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError("label out of range")
    logp = log_softmax_rows(logits.value)
    rows = np.arange(B)
    out = -logp[rows, labels]

    def bw(g):
        if not logits.requires_grad:
            return
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits.grad += d * g[:, None]

    return _node(out, (logits,), bw)


def angular_margin(cos, labels: np.ndarray, m: float, delta: float = ARCCOS_CLAMP) -> Tensor:
    """Replace each row's target entry c with cos(arccos(c) + m).

    Target entries are clamped to [-1+delta, 1-delta] before arccos. Where
    arccos(c) + m would pass pi the target becomes c - (1 - cos m) instead:
    continuous at the switch and still decreasing with the angle (otherwise
    pushing every embedding antipodal to all prototypes lowers the loss).
    With m == 0 the input is returned untouched.
    """
    cos = as_tensor(cos)
    if m == 0.0:
        return cos
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(cos.shape[0])
    c = cos.value[rows, labels]
    cc = np.clip(c, -1.0 + delta, 1.0 - delta)
    theta = np.arccos(cc)
    wrapped = theta + m >= np.pi
    out = cos.value.copy()
    out[rows, labels] = np.where(wrapped, c - (1.0 - np.cos(m)), np.cos(theta + m))
    inside = (c > -1.0 + delta) & (c < 1.0 - delta)
    dtarget = np.where(wrapped, 1.0,
                       np.where(inside, np.sin(theta + m) / np.sqrt(1.0 - cc * cc), 0.0))

    def bw(g):
        if not cos.requires_grad:
            return
        gg = g.copy()
        gg[rows, labels] = g[rows, labels] * dtarget
        cos.grad += gg

    return _node(out, (cos,), bw)


# ---------------------------------------------------------- grad check


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], theta: Mapping[str, np.ndarray],
               eps: float = 1e-5, names: Iterable[str] | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` maps a dict of leaf tensors to a scalar tensor. Arrays in ``theta``
    are perturbed in place and restored. ``f`` must not mutate state that
    changes its value between calls (use infer-mode batch norm or fresh
    moment buffers).
    """
    names = list(theta) if names is None else list(names)
    leaves = {k: Tensor(v, requires_grad=k in names) for k, v in theta.items()}
    loss = f(leaves)
    if not np.all(np.isfinite(loss.value)):
        raise EvaluationError("loss is not finite at theta")
    backward(loss)

    def value() -> float:
        out = f({k: Tensor(v) for k, v in theta.items()}).value
        if not np.all(np.isfinite(out)):
            raise EvaluationError("loss is not finite at a perturbed point")
        return float(out)

    worst = 0.0
    for k in names:
        arr = theta[k]
        flat = arr.reshape(-1)
        analytic = leaves[k].grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
