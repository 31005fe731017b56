"""Differentiable kernels: spectral convolutions, adaptive branch fusion,
activations, loss, dropout and Adam, with exact reverse-mode gradients.

This is a deliberately small tape, not a general autodiff framework: every
operation the branch networks need is listed here, each records a backward
closure, and ``backward`` replays them in reverse topological order. All
values are 2-D numpy arrays; graph propagation matrices and input features
enter as constants (no gradient flows into them), parameters are Tensor2
leaves with ``requires_grad=True``.

Training runs in float32; gradient checking builds float64 graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every op output (slow; for debugging/tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class ShapeError(ValueError):
    """Operand shapes do not chain."""


class Tensor2:
    """2-D value node: numpy array, optional gradient, backward closure."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2 must be 2-D, got shape {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor2", ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(values: np.ndarray, parents: tuple[Tensor2, ...], backward) -> Tensor2:
    if _CHECK_FINITE and not np.isfinite(values).all():
        raise FloatingPointError("non-finite values in op output")
    out = Tensor2(values, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def backward(root: Tensor2, seed: np.ndarray | None = None) -> None:
    """Reverse-mode sweep from ``root``; gradients accumulate on the path."""
    topo: list[Tensor2] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor2, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.values) if seed is None else np.asarray(seed)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = _node(a.values @ b.values, (a, b), None)

    def back():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.values.T)
        if b.requires_grad:
            b.accumulate_grad(a.values.T @ g)

    out._backward = back
    return out


def const_matmul(x_const, t: Tensor2) -> Tensor2:
    """``x @ t`` where x is a constant dense or sparse matrix (no grad to x)."""
    if x_const.shape[1] != t.rows:
        raise ShapeError(f"const_matmul {x_const.shape} @ {t.shape}")
    out = _node(np.asarray(x_const @ t.values), (t,), None)

    def back():
        if t.requires_grad:
            t.accumulate_grad(np.asarray(x_const.T @ out.grad))

    out._backward = back
    return out


def propagate(p_const, t: Tensor2) -> Tensor2:
    """Multiply by a constant propagation operator (sparse or dense)."""
    mat = getattr(p_const, "entries", p_const)
    if mat.shape[1] != t.rows:
        raise ShapeError(f"propagate {mat.shape} @ {t.shape}")
    out = _node(np.asarray(mat @ t.values), (t,), None)

    def back():
        if t.requires_grad:
            t.accumulate_grad(np.asarray(mat.T @ out.grad))

    out._backward = back
    return out


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"add {a.shape} + {b.shape}")
    out = _node(a.values + b.values, (a, b), None)

    def back():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    out._backward = back
    return out


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ShapeError(f"sub {a.shape} - {b.shape}")
    out = _node(a.values - b.values, (a, b), None)

    def back():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    out._backward = back
    return out


def scale(t: Tensor2, c: float) -> Tensor2:
    out = _node(t.values * c, (t,), None)

    def back():
        if t.requires_grad:
            t.accumulate_grad(out.grad * c)

    out._backward = back
    return out


def tanh(t: Tensor2) -> Tensor2:
    out = _node(np.tanh(t.values), (t,), None)

    def back():
        if t.requires_grad:
            t.accumulate_grad(out.grad * (1.0 - out.values**2))

    out._backward = back
    return out


def elu(t: Tensor2) -> Tensor2:
    """ELU with alpha=1: x for x>0, exp(x)-1 otherwise."""
    x = t.values
    neg = x <= 0
    vals = np.where(neg, np.expm1(np.minimum(x, 0.0)), x)
    out = _node(vals, (t,), None)

    def back():
        if t.requires_grad:
            # d/dx = 1 for x>0, exp(x) = elu(x)+1 for x<=0
            t.accumulate_grad(out.grad * np.where(neg, out.values + 1.0, 1.0))

    out._backward = back
    return out


def dropout(t: Tensor2, rate: float, rng: np.random.Generator, training: bool) -> Tensor2:
    """Inverted dropout; identity (same object) when not training or rate=0."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = 1.0 - rate
    mask = (rng.random(t.shape) < keep).astype(t.values.dtype) / keep
    out = _node(t.values * mask, (t,), None)

    def back():
        if t.requires_grad:
            t.accumulate_grad(out.grad * mask)

    out._backward = back
    return out


def dropout_array(x, rate: float, rng: np.random.Generator, training: bool):
    """Inverted dropout on a constant feature matrix (dense or CSR)."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    if sp.issparse(x):
        x = x.tocsr(copy=True)
        mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
        x.data = x.data * mask
        return x
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask


def hstack(parts: Sequence[Tensor2]) -> Tensor2:
    if not parts:
        raise ShapeError("hstack of nothing")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError("hstack row mismatch")
    out = _node(np.concatenate([p.values for p in parts], axis=1), tuple(parts), None)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def back():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(out.grad[:, lo:hi])

    out._backward = back
    return out


def column(t: Tensor2, j: int) -> Tensor2:
    out = _node(t.values[:, j : j + 1].copy(), (t,), None)

    def back():
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.values)
            t.grad[:, j : j + 1] += out.grad

    out._backward = back
    return out


def mul_colvec(col: Tensor2, mat: Tensor2) -> Tensor2:
    """Row-wise scaling: (N,1) column broadcast-multiplied into (N,C)."""
    if col.cols != 1 or col.rows != mat.rows:
        raise ShapeError(f"mul_colvec {col.shape} * {mat.shape}")
    out = _node(col.values * mat.values, (col, mat), None)

    def back():
        g = out.grad
        if col.requires_grad:
            col.accumulate_grad((g * mat.values).sum(axis=1, keepdims=True))
        if mat.requires_grad:
            mat.accumulate_grad(g * col.values)

    out._backward = back
    return out


def row_softmax(t: Tensor2) -> Tensor2:
    z = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _node(s, (t,), None)

    def back():
        if t.requires_grad:
            g = out.grad
            t.accumulate_grad(s * (g - (g * s).sum(axis=1, keepdims=True)))

    out._backward = back
    return out


def branch_max(parts: Sequence[Tensor2]) -> Tensor2:
    """Elementwise max over branches; ties keep the lowest branch index."""
    if not parts:
        raise ShapeError("branch_max of nothing")
    stackv = np.stack([p.values for p in parts], axis=0)
    argmax = np.argmax(stackv, axis=0)  # first max wins ties
    out = _node(np.take_along_axis(stackv, argmax[None], axis=0)[0], tuple(parts), None)

    def back():
        for b, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate_grad(out.grad * (argmax == b))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# layers


def gcn_layer_forward(prop, h: Tensor2, theta: Tensor2) -> Tensor2:
    """First-order spectral convolution: propagation @ h @ theta."""
    return propagate(prop, matmul(h, theta))


def cheb_layer_forward(lap, h: Tensor2, thetas: Sequence[Tensor2]) -> Tensor2:
    """Chebyshev polynomial filter of order K = len(thetas) - 1.

    Terms follow the standard recursion z_0 = h, z_1 = L h,
    z_k = 2 L z_{k-1} - z_{k-2}; the output is sum_k z_k @ theta_k.
    """
    if len(thetas) < 2:
        raise ShapeError("chebyshev filter needs K >= 1 (at least two parameter matrices)")
    z_prev = h
    z_cur = propagate(lap, h)
    out = add(matmul(z_prev, thetas[0]), matmul(z_cur, thetas[1]))
    for k in range(2, len(thetas)):
        z_next = sub(scale(propagate(lap, z_cur), 2.0), z_prev)
        out = add(out, matmul(z_next, thetas[k]))
        z_prev, z_cur = z_cur, z_next
    return out


@dataclass
class AwcParams:
    """Shared score vector of the adaptive fusion layer, one entry per class."""

    alpha: Tensor2

    @staticmethod
    def create(c: int, rng: np.random.Generator | None = None, dtype=np.float32) -> "AwcParams":
        if rng is None:
            vec = np.zeros((c, 1), dtype=dtype)
        else:
            limit = math.sqrt(6.0 / (c + 1))
            vec = rng.uniform(-limit, limit, size=(c, 1)).astype(dtype)
        return AwcParams(Tensor2(vec, requires_grad=True))


def awc_forward(branch_outputs: Sequence[Tensor2], params: AwcParams) -> tuple[Tensor2, Tensor2]:
    """Adaptive fusion: per-node softmax over tanh(H_b @ alpha) branch scores.

    Returns (fused output N x C, branch weights N x k). Weight rows sum to 1;
    the fused row is the weighted combination of the branch rows.
    """
    if not branch_outputs:
        raise ShapeError("awc needs at least one branch")
    shape = branch_outputs[0].shape
    for b in branch_outputs:
        if b.shape != shape:
            raise ShapeError("awc branch shapes differ")
    if params.alpha.shape != (shape[1], 1):
        raise ShapeError(
            f"alpha shape {params.alpha.shape} does not match branch width {shape[1]}"
        )
    scores = hstack([tanh(matmul(b, params.alpha)) for b in branch_outputs])
    weights = row_softmax(scores)
    fused = mul_colvec(column(weights, 0), branch_outputs[0])
    for b in range(1, len(branch_outputs)):
        fused = add(fused, mul_colvec(column(weights, b), branch_outputs[b]))
    return fused, weights


def masked_softmax_xent(logits: Tensor2, labels: np.ndarray, mask: np.ndarray) -> Tensor2:
    """Mean cross-entropy of softmax(logits) on the masked nodes (scalar node)."""
    labels = np.asarray(labels)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(int)
    if idx.size == 0:
        raise ValueError("loss mask selects no nodes")
    z = logits.values[idx]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = z[np.arange(idx.size), labels[idx]]
    loss = float(np.mean(lse.ravel() - picked))
    out = _node(np.array([[loss]], dtype=logits.values.dtype), (logits,), None)

    def back():
        if logits.requires_grad:
            g = float(out.grad[0, 0])
            softm = np.exp(z - lse)
            softm[np.arange(idx.size), labels[idx]] -= 1.0
            full = np.zeros_like(logits.values)
            full[idx] = softm * (g / idx.size)
            logits.accumulate_grad(full)

    out._backward = back
    return out


def l2_penalty(params: Sequence[Tensor2], weight: float) -> Tensor2:
    """weight * sum of squared entries over the given parameter matrices."""
    params = list(params)
    if not params:
        raise ValueError("l2_penalty over empty parameter list")
    total = weight * math.fsum(float(np.sum(p.values.astype(np.float64) ** 2)) for p in params)
    out = _node(np.array([[total]], dtype=params[0].values.dtype), tuple(params), None)

    def back():
        g = float(out.grad[0, 0])
        for p in params:
            if p.requires_grad:
                p.accumulate_grad((2.0 * weight * g) * p.values)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# optimization and checking


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @staticmethod
    def init(params: Sequence[Tensor2]) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p.values) for p in params],
            v=[np.zeros_like(p.values) for p in params],
        )


def adam_step(
    params: Sequence[Tensor2],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * (g * g)
        m_hat = state.m[i] / (1 - beta1**t)
        v_hat = state.v[i] / (1 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(fn: Callable[[], Tensor2], inputs: Sequence[Tensor2], epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``fn`` must rebuild the forward graph from the current input values and
    return a scalar Tensor2. Inputs should be float64 for meaningful bounds.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.values)
        for t in inputs
        if t.requires_grad
    ]
    checked = [t for t in inputs if t.requires_grad]
    worst = 0.0
    for t, ana in zip(checked, analytic):
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = ana.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
