"""Minimal reverse-mode tensor core for the tabular transformer.

Every op takes :class:`Tensor` (or array-like) inputs and returns a new
``Tensor`` that remembers its parents and a closure mapping the output
gradient to parent gradients.  :func:`backward` walks the recorded graph in
reverse topological order.

Ops broadcast over leading "batch" dimensions.  Matrix products against a
2-D weight are evaluated as a stack of per-sample products, so a sample's
forward result does not depend on which batch it was evaluated in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, _parents=parents, _backward=backward_fn)
    return Tensor(value)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy stacking semantics over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            if b.value.ndim == 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not train or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.value * mask, (x,), lambda g: (g * mask,))


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = gain.value * xhat + shift.value

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _node(out, (x, gain, shift), back)


def softmax_rows(m) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    m = as_tensor(m)
    y = m.value - m.value.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def back(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _node(y, (m,), back)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    n = diff.size

    def back(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return _node(np.mean(diff * diff), (pred, target), back)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear_forward(W, b, X) -> Tensor:
    """``X @ W + b`` with ``b`` broadcast over rows."""
    W, b, X = as_tensor(W), as_tensor(b), as_tensor(X)
    if W.value.ndim != 2 or X.shape[-1] != W.shape[0] or b.shape[-1] != W.shape[1]:
        raise ValueError(f"linear shape mismatch: X {X.shape}, W {W.shape}, b {b.shape}")
    return add(matmul(X, W), b)


def scaled_dot_attention(Q, K, V) -> tuple[Tensor, Tensor]:
    """Return ``(softmax(Q K^T / sqrt(d_k)) V, weights)``.

    Fused into one graph node so the (n x n) score matrix is only touched by
    in-place passes.  ``weights`` is returned detached.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    c = 1.0 / np.sqrt(Q.shape[-1])
    Kt = np.swapaxes(K.value, -1, -2)
    P = np.matmul(Q.value * c, Kt)
    P -= P.max(axis=-1, keepdims=True)
    np.exp(P, out=P)
    P /= P.sum(axis=-1, keepdims=True)
    out = np.matmul(P, V.value)

    def back(g):
        dS = np.matmul(g, np.swapaxes(V.value, -1, -2))
        dS -= (dS * P).sum(axis=-1, keepdims=True)
        dS *= P
        gq = _unbroadcast(np.matmul(dS, K.value) * c, Q.shape) if Q.requires_grad else None
        gk = _unbroadcast(np.matmul(np.swapaxes(dS, -1, -2), Q.value) * c, K.shape) if K.requires_grad else None
        gv = _unbroadcast(np.matmul(np.swapaxes(P, -1, -2), g), V.shape) if V.requires_grad else None
        return gq, gk, gv

    return _node(out, (Q, K, V), back), Tensor(P)


@dataclass
class AttentionParams:
    """Multi-head projections.

    ``w_q``, ``w_k`` and ``w_v`` are ``d_model x (n_heads * d_head)``: head
    ``i`` uses columns ``i*d_head:(i+1)*d_head``.  ``w_o`` maps the
    concatenated head outputs back to ``d_model``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.w_q.shape[1] % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide projection width {self.w_q.shape[1]}")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != w_q shape {self.w_q.shape}")
        if self.w_o.shape != (self.w_q.shape[1], d_model):
            raise ValueError(f"w_o shape {self.w_o.shape} != {(self.w_q.shape[1], d_model)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.n_heads


def multi_head_attention(params: AttentionParams, tokens, trace: list | None = None) -> Tensor:
    """Self-attention over the token axis (second to last) of ``tokens``."""
    x = as_tensor(tokens)
    if x.shape[-1] != params.d_model:
        raise ValueError(f"token width {x.shape[-1]} != d_model {params.d_model}")
    lead, n = x.shape[:-2], x.shape[-2]
    h, dh = params.n_heads, params.d_head

    def split(t):  # (..., n, h*dh) -> (..., h, n, dh)
        return swapaxes(reshape(t, lead + (n, h, dh)), -3, -2)

    q = split(matmul(x, params.w_q))
    k = split(matmul(x, params.w_k))
    v = split(matmul(x, params.w_v))
    out, weights = scaled_dot_attention(q, k, v)
    if trace is not None:
        trace.append(weights.value)
    merged = reshape(swapaxes(out, -3, -2), lead + (n, h * dh))
    return matmul(merged, params.w_o)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Returns the gradients of named leaves keyed by name.  Raises
    :class:`GraphError` if ``loss`` has no recorded graph or is not scalar.
    """
    if not isinstance(loss, Tensor) or loss.is_leaf or not loss.requires_grad:
        raise GraphError("backward called before a forward pass recorded a graph to differentiate")
    if loss.value.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    named = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return named


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {name!r} shape {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
