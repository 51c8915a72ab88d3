"""Dense tensors with reverse-mode autodiff, Adam, and a gradient checker.

Deliberately minimal: just the operations a compact encoder-decoder needs
(matmul, elementwise arithmetic, softmax, layer norm, embedding gathers,
dropout, cross-entropy). Data lives in numpy arrays, float32 by default;
float64 is honored so the gradient checker can run at high precision.
Every op is deterministic given its inputs; randomness enters only through
explicitly keyed generators (see ``keyed_rng``).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward data still computed)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-style generator: the same integer key always yields the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(tuple(int(k) for k in key))))


def _as_float_array(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


class Tensor:
    """A numpy array plus the tape hooks reverse-mode autodiff needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- basic ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    data = a.data * s

    def bwd(g):
        _accum(a, g * s)

    return _make(data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), bwd)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    data = np.transpose(a.data, axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(data, (a,), bwd)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(data, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.data > 0
    data = np.where(keep, a.data, 0.0)

    def bwd(g):
        _accum(a, g * keep)

    return _make(data, (a,), bwd)


# ------------------------------------------------------------ neural-net ops


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stochastic along ``axis``: rows sum to 1, entries in [0, 1]."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * data)

    return _make(data, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm affine shape mismatch: {gamma.shape}/{beta.shape} vs {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    data = xhat * gamma.data + beta.data

    def bwd(g):
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (ghat - m1 - xhat * m2) / sigma)
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))

    return _make(data, (x, gamma, beta), bwd)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Look up rows of a (v, d) table with an integer id array of any shape."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"gather_rows: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        _accum(table, dt)

    return _make(data, (table,), bwd)


def gather_positions(x, idx: np.ndarray) -> Tensor:
    """Per-row gather: x is (B, N, d), idx is (B, T); returns (B, T, d)."""
    x = _wrap(x)
    idx = np.asarray(idx)
    rows = np.arange(x.shape[0])[:, None]
    data = x.data[rows, idx]

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, idx), g)
        _accum(x, dx)

    return _make(data, (x,), bwd)


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``p=0`` is the identity (eval mode)."""
    x = _wrap(x)
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {p}")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * mask

    def bwd(g):
        _accum(x, g * mask)

    return _make(data, (x,), bwd)


def cross_entropy(logits, target_ids: np.ndarray, ignore_id: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id.

    ``logits`` has shape (..., V), ``target_ids`` the matching (...) int shape.
    Returns 0 when every position is ignored.
    """
    logits = _wrap(logits)
    tgt = np.asarray(target_ids)
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy shape mismatch: logits {logits.shape} vs targets {tgt.shape}")
    keep = tgt != ignore_id
    count = int(keep.sum())
    safe_tgt = np.where(keep, tgt, 0)

    m = logits.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logits.data, safe_tgt[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    value = nll[keep].mean() if count else np.array(0.0, dtype=logits.data.dtype)

    def bwd(g):
        if count == 0:
            return
        p = np.exp(logits.data - lse)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_tgt[..., None], 1.0, axis=-1)
        d = (p - onehot) * keep[..., None]
        _accum(logits, d * (g / count))

    return _make(np.asarray(value), (logits,), bwd)


def assert_finite(x: Tensor | np.ndarray, what: str) -> None:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Resets gradients of every node in the loss's graph first, so calling
    twice on the same graph yields identical results. When ``params`` is
    given, returns the gradient map for exactly the parameters the loss
    reaches; unreached parameters are absent.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")

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
        for p in node._parents:
            stack.append((p, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is None:
        return {}
    return {name: p.grad for name, p in params.items() if id(p) in seen and p.grad is not None}


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Standard Adam update with bias correction; mutates params and state.

    Parameters first seen in ``grads`` get fresh zero moments. A parameter
    already tracked by the state but missing from ``grads`` is an error.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    missing = [k for k in state.m if k not in grads]
    if missing:
        raise ValueError(f"adam_step: no gradient for tracked parameters {sorted(missing)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    """Per-parameter relative error between analytic and finite-difference grads."""

    rel_errors: dict[str, float]
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(closure: Callable[[], Tensor], params: Mapping[str, Tensor],
               tolerance: float = 1e-3, h: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The closure must be deterministic (dropout off); it is evaluated twice
    up front and rejected if the two values differ. Both sides run in
    float64 so the check measures the backward implementation, not float32
    rounding. Error per parameter is ||ga - gfd|| / max(||ga||, ||gfd||, 1e-8).
    """
    if not params:
        return GradCheckReport({}, 0.0, tolerance, True)

    v1 = float(closure().data)
    v2 = float(closure().data)
    if v1 != v2:
        raise ValueError("grad_check: closure is nondeterministic (disable dropout)")

    saved = {name: p.data for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
        loss = closure()
        analytic = backward(loss, params)

        rel_errors: dict[str, float] = {}
        for name, p in params.items():
            ga = analytic.get(name)
            if ga is None:
                continue
            gfd = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = gfd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(closure().data)
                flat[i] = orig - h
                down = float(closure().data)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            na, nf = np.linalg.norm(ga), np.linalg.norm(gfd)
            rel_errors[name] = float(np.linalg.norm(ga - gfd) / max(na, nf, 1e-8))
    finally:
        for name, p in params.items():
            p.data = saved[name]

    max_err = max(rel_errors.values()) if rel_errors else 0.0
    return GradCheckReport(rel_errors, max_err, tolerance, max_err < tolerance)
