"""Dense arithmetic, layers with hand-written backward passes, optimizers and
a central-difference gradient oracle.

Matrices are plain numpy arrays. Training runs in float32; tests and the
gradient oracle run the same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import NumericError, ShapeError, StateError

_GELU_C = float(np.sqrt(2.0 / np.pi))


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


class Param:
    """A named trainable array with its accumulated gradient."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = None
        self.trainable = trainable

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Layer:
    """Base for layers with a forward cache and an analytic backward."""

    _cache = None

    def params(self) -> list[Param]:
        return []

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward cache")
        return self._cache


class Linear(Layer):
    """y = x @ W + b with W of shape (d_in, d_out).

    Columns of ``W`` are the per-output weight vectors. When ``instrument`` is
    set, the pre-bias products ``x @ W`` are handed to ``instrument.record``
    before the bias is added.
    """

    def __init__(self, d_in, d_out, rng=None, dtype=np.float32, name="linear", std=None, bias=True):
        self.d_in = d_in
        self.d_out = d_out
        self.name = name
        if rng is None:
            W = np.zeros((d_in, d_out), dtype=dtype)
        else:
            std = (1.0 / np.sqrt(d_in)) if std is None else std
            W = (rng.standard_normal((d_in, d_out)) * std).astype(dtype)
        self.W = Param(f"{name}.W", W)
        self.b = Param(f"{name}.b", np.zeros(d_out, dtype=dtype)) if bias else None
        self.instrument = None

    def params(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: input {x.shape} does not end in d_in={self.d_in}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.d_in)
        h = x2 @ self.W.value
        if self.instrument is not None:
            self.instrument.record(h, lead)
        y = h if self.b is None else h + self.b.value
        self._cache = x2
        return y.reshape(*lead, self.d_out)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._need_cache()
        dy2 = dy.reshape(-1, self.d_out)
        if dy2.shape[0] != x2.shape[0]:
            raise ShapeError(f"{self.name}: dY {dy.shape} does not match forward output")
        if self.W.trainable:
            self.W.accumulate(x2.T @ dy2)
        if self.b is not None and self.b.trainable:
            self.b.accumulate(dy2.sum(axis=0))
        dx = dy2 @ self.W.value.T
        return dx.reshape(*dy.shape[:-1], self.d_in)


class ReLU(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype)

    def backward(self, dy):
        return np.where(self._need_cache(), dy, 0).astype(dy.dtype)


class GeLU(Layer):
    """tanh approximation of GeLU."""

    def forward(self, x):
        u = _GELU_C * (x + 0.044715 * (x * x * x))
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy):
        x, t = self._need_cache()
        du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return (dy * d).astype(dy.dtype)


class SiLU(Layer):
    def forward(self, x):
        s = 1.0 / (1.0 + np.exp(-x))
        self._cache = (x, s)
        return x * s

    def backward(self, dy):
        x, s = self._need_cache()
        return dy * (s * (1.0 + x * (1.0 - s)))


class LayerNorm(Layer):
    def __init__(self, d, dtype=np.float32, name="ln", eps=1e-5):
        self.d = d
        self.eps = eps
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(d, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(d, dtype=dtype))

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ShapeError(f"{self.name}: input {x.shape} does not end in {self.d}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        self._cache = (xhat, rstd)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, rstd = self._need_cache()
        flat = dy.reshape(-1, self.d)
        if self.gamma.trainable:
            self.gamma.accumulate((flat * xhat.reshape(-1, self.d)).sum(axis=0))
        if self.beta.trainable:
            self.beta.accumulate(flat.sum(axis=0))
        g = dy * self.gamma.value
        mean_g = g.mean(axis=-1, keepdims=True)
        mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
        return rstd * (g - mean_g - xhat * mean_gx)


class Embedding(Layer):
    def __init__(self, n, d, rng=None, dtype=np.float32, name="emb", std=0.02):
        self.n = n
        self.d = d
        self.name = name
        if rng is None:
            E = np.zeros((n, d), dtype=dtype)
        else:
            E = (rng.standard_normal((n, d)) * std).astype(dtype)
        self.E = Param(f"{name}.E", E)

    def params(self):
        return [self.E]

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            raise ShapeError(f"{self.name}: ids must lie in [0, {self.n}), got range "
                             f"[{ids.min()}, {ids.max()}]")
        self._cache = ids
        return self.E.value[ids]

    def backward(self, dy):
        ids = self._need_cache()
        if self.E.trainable:
            flat = ids.reshape(-1)
            order = np.argsort(flat, kind="stable")
            sorted_ids = flat[order]
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            g = np.zeros_like(self.E.value)
            g[sorted_ids[starts]] = np.add.reduceat(dy.reshape(-1, self.d)[order], starts, axis=0)
            self.E.accumulate(g)
        return None


class Attention(Layer):
    """Multi-head scaled dot-product attention over already-projected q, k, v.

    Inputs are (batch, seq, d_model); heads are split internally.
    """

    def __init__(self, n_heads):
        self.n_heads = n_heads

    def _split(self, x):
        B, S, D = x.shape
        return x.reshape(B, S, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(x):
        B, H, S, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)

    def forward(self, q, k, v):
        if not (q.shape == k.shape == v.shape) or q.ndim != 3:
            raise ShapeError(f"attention expects equal (B, S, D) inputs, got {q.shape}, {k.shape}, {v.shape}")
        if q.shape[-1] % self.n_heads:
            raise ShapeError(f"d_model={q.shape[-1]} not divisible by n_heads={self.n_heads}")
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / float(np.sqrt(qh.shape[-1]))
        s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        self._cache = (qh, kh, vh, p, scale)
        return self._merge(p @ vh)

    def backward(self, dy):
        qh, kh, vh, p, scale = self._need_cache()
        do = self._split(dy)
        dv = p.transpose(0, 1, 3, 2) @ do
        dp = do @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ kh) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ qh) * scale
        return self._merge(dq), self._merge(dk), self._merge(dv)


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch. Returns (loss, dlogits)."""
    logits = np.asarray(logits)
    y = np.asarray(y)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {y.shape} do not agree")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ShapeError(f"labels must lie in [0, {logits.shape[1]})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return float(loss), (d / n).astype(logits.dtype)


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimState:
    """AdamW moments and step count for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def like(cls, param: np.ndarray, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def _check_grad(param, grad):
    if param.shape != grad.shape:
        raise ShapeError(f"parameter {param.shape} and gradient {grad.shape} differ")
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))[0]
        raise NumericError(f"non-finite gradient entry at index {tuple(int(i) for i in bad)}")


def adamw_step(state: OptimState, param: np.ndarray, grad: np.ndarray, keep=None,
               decay_masked: bool = False) -> np.ndarray:
    """One AdamW update with bias correction and decoupled weight decay.

    ``keep`` is an optional boolean vector over the last axis of ``param``.
    Columns where it is False keep their value and moments untouched
    (unless ``decay_masked``, which still applies weight decay to them).
    Updates ``state`` in place and returns the new parameter array.
    """
    _check_grad(param, grad)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * (grad * grad)
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    decayed = param * (1 - state.lr * state.weight_decay) if state.weight_decay else param
    new = decayed - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if keep is None:
        state.m, state.v = m, v
    else:
        keep = np.asarray(keep, dtype=bool)
        state.m = np.where(keep, m, state.m)
        state.v = np.where(keep, v, state.v)
        new = np.where(keep, new, decayed if decay_masked else param)
    state.step = t
    return new.astype(param.dtype, copy=False)


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, keep=None) -> np.ndarray:
    """Plain W - lr * M * grad, with M broadcast from the column keep vector."""
    _check_grad(param, grad)
    new = param - lr * grad
    if keep is not None:
        new = np.where(np.asarray(keep, dtype=bool), new, param)
    return new.astype(param.dtype, copy=False)


class AdamW:
    """Per-parameter AdamW state keyed by parameter name."""

    kind = "adamw"

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, decay_masked=False):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_masked = decay_masked
        self.states: dict[str, OptimState] = {}

    def state_for(self, p: Param) -> OptimState:
        st = self.states.get(p.name)
        if st is None:
            st = OptimState.like(p.value, lr=self.lr, beta1=self.betas[0], beta2=self.betas[1],
                                 eps=self.eps, weight_decay=self.weight_decay)
            self.states[p.name] = st
        return st

    def update(self, p: Param, keep=None) -> None:
        p.value = adamw_step(self.state_for(p), p.value, p.grad, keep, self.decay_masked)


class SGD:
    kind = "sgd"

    def __init__(self, lr=0.1):
        self.lr = lr
        self.states: dict[str, OptimState] = {}

    def update(self, p: Param, keep=None) -> None:
        p.value = sgd_step(p.value, p.grad, self.lr, keep)


# ---------------------------------------------------------------- gradient oracle

def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], param: np.ndarray, eps: float = 1e-3,
                     entries=None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``param`` in float64.

    ``loss_fn`` receives a perturbed float64 copy. When ``entries`` (a list of
    index tuples) is given only those entries are estimated; the rest stay 0.
    """
    theta = np.array(param, dtype=np.float64)
    grad = np.zeros_like(theta)
    idxs = np.ndindex(theta.shape) if entries is None else entries
    for idx in idxs:
        idx = tuple(idx)
        orig = theta[idx]
        theta[idx] = orig + eps
        fp = float(loss_fn(theta))
        theta[idx] = orig - eps
        fm = float(loss_fn(theta))
        theta[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"loss is not finite when perturbing index {idx}")
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class GradOracleReport:
    errors: dict = field(default_factory=dict)
    eps: float = 1e-3
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def check_gradients(loss_fn, params: dict, analytic: dict, eps=1e-3, tol=1e-4, entries=None) -> GradOracleReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(name, value)`` must evaluate the loss with parameter ``name``
    replaced by ``value``. ``entries`` optionally maps names to index lists.
    """
    report = GradOracleReport(eps=eps, tol=tol)
    for name, value in params.items():
        sel = None if entries is None else entries.get(name)
        num = finite_diff_grad(lambda th, _n=name: loss_fn(_n, th), value, eps, sel)
        a = np.asarray(analytic[name], dtype=np.float64)
        if sel is not None:
            ix = tuple(np.array(sel).T)
            report.errors[name] = relative_error(a[ix], num[ix])
        else:
            report.errors[name] = relative_error(a, num)
    return report
