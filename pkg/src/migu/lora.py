"""Low-rank adapters over a frozen linear layer, with magnitude masks.

``x_A = x @ A``, ``x_B = x_A @ B`` and ``x_O = x @ W + (alpha / r) * x_B``.
Under MIGU, A's columns are ranked by ``|x_A|`` and B's columns by the full
layer output ``|x_O|`` (not by ``|x_B|``).
"""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError
from .masking import GradMask, MagnitudeCache, binary_top_t, cache_magnitudes
from .numerics import Layer, Linear, Param


class LoraAdapter:
    def __init__(self, d_in, d_out, r=8, alpha=32.0, rng=None, dtype=np.float32, name="lora",
                 dropout=0.0, init_std=0.02):
        if not 1 <= r <= min(d_in, d_out):
            raise ConfigError(f"rank r={r} must lie in [1, min(d_in, d_out)={min(d_in, d_out)}]")
        self.d_in, self.d_out, self.r = d_in, d_out, r
        self.alpha = float(alpha)
        self.dropout = dropout
        self.name = name
        A = np.zeros((d_in, r), dtype=dtype) if rng is None else \
            (rng.standard_normal((d_in, r)) * init_std).astype(dtype)
        self.A = Param(f"{name}.A", A)
        self.B = Param(f"{name}.B", np.zeros((r, d_out), dtype=dtype))
        self.cache_A: MagnitudeCache | None = None
        self.cache_O: MagnitudeCache | None = None

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def params(self):
        return [self.A, self.B]

    def freeze(self):
        self.A.trainable = False
        self.B.trainable = False


def lora_forward(x, W, adapter: LoraAdapter, step=0):
    """Bias-free adapted output for a 2-D batch; fills the adapter's caches.

    Returns (x_O, x_A).
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != W.shape[0] or W.shape != (adapter.d_in, adapter.d_out):
        raise ShapeError(f"x {x.shape}, W {W.shape} and adapter ({adapter.d_in}x{adapter.d_out}) disagree")
    xa = x @ adapter.A.value
    xb = xa @ adapter.B.value
    xo = x @ W + adapter.scale * xb
    adapter.cache_A = cache_magnitudes(xa, "per-batch", step)
    adapter.cache_O = cache_magnitudes(xo, "per-batch", step)
    return xo, xa


def lora_backward(adapter: LoraAdapter, x, xa, dY):
    """Gradients of the adapter factors; the base weight gets none."""
    if x is None or xa is None:
        raise StateError(f"{adapter.name}: backward needs cached x and x_A")
    g = adapter.scale * np.asarray(dY)
    dB = xa.T @ g
    dA = x.T @ (g @ adapter.B.value.T)
    return dA, dB


def lora_migu_masks(adapter: LoraAdapter, T: float, step=None):
    """(mask over A's r columns, mask over B's d_out columns)."""
    for c in (adapter.cache_A, adapter.cache_O):
        if c is None:
            raise StateError(f"{adapter.name}: magnitude caches are missing")
        if step is not None and c.freshness != step:
            raise StateError(f"{adapter.name}: cache from step {c.freshness} is stale at step {step}")
    return (binary_top_t(adapter.cache_A.n, T, adapter.cache_A.freshness),
            binary_top_t(adapter.cache_O.n, T, adapter.cache_O.freshness))


class LoraLinear(Layer):
    """A frozen base Linear plus a stack of adapters; only the last one trains.

    Previously added adapters are frozen but keep contributing to the output.
    """

    def __init__(self, base: Linear):
        self.base = base
        self.name = base.name
        self.d_in, self.d_out = base.d_in, base.d_out
        self.adapters: list[LoraAdapter] = []
        self.training = False
        self.rng = None
        self.clock = lambda: 0
        self.migu = False
        self.instrument = None
        for p in base.params():
            p.trainable = False

    @property
    def active(self) -> LoraAdapter | None:
        return self.adapters[-1] if self.adapters else None

    def add_adapter(self, r=8, alpha=32.0, rng=None, dropout=0.0, init_std=0.02):
        for a in self.adapters:
            a.freeze()
        p = self.base.W.value
        a = LoraAdapter(self.d_in, self.d_out, r, alpha, rng, p.dtype,
                        name=f"{self.name}.lora{len(self.adapters)}", dropout=dropout, init_std=init_std)
        self.adapters.append(a)
        return a

    def params(self):
        out = list(self.base.params())
        for a in self.adapters:
            out.extend(a.params())
        return out

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.name}: input {x.shape} does not end in d_in={self.d_in}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.d_in)
        xo = x2 @ self.base.W.value
        per = []
        for a in self.adapters:
            xa = x2 @ a.A.value
            drop = None
            if self.training and a.dropout > 0 and a is self.active and self.rng is not None:
                drop = (self.rng.random(xa.shape) >= a.dropout).astype(xa.dtype) / (1 - a.dropout)
            xa_used = xa if drop is None else xa * drop
            xo = xo + a.scale * (xa_used @ a.B.value)
            per.append((xa, xa_used, drop))
        act = self.active
        if self.migu and act is not None:
            step = self.clock()
            act.cache_A = cache_magnitudes(per[-1][0], "per-batch", step)
            act.cache_O = cache_magnitudes(xo, "per-batch", step)
        if self.instrument is not None:
            self.instrument.record(xo, lead)
        self._cache = (x2, per)
        y = xo if self.base.b is None else xo + self.base.b.value
        return y.reshape(*lead, self.d_out)

    def backward(self, dy):
        x2, per = self._need_cache()
        dy2 = dy.reshape(-1, self.d_out)
        base = self.base
        if base.W.trainable:
            base.W.accumulate(x2.T @ dy2)
        if base.b is not None and base.b.trainable:
            base.b.accumulate(dy2.sum(axis=0))
        dx = dy2 @ base.W.value.T
        for a, (xa, xa_used, drop) in zip(self.adapters, per):
            g = a.scale * dy2
            dxa = g @ a.B.value.T
            if drop is not None:
                dxa = dxa * drop
            if a.B.trainable:
                a.B.accumulate(xa_used.T @ g)
            if a.A.trainable:
                a.A.accumulate(x2.T @ dxa)
            dx = dx + dxa @ a.A.value.T
        return dx.reshape(*dy.shape[:-1], self.d_in)

    def masks(self, T: float, step: int) -> tuple[GradMask, GradMask]:
        return lora_migu_masks(self.active, T, step)
