"""Magnitude caching, top-T gradient-column masks and masked updates.

A linear layer ``y = x @ W`` is viewed column-wise: column ``j`` of ``W``
produces the product ``h_j = x . w_j``. During the forward pass the mean
absolute product per column is cached; at update time only the columns with
the largest cached magnitudes receive gradient, the fraction ``T`` with the
smallest magnitudes stay frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError

ATTN_COMPONENTS = ("attn_q", "attn_k", "attn_v", "attn_o")
FFN_COMPONENTS = ("ffn_1", "ffn_2", "ffn_3")
LORA_COMPONENTS = ("lora_a", "lora_b")
ALL_COMPONENTS = ATTN_COMPONENTS + FFN_COMPONENTS + LORA_COMPONENTS

# Component-ablation presets (which block linears get masked).
PRESETS = {
    "ffn_first": ("ffn_1",),
    "ffn_all": ("ffn_1", "ffn_2", "ffn_3"),
    "attn_q": ("attn_q",),
    "attn_k": ("attn_k",),
    "attn_v": ("attn_v",),
    "attn_o": ("attn_o",),
    "attn_all": ATTN_COMPONENTS,
    "all": ATTN_COMPONENTS + FFN_COMPONENTS,
}

GRANULARITIES = ("per-batch", "per-sample")


@dataclass
class MagnitudeCache:
    n: np.ndarray
    token_count: int
    freshness: int = 0

    def normalized(self) -> np.ndarray:
        """n divided by its sum (all zeros stay zeros). Reporting only."""
        s = float(self.n.sum())
        return self.n / s if s > 0 else np.zeros_like(self.n)


@dataclass
class GradMask:
    keep: np.ndarray
    t: int
    freshness: int | None = None

    @property
    def d_out(self) -> int:
        return self.keep.shape[0]

    def matrix(self, d_in: int) -> np.ndarray:
        """The column-broadcast 0/1 matrix of shape (d_in, d_out)."""
        return np.broadcast_to(self.keep.astype(np.float64), (d_in, self.d_out))


@dataclass
class ClusterConfig:
    n_clusters: int
    strategy: str = "weight"
    probe_size: int = 64
    max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("weight", "co-magnitude"):
            raise ConfigError(f"cluster strategy must be 'weight' or 'co-magnitude', got {self.strategy!r}")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")


@dataclass
class MiguConfig:
    """Threshold ``T`` is the fraction of columns whose gradients are masked."""

    T: float = 0.7
    granularity: str = "per-batch"
    components: tuple = PRESETS["all"] + LORA_COMPONENTS
    report_normalize: bool = False
    cluster: ClusterConfig | None = None
    decay_masked: bool = False
    enabled: bool = True
    # the classifier head is outside the blocks and stays unmasked unless asked
    mask_head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.T <= 1.0:
            raise ConfigError(f"T must lie in [0, 1], got {self.T}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if isinstance(self.components, str):
            self.components = resolve_components(self.components)
        self.components = tuple(self.components)
        unknown = [c for c in self.components if c not in ALL_COMPONENTS]
        if unknown:
            raise ConfigError(f"unknown component(s) {unknown}; valid names: {list(ALL_COMPONENTS)}")
        if self.enabled and not self.components:
            raise ConfigError("component selector must be nonempty when instrumentation is enabled")


def resolve_components(spec) -> tuple:
    """Parse a preset name or comma-separated component list."""
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.split(",") if p.strip()]
    else:
        parts = list(spec)
    out = []
    for p in parts:
        for c in PRESETS.get(p, (p,)):
            if c not in ALL_COMPONENTS:
                raise ConfigError(f"unknown component {c!r}; valid names: {list(ALL_COMPONENTS)} "
                                  f"or presets {list(PRESETS)}")
            if c not in out:
                out.append(c)
    return tuple(out)


def cache_magnitudes(raw_outputs, granularity="per-batch", freshness=0):
    """Mean absolute pre-bias product per output column.

    ``raw_outputs`` is (tokens, d_out) or (samples, tokens, d_out). Per-batch
    mode returns one cache averaged over every token. Per-sample mode returns
    a list with one cache per sample (per row for 2-D input).
    """
    h = np.asarray(raw_outputs)
    if h.ndim not in (2, 3):
        raise ShapeError(f"raw outputs must be 2-D or 3-D, got shape {h.shape}")
    if h.shape[0] == 0 or (h.ndim == 3 and h.shape[1] == 0):
        raise StateError("cannot cache magnitudes of an empty batch")
    a = np.abs(h)
    if granularity == "per-batch":
        flat = a.reshape(-1, a.shape[-1])
        return MagnitudeCache(flat.mean(axis=0), flat.shape[0], freshness)
    if granularity == "per-sample":
        if a.ndim == 2:
            return [MagnitudeCache(row.copy(), 1, freshness) for row in a]
        return [MagnitudeCache(s.mean(axis=0), s.shape[0], freshness) for s in a]
    raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")


def n_masked(T: float, d_out: int) -> int:
    # the epsilon guards float products such as 0.7 * 10 = 6.999999999999999
    return min(d_out, int(np.floor(T * d_out + 1e-9)))


def binary_top_t(n, T: float, freshness=None) -> GradMask:
    """Keep the ``d_out - floor(T * d_out)`` largest entries of ``n``.

    Ties go to the lower index.
    """
    n = np.asarray(n)
    if n.ndim != 1:
        raise ShapeError(f"magnitude vector must be 1-D, got shape {n.shape}")
    if not 0.0 <= T <= 1.0:
        raise ConfigError(f"T must lie in [0, 1], got {T}")
    d = n.shape[0]
    t = n_masked(T, d)
    keep = np.zeros(d, dtype=bool)
    order = np.argsort(-n, kind="stable")
    keep[order[: d - t]] = True
    return GradMask(keep, t, freshness)


def cluster_mask(n, assignment, T: float, freshness=None) -> GradMask:
    """Keep whole clusters in order of mean magnitude within the column budget.

    Clusters are ranked by mean ``n`` over their members (ties: lowest member
    column first) and kept while they fit in ``d_out - floor(T * d_out)``
    columns. The top cluster is always kept when the budget is nonzero, so a
    single cluster is either fully kept or fully masked.
    """
    n = np.asarray(n)
    assignment = np.asarray(assignment)
    if assignment.shape != n.shape:
        raise ShapeError(f"assignment {assignment.shape} does not match magnitudes {n.shape}")
    d = n.shape[0]
    t = n_masked(T, d)
    budget = d - t
    ids = np.unique(assignment)
    scores = np.array([n[assignment == c].mean() for c in ids])
    first = np.array([np.flatnonzero(assignment == c)[0] for c in ids])
    order = np.lexsort((first, -scores))
    keep = np.zeros(d, dtype=bool)
    used = 0
    for rank, ci in enumerate(order):
        members = assignment == ids[ci]
        size = int(members.sum())
        if budget == 0 or (used + size > budget and rank > 0):
            break
        keep |= members
        used += size
    return GradMask(keep, d - int(keep.sum()), freshness)


def masked_update(layer, grad, mask: GradMask, optimizer, step: int, grad_b=None) -> None:
    """Apply one optimizer step to ``layer`` touching only kept columns.

    ``grad`` defaults to the layer's accumulated W gradient. The bias entry
    for column j follows column j's keep bit. Raises StateError if the mask
    was computed for a different step.
    """
    if mask.freshness is not None and mask.freshness != step:
        raise StateError(f"{getattr(layer, 'name', 'layer')}: mask from step {mask.freshness} "
                         f"used at step {step}")
    if grad is not None:
        layer.W.grad = grad
    if grad_b is not None and layer.b is not None:
        layer.b.grad = grad_b
    if mask.d_out != layer.W.value.shape[-1]:
        raise ShapeError(f"mask over {mask.d_out} columns for weight {layer.W.value.shape}")
    for p in layer.params():
        if p.trainable and p.grad is not None:
            optimizer.update(p, mask.keep)


class Instrument:
    """Per-layer magnitude recorder attached to a Linear via ``layer.instrument``.

    ``clock`` returns the current training step; caches are stamped with it.
    """

    def __init__(self, cfg: MiguConfig, clock, component=None, assignment=None):
        self.cfg = cfg
        self.clock = clock
        self.component = component
        self.assignment = assignment
        self.cache = None
        self.sample_caches = None

    def record(self, h, lead=None):
        step = self.clock()
        if self.cfg.granularity == "per-sample" and lead is not None and len(lead) >= 1:
            per = h.reshape(lead[0], -1, h.shape[-1])
            self.sample_caches = cache_magnitudes(per, "per-sample", step)
        else:
            self.sample_caches = None
        self.cache = cache_magnitudes(h, "per-batch", step)

    def mask(self, step: int, T: float | None = None) -> GradMask:
        if self.cache is None:
            raise StateError("no magnitude cache: forward pass has not run")
        if self.cache.freshness != step:
            raise StateError(f"magnitude cache from step {self.cache.freshness} is stale at step {step}")
        T = self.cfg.T if T is None else T
        if self.assignment is not None:
            return cluster_mask(self.cache.n, self.assignment, T, self.cache.freshness)
        return binary_top_t(self.cache.n, T, self.cache.freshness)


# ---------------------------------------------------------------- clustering

def kmeans(X, k: int, max_iters=100, seed=0, max_reseeds=10):
    """Lloyd's k-means with k-means++ seeding.

    Returns (labels, centroids). An empty cluster is re-seeded with the point
    farthest from its assigned centroid, at most ``max_reseeds`` times.
    """
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if not 1 <= k <= m:
        raise ConfigError(f"cluster count {k} must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    centroids = [X[rng.integers(m)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(m, p=d2 / total) if total > 0 else rng.integers(m)
        centroids.append(X[idx])
    C = np.array(centroids)
    labels = np.full(m, -1)
    reseeds = 0
    for _ in range(max_iters):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size and reseeds < max_reseeds:
            for c in empty:
                far = int(d2[np.arange(m), new].argmax())
                C[c] = X[far]
                new[far] = c
                d2[far] = 0.0
                reseeds += 1
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            if np.any(labels == c):
                C[c] = X[labels == c].mean(axis=0)
    return labels, C


def cluster_weights(layer, cfg: ClusterConfig, probe=None) -> np.ndarray:
    """Assign each weight column of ``layer`` to one of ``cfg.n_clusters`` groups.

    ``weight`` clusters the column vectors directly. ``co-magnitude`` clusters
    columns by their L1-normalized absolute products over ``probe`` rows
    (inputs to the layer).
    """
    W = np.asarray(layer.W.value if hasattr(layer, "W") else layer, dtype=np.float64)
    d_out = W.shape[1]
    if cfg.n_clusters > d_out:
        raise ConfigError(f"n_clusters={cfg.n_clusters} exceeds d_out={d_out}")
    if cfg.strategy == "weight":
        points = W.T
    else:
        if probe is None or np.asarray(probe).shape[0] < cfg.probe_size:
            raise ConfigError(f"co-magnitude clustering needs a probe with >= {cfg.probe_size} rows")
        P = np.asarray(probe, dtype=np.float64)[: cfg.probe_size]
        P = P.reshape(-1, W.shape[0])
        prod = np.abs(P @ W)
        sums = prod.sum(axis=1, keepdims=True)
        prod = np.divide(prod, sums, out=np.zeros_like(prod), where=sums > 0)
        points = prod.T
    labels, _ = kmeans(points, cfg.n_clusters, cfg.max_iters, cfg.seed)
    return labels
