"""Diagnostics: mask overlap between tasks, threshold sweeps, overhead timing
and deterministic SVG / CSV exports."""
from __future__ import annotations

import csv
import html
import io
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ContractError
from .harness import Dataset, MethodConfig, TaskProvider, make_order, run_method, train_sequence
from .lora import LoraLinear
from .masking import Instrument, MagnitudeCache, MiguConfig, binary_top_t
from .model import ModelConfig, TinyTransformer

OVERLAP_DEFINITION = "overlap = |kept_i AND kept_j| / |kept_i| (equal kept counts at fixed T)"


# ---------------------------------------------------------------- masks and overlap

def task_magnitudes(model: TinyTransformer, X, components=None, samples=100) -> dict:
    """Per-layer mean absolute pre-bias outputs over the first ``samples`` rows.

    No parameter is touched. Returns ``{layer_name: MagnitudeCache}``.
    """
    X = np.asarray(X)
    if len(X) < samples:
        raise ConfigError(f"need {samples} samples, task provides {len(X)}")
    comps = set(components or model.component_names)
    saved = {}
    probes = {}
    cfg = MiguConfig(T=0.0, components=tuple(c for c in model.component_names if c in comps) or ("ffn_1",))
    for (i, name), lin in model.registry.items():
        if name not in comps:
            continue
        saved[lin.name] = (lin, lin.instrument)
        probes[lin.name] = Instrument(cfg, lambda: -1, name)
        lin.instrument = probes[lin.name]
    try:
        model.predict_logits(X[:samples], batch_size=samples)
    finally:
        for lin, old in saved.values():
            lin.instrument = old
    return {k: p.cache for k, p in probes.items()}


def task_masks(model: TinyTransformer, X, cfg: MiguConfig, samples=100) -> dict:
    """Keep vectors each selected layer would use for this data at ``cfg.T``."""
    mags = task_magnitudes(model, X, cfg.components, samples)
    return {k: binary_top_t(c.n, cfg.T).keep for k, c in mags.items()}


def overlap_ratio(keep_i, keep_j) -> float:
    """Shared kept positions over the common kept count."""
    a = np.asarray(keep_i, dtype=bool)
    b = np.asarray(keep_j, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask lengths differ: {a.shape} vs {b.shape}")
    ka, kb = int(a.sum()), int(b.sum())
    if ka != kb:
        raise ContractError(f"kept counts differ ({ka} vs {kb}); overlap needs equal T")
    if ka == 0:
        return 1.0
    return float((a & b).sum()) / ka


def cosine_similarity(n_i, n_j) -> float:
    a = np.asarray(n_i, dtype=np.float64)
    b = np.asarray(n_j, dtype=np.float64)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


@dataclass
class SimilarityMatrix:
    task_ids: list
    values: np.ndarray
    layer_id: str
    samples_per_task: int
    cosine: np.ndarray | None = None

    def submatrix(self, task_ids) -> "SimilarityMatrix":
        idx = [self.task_ids.index(t) for t in task_ids]
        cos = None if self.cosine is None else self.cosine[np.ix_(idx, idx)]
        return SimilarityMatrix(list(task_ids), self.values[np.ix_(idx, idx)], self.layer_id,
                                self.samples_per_task, cos)

    def mean_off_diagonal(self) -> float:
        k = len(self.task_ids)
        if k < 2:
            return float("nan")
        off = ~np.eye(k, dtype=bool)
        return float(self.values[off].mean())


def similarity_matrix(model: TinyTransformer, tasks, cfg: MiguConfig, samples=100) -> dict:
    """Pairwise mask overlap between tasks, one matrix per selected layer.

    ``tasks`` is a list of ``(task_id, X)`` pairs.
    """
    ids = [t for t, _ in tasks]
    mags = [task_magnitudes(model, X, cfg.components, samples) for _, X in tasks]
    out = {}
    for layer in mags[0] if mags else {}:
        keeps = [binary_top_t(m[layer].n, cfg.T).keep for m in mags]
        k = len(tasks)
        V = np.ones((k, k))
        Cs = np.ones((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                V[i, j] = V[j, i] = overlap_ratio(keeps[i], keeps[j])
                Cs[i, j] = Cs[j, i] = cosine_similarity(mags[i][layer].n, mags[j][layer].n)
        out[layer] = SimilarityMatrix(ids, V, layer, samples, Cs)
    return out


def mean_overlap(sims: dict) -> float:
    """Mean off-diagonal overlap averaged over layers."""
    vals = [s.mean_off_diagonal() for s in sims.values()]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------- threshold sweep

@dataclass
class SweepResult:
    method: str
    rows: list = field(default_factory=list)  # (order, seed, threshold, acc)

    @property
    def thresholds(self):
        return sorted({r[2] for r in self.rows})

    def mean_acc(self) -> dict:
        out = {}
        for T in self.thresholds:
            out[T] = float(np.mean([r[3] for r in self.rows if r[2] == T]))
        return out

    def per_order_acc(self) -> dict:
        out = {}
        for o, _, T, a in self.rows:
            out.setdefault((T, o), []).append(a)
        return {k: float(np.mean(v)) for k, v in out.items()}

    @property
    def best_threshold(self) -> float:
        m = self.mean_acc()
        return max(m, key=lambda T: (m[T], -T))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "order", "seed", "threshold", "acc"])
            for o, s, T, a in self.rows:
                w.writerow([self.method, o, s, repr(float(T)), repr(float(a))])


def _sweep_job(args):
    method, specs, T, seed, order, kw = args
    return order, seed, T, run_method(method, specs, T=T, seed=seed, order_seed=order, **kw).ACC


def threshold_sweep(method: str, specs, thresholds, orders=(0,), seeds=(0,), n_jobs=1, **kw) -> SweepResult:
    """ACC over the full (order, seed, threshold) grid for one MIGU method."""
    for T in thresholds:
        if not 0.0 <= T <= 1.0:
            raise ConfigError(f"threshold {T} outside [0, 1]")
    jobs = [(method, specs, T, s, o, kw) for o in orders for s in seeds for T in thresholds]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            rows = list(ex.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    return SweepResult(method, rows)


# ---------------------------------------------------------------- timing

@dataclass
class TimingReport:
    wall_ms: dict  # method -> median per-task wall time list (ms)
    totals_ms: dict  # method -> median total wall time (ms)
    reference: str
    repetitions: int

    def overhead_pct(self, method) -> float:
        ref = self.totals_ms[self.reference]
        return 100.0 * (self.totals_ms[method] - ref) / ref

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "task", "wall_ms", "overhead_pct"])
            ref = self.wall_ms[self.reference]
            for m, per in self.wall_ms.items():
                for t, ms in enumerate(per):
                    w.writerow([m, t, f"{ms:.3f}", f"{100.0 * (ms - ref[t]) / ref[t]:.2f}"])


def timing_report(specs, configs: dict, repetitions=5, reference=None, model_cfg=None) -> TimingReport:
    """Median wall time per task for each named MethodConfig.

    Repetitions are interleaved across configs so slow drifts of the machine
    affect every config alike. All runs share the same seed.
    """
    if repetitions < 3:
        raise ConfigError("timing needs at least 3 repetitions")
    reference = reference or next(iter(configs))
    mcfg = model_cfg or ModelConfig()
    seq = make_order(specs, 0)
    provider = TaskProvider(seq, mcfg.vocab_size)
    runs = {name: [] for name in configs}
    for _ in range(repetitions):
        for name, cfg in configs.items():
            model = TinyTransformer(replace(mcfg, seed=cfg.seed))
            res = train_sequence(model, seq, cfg, provider=provider)
            runs[name].append([t["wall_s"] * 1e3 for t in res.timing])
    wall = {n: [statistics.median(col) for col in zip(*r)] for n, r in runs.items()}
    totals = {n: statistics.median(sum(x) for x in r) for n, r in runs.items()}
    return TimingReport(wall, totals, reference, repetitions)


# ---------------------------------------------------------------- exports

_RAMP = ["#440154", "#46327e", "#365c8d", "#277f8e", "#1fa187", "#4ac16d", "#a0da39", "#fde725"]


def _ramp(v, lo, hi):
    if hi <= lo:
        return _RAMP[-1]
    k = int((v - lo) / (hi - lo) * len(_RAMP))
    return _RAMP[min(max(k, 0), len(_RAMP) - 1)]


def render_svg(M, labels=None, title="", cell=28, lo=0.0, hi=1.0) -> str:
    M = np.asarray(M, dtype=np.float64)
    r, c = M.shape
    labels = [str(x) for x in (labels if labels is not None else range(max(r, c)))]
    pad = 40
    w, h = pad + c * cell + 10, pad + r * cell + 10
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
              f'viewBox="0 0 {w} {h}" font-family="monospace" font-size="9">\n')
    out.write(f"<desc>{html.escape(title or OVERLAP_DEFINITION)}</desc>\n")
    for j in range(c):
        out.write(f'<text x="{pad + j * cell + cell / 2:.1f}" y="{pad - 6}" text-anchor="middle">'
                  f"{html.escape(labels[j])}</text>\n")
    for i in range(r):
        out.write(f'<text x="{pad - 4}" y="{pad + i * cell + cell / 2 + 3:.1f}" text-anchor="end">'
                  f"{html.escape(labels[i])}</text>\n")
        for j in range(c):
            v = M[i, j]
            x, y = pad + j * cell, pad + i * cell
            out.write(f'<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                      f'fill="{_ramp(v, lo, hi)}"/>\n')
            if max(r, c) <= 20:
                fg = "#000" if v > lo + 0.6 * (hi - lo) else "#fff"
                out.write(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 3:.1f}" text-anchor="middle" '
                          f'fill="{fg}">{v:.2f}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def export_heatmap(matrix, path, labels=None, layer_id="", title="") -> tuple:
    """Write ``path`` as SVG and a CSV twin next to it. Returns both paths.

    ``matrix`` may be a SimilarityMatrix or a plain 2-D array.
    """
    path = Path(path)
    cos = None
    if isinstance(matrix, SimilarityMatrix):
        labels = labels or matrix.task_ids
        layer_id = layer_id or matrix.layer_id
        M, cos = matrix.values, matrix.cosine
    else:
        M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2:
        raise ContractError(f"heatmap needs a 2-D matrix, got shape {M.shape}")
    labels = list(labels) if labels is not None else list(range(M.shape[0]))
    svg_path = path if path.suffix == ".svg" else path.with_suffix(".svg")
    csv_path = svg_path.with_suffix(".csv")
    try:
        svg_path.write_text(render_svg(M, labels, title or f"{layer_id} {OVERLAP_DEFINITION}"))
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {OVERLAP_DEFINITION}\n")
            w = csv.writer(fh, lineterminator="\n")
            # cosine of the magnitude vectors rides along as an alternative measure
            w.writerow(["layer_id", "task_i", "task_j", "overlap"] + (["cosine"] if cos is not None else []))
            for i in range(M.shape[0]):
                for j in range(M.shape[1]):
                    extra = [f"{cos[i, j]:.6f}"] if cos is not None else []
                    w.writerow([layer_id, labels[i], labels[j], f"{M[i, j]:.6f}"] + extra)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {svg_path}: {exc}") from exc
    return svg_path, csv_path


def export_distribution(caches, path, layer_id="") -> Path:
    """CSV of magnitude distributions: one row per (layer, column).

    ``caches`` is a MagnitudeCache or a dict ``{layer_id: MagnitudeCache}``.
    """
    if isinstance(caches, MagnitudeCache):
        caches = {layer_id: caches}
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_id", "column_index", "magnitude", "normalized_magnitude"])
            for lid, c in caches.items():
                norm = c.normalized()
                for j, (m, q) in enumerate(zip(c.n, norm)):
                    w.writerow([lid, j, f"{float(m):.8g}", f"{float(q):.8g}"])
    except OSError as exc:
        raise OSError(f"cannot write distribution to {path}: {exc}") from exc
    return path
