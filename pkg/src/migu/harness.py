"""Synthetic continual-learning tasks, the sequential training loop and ACC."""
from __future__ import annotations

import copy
import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, NumericError, StateError
from .masking import MiguConfig
from .model import ModelConfig, TinyTransformer
from .numerics import AdamW, Linear

METHODS = ("FT", "FT+MIGU", "LoRA", "LoRA+MIGU", "IncLoRA", "IncLoRA+MIGU", "Replay", "Replay+MIGU")


# ---------------------------------------------------------------- tasks

@dataclass(frozen=True)
class TaskSpec:
    """One synthetic classification task.

    Class ``c`` owns the ``c``-th equal slice of the private band. Under the
    ``majority`` rule the label is the class holding the most private tokens
    in the sequence; under ``trigger`` it is the class of the first private
    token.
    """

    task_id: int
    band: tuple
    noise_band: tuple
    n_classes: int = 2
    rule: str = "majority"
    n_train: int = 256
    n_eval: int = 64
    seq_len: int = 16
    noise_frac: float = 0.5
    distract_frac: float = 0.25
    seed: int = 0

    def class_bands(self):
        lo, hi = self.band
        edges = np.linspace(lo, hi, self.n_classes + 1).astype(int)
        return [(int(edges[c]), int(edges[c + 1])) for c in range(self.n_classes)]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class TaskData:
    task_id: int
    train: Dataset
    eval: Dataset


def _validate_spec(spec: TaskSpec, vocab_size=None):
    lo, hi = spec.band
    nlo, nhi = spec.noise_band
    if spec.n_classes < 2:
        raise ConfigError(f"task {spec.task_id}: n_classes must be >= 2")
    if hi - lo < spec.n_classes:
        raise ConfigError(f"task {spec.task_id}: private band {spec.band} too small for "
                          f"{spec.n_classes} classes")
    if spec.rule not in ("majority", "trigger"):
        raise ConfigError(f"task {spec.task_id}: rule must be 'majority' or 'trigger'")
    if vocab_size is not None and max(hi, nhi) > vocab_size:
        raise ConfigError(f"task {spec.task_id}: bands exceed vocab_size={vocab_size}")
    if nhi - nlo < 1 and spec.noise_frac > 0:
        raise ConfigError(f"task {spec.task_id}: empty noise band with noise_frac > 0")
    if not lo < hi or not (nhi <= lo or hi <= nlo):
        raise ConfigError(f"task {spec.task_id}: private band must be nonempty and disjoint from noise band")


def class_of_tokens(tokens, spec: TaskSpec) -> np.ndarray:
    """Per-token class id inside the private band, -1 elsewhere."""
    tokens = np.asarray(tokens)
    out = np.full(tokens.shape, -1)
    for c, (a, b) in enumerate(spec.class_bands()):
        out[(tokens >= a) & (tokens < b)] = c
    return out


def label_of(tokens, spec: TaskSpec) -> np.ndarray:
    """Recompute labels of a (n, seq) token array from the task rule."""
    cls = class_of_tokens(np.atleast_2d(tokens), spec)
    if spec.rule == "majority":
        counts = np.stack([(cls == c).sum(axis=1) for c in range(spec.n_classes)], axis=1)
        return counts.argmax(axis=1)
    first = np.argmax(cls >= 0, axis=1)
    return cls[np.arange(len(cls)), first]


def generate_task(spec: TaskSpec, vocab_size=None) -> TaskData:
    _validate_spec(spec, vocab_size)
    rng = np.random.default_rng([spec.seed, spec.task_id, 7919])
    n = spec.n_train + spec.n_eval
    S = spec.seq_len
    n_noise = int(round(spec.noise_frac * S))
    n_priv = S - n_noise
    if n_priv < 1:
        raise ConfigError(f"task {spec.task_id}: noise_frac leaves no private tokens")
    bands = spec.class_bands()
    C = spec.n_classes
    y = np.arange(n) % C
    rng.shuffle(y)
    X = np.empty((n, S), dtype=np.int64)
    for i in range(n):
        c = y[i]
        if spec.rule == "majority":
            n_dis = min(int(spec.distract_frac * n_priv), (n_priv - 1) // 2)
        else:
            n_dis = int(spec.distract_frac * (n_priv - 1))
        own = rng.integers(*bands[c], size=n_priv - n_dis)
        others = [k for k in range(C) if k != c]
        dis = np.array([rng.integers(*bands[rng.choice(others)]) for _ in range(n_dis)], dtype=np.int64)
        noise = rng.integers(*spec.noise_band, size=n_noise) if n_noise else np.empty(0, np.int64)
        priv = np.concatenate([own, dis]).astype(np.int64)
        pos = rng.permutation(S)
        seq = np.empty(S, dtype=np.int64)
        seq[pos[:n_priv]] = priv
        seq[pos[n_priv:]] = noise
        if spec.rule == "trigger":
            # the earliest private position must hold an own-class token
            ppos = np.sort(pos[:n_priv])
            first = ppos[0]
            j = ppos[np.flatnonzero(class_of_tokens(seq[ppos], spec) == c)[0]]
            seq[first], seq[j] = seq[j], seq[first]
        X[i] = seq
    assert np.array_equal(label_of(X, spec), y)
    tr = Dataset(X[: spec.n_train], y[: spec.n_train])
    ev = Dataset(X[spec.n_train:], y[spec.n_train:])
    return TaskData(spec.task_id, tr, ev)


def conflict_specs(n_tasks=2, vocab_size=512, band_width=32, noise_width=64, seed=0, **kw) -> list:
    """Tasks with disjoint private bands sharing one noise band and label space."""
    specs = []
    noise = (0, noise_width)
    for t in range(n_tasks):
        lo = noise_width + t * band_width
        specs.append(TaskSpec(task_id=t, band=(lo, lo + band_width), noise_band=noise, seed=seed, **kw))
    for s in specs:
        _validate_spec(s, vocab_size)
    return specs


@dataclass
class TaskSequence:
    specs: list
    order_id: int = 0
    seed: int = 0

    def __post_init__(self):
        ids = [s.task_id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids in sequence: {ids}")

    @property
    def task_ids(self):
        return [s.task_id for s in self.specs]

    def __len__(self):
        return len(self.specs)


def make_order(specs, order_seed: int = 0) -> TaskSequence:
    """Seeded permutation of ``specs``; seed 0 keeps the given order."""
    specs = list(specs)
    if not specs:
        raise ConfigError("a task sequence needs at least one task")
    if order_seed == 0:
        return TaskSequence(specs, 0, 0)
    perm = np.random.default_rng(order_seed).permutation(len(specs))
    return TaskSequence([specs[i] for i in perm], order_seed, order_seed)


class TaskProvider:
    """Serves task data and records every access to task metadata.

    Training code reads only ``data(position)``; any read of a ``TaskSpec``
    field through ``spec(position)`` is logged in ``accesses``.
    """

    def __init__(self, seq: TaskSequence, vocab_size=None):
        self._seq = seq
        self._data = [generate_task(s, vocab_size) for s in seq.specs]
        self.accesses: list = []

    def __len__(self):
        return len(self._data)

    def data(self, position: int) -> TaskData:
        return self._data[position]

    def spec(self, position: int):
        return _AuditedSpec(self._seq.specs[position], self.accesses)


class _AuditedSpec:
    def __init__(self, spec, log):
        object.__setattr__(self, "_spec", spec)
        object.__setattr__(self, "_log", log)

    def __getattr__(self, name):
        self._log.append(name)
        return getattr(self._spec, name)


# ---------------------------------------------------------------- metric

class AccMatrix:
    """Lower-triangular accuracies: ``rows[i][j]`` is task j after training task i."""

    def __init__(self, n_tasks: int, rows=None):
        self.n_tasks = n_tasks
        self.rows: list[list[float]] = [list(r) for r in (rows or [])]

    def add_row(self, accs):
        accs = [float(a) for a in accs]
        if len(accs) != len(self.rows) + 1:
            raise StateError(f"row {len(self.rows)} needs {len(self.rows) + 1} entries, got {len(accs)}")
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"accuracies must lie in [0, 1]: {accs}")
        self.rows.append(accs)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.n_tasks

    def to_array(self) -> np.ndarray:
        A = np.full((len(self.rows), self.n_tasks), np.nan)
        for i, r in enumerate(self.rows):
            A[i, : len(r)] = r
        return A

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "accuracy"])
            for i, r in enumerate(self.rows):
                for j, a in enumerate(r):
                    w.writerow([i, j, repr(float(a))])

    def __eq__(self, other):
        return isinstance(other, AccMatrix) and self.rows == other.rows

    def __repr__(self):
        return f"AccMatrix({self.rows})"


def acc_metric(A: AccMatrix) -> float:
    """Mean accuracy over all tasks after training the last one."""
    if not A.complete:
        raise StateError(f"accuracy matrix has {len(A.rows)} of {A.n_tasks} rows")
    last = A.rows[-1]
    return sum(last) / len(last)


# ---------------------------------------------------------------- replay

def sample_buffer(data: Dataset, ratio: float, rng) -> Dataset:
    """Uniform sample without replacement of ``floor(ratio * n)`` items (at least 1)."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"replay ratio must lie in (0, 1], got {ratio}")
    k = max(1, int(np.floor(ratio * len(data) + 1e-9)))
    idx = np.sort(rng.choice(len(data), size=k, replace=False))
    return Dataset(data.X[idx], data.y[idx])


def replay_mix(current: Dataset, buffer: list, ratio: float, rng, return_source=False):
    """Shuffled union of the current data and every buffered past-task sample."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"replay ratio must lie in (0, 1], got {ratio}")
    parts = [current] + list(buffer)
    X = np.concatenate([p.X for p in parts])
    y = np.concatenate([p.y for p in parts])
    src = np.concatenate([np.full(len(p), i) for i, p in enumerate(parts)])
    perm = rng.permutation(len(y))
    out = Dataset(X[perm], y[perm])
    return (out, src[perm]) if return_source else out


# ---------------------------------------------------------------- training

@dataclass
class MethodConfig:
    method: str = "FT"
    migu: MiguConfig | None = None
    replay_ratio: float | None = None
    replay_masking: str = "mixed"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    lora_r: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    train_head: bool = True
    reset_optimizer: bool = True
    log_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if self.uses_migu and self.migu is None:
            self.migu = MiguConfig()
        if not self.uses_migu:
            self.migu = None
        if self.uses_replay:
            if self.replay_ratio is None:
                self.replay_ratio = 0.02
            if not 0.0 < self.replay_ratio <= 1.0:
                raise ConfigError(f"replay_ratio must lie in (0, 1], got {self.replay_ratio}")
        elif self.replay_ratio is not None:
            raise ConfigError(f"replay_ratio given for non-replay method {self.method}")
        if self.replay_masking not in ("mixed", "per-source"):
            raise ConfigError("replay_masking must be 'mixed' or 'per-source'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    @property
    def base(self) -> str:
        return self.method.split("+")[0]

    @property
    def uses_migu(self) -> bool:
        return self.method.endswith("+MIGU")

    @property
    def uses_lora(self) -> bool:
        return self.base in ("LoRA", "IncLoRA", "Replay")

    @property
    def uses_replay(self) -> bool:
        return self.base == "Replay"

    def with_threshold(self, T):
        return replace(self, migu=replace(self.migu, T=T)) if self.migu else self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class RunResult:
    acc: AccMatrix
    mask_log: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)

    @property
    def ACC(self) -> float:
        return acc_metric(self.acc)


def evaluate(model: TinyTransformer, data: Dataset) -> float:
    pred = model.predict_logits(data.X).argmax(axis=1)
    return float((pred == data.y).mean())


def _diverged(model, step, exc):
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return NumericError(f"training diverged at step {step} in layer {p.name.rsplit('.', 1)[0]}: {exc}")
    return NumericError(f"training diverged at step {step}: {exc}")


def prepare_model(model: TinyTransformer, cfg: MethodConfig) -> TinyTransformer:
    if cfg.uses_lora and not model.lora:
        model.enable_lora(cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout, cfg.train_head, cfg.seed)
    if cfg.migu is not None:
        model.attach_migu(cfg.migu)
    return model


class ContinualLearner:
    """Trains one model on a stream of tasks under one method.

    Holds the optimizer, the replay buffer and the data-order RNG. The only
    task information it ever sees is the training data passed to
    ``learn_task`` and the fact that a new task has started.
    """

    def __init__(self, model: TinyTransformer, cfg: MethodConfig, rng=None, prepared=False):
        self.model = model if prepared else prepare_model(model, cfg)
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng([cfg.seed, 104729])
        self.buffer: list[Dataset] = []
        self.opt = None
        self.tasks_seen = 0
        self.losses: list = []
        self.mask_log: list = []

    def learn_task(self, train: Dataset) -> dict:
        """Train on one task's data; returns its timing record."""
        cfg, model, rng = self.cfg, self.model, self.rng
        pos = self.tasks_seen
        if cfg.base == "IncLoRA" and pos > 0:
            model.add_adapters()
            if cfg.migu is not None:
                model.attach_migu(cfg.migu)
        if self.opt is None or cfg.reset_optimizer:
            self.opt = AdamW(cfg.lr, cfg.betas, weight_decay=cfg.weight_decay,
                             decay_masked=bool(cfg.migu and cfg.migu.decay_masked))
        t0 = time.perf_counter()
        steps0 = model.step
        for _ in range(cfg.epochs):
            if cfg.uses_replay and self.buffer:
                stream, src = replay_mix(train, self.buffer, cfg.replay_ratio, rng, return_source=True)
            else:
                perm = rng.permutation(len(train))
                stream, src = Dataset(train.X[perm], train.y[perm]), np.zeros(len(perm), int)
            for i in range(0, len(stream), cfg.batch_size):
                Xb, yb = stream.X[i:i + cfg.batch_size], stream.y[i:i + cfg.batch_size]
                for mX, my in _micro_batches(Xb, yb, src[i:i + cfg.batch_size], cfg):
                    self._step(mX, my, pos)
        timing = {"task_position": pos, "wall_s": time.perf_counter() - t0, "steps": model.step - steps0}
        if cfg.uses_replay:
            self.buffer.append(sample_buffer(train, cfg.replay_ratio, rng))
        self.tasks_seen += 1
        return timing

    def _step(self, X, y, pos):
        model = self.model
        log = bool(self.cfg.log_every) and model.step % self.cfg.log_every == 0
        try:
            loss, masks = model.train_step(X, y, self.opt, log_masks=log)
        except NumericError as exc:
            raise _diverged(model, model.step, exc) from exc
        self.losses.append(loss)
        if log and masks:
            self.mask_log.append({"step": model.step - 1, "task_position": pos, "masks": masks})


def train_sequence(model: TinyTransformer, seq, cfg: MethodConfig, provider: TaskProvider | None = None,
                   on_task_end=None, learner: ContinualLearner | None = None, acc: AccMatrix | None = None
                   ) -> RunResult:
    """Train on each task in order, filling one accuracy row after each task.

    ``seq`` is a TaskSequence (data generated here) or a ready TaskProvider.
    ``on_task_end(position, learner, acc)`` is called after each task's
    evaluation. Passing a restored ``learner`` and partial ``acc`` continues
    a run from ``learner.tasks_seen``.
    """
    if provider is None:
        provider = seq if isinstance(seq, TaskProvider) else TaskProvider(seq, model.cfg.vocab_size)
    n = len(provider)
    start_step = model.step
    learner = learner if learner is not None else ContinualLearner(model, cfg)
    acc = acc if acc is not None else AccMatrix(n)
    start_pos = learner.tasks_seen
    result = RunResult(acc, learner.mask_log, [], {}, learner.losses)
    for pos in range(start_pos, n):
        result.timing.append(learner.learn_task(provider.data(pos).train))
        acc.add_row([evaluate(model, provider.data(j).eval) for j in range(pos + 1)])
        if on_task_end is not None:
            on_task_end(pos, learner, acc)
    result.manifest = {
        "method": cfg.method,
        "method_config": cfg.to_dict(),
        "model": model.cfg.to_dict(),
        "task_ids": [provider.data(p).task_id for p in range(n)],
        "consumes_old_data": cfg.uses_replay,
        "consumes_task_boundaries": cfg.base == "IncLoRA",
        "consumes_task_labels": False,
        "start_step": start_step,
        "start_task_position": start_pos,
        "total_steps": model.step,
    }
    return result


def _micro_batches(X, y, src, cfg: MethodConfig):
    gran = cfg.migu.granularity if cfg.migu is not None else "per-batch"
    if gran == "per-sample":
        for i in range(len(y)):
            yield X[i:i + 1], y[i:i + 1]
        return
    if cfg.uses_replay and cfg.migu is not None and cfg.replay_masking == "per-source":
        for s in np.unique(src):
            sel = src == s
            yield X[sel], y[sel]
        return
    yield X, y


# ---------------------------------------------------------------- base pretraining

@dataclass(frozen=True)
class PretrainSpec:
    """Band-identification pretraining that stands in for a pretrained LM.

    Each sequence mixes tokens from one of ``n_bands`` vocabulary bands with
    shared noise; the label is the band. The base thereby learns band-specific
    activations without seeing any downstream label.
    """

    n_bands: int = 8
    band_width: int = 32
    noise_width: int = 64
    n_samples: int = 2048
    epochs: int = 3
    lr: float = 3e-3
    batch_size: int = 32
    band_tokens: int = 8


def pretrain_data(spec: PretrainSpec, seq_len: int, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 99])
    y = rng.integers(0, spec.n_bands, spec.n_samples)
    X = np.empty((spec.n_samples, seq_len), dtype=np.int64)
    k = min(spec.band_tokens, seq_len)
    for i in range(spec.n_samples):
        lo = spec.noise_width + y[i] * spec.band_width
        X[i, :k] = rng.integers(lo, lo + spec.band_width, k)
        X[i, k:] = rng.integers(0, spec.noise_width, seq_len - k)
        rng.shuffle(X[i])
    return Dataset(X, y)


_PRETRAINED: dict = {}


def pretrain_base(model_cfg: ModelConfig, spec: PretrainSpec | None) -> TinyTransformer:
    """Fresh model, optionally pretrained on band identification (memoized).

    The pretraining head is discarded; the returned model keeps its own
    freshly initialized classifier head and starts at step 0.
    """
    if spec is None:
        return TinyTransformer(model_cfg)
    key = (tuple(sorted(model_cfg.to_dict().items())), spec)
    if key not in _PRETRAINED:
        model = TinyTransformer(model_cfg)
        data = pretrain_data(spec, model_cfg.seq_len, model_cfg.seed)
        rng = np.random.default_rng([model_cfg.seed, 98])
        head = model.head
        model.head = Linear(model_cfg.d_model, spec.n_bands, rng, model.dtype, "pretrain_head")
        opt = AdamW(spec.lr)
        for _ in range(spec.epochs):
            perm = rng.permutation(len(data))
            for i in range(0, len(perm), spec.batch_size):
                sel = perm[i:i + spec.batch_size]
                model.train_step(data.X[sel], data.y[sel], opt)
        model.head = head
        model.step = 0
        _PRETRAINED[key] = model
    return copy.deepcopy(_PRETRAINED[key])


def run_method(method, specs, T=0.7, seed=0, order_seed=0, model_cfg: ModelConfig | None = None,
               pretrain: PretrainSpec | None = None, migu_template: MiguConfig | None = None,
               **method_kw) -> RunResult:
    """Fresh (optionally pretrained) model, one task order, one method.

    ``migu_template`` supplies every MIGU setting except ``T``.
    """
    mcfg = model_cfg or ModelConfig()
    mcfg = replace(mcfg, seed=seed, n_classes=max(mcfg.n_classes, max(s.n_classes for s in specs)))
    migu = method_kw.pop("migu", None)
    if method.endswith("+MIGU") and migu is None:
        migu = replace(migu_template, T=T) if migu_template is not None else MiguConfig(T=T)
    cfg = MethodConfig(method=method, migu=migu, seed=seed, **method_kw)
    model = pretrain_base(mcfg, pretrain)
    res = train_sequence(model, make_order(specs, order_seed), cfg)
    res.manifest["pretrain"] = asdict(pretrain) if pretrain is not None else None
    res.manifest["order_seed"] = order_seed
    return res


# settings of the shipped conflict fixture; LoRA keeps r=8, alpha=32, dropout=0.05
FIXTURE_TRAINING = {"lr": 3e-3, "epochs": 10}


def run_fixture(method, n_tasks, seed=0, T=0.7, order_seed=0, **overrides) -> RunResult:
    """One run on the shipped conflict fixture: default model, band-pretrained base."""
    kw = {**FIXTURE_TRAINING, **overrides}
    return run_method(method, conflict_specs(n_tasks), T=T, seed=seed, order_seed=order_seed,
                      pretrain=PretrainSpec(), **kw)
