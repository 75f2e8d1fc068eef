"""A small transformer encoder classifier with per-linear MIGU instrumentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, NumericError, ShapeError
from .lora import LoraLinear
from .masking import ALL_COMPONENTS, Instrument, MiguConfig, cluster_weights, masked_update
from .numerics import Attention, Embedding, GeLU, LayerNorm, Linear, ReLU, SiLU, softmax_cross_entropy

BLOCK_COMPONENTS = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_1", "ffn_2")
GATED_COMPONENTS = BLOCK_COMPONENTS + ("ffn_3",)
_ACTIVATIONS = {"gelu": GeLU, "relu": ReLU, "silu": SiLU}


@dataclass
class ModelConfig:
    vocab_size: int = 512
    seq_len: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ffn: int = 128
    n_classes: int = 2
    activation: str = "gelu"
    gated_ffn: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self):
        return asdict(self)


class Block:
    def __init__(self, cfg: ModelConfig, idx: int, rng, dtype):
        d, f = cfg.d_model, cfg.d_ffn
        pre = f"blocks.{idx}"
        self.linears = {
            "attn_q": Linear(d, d, rng, dtype, f"{pre}.attn_q"),
            "attn_k": Linear(d, d, rng, dtype, f"{pre}.attn_k"),
            "attn_v": Linear(d, d, rng, dtype, f"{pre}.attn_v"),
            "attn_o": Linear(d, d, rng, dtype, f"{pre}.attn_o"),
            "ffn_1": Linear(d, f, rng, dtype, f"{pre}.ffn_1"),
            "ffn_2": Linear(f, d, rng, dtype, f"{pre}.ffn_2"),
        }
        self.gated = cfg.gated_ffn
        if self.gated:
            self.linears["ffn_3"] = Linear(d, f, rng, dtype, f"{pre}.ffn_3")
        self.attn = Attention(cfg.n_heads)
        self.act = (SiLU if self.gated else _ACTIVATIONS[cfg.activation])()
        self.ln1 = LayerNorm(d, dtype, f"{pre}.ln1")
        self.ln2 = LayerNorm(d, dtype, f"{pre}.ln2")

    def params(self):
        out = []
        for lin in self.linears.values():
            out.extend(lin.params())
        return out + self.ln1.params() + self.ln2.params()

    def forward(self, x):
        L = self.linears
        a = self.attn.forward(L["attn_q"].forward(x), L["attn_k"].forward(x), L["attn_v"].forward(x))
        x = self.ln1.forward(x + L["attn_o"].forward(a))
        h = self.act.forward(L["ffn_1"].forward(x))
        if self.gated:
            u = L["ffn_3"].forward(x)
            self._gate = (h, u)
            h = h * u
        return self.ln2.forward(x + L["ffn_2"].forward(h))

    def backward(self, dy):
        L = self.linears
        dx1 = self.ln2.backward(dy)
        dh = L["ffn_2"].backward(dx1)
        dx = dx1
        if self.gated:
            h, u = self._gate
            dx = dx + L["ffn_3"].backward(dh * h)
            dh = dh * u
        dx = dx + L["ffn_1"].backward(self.act.backward(dh))
        dres = self.ln1.backward(dx)
        da = L["attn_o"].backward(dres)
        dq, dk, dv = self.attn.backward(da)
        return (dres + L["attn_q"].backward(dq) + L["attn_k"].backward(dk)
                + L["attn_v"].backward(dv))


class TinyTransformer:
    """Token + position embeddings, post-LN blocks, mean pooling, LN, linear head.

    ``registry`` maps ``(block_index, component)`` to that block's linear
    (a ``Linear``, or a ``LoraLinear`` after ``enable_lora``).
    """

    def __init__(self, cfg: ModelConfig | None = None, **kw):
        cfg = cfg or ModelConfig(**kw)
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.tok = Embedding(cfg.vocab_size, cfg.d_model, rng, self.dtype, "tok_emb")
        self.pos = Embedding(cfg.seq_len, cfg.d_model, rng, self.dtype, "pos_emb")
        self.blocks = [Block(cfg, i, rng, self.dtype) for i in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(cfg.d_model, self.dtype, "ln_f")
        self.head = Linear(cfg.d_model, cfg.n_classes, rng, self.dtype, "head")
        self.step = 0
        self.migu: MiguConfig | None = None
        self.lora = False
        self.training = False
        self.rng = np.random.default_rng([cfg.seed, 1])

    # ------------------------------------------------------------ structure
    @property
    def registry(self) -> dict:
        return {(i, name): lin for i, b in enumerate(self.blocks) for name, lin in b.linears.items()}

    @property
    def component_names(self) -> tuple:
        return GATED_COMPONENTS if self.cfg.gated_ffn else BLOCK_COMPONENTS

    def parameters(self):
        out = self.tok.params() + self.pos.params()
        for b in self.blocks:
            out.extend(b.params())
        return out + self.ln_f.params() + self.head.params()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------ forward/backward
    def forward(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim != 2:
            raise ShapeError(f"token batch must be 2-D (batch, seq), got {ids.shape}")
        B, S = ids.shape
        if S > self.cfg.seq_len:
            raise ShapeError(f"sequence length {S} exceeds seq_len={self.cfg.seq_len}")
        x = self.tok.forward(ids) + self.pos.forward(np.broadcast_to(np.arange(S), (B, S)))
        for b in self.blocks:
            x = b.forward(x)
        self._S = S
        pooled = x.mean(axis=1)
        return self.head.forward(self.ln_f.forward(pooled))

    def backward(self, dlogits) -> None:
        dz = self.ln_f.backward(self.head.backward(dlogits))
        S = self._S
        dx = np.repeat(dz[:, None, :] / S, S, axis=1).astype(dz.dtype)
        for b in reversed(self.blocks):
            dx = b.backward(dx)
        self.tok.backward(dx)
        self.pos.backward(dx)

    def predict_logits(self, tokens, batch_size=256) -> np.ndarray:
        was = self.training
        self.set_training(False)
        try:
            out = [self.forward(tokens[i:i + batch_size]) for i in range(0, len(tokens), batch_size)]
        finally:
            self.set_training(was)
        return np.concatenate(out, axis=0)

    def set_training(self, flag: bool):
        self.training = flag
        for lin in self.registry.values():
            if isinstance(lin, LoraLinear):
                lin.training = flag

    # ------------------------------------------------------------ instrumentation
    def attach_migu(self, cfg: MiguConfig, probe=None):
        """Instrument the block linears named in ``cfg.components``.

        Returns self. Attaching replaces any previous instrumentation.
        """
        bad = [c for c in cfg.components if c not in ALL_COMPONENTS]
        if bad:
            raise ConfigError(f"unknown component(s) {bad}; valid names: {list(ALL_COMPONENTS)}")
        # ffn_3 exists only in the gated variant and is skipped otherwise
        sel = [c for c in cfg.components if c in self.component_names]
        self.detach_migu()
        self.migu = cfg
        for (i, name), lin in self.registry.items():
            if name not in sel:
                continue
            if isinstance(lin, LoraLinear):
                lin.migu = True
                continue
            assignment = None
            if cfg.cluster is not None:
                assignment = cluster_weights(lin, cfg.cluster, self._probe_inputs(lin, probe, cfg))
            lin.instrument = Instrument(cfg, self._clock, name, assignment)
        if cfg.mask_head:
            self.head.instrument = Instrument(cfg, self._clock, "head")
        return self

    def detach_migu(self):
        self.migu = None
        self.head.instrument = None
        for lin in self.registry.values():
            lin.instrument = None
            if isinstance(lin, LoraLinear):
                lin.migu = False

    def _clock(self):
        return self.step

    def _probe_inputs(self, lin, probe, cfg):
        if cfg.cluster.strategy != "co-magnitude":
            return None
        if probe is None:
            raise ConfigError("co-magnitude clustering needs a probe token batch")
        grabbed = {}
        orig = lin.forward

        def spy(x):
            grabbed["x"] = x.reshape(-1, lin.d_in)
            return orig(x)

        lin.forward = spy
        try:
            self.predict_logits(np.asarray(probe)[: cfg.cluster.probe_size])
        finally:
            del lin.forward
        return grabbed["x"]

    def instrumented(self) -> dict:
        """Registry entries that receive magnitude masks."""
        out = {}
        for key, lin in self.registry.items():
            if getattr(lin, "instrument", None) is not None or getattr(lin, "migu", False):
                out[key] = lin
        return out

    # ------------------------------------------------------------ LoRA
    def enable_lora(self, r=8, alpha=32.0, dropout=0.05, train_head=True, seed=0):
        """Freeze every base parameter and wrap block linears with adapters."""
        for p in self.parameters():
            p.trainable = False
        if train_head:
            for p in self.head.params():
                p.trainable = True
        for b in self.blocks:
            for name, lin in list(b.linears.items()):
                if not isinstance(lin, LoraLinear):
                    b.linears[name] = LoraLinear(lin)
                    b.linears[name].clock = self._clock
        self.lora = True
        self.lora_settings = dict(r=r, alpha=alpha, dropout=dropout, seed=seed)
        self.add_adapters()
        if self.migu is not None:
            self.attach_migu(self.migu)
        return self

    def add_adapters(self):
        """Start a fresh adapter on every wrapped linear; earlier ones freeze."""
        s = self.lora_settings
        n = len(next(iter(self.registry.values())).adapters)
        rng = np.random.default_rng([s["seed"], n])
        for lin in self.registry.values():
            lin.add_adapter(min(s["r"], lin.d_in, lin.d_out), s["alpha"], rng, s["dropout"])
            lin.rng = self.rng

    # ------------------------------------------------------------ update
    def update(self, optimizer, log_masks=False):
        """Apply the optimizer to every trainable parameter with a gradient.

        Instrumented linears update only their kept columns. Returns the keep
        vectors used (when ``log_masks``) and advances ``self.step``.
        """
        step = self.step
        cfg = self.migu
        comps = cfg.components if cfg is not None else ()
        handled = set()
        logged = {}
        for (i, name), lin in self.registry.items():
            if isinstance(lin, LoraLinear):
                act = lin.active
                if lin.migu and act is not None:
                    mA, mB = lin.masks(cfg.T, step)
                    keep_a = mA.keep if "lora_a" in comps else None
                    keep_b = mB.keep if "lora_b" in comps else None
                    for p, k in ((act.A, keep_a), (act.B, keep_b)):
                        if p.trainable and p.grad is not None:
                            optimizer.update(p, k)
                    handled.update((id(act.A), id(act.B)))
                    if log_masks:
                        logged[f"{lin.name}.A"] = mA.keep.copy()
                        logged[f"{lin.name}.B"] = mB.keep.copy()
            elif lin.instrument is not None:
                mask = lin.instrument.mask(step)
                masked_update(lin, None, mask, optimizer, step)
                handled.update(id(p) for p in lin.params())
                if log_masks:
                    logged[lin.name] = mask.keep.copy()
        if self.head.instrument is not None:
            mask = self.head.instrument.mask(step)
            masked_update(self.head, None, mask, optimizer, step)
            handled.update(id(p) for p in self.head.params())
            if log_masks:
                logged[self.head.name] = mask.keep.copy()
        for p in self.parameters():
            if id(p) in handled or not p.trainable or p.grad is None:
                continue
            optimizer.update(p)
        self.zero_grad()
        self.step += 1
        return logged

    # ------------------------------------------------------------ convenience
    def train_step(self, tokens, labels, optimizer, log_masks=False):
        self.set_training(True)
        logits = self.forward(tokens)
        loss, d = softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}")
        self.backward(d)
        logged = self.update(optimizer, log_masks)
        return loss, logged
