"""Versioned, checksummed binary checkpoints.

Layout: ``MIGUCKPT`` magic, u32 format version, u64 header length, a UTF-8
JSON header, the raw little-endian array payload, then a SHA-256 digest of
every preceding byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ChecksumError, VersionError
from .masking import ClusterConfig, MiguConfig
from .model import ModelConfig, TinyTransformer
from .numerics import SGD, AdamW, OptimState

MAGIC = b"MIGUCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    model: TinyTransformer
    optimizer: AdamW | SGD | None = None
    rngs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _migu_to_dict(cfg: MiguConfig | None):
    if cfg is None:
        return None
    d = asdict(cfg)
    d["components"] = list(cfg.components)
    return d


def _migu_from_dict(d):
    if d is None:
        return None
    d = dict(d)
    if d.get("cluster"):
        d["cluster"] = ClusterConfig(**d["cluster"])
    d["components"] = tuple(d["components"])
    return MiguConfig(**d)


def _collect(model: TinyTransformer, optimizer):
    arrays = {}
    for p in model.parameters():
        arrays[f"param/{p.name}"] = p.value
    assignments = {}
    for lin in model.registry.values():
        inst = getattr(lin, "instrument", None)
        if inst is not None and inst.assignment is not None:
            arrays[f"assign/{lin.name}"] = np.asarray(inst.assignment, dtype=np.int64)
            assignments[lin.name] = True
    opt = None
    if optimizer is not None:
        opt = {"kind": optimizer.kind, "lr": optimizer.lr, "steps": {}}
        if isinstance(optimizer, AdamW):
            opt.update(betas=list(optimizer.betas), eps=optimizer.eps,
                       weight_decay=optimizer.weight_decay, decay_masked=optimizer.decay_masked)
            for name, st in optimizer.states.items():
                arrays[f"adam_m/{name}"] = st.m
                arrays[f"adam_v/{name}"] = st.v
                opt["steps"][name] = st.step
    return arrays, opt


def save_checkpoint(path, model: TinyTransformer, optimizer=None, rngs=None, extra=None) -> Path:
    """Serialize model, optimizer state, named numpy Generators and ``extra`` (JSON)."""
    arrays, opt = _collect(model, optimizer)
    index = []
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                      "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    lin0 = next(iter(model.registry.values()))
    header = {
        "format_version": FORMAT_VERSION,
        "model": model.cfg.to_dict(),
        "step": model.step,
        "lora": getattr(model, "lora_settings", None) if model.lora else None,
        "n_adapters": len(lin0.adapters) if model.lora else 0,
        "trainable": {p.name: p.trainable for p in model.parameters()},
        "migu": _migu_to_dict(model.migu),
        "optimizer": opt,
        "rngs": {"model": model.rng.bit_generator.state,
                 **{k: g.bit_generator.state for k, g in (rngs or {}).items()}},
        "extra": extra or {},
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + bytes(payload)
    path = Path(path)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + _DIGEST or data[: len(MAGIC)] != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file (bad magic or truncated)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this library reads {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = memoryview(body)[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> Checkpoint:
    """Rebuild the model, optimizer and RNGs. Nothing is built if the file is bad."""
    header, arrays = _read(path)
    model = TinyTransformer(ModelConfig(**header["model"]))
    if header["lora"]:
        s = header["lora"]
        model.enable_lora(s["r"], s["alpha"], s["dropout"], True, s["seed"])
        for _ in range(header["n_adapters"] - 1):
            model.add_adapters()
    named = model.named_parameters()
    for name, flag in header["trainable"].items():
        p = named[name]
        p.value = arrays[f"param/{name}"].astype(model.dtype, copy=False)
        p.trainable = flag
    model.step = header["step"]
    migu = _migu_from_dict(header["migu"])
    if migu is not None:
        model.attach_migu(replace_cluster(migu))
        for lin in model.registry.values():
            key = f"assign/{lin.name}"
            if key in arrays and lin.instrument is not None:
                lin.instrument.assignment = arrays[key]
        model.migu = migu
    rngs = {}
    for name, state in header["rngs"].items():
        g = np.random.default_rng()
        g.bit_generator.state = state
        if name == "model":
            model.rng = g
            for lin in model.registry.values():
                if hasattr(lin, "adapters"):
                    lin.rng = g
        else:
            rngs[name] = g
    opt = None
    o = header["optimizer"]
    if o is not None:
        if o["kind"] == "adamw":
            opt = AdamW(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"], o["decay_masked"])
            for name, step in o["steps"].items():
                opt.states[name] = OptimState(arrays[f"adam_m/{name}"], arrays[f"adam_v/{name}"], step,
                                              opt.lr, opt.betas[0], opt.betas[1], opt.eps, opt.weight_decay)
        else:
            opt = SGD(o["lr"])
    return Checkpoint(model, opt, rngs, header["extra"], header["format_version"])


def replace_cluster(cfg: MiguConfig) -> MiguConfig:
    """Copy of ``cfg`` without clustering; assignments are restored from the file."""
    return replace(cfg, cluster=None)


def checkpoint_to_text(path) -> str:
    """Human-diffable JSON dump of a checkpoint (header plus array contents)."""
    header, arrays = _read(path)
    header = dict(header)
    header["arrays"] = {k: v.tolist() for k, v in arrays.items()}
    return json.dumps(header, indent=1, sort_keys=True)


def save_learner(path, learner, acc, extra=None) -> Path:
    """Checkpoint a continual run at a task boundary (model, optimizer, data RNG, replay buffer, acc rows)."""
    state = {
        "tasks_seen": learner.tasks_seen,
        "acc_rows": [list(r) for r in acc.rows],
        "n_tasks": acc.n_tasks,
        "buffer": [{"X": b.X.tolist(), "y": b.y.tolist()} for b in learner.buffer],
        "method_config": learner.cfg.to_dict(),
        **(extra or {}),
    }
    return save_checkpoint(path, learner.model, learner.opt, {"learner": learner.rng}, state)


def load_learner(path, cfg):
    """Inverse of ``save_learner``; returns (learner, acc, checkpoint)."""
    from .harness import AccMatrix, ContinualLearner, Dataset

    ck = load_checkpoint(path)
    learner = ContinualLearner(ck.model, cfg, rng=ck.rngs.get("learner"), prepared=True)
    learner.opt = ck.optimizer
    learner.tasks_seen = ck.extra["tasks_seen"]
    learner.buffer = [Dataset(np.asarray(b["X"], dtype=np.int64), np.asarray(b["y"], dtype=np.int64))
                      for b in ck.extra["buffer"]]
    acc = AccMatrix(ck.extra["n_tasks"], [list(r) for r in ck.extra["acc_rows"]])
    return learner, acc, ck
