"""INI-style run configuration with typed, field-level validation.

Precedence, lowest to highest: built-in defaults, the config file, command
line flags.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .harness import METHODS, MethodConfig, PretrainSpec, TaskSpec, conflict_specs
from .masking import ClusterConfig, MiguConfig, resolve_components
from .model import ModelConfig


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _floats(v):
    return [float(x) for x in str(v).replace(";", ",").split(",") if x.strip()]


def _ints(v):
    return [int(x) for x in str(v).replace(";", ",").split(",") if x.strip()]


def _opt_str(v):
    s = str(v).strip()
    return s or None


SCHEMA = {
    "experiment": {
        "name": (str, "experiment"),
        "seed": (int, 0),
        "mode": (str, "train"),
        "order_seed": (int, 0),
        "out": (str, "runs/experiment"),
        "resume": (_opt_str, None),
    },
    "model": {
        "vocab_size": (int, 512), "seq_len": (int, 16), "d_model": (int, 64), "n_heads": (int, 4),
        "n_blocks": (int, 2), "d_ffn": (int, 128), "n_classes": (int, 2), "activation": (str, "gelu"),
        "gated_ffn": (_bool, False), "dtype": (str, "float32"),
    },
    "method": {
        "method": (str, "FT"), "lr": (float, 3e-3), "epochs": (int, 10), "batch_size": (int, 32),
        "weight_decay": (float, 0.01), "beta1": (float, 0.9), "beta2": (float, 0.999),
        "lora_r": (int, 8), "lora_alpha": (float, 32.0), "lora_dropout": (float, 0.05),
        "train_head": (_bool, True), "replay_ratio": (float, 0.02), "replay_masking": (str, "mixed"),
        "reset_optimizer": (_bool, True), "log_every": (int, 0),
    },
    "migu": {
        "T": (float, 0.7), "granularity": (str, "per-batch"), "components": (str, "all"),
        "decay_masked": (_bool, False), "report_normalize": (_bool, False),
        "cluster_n": (int, 0), "cluster_strategy": (str, "weight"), "cluster_probe_size": (int, 64),
        "mask_head": (_bool, False),
    },
    "tasks": {
        "n_tasks": (int, 2), "n_classes": (int, 2), "band_width": (int, 32), "noise_width": (int, 64),
        "noise_frac": (float, 0.5), "distract_frac": (float, 0.25), "rule": (str, "majority"),
        "n_train": (int, 256), "n_eval": (int, 64), "data_seed": (int, 0),
    },
    "pretrain": {
        "enabled": (_bool, True), "n_bands": (int, 8), "n_samples": (int, 2048), "epochs": (int, 3),
        "lr": (float, 3e-3), "batch_size": (int, 32), "band_tokens": (int, 8),
    },
    "sweep": {
        "method": (str, "LoRA+MIGU"), "thresholds": (_floats, [0.0, 0.3, 0.5, 0.7, 0.9, 0.95]),
        "orders": (_ints, [0]), "seeds": (_ints, [0, 1, 2, 3, 4]), "jobs": (int, 1),
    },
    "timing": {"repetitions": (int, 5)},
    "analysis": {"samples": (int, 100), "layers": (str, "all"), "highlight": (_ints, [])},
    "emit": {
        "acc_csv": (_bool, True), "masks": (_bool, False), "similarity": (_bool, False),
        "distributions": (_bool, False), "timing": (_bool, False), "checkpoint": (_bool, False),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, section):
        return self.values[section]

    # ---------------------------------------------------------------- builders
    def model_config(self, seed=None) -> ModelConfig:
        m = dict(self["model"])
        m["n_classes"] = max(m["n_classes"], self["tasks"]["n_classes"])
        return ModelConfig(seed=self["experiment"]["seed"] if seed is None else seed, **m)

    def migu_config(self, T=None) -> MiguConfig:
        g = self["migu"]
        cluster = None
        if g["cluster_n"] > 0:
            cluster = ClusterConfig(g["cluster_n"], g["cluster_strategy"], g["cluster_probe_size"],
                                    seed=self["experiment"]["seed"])
        return MiguConfig(T=g["T"] if T is None else T, granularity=g["granularity"],
                          components=resolve_components(g["components"]),
                          report_normalize=g["report_normalize"], cluster=cluster,
                          decay_masked=g["decay_masked"], mask_head=g["mask_head"])

    def method_config(self, method=None, seed=None, T=None) -> MethodConfig:
        m = self["method"]
        method = method or m["method"]
        uses_replay = method.split("+")[0] == "Replay"
        return MethodConfig(
            method=method,
            migu=self.migu_config(T) if method.endswith("+MIGU") else None,
            replay_ratio=m["replay_ratio"] if uses_replay else None,
            replay_masking=m["replay_masking"], lr=m["lr"], betas=(m["beta1"], m["beta2"]),
            weight_decay=m["weight_decay"], epochs=m["epochs"], batch_size=m["batch_size"],
            lora_r=m["lora_r"], lora_alpha=m["lora_alpha"], lora_dropout=m["lora_dropout"],
            train_head=m["train_head"], reset_optimizer=m["reset_optimizer"], log_every=m["log_every"],
            seed=self["experiment"]["seed"] if seed is None else seed)

    def task_specs(self) -> list[TaskSpec]:
        t = self["tasks"]
        return conflict_specs(t["n_tasks"], vocab_size=self["model"]["vocab_size"],
                              band_width=t["band_width"], noise_width=t["noise_width"], seed=t["data_seed"],
                              n_classes=t["n_classes"], rule=t["rule"], n_train=t["n_train"],
                              n_eval=t["n_eval"], seq_len=self["model"]["seq_len"],
                              noise_frac=t["noise_frac"], distract_frac=t["distract_frac"])

    def pretrain_spec(self) -> PretrainSpec | None:
        p = self["pretrain"]
        if not p["enabled"]:
            return None
        t = self["tasks"]
        return PretrainSpec(n_bands=p["n_bands"], band_width=t["band_width"], noise_width=t["noise_width"],
                            n_samples=p["n_samples"], epochs=p["epochs"], lr=p["lr"],
                            batch_size=p["batch_size"], band_tokens=p["band_tokens"])

    # ---------------------------------------------------------------- output
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, vals in self.values.items():
            cp[sec] = {k: _fmt(v) for k, v in vals.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path=None, text=None, overrides=None) -> RunConfig:
    """Parse, coerce and validate. All field errors are reported together."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh)
        elif text is not None:
            cp.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    errors = []
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            errors.append(f"[{sec}]: unknown section (valid: {', '.join(SCHEMA)})")
            continue
        for key, raw in cp[sec].items():
            _assign(values, sec, key, raw, errors)
    for (sec, key), raw in (overrides or {}).items():
        if raw is not None:
            _assign(values, sec, key, raw, errors)
    cfg = RunConfig(values, str(path) if path else None)
    _validate(cfg, errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _assign(values, sec, key, raw, errors):
    if key not in SCHEMA[sec]:
        errors.append(f"[{sec}] {key}: unknown field (valid: {', '.join(SCHEMA[sec])})")
        return
    conv = SCHEMA[sec][key][0]
    try:
        values[sec][key] = raw if not isinstance(raw, str) and conv in (str,) else conv(raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"[{sec}] {key}: {exc} (got {raw!r})")


def _validate(cfg: RunConfig, errors):
    checks = [
        ("experiment", "mode", lambda v: v in ("train", "sweep", "analyze", "timing"),
         "must be one of train, sweep, analyze, timing"),
        ("method", "method", lambda v: v in METHODS, f"must be one of {list(METHODS)}"),
        ("sweep", "method", lambda v: v in METHODS, f"must be one of {list(METHODS)}"),
        ("migu", "T", lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
        ("migu", "granularity", lambda v: v in ("per-batch", "per-sample"), "must be per-batch or per-sample"),
        ("method", "lr", lambda v: v > 0, "must be > 0"),
        ("method", "epochs", lambda v: v >= 1, "must be >= 1"),
        ("method", "batch_size", lambda v: v >= 1, "must be >= 1"),
        ("method", "replay_ratio", lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        ("tasks", "n_tasks", lambda v: v >= 1, "must be >= 1"),
        ("tasks", "n_classes", lambda v: v >= 2, "must be >= 2"),
        ("tasks", "rule", lambda v: v in ("majority", "trigger"), "must be majority or trigger"),
        ("sweep", "thresholds", lambda v: all(0 <= x <= 1 for x in v) and len(v) > 0, "values must lie in [0, 1]"),
        ("timing", "repetitions", lambda v: v >= 3, "must be >= 3"),
    ]
    for sec, key, ok, msg in checks:
        try:
            good = ok(cfg[sec][key])
        except TypeError:
            good = False
        if not good:
            errors.append(f"[{sec}] {key}: {msg} (got {cfg[sec][key]!r})")
    if errors:
        return
    for label, build in (("[migu] components", cfg.migu_config), ("[model]", cfg.model_config),
                         ("[tasks]", cfg.task_specs), ("[method]", cfg.method_config)):
        try:
            build()
        except ConfigError as exc:
            errors.append(f"{label}: {exc}")
