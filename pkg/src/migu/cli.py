"""Command line runner: ``migu {run,sweep,analyze,timing} --config FILE``.

Exit codes: 0 success, 2 configuration or checkpoint errors, 3 numeric
failures during training.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (export_distribution, export_heatmap, mean_overlap, similarity_matrix,
                       task_magnitudes, threshold_sweep, timing_report)
from .checkpoint import load_learner, save_learner
from .config import RunConfig, load_config
from .exceptions import ChecksumError, ConfigError, NumericError, VersionError
from .harness import (ContinualLearner, TaskProvider, make_order, pretrain_base,
                      prepare_model, train_sequence)

MODES = ("train", "sweep", "analyze", "timing")


def _threads():
    """Worker count from MIGU_THREADS, or None when unset."""
    raw = os.environ.get("MIGU_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MIGU_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MIGU_THREADS must be a positive integer, got {raw!r}")
    return n


def _blas_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    # each process runs single-threaded BLAS; parallelism comes from workers only
    return threadpool_limits(limits=1)


def _overrides(args):
    o = {}
    if args.seed is not None:
        o[("experiment", "seed")] = args.seed
    if args.out is not None:
        o[("experiment", "out")] = args.out
    if args.threshold is not None:
        o[("migu", "T")] = args.threshold
    if args.components is not None:
        o[("migu", "components")] = args.components
    if args.method is not None:
        o[("method", "method")] = args.method
        o[("sweep", "method")] = args.method
    return o


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _base_manifest(cfg: RunConfig, mode, argv):
    return {
        "tool": "migu",
        "version": __version__,
        "mode": mode,
        "argv": list(argv),
        "experiment": cfg["experiment"]["name"],
        "seed": cfg["experiment"]["seed"],
        "order_seed": cfg["experiment"]["order_seed"],
        "config_file": cfg.source,
        "resolved_config": "resolved.cfg",
        "config": cfg.values,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "migu_threads": os.environ.get("MIGU_THREADS"),
    }


# ---------------------------------------------------------------- modes

def _train(cfg: RunConfig, out: Path, manifest: dict):
    e, emit = cfg["experiment"], cfg["emit"]
    seed = e["seed"]
    mcfg = cfg.method_config(seed=seed)
    specs = cfg.task_specs()
    seq = make_order(specs, e["order_seed"])
    provider = TaskProvider(seq, cfg["model"]["vocab_size"])
    splice = None
    if e["resume"]:
        learner, acc, ck = load_learner(e["resume"], mcfg)
        model = learner.model
        if mcfg.migu is None and model.migu is not None:
            model.detach_migu()
        prepare_model(model, mcfg)
        splice = {"checkpoint": e["resume"], "step": model.step, "task_position": learner.tasks_seen,
                  "from_method": ck.extra.get("method_config", {}).get("method"), "to_method": mcfg.method}
    else:
        model = pretrain_base(cfg.model_config(seed), cfg.pretrain_spec())
        learner, acc = ContinualLearner(model, mcfg), None

    hook = None
    if emit["checkpoint"]:
        def hook(pos, lrn, a):
            save_learner(out / f"checkpoint_task{pos}.ckpt", lrn, a)
    result = train_sequence(model, seq, mcfg, provider=provider, on_task_end=hook, learner=learner, acc=acc)
    if emit["checkpoint"]:
        save_learner(out / "checkpoint.ckpt", learner, result.acc)

    manifest.update(result.manifest)
    manifest["splice"] = splice
    manifest["ACC"] = result.ACC if result.acc.complete else None
    manifest["artifacts"] = []
    if emit["acc_csv"]:
        result.acc.to_csv(out / "acc.csv")
        manifest["artifacts"].append("acc.csv")
    if emit["masks"]:
        with open(out / "masks.jsonl", "w") as fh:
            for rec in result.mask_log:
                masks = {k: np.flatnonzero(v).tolist() for k, v in rec["masks"].items()}
                fh.write(json.dumps({"step": rec["step"], "task_position": rec["task_position"],
                                     "kept_columns": masks}, sort_keys=True) + "\n")
        manifest["artifacts"].append("masks.jsonl")
    if emit["similarity"] or emit["distributions"]:
        manifest["artifacts"] += _analyze_model(cfg, model, provider, out, emit["similarity"], emit["distributions"])
    if emit["timing"]:
        manifest["artifacts"] += _timing(cfg, out, {})
    return 0


def _analyze_model(cfg, model, provider, out, similarity=True, distributions=True):
    a = cfg["analysis"]
    migu = cfg.migu_config()
    samples = min(a["samples"], min(len(provider.data(p).eval) for p in range(len(provider))))
    tasks = [(provider.data(p).task_id, provider.data(p).eval.X) for p in range(len(provider))]
    written = []
    if similarity:
        sims = similarity_matrix(model, tasks, migu, samples)
        sim_dir = out / "similarity"
        sim_dir.mkdir(exist_ok=True)
        for layer, sm in sims.items():
            if a["highlight"]:
                sm = sm.submatrix([t for t in sm.task_ids if t in set(a["highlight"])])
            svg, csv_ = export_heatmap(sm, sim_dir / f"{layer}.svg", title=f"{layer} mask overlap, T={migu.T}")
            written += [str(svg.relative_to(out)), str(csv_.relative_to(out))]
        summary = {"mean_off_diagonal_overlap": mean_overlap(sims), "samples_per_task": samples, "T": migu.T}
        _write_json(out / "similarity_summary.json", summary)
        written.append("similarity_summary.json")
    if distributions:
        caches = {}
        for tid, X in tasks:
            for layer, c in task_magnitudes(model, X, migu.components, samples).items():
                caches[f"{layer}@task{tid}"] = c
        export_distribution(caches, out / "distributions.csv")
        written.append("distributions.csv")
    return written


def _analyze(cfg: RunConfig, out: Path, manifest: dict):
    """Train (or resume) as configured, then export overlap heatmaps and distributions."""
    cfg.values["emit"] = dict(cfg["emit"], similarity=True, distributions=True)
    return _train(cfg, out, manifest)


def _sweep(cfg: RunConfig, out: Path, manifest: dict):
    s, e = cfg["sweep"], cfg["experiment"]
    jobs = _threads() or s["jobs"]
    base = cfg.method_config(method=s["method"], seed=e["seed"])
    if base.migu is None:
        raise ConfigError(f"[sweep] method: {s['method']} has no threshold to sweep, use a +MIGU method")
    kw = {k: v for k, v in base.to_dict().items() if k not in ("method", "migu", "seed")}
    kw["betas"] = tuple(kw["betas"])
    # the sweep varies T only; every other MIGU setting comes from [migu]
    res = threshold_sweep(s["method"], cfg.task_specs(), s["thresholds"], s["orders"], s["seeds"], n_jobs=jobs,
                          model_cfg=cfg.model_config(), pretrain=cfg.pretrain_spec(),
                          migu_template=base.migu, **kw)
    res.to_csv(out / "sweep.csv")
    manifest.update(method=s["method"], sweep={"thresholds": s["thresholds"], "orders": s["orders"],
                                               "seeds": s["seeds"], "jobs": jobs,
                                               "mean_acc": {repr(k): v for k, v in res.mean_acc().items()},
                                               "best_threshold": res.best_threshold},
                    consumes_task_labels=False, artifacts=["sweep.csv"])
    return 0


def _timing(cfg: RunConfig, out: Path, manifest: dict):
    seed = cfg["experiment"]["seed"]
    ft = cfg.method_config(method="FT", seed=seed)
    configs = {
        "FT": ft,
        "FT+MIGU": cfg.method_config(method="FT+MIGU", seed=seed),
        # caching and masking machinery with nothing masked
        "FT+MIGU(T=0)": cfg.method_config(method="FT+MIGU", seed=seed, T=0.0),
    }
    rep = timing_report(cfg.task_specs(), configs, cfg["timing"]["repetitions"], "FT", cfg.model_config(seed))
    rep.to_csv(out / "timing.csv")
    manifest["timing"] = {m: {"total_ms": rep.totals_ms[m], "overhead_pct": rep.overhead_pct(m)} for m in configs}
    manifest.setdefault("artifacts", []).append("timing.csv")
    return ["timing.csv"]


def _timing_mode(cfg, out, manifest):
    _timing(cfg, out, manifest)
    return 0


_RUNNERS = {"train": _train, "sweep": _sweep, "analyze": _analyze, "timing": _timing_mode}


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="migu", description="MIGU continual-learning experiment runner")
    p.add_argument("--version", action="version", version=f"migu {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the experiment described by the config ([experiment] mode, default train)",
        "sweep": "threshold sweep over [sweep] thresholds x orders x seeds",
        "analyze": "train, then export mask-overlap heatmaps and magnitude distributions",
        "timing": "wall-time overhead of MIGU against plain fine-tuning",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h)
        sp.add_argument("--config", type=Path, help="INI config file (flags override its values)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=str, help="output directory")
        sp.add_argument("--threshold", type=float, help="masked fraction T in [0, 1]")
        sp.add_argument("--components", type=str, help="preset name or comma list of components")
        sp.add_argument("--method", type=str)
        if name == "run":
            sp.add_argument("--mode", choices=MODES)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        overrides = _overrides(args)
        if getattr(args, "mode", None):
            overrides[("experiment", "mode")] = args.mode
        cfg = load_config(args.config, text=None if args.config else "", overrides=overrides)
        mode = cfg["experiment"]["mode"] if args.command == "run" else args.command
        cfg.values["experiment"]["mode"] = mode
        out = Path(cfg["experiment"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(cfg.to_ini())
        manifest = _base_manifest(cfg, mode, argv)
        # written before training so an aborted run still documents itself
        _write_json(out / "manifest.json", manifest)
        with _blas_limit(_threads()):
            code = _RUNNERS[mode](cfg, out, manifest)
        manifest["status"] = "ok"
        _write_json(out / "manifest.json", manifest)
        print(f"{mode}: wrote {out}")
        return code
    except (ConfigError, ChecksumError, VersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
