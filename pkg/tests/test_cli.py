import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from migu.checkpoint import load_learner, save_learner
from migu.cli import main
from migu.config import load_config
from migu.exceptions import ConfigError

CONFIGS = Path(__file__).parent.parent / "configs"

SMALL = """
[model]
vocab_size = 160
seq_len = 8
d_model = 16
n_heads = 2
n_blocks = 1
d_ffn = 32

[method]
method = {method}
epochs = 1
{method_extra}

[tasks]
n_tasks = {n_tasks}
band_width = 32
noise_width = 32
n_train = 48
n_eval = 16

[pretrain]
enabled = false
n_samples = 64
epochs = 1
"""


def _cfg(tmp_path, method="FT", n_tasks=2, extra="", name="c.cfg", method_extra=""):
    p = tmp_path / name
    if "[analysis]" not in extra:
        extra += "\n[analysis]\nsamples = 16\n"
    p.write_text(SMALL.format(method=method, n_tasks=n_tasks, method_extra=method_extra) + extra)
    return p


def _acc_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config

def test_shipped_configs_parse():
    names = sorted(p.name for p in CONFIGS.glob("*.cfg"))
    assert {"twotask_ft.cfg", "sweep_T.cfg"} <= set(names)
    for p in CONFIGS.glob("*.cfg"):
        load_config(p)


def test_precedence_defaults_file_flags(tmp_path):
    p = _cfg(tmp_path, extra="\n[migu]\nT = 0.5\n")
    assert load_config(text="")["migu"]["T"] == 0.7
    assert load_config(p)["migu"]["T"] == 0.5
    assert load_config(p, overrides={("migu", "T"): 0.9})["migu"]["T"] == 0.9


def test_all_field_errors_reported_together():
    text = "[migu]\nT = 1.5\n[method]\nepochs = zero\nbogus = 1\n[nosuch]\nx = 1\n"
    with pytest.raises(ConfigError) as ei:
        load_config(text=text)
    msg = str(ei.value)
    for frag in ("[method] epochs", "[method] bogus", "[nosuch]"):
        assert frag in msg


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(_cfg(tmp_path, extra="\n[sweep]\nthresholds = 0, 0.3\n"))
    again = load_config(text=cfg.to_ini())
    assert again.values == cfg.values


# ---------------------------------------------------------------- run

def test_run_two_tasks_structural(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(_cfg(tmp_path)), "--out", str(out)]) == 0
    rows = _acc_rows(out / "acc.csv")
    assert [(r["row"], r["col"]) for r in rows] == [("0", "0"), ("1", "0"), ("1", "1")]
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["method"] == "FT"
    assert man["config"]["tasks"]["n_tasks"] == 2
    assert (out / "resolved.cfg").exists()
    assert man["ACC"] == pytest.approx(np.mean([float(r["accuracy"]) for r in rows if r["row"] == "1"]))


def test_manifest_reruns_exactly(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--config", str(_cfg(tmp_path, "LoRA+MIGU")), "--out", str(a), "--seed", "3"])
    # re-run from the resolved config alone
    main(["run", "--config", str(a / "resolved.cfg"), "--out", str(b)])
    assert (a / "acc.csv").read_bytes() == (b / "acc.csv").read_bytes()


def test_run_twice_identical_bytes(tmp_path):
    p = _cfg(tmp_path, "FT+MIGU")
    main(["run", "--config", str(p), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(p), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "acc.csv").read_bytes() == (tmp_path / "b" / "acc.csv").read_bytes()


def test_flags_override(tmp_path):
    out = tmp_path / "o"
    main(["run", "--config", str(_cfg(tmp_path)), "--out", str(out), "--method", "FT+MIGU",
          "--threshold", "0.5", "--components", "ffn_1", "--seed", "4"])
    man = json.loads((out / "manifest.json").read_text())
    assert man["method"] == "FT+MIGU" and man["seed"] == 4
    assert man["config"]["migu"]["T"] == 0.5 and man["config"]["migu"]["components"] == "ffn_1"


def test_migu_manifest_audits_task_identity(tmp_path):
    out = tmp_path / "o"
    main(["run", "--config", str(_cfg(tmp_path, "FT+MIGU")), "--out", str(out)])
    man = json.loads((out / "manifest.json").read_text())
    assert man["consumes_task_labels"] is False and man["consumes_task_boundaries"] is False


def test_masks_log(tmp_path):
    out = tmp_path / "o"
    p = _cfg(tmp_path, "FT+MIGU", extra="\n[migu]\ncomponents = ffn_1\n[emit]\nmasks = true\n",
             method_extra="log_every = 2")
    main(["run", "--config", str(p), "--out", str(out)])
    recs = [json.loads(line) for line in (out / "masks.jsonl").read_text().splitlines()]
    assert recs and all(r["step"] % 2 == 0 for r in recs)
    for r in recs:
        (kept,) = r["kept_columns"].values()
        assert len(kept) == 32 - int(0.7 * 32)


def test_config_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[migu]\nT = 2\n[method]\nmethod = SGD\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "[migu] T" in err and "[method] method" in err


def test_numeric_failure_exit_3(tmp_path, capsys):
    first = tmp_path / "first"
    p = _cfg(tmp_path, "FT", extra="\n[emit]\ncheckpoint = true\n")
    main(["run", "--config", str(p), "--out", str(first)])
    cfg = load_config(p)
    learner, acc, _ = load_learner(first / "checkpoint_task0.ckpt", cfg.method_config())
    next(iter(learner.model.registry.values())).W.value[:] = np.inf
    save_learner(tmp_path / "broken.ckpt", learner, acc, {"method_config": learner.cfg.to_dict()})
    p2 = _cfg(tmp_path, "FT", extra=f"\n[experiment]\nresume = {tmp_path / 'broken.ckpt'}\n", name="r.cfg")
    assert main(["run", "--config", str(p2), "--out", str(tmp_path / "o")]) == 3
    assert "step" in capsys.readouterr().err


def test_corrupt_resume_exit_2(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage" * 20)
    p = _cfg(tmp_path, extra=f"\n[experiment]\nresume = {bad}\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_cross_method_resume_records_splice(tmp_path):
    ft = tmp_path / "ft"
    main(["run", "--config", str(_cfg(tmp_path, "FT", extra="\n[emit]\ncheckpoint = true\n")), "--out", str(ft)])
    ck = ft / "checkpoint_task0.ckpt"
    p = _cfg(tmp_path, "FT+MIGU", extra=f"\n[experiment]\nresume = {ck}\n", name="r.cfg")
    out = tmp_path / "migu"
    assert main(["run", "--config", str(p), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    s = man["splice"]
    assert s["from_method"] == "FT" and s["to_method"] == "FT+MIGU"
    assert s["task_position"] == 1 and s["step"] > 0
    assert man["start_task_position"] == 1
    rows = _acc_rows(out / "acc.csv")
    assert len(rows) == 3
    # the first row is carried over from the FT run
    assert rows[0] == _acc_rows(ft / "acc.csv")[0]


def test_resume_same_method_matches_uninterrupted(tmp_path):
    p = _cfg(tmp_path, "FT+MIGU", n_tasks=3, extra="\n[emit]\ncheckpoint = true\n")
    full = tmp_path / "full"
    main(["run", "--config", str(p), "--out", str(full)])
    p2 = _cfg(tmp_path, "FT+MIGU", n_tasks=3,
              extra=f"\n[experiment]\nresume = {full / 'checkpoint_task0.ckpt'}\n", name="r.cfg")
    main(["run", "--config", str(p2), "--out", str(tmp_path / "res")])
    assert (full / "acc.csv").read_bytes() == (tmp_path / "res" / "acc.csv").read_bytes()


# ---------------------------------------------------------------- sweep, analyze, timing

def test_sweep_rows(tmp_path):
    p = _cfg(tmp_path, extra="\n[sweep]\nmethod = FT+MIGU\nthresholds = 0, 0.3, 0.7\norders = 0, 1\nseeds = 0, 1\n")
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(p), "--out", str(out)]) == 0
    rows = _acc_rows(out / "sweep.csv")
    assert len(rows) == 3 * 2 * 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["sweep"]["best_threshold"] in (0.0, 0.3, 0.7)


def test_sweep_needs_migu_method(tmp_path):
    p = _cfg(tmp_path, extra="\n[sweep]\nmethod = FT\n")
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_migu_threads_parallel_sweep_identical(tmp_path, monkeypatch):
    p = _cfg(tmp_path, extra="\n[sweep]\nmethod = FT+MIGU\nthresholds = 0, 0.7\nseeds = 0, 1\n")
    main(["sweep", "--config", str(p), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("MIGU_THREADS", "2")
    main(["sweep", "--config", str(p), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["sweep"]["jobs"] == 2


def test_migu_threads_invalid(tmp_path, monkeypatch):
    monkeypatch.setenv("MIGU_THREADS", "zero")
    assert main(["run", "--config", str(_cfg(tmp_path)), "--out", str(tmp_path / "o")]) == 2


def test_analyze_exports(tmp_path):
    out = tmp_path / "o"
    p = _cfg(tmp_path, "FT+MIGU", n_tasks=3, extra="\n[migu]\ncomponents = ffn_1\n")
    assert main(["analyze", "--config", str(p), "--out", str(out)]) == 0
    svg = out / "similarity" / "blocks.0.ffn_1.svg"
    assert svg.exists() and svg.read_text().count('class="cell"') == 9
    assert len((out / "similarity" / "blocks.0.ffn_1.csv").read_text().splitlines()) == 2 + 9
    dist = (out / "distributions.csv").read_text().splitlines()
    assert dist[0] == "layer_id,column_index,magnitude,normalized_magnitude" and len(dist) == 1 + 3 * 32
    summary = json.loads((out / "similarity_summary.json").read_text())
    assert 0.0 <= summary["mean_off_diagonal_overlap"] <= 1.0


def test_analyze_highlight_submatrix(tmp_path):
    out = tmp_path / "o"
    p = _cfg(tmp_path, "FT+MIGU", n_tasks=3,
             extra="\n[migu]\ncomponents = ffn_1\n[analysis]\nsamples = 16\nhighlight = 0, 2\n")
    main(["analyze", "--config", str(p), "--out", str(out)])
    assert (out / "similarity" / "blocks.0.ffn_1.svg").read_text().count('class="cell"') == 4


def test_timing_mode(tmp_path):
    out = tmp_path / "o"
    p = _cfg(tmp_path, extra="\n[timing]\nrepetitions = 3\n")
    assert main(["timing", "--config", str(p), "--out", str(out)]) == 0
    lines = (out / "timing.csv").read_text().splitlines()
    assert lines[0] == "method,task,wall_ms,overhead_pct" and len(lines) == 1 + 3 * 2
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["timing"]) == {"FT", "FT+MIGU", "FT+MIGU(T=0)"}


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "migu.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "migu" in r.stdout
