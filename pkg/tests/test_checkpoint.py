import json
import struct

import numpy as np
import pytest

from migu.checkpoint import (FORMAT_VERSION, MAGIC, checkpoint_to_text, load_checkpoint, load_learner,
                             save_checkpoint, save_learner)
from migu.exceptions import ChecksumError, VersionError
from migu.harness import AccMatrix, ContinualLearner, MethodConfig, conflict_specs, generate_task
from migu.masking import ClusterConfig, MiguConfig
from migu.model import ModelConfig, TinyTransformer
from migu.numerics import AdamW

SMALL = ModelConfig(vocab_size=64, seq_len=8, d_model=16, n_heads=2, n_blocks=1, d_ffn=32)


def _batches(n, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.integers(0, 64, (8, 8)), rng.integers(0, 2, 8)) for _ in range(n)]


def _params(m):
    return {k: p.value.copy() for k, p in m.named_parameters().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("setup", ["ft", "migu", "lora_migu", "inclora", "cluster"])
def test_resume_ten_steps_bitwise(tmp_path, setup):
    m = TinyTransformer(SMALL)
    if setup in ("lora_migu", "inclora"):
        m.enable_lora(r=4, alpha=8, dropout=0.1, seed=3)
    if setup == "inclora":
        m.add_adapters()
    if setup in ("migu", "lora_migu", "inclora"):
        m.attach_migu(MiguConfig(T=0.6))
    if setup == "cluster":
        m.attach_migu(MiguConfig(T=0.5, cluster=ClusterConfig(n_clusters=4)))
    opt = AdamW(1e-2, weight_decay=0.01)
    warm, cont = _batches(3, 1), _batches(10, 2)
    for X, y in warm:
        m.train_step(X, y, opt)
    save_checkpoint(tmp_path / "c.ckpt", m, opt)
    for X, y in cont:
        m.train_step(X, y, opt)
    ck = load_checkpoint(tmp_path / "c.ckpt")
    for X, y in cont:
        ck.model.train_step(X, y, ck.optimizer)
    assert _same(_params(m), _params(ck.model))
    assert ck.model.step == m.step


def test_round_trip_extra_and_rngs(tmp_path):
    m = TinyTransformer(SMALL)
    g = np.random.default_rng(7)
    g.random(3)
    save_checkpoint(tmp_path / "c.ckpt", m, None, {"data": g}, {"note": [1, 2]})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.extra == {"note": [1, 2]}
    assert ck.rngs["data"].random() == g.random()
    assert ck.version == FORMAT_VERSION and ck.optimizer is None


def test_corrupted_file(tmp_path):
    p = save_checkpoint(tmp_path / "c.ckpt", TinyTransformer(SMALL), AdamW())
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


def test_truncated_and_foreign_files(tmp_path):
    p = save_checkpoint(tmp_path / "c.ckpt", TinyTransformer(SMALL))
    p.write_bytes(p.read_bytes()[:20])
    with pytest.raises(ChecksumError):
        load_checkpoint(p)
    q = tmp_path / "x.ckpt"
    q.write_bytes(b"not a checkpoint at all, just some bytes" * 3)
    with pytest.raises(ChecksumError):
        load_checkpoint(q)


def test_version_mismatch_names_both(tmp_path):
    import hashlib

    p = save_checkpoint(tmp_path / "c.ckpt", TinyTransformer(SMALL))
    body = bytearray(p.read_bytes()[:-32])
    struct.pack_into("<I", body, len(MAGIC), 99)
    p.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(VersionError, match=rf"99.*{FORMAT_VERSION}"):
        load_checkpoint(p)


def test_payload_is_little_endian_float32(tmp_path):
    m = TinyTransformer(SMALL)
    p = save_checkpoint(tmp_path / "c.ckpt", m)
    raw = p.read_bytes()
    hlen = struct.unpack_from("<Q", raw, len(MAGIC) + 4)[0]
    header = json.loads(raw[len(MAGIC) + 12: len(MAGIC) + 12 + hlen])
    e = next(a for a in header["arrays"] if a["name"] == "param/head.W")
    assert e["dtype"] == "<f4"
    start = len(MAGIC) + 12 + hlen + e["offset"]
    got = np.frombuffer(raw[start:start + e["nbytes"]], "<f4").reshape(e["shape"])
    assert np.array_equal(got, m.head.W.value)


def test_text_export_diffable(tmp_path):
    m = TinyTransformer(SMALL)
    a = checkpoint_to_text(save_checkpoint(tmp_path / "a.ckpt", m))
    b = checkpoint_to_text(save_checkpoint(tmp_path / "b.ckpt", m))
    assert a == b
    d = json.loads(a)
    assert d["format_version"] == FORMAT_VERSION
    assert np.allclose(d["arrays"]["param/head.b"], m.head.b.value)


def test_learner_round_trip_with_replay(tmp_path):
    specs = conflict_specs(3, vocab_size=SMALL.vocab_size, band_width=16, noise_width=16, n_train=32, n_eval=8,
                           seq_len=8)
    tasks = [generate_task(s, SMALL.vocab_size) for s in specs]
    cfg = MethodConfig("Replay+MIGU", epochs=1, replay_ratio=0.25)

    def start():
        learner = ContinualLearner(TinyTransformer(SMALL), cfg)
        learner.learn_task(tasks[0].train)
        return learner

    a = start()
    save_learner(tmp_path / "l.ckpt", a, AccMatrix(3, [[0.5]]))
    for t in tasks[1:]:
        a.learn_task(t.train)
    b, acc, _ = load_learner(tmp_path / "l.ckpt", cfg)
    assert b.tasks_seen == 1 and acc.rows == [[0.5]]
    for t in tasks[1:]:
        b.learn_task(t.train)
    assert _same(_params(a.model), _params(b.model))
    assert b.losses and a.losses[-len(b.losses):] == b.losses
