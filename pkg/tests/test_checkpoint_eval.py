import json

import numpy as np
import pytest

from conftest import random_inputs, random_model
from mmdit_compress.checkpoint import (
    BLOB,
    MANIFEST,
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    model_hash,
    save_checkpoint,
)
from mmdit_compress.data import canonical_renders
from mmdit_compress.evaluate import EvalReport, classify, evaluate, prompt_match, teacher_gap, val_loss
from mmdit_compress.model import DUAL, SINGLE, forward, init_model
from conftest import small_config


def test_roundtrip_bitwise(tmp_path):
    model = random_model(3)
    save_checkpoint(model, tmp_path / "a")
    back = load_checkpoint(tmp_path / "a")
    assert list(back.params) == list(model.params)
    assert all(back[k].data.tobytes() == model[k].data.tobytes() for k in model.params)
    save_checkpoint(back, tmp_path / "b")
    for f in (BLOB, MANIFEST):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert checkpoint_hash(tmp_path / "a") == model_hash(model)


def test_hybrid_reload_preserves_layout_and_outputs(tmp_path):
    model = random_model(4, (DUAL, DUAL, SINGLE, SINGLE))
    save_checkpoint(model, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.layout == model.layout
    for s in range(5):
        z, t, p = random_inputs(model.config, 1, seed=s)
        np.testing.assert_allclose(forward(back, z, t, p)[0].data, forward(model, z, t, p)[0].data, atol=1e-7)


def test_corrupt_blob_detected(tmp_path):
    save_checkpoint(random_model(2), tmp_path)
    blob = bytearray((tmp_path / BLOB).read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / BLOB).write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path)


def test_truncated_blob_names_lengths(tmp_path):
    m = save_checkpoint(random_model(2), tmp_path)
    (tmp_path / BLOB).write_bytes((tmp_path / BLOB).read_bytes()[:-8])
    with pytest.raises(CheckpointError, match=rf"expected {m['blob_bytes']} bytes, found {m['blob_bytes'] - 8}"):
        load_checkpoint(tmp_path)


def test_bad_version_and_shape(tmp_path):
    save_checkpoint(random_model(2), tmp_path)
    man = json.loads((tmp_path / MANIFEST).read_text())
    (tmp_path / MANIFEST).write_text(json.dumps({**man, "format_version": 99}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path)
    man["params"][0]["shape"] = [1, 1]
    (tmp_path / MANIFEST).write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_val_loss_deterministic_and_near_one_for_zero_gate(tiny_data, schedule):
    _, val = tiny_data
    model = init_model(small_config(2), 0)
    a, b = val_loss(model, val, schedule, 0), val_loss(model, val, schedule, 0)
    assert a == b
    assert abs(a - 1.0) < 0.05
    with pytest.raises(ValueError):
        val_loss(model, val.subset([]), schedule)


def test_teacher_gap_zero_and_symmetric(tiny_data, schedule):
    _, val = tiny_data
    a, b = random_model(2, seed=0), random_model(2, seed=1)
    assert teacher_gap(a, a, val, schedule) == 0.0
    assert teacher_gap(a, b, val, schedule) == pytest.approx(teacher_gap(b, a, val, schedule), rel=1e-12)
    assert teacher_gap(a, b, val, schedule) > 0


def test_noise_images_match_at_chance():
    rng = np.random.default_rng(0)
    trials = 20
    accs = [(classify(rng.uniform(-1, 1, (45, 16, 16, 3))) == np.arange(45)).mean() for _ in range(trials)]
    # mean of 900 Bernoulli(1/45) draws: sd about 0.005
    assert abs(np.mean(accs) - 1 / 45) < 0.02
    assert (classify(canonical_renders()) == np.arange(45)).all()


def test_prompt_match_and_report(tiny_data, schedule):
    _, val = tiny_data
    model = random_model(2)
    acc, imgs = prompt_match(model, schedule, 0, steps=2, return_images=True)
    assert 0 <= acc <= 1 and imgs.shape == (45, 16, 16, 3)
    rep = evaluate(model, val, schedule, teacher=model, probe=False)
    assert rep.teacher_gap == 0.0 and rep.prompt_match is None
    assert json.loads(rep.to_json())["model_hash"] == model_hash(model)
    with pytest.raises(ValueError):
        EvalReport("h", float("nan"), None, None, None, {}, 0.0).validate()
    with pytest.raises(ValueError):
        EvalReport("h", 0.1, None, 1.5, None, {}, 0.0).validate()
