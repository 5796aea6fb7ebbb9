import json

import numpy as np
import pytest

from clix3d.augment import AugConfig
from clix3d.config import ConfigError, TrainConfig, parse_train_config
from clix3d.detector import DetectorConfig
from clix3d.scene import generate_scene, get_profile
from clix3d.training import (CheckpointMismatch, load_checkpoint, phase1_digest, predict_frames, train)

from toy import SMALL_DETECTOR


def datasets(n=4, domains=("kitti", "lyft")):
    return {d: [generate_scene(get_profile(d), 100 * i + s, 5, image_dims=(32, 104), point_scale=0.01,
                               frame_id=f"{s:06d}") for s in range(n)] for i, d in enumerate(domains)}


def small_cfg(**kw):
    base = dict(domains=["kitti", "lyft"], detector=DetectorConfig(**SMALL_DETECTOR), warmup_epochs=2,
                contrast_epochs=0, batch_size=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_run_loss_finite_and_decreasing(tmp_path):
    cfg = small_cfg(augment=AugConfig.disabled(), warmup_epochs=4)
    cfg.optimizer.lr = 0.005
    res = train(datasets(4), cfg, tmp_path)
    totals = [row["total"] for row in res.history]
    assert all(np.isfinite(totals)) and totals[-1] < totals[0]
    assert [row["phase"] for row in res.history] == ["warmup"] * 4
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[0])["epoch"] == 1
    assert (tmp_path / "final.ckpt").exists() and len(res.checkpoints) == 4


def test_identical_seeds_bit_identical_checkpoints(tmp_path):
    data = datasets(2)
    cfg = small_cfg(contrast_epochs=1)
    train(data, cfg, tmp_path / "a")
    train(data, cfg, tmp_path / "b")
    for name in ("epoch_001.ckpt", "epoch_002.ckpt", "epoch_003.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_different_seed_differs(tmp_path):
    data = datasets(2)
    train(data, small_cfg(warmup_epochs=1), tmp_path / "a")
    train(data, small_cfg(warmup_epochs=1, seed=4), tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() != (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    data = datasets(2)
    cfg = small_cfg(warmup_epochs=1, contrast_epochs=1)
    train(data, cfg, tmp_path / "full")
    train(data, cfg, tmp_path / "part", stop_after=1)
    assert not (tmp_path / "part" / "final.ckpt").exists()
    train(data, cfg, tmp_path / "part", resume=tmp_path / "part" / "epoch_001.ckpt")
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "part" / "final.ckpt").read_bytes()


def test_warmup_checkpoint_shared_across_contrast_settings(tmp_path):
    data = datasets(2)
    a = small_cfg(warmup_epochs=1, contrast_epochs=1)
    b = small_cfg(warmup_epochs=1, contrast_epochs=1)
    b.contrast.weight = 0.5
    assert phase1_digest(a) == phase1_digest(b) and a.digest() != b.digest()
    train(data, a, tmp_path / "a", stop_after=1)
    train(data, b, tmp_path / "b", resume=tmp_path / "a" / "epoch_001.ckpt")
    other = small_cfg(warmup_epochs=1, contrast_epochs=1, seed=9)
    with pytest.raises(CheckpointMismatch):
        train(data, other, tmp_path / "c", resume=tmp_path / "a" / "epoch_001.ckpt")


def test_checkpoint_architecture_mismatch(tmp_path):
    train(datasets(2), small_cfg(warmup_epochs=1), tmp_path)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "final.ckpt", DetectorConfig(roi_dim=32))
    params, state, meta = load_checkpoint(tmp_path / "final.ckpt", DetectorConfig(**SMALL_DETECTOR))
    assert meta["epoch"] == 1 and state.step == 2


def test_contrast_phase_logged(tmp_path):
    cfg = small_cfg(warmup_epochs=1, contrast_epochs=1)
    res = train(datasets(2), cfg, None)
    assert [r["phase"] for r in res.history] == ["warmup", "contrast"]
    assert res.history[1]["con_weight"] == cfg.contrast.weight


def test_missing_domain_rejected():
    with pytest.raises(ValueError):
        train({"kitti": []}, small_cfg(), None)


def test_run_labels():
    assert small_cfg(contrast_epochs=0).run_label() == "DT"
    assert small_cfg(contrast_epochs=2).run_label() == "CLIX3D"
    assert small_cfg(contrast_epochs=2, contrast_enabled=False).run_label() == "DT"


def test_predict_frames_keys(tmp_path):
    data = datasets(2)
    res = train(data, small_cfg(warmup_epochs=1), None)
    preds = predict_frames(data["kitti"], res.params, DetectorConfig(**SMALL_DETECTOR), 0.0)
    assert set(preds) == {f.frame_id for f in data["kitti"]}


# --- config parsing -------------------------------------------------------------------------

def test_config_round_trip_and_errors():
    cfg = small_cfg()
    back = parse_train_config(cfg.to_json())
    assert back.to_json() == cfg.to_json()
    doc = cfg.to_json()
    doc["optimizer"]["lr"] = -1.0
    with pytest.raises(ConfigError) as ei:
        parse_train_config(doc)
    assert "optimizer.lr" in str(ei.value)
    doc = cfg.to_json()
    doc["batch_size"] = 3
    with pytest.raises(ConfigError) as ei:
        parse_train_config(doc)
    assert "batch_size" in str(ei.value)
    doc = cfg.to_json()
    doc["bogus"] = 1
    with pytest.raises(ConfigError):
        parse_train_config(doc)
    doc = cfg.to_json()
    doc["schema"] = 99
    with pytest.raises(ConfigError):
        parse_train_config(doc)
