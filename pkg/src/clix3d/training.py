"""Two-phase multi-source training loop, checkpoints and batch inference helpers."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import GtDatabase, apply_augmentations
from .config import TrainConfig, parse_train_config
from .detector import DetectorConfig, batch_loss, infer, init_params
from .scene import Frame, Label, MultiSourceSampler, canonical_label_order

CHECKPOINT_KIND = "clix3d-train"


class CheckpointMismatch(ValueError):
    pass


def restrict_to_range(frame: Frame, pc_range) -> Frame:
    """Drop labels whose center lies outside the detector's xy range."""
    r = pc_range
    labels = [l for l in frame.labels if r[0] <= l.box.cx < r[3] and r[1] <= l.box.cy < r[4]]
    if len(labels) == len(frame.labels):
        return frame
    return replace(frame, labels=canonical_label_order(labels))


def _phase1_doc(cfg: TrainConfig) -> dict:
    doc = cfg.to_json()
    doc.pop("contrast")
    doc.pop("label")
    return doc


def phase1_digest(cfg: TrainConfig) -> str:
    """Hash of every setting that influences training before the contrastive phase."""
    return hashlib.sha256(json.dumps(_phase1_doc(cfg), sort_keys=True).encode()).hexdigest()[:16]


# --- checkpoints --------------------------------------------------------------------------

def save_checkpoint(path, params: dict, state: ad.AdamState, cfg: TrainConfig, epoch: int) -> None:
    tensors = {f"param/{k}": v.data for k, v in params.items()}
    tensors.update({f"adam.m/{k}": v for k, v in state.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in state.v.items()})
    meta = {"kind": CHECKPOINT_KIND, "epoch": epoch, "adam_step": state.step,
            "architecture": cfg.detector.architecture(), "detector": cfg.detector.to_json(),
            "config": cfg.to_json(), "digest": cfg.digest(), "phase1_digest": phase1_digest(cfg)}
    ad.save_tensors(path, tensors, meta)


def load_checkpoint(path, detector: DetectorConfig | None = None):
    """Returns ``(params, adam_state, meta)``; raises on an architecture mismatch."""
    try:
        tensors, meta = ad.load_tensors(path)
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointMismatch(f"{path} is not a training checkpoint")
    if detector is not None and meta["architecture"] != detector.architecture():
        raise CheckpointMismatch(f"{path}: architecture {meta['architecture']} does not match "
                                 f"config {detector.architecture()}")
    params = {k[6:]: ad.parameter(v.copy(), k[6:]) for k, v in tensors.items() if k.startswith("param/")}
    if detector is not None:
        expected = init_params(detector, 0)
        if set(expected) != set(params) or any(expected[k].data.shape != params[k].data.shape for k in params):
            raise CheckpointMismatch(f"{path}: parameter shapes do not match the detector config")
    state = ad.AdamState(step=int(meta.get("adam_step", 0)))
    state.m = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.m/")}
    state.v = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.v/")}
    return params, state, meta


def detector_from_checkpoint(path) -> tuple[DetectorConfig, dict]:
    params, _, meta = load_checkpoint(path)
    return DetectorConfig.from_json(meta["detector"]), params


# --- training -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _frame_seed(seed: int, epoch: int, step: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step, k, 3]).generate_state(1)[0])


def _clip_grads(params: dict, max_norm: float | None) -> float:
    # sorted order: a resumed run holds the same parameters in a different dict order
    sq = sum(float(np.sum(p.grad * p.grad)) for p in ad.iter_params(params) if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= f
    return norm


def train(datasets: dict, cfg: TrainConfig, out_dir=None, *, resume=None, stop_after: int | None = None,
          progress=None) -> TrainResult:
    """Train on ``datasets`` (domain name -> list of frames) per ``cfg``.

    Epochs ``[0, warmup)`` use the detection losses only; later epochs add the
    contrastive term when it is enabled. ``resume`` continues from a checkpoint
    whose settings agree with ``cfg`` up to the end of that checkpoint's epoch
    (a warm-up checkpoint may be shared by runs that differ only in the
    contrastive settings). ``stop_after`` ends training after that epoch count.
    """
    missing = [d for d in cfg.domains if d not in datasets]
    if missing:
        raise ValueError(f"no frames for domains {missing}")
    det = cfg.detector
    data = {d: [restrict_to_range(f, det.pc_range) for f in datasets[d]] for d in cfg.domains}
    if any(len(v) == 0 for v in data.values()):
        raise ValueError("every training domain needs at least one frame")
    seed = int(cfg.seed)
    params = init_params(det, seed)
    state = ad.AdamState(lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)
    start = 0
    if resume is not None:
        params, loaded, meta = load_checkpoint(resume, det)
        start = int(meta["epoch"])
        same = meta["digest"] == cfg.digest()
        shared = meta["phase1_digest"] == phase1_digest(cfg) and start <= cfg.warmup_epochs
        if not (same or shared):
            raise CheckpointMismatch(f"{resume} was written by an incompatible training config")
        state.step, state.m, state.v = loaded.step, loaded.m, loaded.v
    gt_dbs = {}
    if cfg.augment.gt_sample_n > 0:
        gt_dbs = {d: GtDatabase.from_frames(data[d]) for d in cfg.domains}
    sampler = MultiSourceSampler(data, cfg.batch_size, seed)
    steps_per_epoch = len(sampler)
    period = cfg.optimizer.period or max(cfg.total_epochs * steps_per_epoch, 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None and (out / "metrics.jsonl").exists():
            (out / "metrics.jsonl").unlink()
    result = TrainResult(params)
    end = cfg.total_epochs if stop_after is None else min(cfg.total_epochs, stop_after)
    for epoch in range(start, end):
        contrast_phase = epoch >= cfg.warmup_epochs
        ccfg = cfg.contrast if (contrast_phase and cfg.contrast_enabled) else None
        sums = {"loc": 0.0, "cls": 0.0, "rpn": 0.0, "con": 0.0, "total": 0.0, "grad_norm": 0.0}
        n_steps = 0
        for step, batch in enumerate(sampler.epoch(epoch)):
            frames, ledgers = [], []
            for k, fr in enumerate(batch.frames):
                fseed = _frame_seed(seed, epoch, step, k)
                aug, ledger = apply_augmentations(fr, cfg.augment, fseed, gt_dbs.get(fr.domain))
                frames.append(aug)
                ledgers.append(ledger)
            for p in params.values():
                p.grad = None
            with ad.Tape() as tape:
                total, report, _ = batch_loss(frames, ledgers, params, det, ccfg,
                                              _frame_seed(seed, epoch, step, 1000))
            tape.backward(total)
            gnorm = _clip_grads(params, cfg.optimizer.grad_clip)
            if cfg.optimizer.schedule == "one_cycle":
                lr = ad.one_cycle_lr(state.step, cfg.optimizer.lr, period)
            else:
                lr = cfg.optimizer.lr
            ad.adam_step(params, None, state, lr)
            for key, val in (("loc", report.loc), ("cls", report.cls), ("rpn", report.rpn),
                             ("con", report.con), ("total", report.total), ("grad_norm", gnorm)):
                sums[key] += val
            n_steps += 1
        row = {"epoch": epoch + 1, "phase": "contrast" if ccfg is not None else "warmup",
               "steps": n_steps, "adam_step": state.step, "con_weight": ccfg.weight if ccfg else 0.0}
        row.update({k: v / max(n_steps, 1) for k, v in sums.items()})
        result.history.append(row)
        if out is not None:
            ckpt = out / f"epoch_{epoch + 1:03d}.ckpt"
            save_checkpoint(ckpt, params, state, cfg, epoch + 1)
            result.checkpoints.append(ckpt)
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if progress is not None:
            progress(row)
    if out is not None and end == cfg.total_epochs:
        save_checkpoint(out / "final.ckpt", params, state, cfg, end)
    return result


def train_from_json(doc: dict, datasets: dict, out_dir=None, **kw) -> TrainResult:
    return train(datasets, parse_train_config(doc), out_dir, **kw)


# --- prediction ---------------------------------------------------------------------------

def detections_to_labels(dets: list, frame: Frame, classes) -> list:
    """Detections as KITTI-style labels with a score field (2D box from the calibration)."""
    from .scene import bbox_2d
    out = []
    for d in dets:
        box = d.box
        bb = bbox_2d(box, frame.calib, frame.image_dims)
        alpha = float(math.atan2(math.sin(box.theta), math.cos(box.theta)))
        out.append(Label(box, 0.0, 0, bb, alpha, d.score))
    return out


def predict_frames(frames: list, params: dict, det: DetectorConfig, score_thresh: float | None = None) -> dict:
    """``{frame_id: [Detection]}`` for every frame."""
    return {f.frame_id: infer(f, params, det, score_thresh) for f in frames}
