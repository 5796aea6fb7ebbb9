"""Multi-source domain-generalization experiment on synthetic domains.

Per training seed five runs share one generated data set:

* ``single-<src>``: LiDAR-only direct transfer from each source alone,
* ``multi``: LiDAR-only direct transfer from all sources,
* ``multi+fusion``: image fusion, detection losses only,
* ``multi+fusion+con``: image fusion plus the contrastive term.

The two fusion runs share their warm-up checkpoint. Every run is scored on
the unseen target domain.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .augment import AugConfig
from .config import OptimizerConfig, TrainConfig
from .contrast import ContrastConfig
from .detector import DetectorConfig
from .evaluation import EvalConfig, EvalFrame, evaluate_frames, write_report
from .scene import generate_scene, get_profile, normalize_to_canonical
from .training import detections_to_labels, predict_frames, restrict_to_range, train


@dataclass
class ExperimentPlan:
    sources: tuple = ("kitti", "lyft")
    target: str = "nuscenes"
    n_train: int = 200
    n_target: int = 200
    n_objects: int = 8
    image_dims: tuple = (64, 208)
    point_scale: float = 0.05
    data_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    warmup_epochs: int = 4
    contrast_epochs: int = 4
    batch_size: int = 2
    lr: float = 0.01
    contrast_weight: float = 0.02
    contrast_m: int = 8
    gt_sample_n: int = 0
    eval_score_thresh: float = 0.01
    eval_class: str = "Car"
    eval_difficulty: str = "moderate"

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentPlan":
        base = asdict(cls())
        unknown = set(d) - set(base)
        if unknown:
            raise ValueError(f"unknown experiment fields {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(base[k], tuple) else v for k, v in d.items()}
        return cls(**kw)


RUN_SINGLE = "single-{}"
RUN_MULTI = "multi"
RUN_FUSION = "multi+fusion"
RUN_FULL = "multi+fusion+con"


def generate_domain(name: str, n: int, plan: ExperimentPlan, offset: int) -> list:
    prof = get_profile(name)
    return [generate_scene(prof, plan.data_seed * 1_000_003 + offset + i, plan.n_objects,
                           image_dims=plan.image_dims, point_scale=plan.point_scale,
                           frame_id=f"{i:06d}") for i in range(n)]


def generate_data(plan: ExperimentPlan) -> tuple[dict, list]:
    """Training frames per source and canonical target frames."""
    train_sets = {s: generate_domain(s, plan.n_train, plan, 0) for s in plan.sources}
    tprof = get_profile(plan.target)
    target = [normalize_to_canonical(f, tprof) for f in generate_domain(plan.target, plan.n_target, plan, 500_000)]
    return train_sets, target


def train_config(plan: ExperimentPlan, domains, seed: int, fusion: bool, contrast: bool) -> TrainConfig:
    det = DetectorConfig.for_sources([get_profile(d) for d in domains], fusion_enabled=fusion)
    return TrainConfig(
        domains=list(domains), detector=det, augment=AugConfig(gt_sample_n=plan.gt_sample_n),
        contrast=ContrastConfig(m=plan.contrast_m, weight=plan.contrast_weight), contrast_enabled=contrast,
        optimizer=OptimizerConfig(lr=plan.lr), warmup_epochs=plan.warmup_epochs,
        contrast_epochs=plan.contrast_epochs, batch_size=plan.batch_size, seed=seed)


def evaluate_on_target(params, det: DetectorConfig, target: list, plan: ExperimentPlan) -> dict:
    frames = [restrict_to_range(f, det.pc_range) for f in target]
    preds = predict_frames(frames, params, det, plan.eval_score_thresh)
    efs = [EvalFrame(f.frame_id, f.labels, f.calib, f.image_dims,
                     detections_to_labels(preds[f.frame_id], f, det.classes)) for f in frames]
    return evaluate_frames(efs, EvalConfig.for_profile(plan.target))


def _flags(cfg: TrainConfig) -> dict:
    return {"multi_source": len(cfg.domains) > 1, "multimodal": cfg.detector.fusion_enabled,
            "contrastive": cfg.uses_contrast, "label": cfg.run_label(), "domains": list(cfg.domains)}


def run_seed(plan: ExperimentPlan, seed: int, train_sets: dict, target: list, workdir,
             progress=None) -> dict:
    """All runs for one training seed; returns ``{run name: AP table}``."""
    workdir = Path(workdir)
    runs = [(RUN_SINGLE.format(s), [s], False, False) for s in plan.sources]
    runs += [(RUN_MULTI, list(plan.sources), False, False), (RUN_FUSION, list(plan.sources), True, False),
             (RUN_FULL, list(plan.sources), True, True)]
    out = {}
    for name, domains, fusion, con in runs:
        cfg = train_config(plan, domains, seed, fusion, con)
        run_dir = workdir / f"seed{seed}" / name
        resume = None
        if name == RUN_FULL and plan.warmup_epochs > 0:
            shared = workdir / f"seed{seed}" / RUN_FUSION / "train" / f"epoch_{plan.warmup_epochs:03d}.ckpt"
            resume = shared if shared.exists() else None
        t0 = time.time()
        res = train({d: train_sets[d] for d in domains}, cfg, run_dir / "train", resume=resume)
        table = evaluate_on_target(res.params, cfg.detector, target, plan)
        meta = {"run": name, "seed": seed, "target": plan.target, "train_seconds": round(time.time() - t0, 1),
                **_flags(cfg)}
        (run_dir / "train" / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        write_report(table, run_dir / "eval", meta)
        out[name] = table
        if progress is not None:
            progress(seed, name, table, meta)
    return out


def headline(table: dict, plan: ExperimentPlan) -> float:
    v = table.get(plan.eval_class, {}).get(plan.eval_difficulty)
    return float("nan") if v is None else float(v)


@dataclass
class ExperimentSummary:
    per_seed: dict = field(default_factory=dict)     # seed -> run -> headline AP
    medians: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {"per_seed": {str(k): v for k, v in self.per_seed.items()}, "medians": self.medians,
                "seconds": self.seconds}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSummary":
        return cls({int(k): v for k, v in d["per_seed"].items()}, d["medians"], d.get("seconds", 0.0))


def summarize(results: dict, plan: ExperimentPlan) -> ExperimentSummary:
    per_seed = {s: {run: headline(t, plan) for run, t in r.items()} for s, r in sorted(results.items())}
    runs = sorted({run for r in per_seed.values() for run in r})
    medians = {run: statistics.median(per_seed[s][run] for s in per_seed) for run in runs}
    return ExperimentSummary(per_seed, medians)


def trend_check(summary: ExperimentSummary, plan: ExperimentPlan, gap: float = 2.0) -> dict:
    """Median ordering full > multi DT > best single DT, each by at least ``gap`` points."""
    m = summary.medians
    best_single = max(m[RUN_SINGLE.format(s)] for s in plan.sources)
    return {"full": m[RUN_FULL], "multi": m[RUN_MULTI], "best_single": best_single,
            "full_vs_multi": m[RUN_FULL] - m[RUN_MULTI], "multi_vs_single": m[RUN_MULTI] - best_single,
            "ok": m[RUN_FULL] - m[RUN_MULTI] >= gap and m[RUN_MULTI] - best_single >= gap}


def ablation_check(summary: ExperimentSummary) -> dict:
    """Seeds whose target AP is non-decreasing over multi, +fusion, +contrastive."""
    good = [s for s, r in summary.per_seed.items()
            if r[RUN_MULTI] <= r[RUN_FUSION] <= r[RUN_FULL]]
    return {"monotone_seeds": good, "n_seeds": len(summary.per_seed)}


def run_experiment(plan: ExperimentPlan, workdir, progress=None) -> ExperimentSummary:
    t0 = time.time()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "plan.json").write_text(json.dumps(plan.to_json(), indent=2, sort_keys=True))
    train_sets, target = generate_data(plan)
    results = {s: run_seed(plan, s, train_sets, target, workdir, progress) for s in plan.seeds}
    summary = summarize(results, plan)
    summary.seconds = round(time.time() - t0, 1)
    (workdir / "summary.json").write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True))
    return summary


def quick_plan(**kw) -> ExperimentPlan:
    return replace(ExperimentPlan(), **kw)
