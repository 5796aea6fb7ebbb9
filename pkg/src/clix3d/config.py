"""JSON run configuration with path-qualified validation errors."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugConfig
from .contrast import ContrastConfig
from .detector import DetectorConfig
from .evaluation import EvalConfig
from .fusion import StagePlan

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        self.path = path
        super().__init__(f"{path}: {msg}" if path else msg)


def _expect(doc, key, kind, path, default=None, required=False):
    if key not in doc:
        if required:
            raise ConfigError(f"{path}{key}", "required field is missing")
        return default
    val = doc[key]
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    if not isinstance(val, kinds) or (isinstance(val, bool) and bool not in kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{path}{key}", f"expected {names}, got {type(val).__name__}")
    return val


def _sub(doc, key, path, factory, known):
    block = _expect(doc, key, dict, path, {})
    extra = sorted(set(block) - set(known))
    if extra:
        raise ConfigError(f"{path}{key}.{extra[0]}", "unknown field")
    try:
        return factory(block)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}{key}", str(exc)) from None


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 0.01
    schedule: str = "one_cycle"
    period: int | None = None
    grad_clip: float | None = 10.0

    def to_json(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "schedule": self.schedule,
                "period": self.period, "grad_clip": self.grad_clip}


@dataclass
class TrainConfig:
    domains: list
    datasets: dict = field(default_factory=dict)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugConfig = field(default_factory=AugConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    contrast_enabled: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    warmup_epochs: int = 30
    contrast_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    label: str = ""

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.contrast_epochs

    @property
    def uses_contrast(self) -> bool:
        return self.contrast_enabled and self.contrast_epochs > 0

    def run_label(self) -> str:
        """Row label used in comparison reports."""
        if self.label:
            return self.label
        return "CLIX3D" if self.uses_contrast else "DT"

    def to_json(self) -> dict:
        det = self.detector.to_json()
        plan = det.pop("plan")
        return {"schema": SCHEMA_VERSION, "domains": list(self.domains), "datasets": dict(self.datasets),
                "stage_plan": plan, "detector": det, "augment": self.augment.to_json(),
                "contrast": {**self.contrast.to_json(), "enabled": self.contrast_enabled},
                "optimizer": self.optimizer.to_json(),
                "epochs": {"warmup": self.warmup_epochs, "contrast": self.contrast_epochs},
                "batch_size": self.batch_size, "seed": self.seed, "label": self.label}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


_TOP = {"schema", "domains", "datasets", "stage_plan", "detector", "augment", "contrast", "optimizer",
        "epochs", "batch_size", "seed", "label", "eval"}


def parse_train_config(doc: dict) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    extra = sorted(set(doc) - _TOP)
    if extra:
        raise ConfigError(extra[0], "unknown field")
    schema = _expect(doc, "schema", int, "", required=True)
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported schema version {schema} (expected {SCHEMA_VERSION})")
    domains = _expect(doc, "domains", list, "", required=True)
    if not domains or not all(isinstance(d, str) for d in domains):
        raise ConfigError("domains", "expected a non-empty list of domain names")
    datasets = _expect(doc, "datasets", dict, "", {})
    plan = _sub(doc, "stage_plan", "", StagePlan.from_json, {"dims", "strides", "patch_k", "fuse_mask"})
    det_block = _expect(doc, "detector", dict, "", {})
    try:
        det = DetectorConfig.from_json({**det_block, "plan": plan.to_json()})
    except (TypeError, ValueError) as exc:
        raise ConfigError("detector", str(exc)) from None
    aug = _sub(doc, "augment", "", AugConfig.from_json, {"rotation_range", "scale_range", "gt_sample_n"})
    cblock = dict(_expect(doc, "contrast", dict, "", {}))
    enabled = cblock.pop("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError("contrast.enabled", "expected bool")
    con = _sub({"contrast": cblock}, "contrast", "", ContrastConfig.from_json,
               {"m", "cross_domain_only", "class_weights", "include_background", "weight", "bg_iou_max"})
    oblock = _expect(doc, "optimizer", dict, "", {})
    extra = sorted(set(oblock) - {"lr", "weight_decay", "schedule", "period", "grad_clip"})
    if extra:
        raise ConfigError(f"optimizer.{extra[0]}", "unknown field")
    opt = OptimizerConfig(
        lr=_expect(oblock, "lr", float, "optimizer.", 0.01),
        weight_decay=_expect(oblock, "weight_decay", float, "optimizer.", 0.01),
        schedule=_expect(oblock, "schedule", str, "optimizer.", "one_cycle"),
        period=_expect(oblock, "period", (int, type(None)), "optimizer.", None),
        grad_clip=_expect(oblock, "grad_clip", (float, type(None)), "optimizer.", 10.0))
    if opt.schedule not in ("one_cycle", "constant"):
        raise ConfigError("optimizer.schedule", "expected 'one_cycle' or 'constant'")
    if opt.lr <= 0:
        raise ConfigError("optimizer.lr", "must be > 0")
    eblock = _expect(doc, "epochs", dict, "", {})
    warm = _expect(eblock, "warmup", int, "epochs.", 30)
    cont = _expect(eblock, "contrast", int, "epochs.", 30)
    if warm < 0 or cont < 0:
        raise ConfigError("epochs", "epoch counts must be >= 0")
    b = _expect(doc, "batch_size", int, "", 32)
    if b <= 0 or b % len(domains):
        raise ConfigError("batch_size", f"must be a positive multiple of the {len(domains)} domains")
    seed = _expect(doc, "seed", int, "", 0)
    label = _expect(doc, "label", str, "", "")
    return TrainConfig(list(domains), dict(datasets), det, aug, con, enabled, opt, warm, cont, b, seed, label)


def parse_eval_config(doc: dict, profile_name: str = "") -> EvalConfig:
    block = dict(doc.get("eval", {})) if isinstance(doc, dict) else {}
    preset = block.pop("preset", None)
    try:
        if preset is not None or "iou_thresholds" not in block:
            cfg = EvalConfig.for_profile(profile_name, preset, **{k: v for k, v in block.items()
                                                                  if k != "iou_thresholds"})
        else:
            cfg = EvalConfig.from_json(block)
    except (TypeError, ValueError) as exc:
        raise ConfigError("eval", str(exc)) from None
    return cfg


def load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
