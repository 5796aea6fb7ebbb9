"""Join evaluation outputs of several runs into comparison and ablation tables."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import DIFFICULTIES
from .plotting import bar_chart, line_chart, write_svg


class ReportInputError(ValueError):
    pass


@dataclass
class RunRecord:
    name: str
    label: str
    flags: dict
    ap: dict
    history: list = field(default_factory=list)

    @property
    def modality(self) -> str:
        return "L+I" if self.flags.get("multimodal") else "L"

    @property
    def sources(self) -> str:
        return "+".join(self.flags.get("domains", [])) or "?"

    def ablation_key(self) -> tuple:
        f = self.flags
        return (bool(f.get("multi_source")), bool(f.get("multimodal")), bool(f.get("contrastive")))


def _find_report(path: Path) -> Path:
    for cand in (path / "report.json", path / "eval" / "report.json"):
        if cand.exists():
            return cand
    raise ReportInputError(f"{path}: no report.json found (looked in the directory and its eval/)")


def load_run(path) -> RunRecord:
    path = Path(path)
    rep = _find_report(path)
    try:
        doc = json.loads(rep.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportInputError(f"{rep}: invalid JSON ({exc})") from None
    if doc.get("schema") != 1 or "ap" not in doc:
        raise ReportInputError(f"{rep}: not an evaluation report")
    meta = doc.get("meta", {})
    history = []
    for mpath in (path / "train" / "metrics.jsonl", path / "metrics.jsonl"):
        if mpath.exists():
            history = [json.loads(s) for s in mpath.read_text(encoding="utf-8").splitlines() if s.strip()]
            break
    name = meta.get("run") or path.name
    label = meta.get("label") or ("CLIX3D" if meta.get("contrastive") else "DT")
    return RunRecord(str(name), str(label), meta, doc["ap"], history)


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def _median(vals):
    vals = [v for v in vals if v is not None]
    return statistics.median(vals) if vals else None


def comparison_table(runs: list, classes=None) -> str:
    """One row per run (label, sources, modality) with easy/moderate/hard AP per class."""
    classes = classes or (list(runs[0].ap) if runs else [])
    head = f"{'run':<22}{'method':<8}{'sources':<16}{'mod':<5}"
    sub = " " * len(head)
    for c in classes:
        head += f"| {c:<26}"
        sub += "| " + "".join(f"{d[:3]:>8} " for d in DIFFICULTIES)[:26].ljust(26)
    lines = [head.rstrip(), sub.rstrip()]
    for r in runs:
        row = f"{r.name[:21]:<22}{r.label:<8}{r.sources[:15]:<16}{r.modality:<5}"
        for c in classes:
            vals = r.ap.get(c, {})
            row += "| " + "".join(f"{_fmt(vals.get(d)):>8} " for d in DIFFICULTIES)[:26].ljust(26)
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def ablation_rows(runs: list, cls: str = "Car", difficulty: str = "moderate") -> list:
    """Rows ``(multi_source, multimodal, contrastive, median AP, n runs)`` in ablation order."""
    groups = {}
    for r in runs:
        groups.setdefault(r.ablation_key(), []).append(r.ap.get(cls, {}).get(difficulty))
    return [(*k, _median(v), len(v)) for k, v in sorted(groups.items())]


def ablation_table(runs: list, cls: str = "Car", difficulty: str = "moderate") -> str:
    mark = {True: "x", False: ""}
    lines = [f"{'Multi-source':<14}{'Multimodal':<12}{'Contrastive loss':<18}{cls + ' ' + difficulty:>16}{'runs':>6}"]
    for ms, mm, con, ap, n in ablation_rows(runs, cls, difficulty):
        lines.append(f"{mark[ms]:^14}{mark[mm]:^12}{mark[con]:^18}{_fmt(ap):>16}{n:>6}")
    return "\n".join(lines) + "\n"


def build_report(run_dirs: list, out_dir, cls: str = "Car", difficulty: str = "moderate") -> dict:
    runs = [load_run(p) for p in run_dirs]
    if not runs:
        raise ReportInputError("no runs given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comp = comparison_table(runs)
    abl = ablation_table(runs, cls, difficulty)
    (out / "comparison.txt").write_text(comp, encoding="utf-8")
    (out / "ablation.txt").write_text(abl, encoding="utf-8")
    doc = {"schema": 1, "metric": {"class": cls, "difficulty": difficulty},
           "runs": [{"name": r.name, "label": r.label, "flags": r.flags, "ap": r.ap} for r in runs],
           "ablation": [{"multi_source": ms, "multimodal": mm, "contrastive": con, "ap": ap, "runs": n}
                        for ms, mm, con, ap, n in ablation_rows(runs, cls, difficulty)]}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_svg(out / "ap_by_run.svg",
              bar_chart([f"{r.name} ({r.label})" for r in runs],
                        [r.ap.get(cls, {}).get(difficulty) for r in runs],
                        title=f"{cls} {difficulty} AP", ylabel="AP"))
    series = {r.name: [(row["epoch"], row["total"]) for row in r.history] for r in runs if r.history}
    if series:
        write_svg(out / "training_loss.svg", line_chart(series, "training loss", "epoch", "total loss"))
    return doc
