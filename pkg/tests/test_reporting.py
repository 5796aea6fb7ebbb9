import json
import math

import pytest

from clix3d.evaluation import write_report
from clix3d.experiment import (RUN_FULL, RUN_FUSION, RUN_MULTI, ExperimentPlan, ExperimentSummary,
                               ablation_check, quick_plan, trend_check)
from clix3d.plotting import bar_chart, line_chart
from clix3d.reporting import ReportInputError, ablation_rows, build_report, load_run


def make_run(d, name, ap, ms, mm, con, history=None):
    write_report({"Car": {"easy": ap + 5, "moderate": ap, "hard": ap - 5}}, d / "eval",
                 {"run": name, "multi_source": ms, "multimodal": mm, "contrastive": con,
                  "label": "CLIX3D" if con else "DT", "domains": ["kitti", "lyft"] if ms else ["kitti"]})
    if history:
        (d / "train").mkdir(parents=True)
        (d / "train" / "metrics.jsonl").write_text("".join(json.dumps(h) + "\n" for h in history))
    return d


def test_three_row_ablation_in_order(tmp_path):
    runs = [make_run(tmp_path / "c", "full", 30.0, True, True, True),
            make_run(tmp_path / "a", "multi", 20.0, True, False, False),
            make_run(tmp_path / "b", "fusion", 25.0, True, True, False, [{"epoch": 1, "total": 3.0},
                                                                         {"epoch": 2, "total": 2.0}])]
    doc = build_report(runs, tmp_path / "out")
    rows = [(r["multi_source"], r["multimodal"], r["contrastive"], r["ap"]) for r in doc["ablation"]]
    assert rows == [(True, False, False, 20.0), (True, True, False, 25.0), (True, True, True, 30.0)]
    text = (tmp_path / "out" / "ablation.txt").read_text().splitlines()
    assert len(text) == 4 and text[0].startswith("Multi-source")
    assert (tmp_path / "out" / "training_loss.svg").exists()
    comp = (tmp_path / "out" / "comparison.txt").read_text()
    assert "L+I" in comp and "CLIX3D" in comp


def test_ablation_median_over_seeds(tmp_path):
    runs = [load_run(make_run(tmp_path / f"r{i}", f"m{i}", ap, True, False, False))
            for i, ap in enumerate((10.0, 30.0, 20.0))]
    assert ablation_rows(runs) == [(True, False, False, 20.0, 3)]


def test_missing_report_is_input_error(tmp_path):
    (tmp_path / "x").mkdir()
    with pytest.raises(ReportInputError):
        load_run(tmp_path / "x")
    (tmp_path / "x" / "report.json").write_text("{}")
    with pytest.raises(ReportInputError):
        load_run(tmp_path / "x")


def test_svg_charts_handle_missing_values():
    svg = bar_chart(["a", "b"], [10.0, None], "t", "AP")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert line_chart({"s": [(1, 2.0), (2, 1.0)]}).startswith("<svg")


# --- experiment checks ----------------------------------------------------------------------

def summary(per_seed):
    import statistics
    runs = list(next(iter(per_seed.values())))
    return ExperimentSummary(per_seed, {r: statistics.median(v[r] for v in per_seed.values()) for r in runs})


def test_trend_and_ablation_checks():
    row = {"single-kitti": 10.0, "single-lyft": 8.0, RUN_MULTI: 13.0, RUN_FUSION: 14.0, RUN_FULL: 16.0}
    s = summary({0: row, 1: {**row, RUN_FUSION: 12.0}})
    plan = ExperimentPlan()
    t = trend_check(s, plan)
    assert t["ok"] and t["best_single"] == 10.0 and t["multi_vs_single"] == 3.0
    assert not trend_check(s, plan, gap=3.5)["ok"]
    assert ablation_check(s) == {"monotone_seeds": [0], "n_seeds": 2}


def test_plan_json_round_trip():
    p = quick_plan(n_train=5, seeds=(1, 2))
    assert ExperimentPlan.from_json(json.loads(json.dumps(p.to_json()))) == p
    with pytest.raises(ValueError):
        ExperimentPlan.from_json({"bogus": 1})
