"""``clix3d`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import os
import sys

_threads = os.environ.get("CLIX_THREADS")
if _threads is not None and _threads.strip().isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads.strip())

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import subprocess  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
log = logging.getLogger("clix3d")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def version_string() -> str:
    """``git describe`` output when run from a checkout, else ``v<package version>``."""
    try:
        res = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if res.returncode == 0 and res.stdout.strip():
            return f"v{__version__}-{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command: str, config, seed, started: str, extra: dict | None = None) -> Path:
    """Atomically write ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema": 1, "command": command, "config": None if config is None else str(config),
           "seed": seed, "version": version_string(), "started": started, "finished": _now(),
           "output_dir": str(out.resolve()), **(extra or {})}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(out / "manifest.json")
    return out / "manifest.json"


def _profile(name: str):
    from .scene import get_profile
    try:
        return get_profile(name)
    except KeyError:
        from .scene import load_profiles
        raise UsageError(f"unknown profile {name!r}; known: {', '.join(sorted(load_profiles()))}") from None


def _writable_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_split(path):
    from .scene import MalformedFileError, read_split
    try:
        return read_split(path)
    except (FileNotFoundError, MalformedFileError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split {path}: {exc}") from None


# --- subcommands --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .scene import generate_scene, normalize_to_canonical, write_split
    prof = _profile(args.profile)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    started = _now()
    out = _writable_dir(args.out)
    frames = []
    for i in range(args.n):
        raw = generate_scene(prof, args.seed * 1_000_003 + i, args.objects, image_dims=tuple(args.image_dims),
                             point_scale=args.point_scale, frame_id=f"{i:06d}")
        frames.append(normalize_to_canonical(raw, prof, apply_shift=False))
    write_split(out, frames, prof)
    log.info("wrote %d %s frames to %s", len(frames), prof.name, out)
    write_manifest(out, "synth", None, args.seed, started,
                   {"profile": prof.name, "n": args.n, "objects": args.objects,
                    "image_dims": list(args.image_dims), "point_scale": args.point_scale})
    return EXIT_OK


def cmd_convert(args) -> int:
    from .scene import MalformedFileError, list_frame_ids, normalize_to_canonical, read_frame, write_split
    prof = _profile(args.profile)
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"input directory {src} does not exist")
    started = _now()
    errors, frames = [], []
    for fid in list_frame_ids(src):
        try:
            frames.append(read_frame(src, fid, prof.name))
        except (FileNotFoundError, MalformedFileError, ValueError) as exc:
            errors.append(f"{fid}: {exc}")
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        raise DataError(f"{len(errors)} frame(s) violate the input layout")
    out = _writable_dir(args.out)
    converted, n_in, n_out = [], 0, 0
    for fr in frames:
        norm = normalize_to_canonical(fr, prof)
        n_in += len(fr.points)
        n_out += len(norm.points)
        if len(norm.points) == 0:
            log.warning("frame %s: no points left inside the camera view and range", fr.frame_id)
        converted.append(norm)
    write_split(out, converted, prof)
    print(f"converted {len(converted)} frames: {n_in} -> {n_out} points, "
          f"ground shift {prof.ground_shift_on_eval:+g} m")
    write_manifest(out, "convert", None, None, started,
                   {"profile": prof.name, "input": str(src), "frames": len(converted)})
    return EXIT_OK


def _train_config(path):
    from .config import load_json, parse_train_config
    doc = load_json(path)
    return doc, parse_train_config(doc)


def cmd_train(args) -> int:
    from .training import CheckpointMismatch, train
    doc, cfg = _train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    missing = [d for d in cfg.domains if d not in cfg.datasets]
    if missing:
        raise UsageError(f"datasets: no split directory given for domains {missing}")
    started = _now()
    base = Path(args.config).resolve().parent
    datasets = {}
    for d in cfg.domains:
        p = Path(cfg.datasets[d])
        datasets[d] = [f for f in _load_split(p if p.is_absolute() else base / p)]
        for f in datasets[d]:
            f.domain = d
    out = _writable_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    try:
        res = train(datasets, cfg, out, resume=args.resume,
                    progress=lambda row: log.info("epoch %d (%s): total %.4f", row["epoch"], row["phase"],
                                                  row["total"]))
    except CheckpointMismatch as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_manifest(out, "train", args.config, cfg.seed, started,
                   {"epochs": len(res.history), "label": cfg.run_label(), "digest": cfg.digest()})
    return EXIT_OK


def cmd_predict(args) -> int:
    from .scene import write_labels
    from .training import CheckpointMismatch, detections_to_labels, detector_from_checkpoint, predict_frames
    try:
        det, params = detector_from_checkpoint(args.checkpoint)
    except CheckpointMismatch as exc:
        raise UsageError(str(exc)) from None
    started = _now()
    frames = _load_split(args.data)
    out = _writable_dir(args.out)
    thresh = det.score_thresh if args.score_thresh is None else args.score_thresh
    preds = predict_frames(frames, params, det, thresh)
    for f in frames:
        write_labels(out / f"{f.frame_id}.txt", detections_to_labels(preds[f.frame_id], f, det.classes))
    write_manifest(out, "predict", args.checkpoint, None, started, {"frames": len(frames), "score_thresh": thresh})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import ConfigError, load_json, parse_eval_config, parse_train_config
    from .evaluation import EvalIdMismatch, evaluate_dataset, format_table, write_report
    from .scene import MalformedFileError, read_split_profile
    started = _now()
    try:
        profile = read_split_profile(args.gt)
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"ground-truth split: {exc}") from None
    meta = {"gt": str(args.gt), "dets": str(args.dets), "target": profile.name}
    doc = {}
    if args.config is not None:
        doc = load_json(args.config)
        if "domains" in doc:
            cfg = parse_train_config(doc)
            meta.update({"multi_source": len(cfg.domains) > 1, "multimodal": cfg.detector.fusion_enabled,
                         "contrastive": cfg.uses_contrast, "label": cfg.run_label(),
                         "domains": list(cfg.domains), "run": args.name or cfg.label or None})
    if args.name:
        meta["run"] = args.name
    ecfg = parse_eval_config(doc, profile.name)
    if args.preset:
        try:
            ecfg = parse_eval_config({"eval": {"preset": args.preset}}, profile.name)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    try:
        report = evaluate_dataset(args.dets, args.gt, ecfg, profile)
    except EvalIdMismatch as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        raise DataError("frame ids of predictions and ground truth do not match") from None
    except (FileNotFoundError, MalformedFileError) as exc:
        raise DataError(str(exc)) from None
    meta["eval"] = ecfg.to_json()
    out = _writable_dir(args.out)
    write_report(report, out, {k: v for k, v in meta.items() if v is not None})
    print(format_table(report, f"3D AP ({ecfg.mode}) on {profile.name}"), end="")
    write_manifest(out, "eval", args.config, None, started)
    return EXIT_OK


def cmd_report(args) -> int:
    from .reporting import ReportInputError, build_report
    started = _now()
    out = _writable_dir(args.out)
    try:
        build_report(args.runs, out, args.cls, args.difficulty)
    except ReportInputError as exc:
        raise DataError(str(exc)) from None
    print((out / "comparison.txt").read_text(encoding="utf-8"), end="")
    print()
    print((out / "ablation.txt").read_text(encoding="utf-8"), end="")
    write_manifest(out, "report", None, None, started, {"runs": [str(r) for r in args.runs]})
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .config import load_json
    from .experiment import ExperimentPlan, ablation_check, run_experiment, trend_check
    started = _now()
    try:
        plan = ExperimentPlan.from_json(load_json(args.plan)) if args.plan else ExperimentPlan()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"experiment plan: {exc}") from None
    out = _writable_dir(args.out)
    summary = run_experiment(plan, out, lambda s, n, t, m: log.info("seed %d %s done in %.0fs", s, n,
                                                                      m["train_seconds"]))
    print(json.dumps({"medians": summary.medians, "trend": trend_check(summary, plan),
                      "ablation": ablation_check(summary)}, indent=2, sort_keys=True))
    write_manifest(out, "experiment", args.plan, list(plan.seeds), started)
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clix3d", description="Multi-source LiDAR/image 3D detection toolkit on synthetic domains.")
    p.add_argument("--version", action="version", version=f"clix3d {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic split for a domain profile")
    s.add_argument("--profile", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int, default=8)
    s.add_argument("--image-dims", type=int, nargs=2, default=(64, 208), metavar=("H", "W"))
    s.add_argument("--point-scale", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", help="normalize a split to the canonical frame")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--profile", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("train", help="train a detector from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write prediction label files for a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--score-thresh", type=float, default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="compute 3D AP of prediction files against a split")
    s.add_argument("--dets", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--config", default=None, help="training or eval config (labels the run)")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", default=None, help="IoU threshold preset (kitti, nuscenes, parta2-main, ...)")
    s.add_argument("--name", default=None, help="run name shown in reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="join evaluation outputs into comparison and ablation tables")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--class", dest="cls", default="Car")
    s.add_argument("--difficulty", default="moderate", choices=("easy", "moderate", "hard"))
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("experiment", help="run the multi-source generalization experiment")
    s.add_argument("--plan", default=None, help="JSON experiment plan (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"clix3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:           # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if _threads is not None and not (_threads.strip().isdigit() and int(_threads) > 0):
        print(f"clix3d: error: CLIX_THREADS must be a positive integer, got {_threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"clix3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"clix3d: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
