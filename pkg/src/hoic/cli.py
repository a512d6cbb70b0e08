"""Command-line entry point: ``hoic <gen|train|infer|eval|gradcheck|report> [flags]``.

Exit status: 0 on success, 1 on a validation error (bad flag, malformed
input file), 2 on a runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from collections import defaultdict
from pathlib import Path

from . import dataio, evaluate as ev, gradaudit, train
from .dataio import DatasetError, SyntheticConfig
from .model import load_checkpoint
from .plots import line_chart

logger = logging.getLogger("hoic")


class UsageError(Exception):
    """Invalid flags or inputs; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


# --------------------------------------------------------------------------
# argument grammar


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", default="all", choices=("all", "train", "val", "test"),
                   help="which part of a seeded video split to use")
    p.add_argument("--split-fractions", default="0.8,0.1,0.1")
    p.add_argument("--split-seed", type=int, default=0)


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--setting", default="both", choices=("ko", "def", "both"))
    p.add_argument("--labels-subset", type=int, default=None,
                   help="query only the first N labels in the def setting")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hoic", description="Weakly supervised human-object interaction grounding.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a seeded synthetic dataset")
    _common(g)
    g.add_argument("--out", required=True, help="output directory (must be absent or empty)")
    d = SyntheticConfig()
    g.add_argument("--videos", type=int, default=d.videos)
    g.add_argument("--frames", type=int, default=d.frames)
    g.add_argument("--humans", type=int, default=d.humans)
    g.add_argument("--objects", type=int, default=d.objects)
    g.add_argument("--dim", type=int, default=d.dim)
    g.add_argument("--word-dim", type=int, default=None)
    g.add_argument("--signal", type=float, default=d.signal)
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--human-signal", type=float, default=d.human_signal)
    g.add_argument("--n-verbs", type=int, default=d.n_verbs)
    g.add_argument("--n-objects", type=int, default=d.n_objects)

    t = sub.add_parser("train", help="train on a dataset and write a checkpoint plus a JSON-lines log")
    _common(t)
    _split_flags(t)
    c = train.TrainConfig()
    t.add_argument("--dataset", required=True, help="path to manifest.json")
    t.add_argument("--out", required=True, help="output directory for checkpoints and train_log.jsonl")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--epochs", type=int, default=c.epochs)
    t.add_argument("--frames-per-video", type=int, default=c.frames_per_video)
    t.add_argument("--frame-sampling", default=c.frame_sampling, choices=("random", "uniform"))
    t.add_argument("--alpha", type=float, default=c.alpha)
    t.add_argument("--negatives", type=int, default=c.n_l, help="vocabulary negatives per alignment term")
    t.add_argument("--temporal-negatives", type=int, default=c.n_neg_temporal)
    t.add_argument("--lr", type=float, default=c.lr_main)
    t.add_argument("--lr-backbone", type=float, default=c.lr_backbone,
                   help="accepted for completeness and ignored: there is no backbone to train")
    t.add_argument("--hidden", type=int, default=None, help="attention MLP width (default: feature dim)")
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--clip-norm", type=float, default=c.clip_norm, help="global gradient norm cap; 0 disables")
    t.add_argument("--no-sparsity", action="store_true")
    t.add_argument("--no-temporal", action="store_true")

    i = sub.add_parser("infer", help="write a predictions file from a checkpoint")
    _common(i)
    _split_flags(i)
    _eval_flags(i)
    i.add_argument("--dataset", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True, help="predictions JSON-lines file")

    e = sub.add_parser("eval", help="score predictions (or a checkpoint) against annotations")
    _common(e)
    _split_flags(e)
    _eval_flags(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions")
    e.add_argument("--out", required=True, help="output directory for report.json/report.csv")
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.add_argument("--mode", default="both", choices=("phrase", "relation", "both"))
    e.add_argument("--plots", action="store_true", help="also write one precision-recall SVG per class")

    gc = sub.add_parser("gradcheck", help="finite-difference audit of every loss")
    _common(gc)
    gc.add_argument("--dim", type=int, default=8)
    gc.add_argument("--instances", type=int, default=10)
    gc.add_argument("--negatives", type=int, default=3)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)

    r = sub.add_parser("report", help="turn a training log into loss-curve CSV and SVG")
    _common(r)
    r.add_argument("--log", required=True, help="train_log.jsonl written by `hoic train`")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--window", type=int, default=1, help="moving-average window in steps")
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError(f"--config {args.config}: expected a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(k for k in (key.replace("-", "_") for key in overrides) if k not in known)
        if unknown:
            raise UsageError(f"--config {args.config}: unknown keys {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


# --------------------------------------------------------------------------
# helpers


def _load(args) -> dataio.Dataset:
    ds = dataio.load_dataset(args.dataset)
    if getattr(args, "split", "all") == "all":
        return ds
    try:
        fractions = tuple(float(x) for x in args.split_fractions.split(","))
    except ValueError as exc:
        raise UsageError(f"--split-fractions: {exc}") from exc
    parts = dict(zip(("train", "val", "test"), dataio.split(ds.videos, fractions, args.split_seed)))
    return dataio.subset(ds, parts[args.split])


def _check_out_dir(path: Path) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise UsageError(f"--out {path}: exists and is not an empty directory")


def _eval_config(args) -> ev.EvalConfig:
    cfg = ev.EvalConfig(iou_thresh=getattr(args, "iou_thresh", 0.5), topk=args.topk, setting=args.setting,
                        mode=getattr(args, "mode", "both"), labels_subset=args.labels_subset, workers=args.workers)
    if not 0.0 < cfg.iou_thresh < 1.0:
        raise UsageError(f"--iou-thresh must lie in (0, 1), got {cfg.iou_thresh}")
    if cfg.topk < 1 or cfg.workers < 1:
        raise UsageError("--topk and --workers must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    cfg = SyntheticConfig(videos=args.videos, frames=args.frames, humans=args.humans, objects=args.objects,
                          dim=args.dim, word_dim=args.word_dim, signal=args.signal, noise=args.noise,
                          human_signal=args.human_signal, n_verbs=args.n_verbs, n_objects=args.n_objects,
                          seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    _check_out_dir(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        dataio.save_dataset(dataio.generate_synthetic(cfg), tmp)
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    print(out / "manifest.json")


def cmd_train(args) -> None:
    cfg = train.TrainConfig(epochs=args.epochs, frames_per_video=args.frames_per_video,
                            frame_sampling=args.frame_sampling, lr_main=args.lr, lr_backbone=args.lr_backbone,
                            alpha=args.alpha, n_l=args.negatives, n_neg_temporal=args.temporal_negatives,
                            seed=args.seed, checkpoint_interval=args.checkpoint_interval,
                            clip_norm=args.clip_norm or None, use_sparsity=not args.no_sparsity,
                            use_temporal=not args.no_temporal, hidden=args.hidden)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = _load(args)
    start = None
    if args.checkpoint:
        start, _ = train.resume(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".train_log.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as log:
            ckpt = train.train_loop(ds, cfg, out, start=start, log=log)
        os.replace(tmp, log_path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    print(ckpt.path)


def cmd_infer(args) -> None:
    cfg = _eval_config(args)
    ds = _load(args)
    params, _, _ = load_checkpoint(args.checkpoint)
    dets = ev.infer(params, ds, ev.query_labels(ds, cfg), cfg.topk, cfg.workers)
    ev.write_predictions(args.out, dets)
    print(args.out)


def _pr_svg(dets, gt, label, cfg) -> str:
    series = {}
    modes = ev.MODES if cfg.mode == "both" else (cfg.mode,)
    for m in modes:
        rec, prec = ev.pr_curve(dets, gt, label, m, cfg.iou_thresh)
        series[m] = (rec, prec)
    return line_chart(series, title=f"precision-recall, class {label[0]}-{label[1]}", xlabel="recall",
                      ylabel="precision")


def cmd_eval(args) -> None:
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("eval needs exactly one of --checkpoint or --predictions")
    cfg = _eval_config(args)
    ds = _load(args)
    if not ds.annotations:
        raise UsageError(f"--dataset {args.dataset}: split {args.split!r} has no annotations")
    if args.predictions:
        ids = {v.id for v in ds.videos}
        dets = [d for d in ev.read_predictions(args.predictions) if d.video in ids]
    else:
        params, _, _ = load_checkpoint(args.checkpoint)
        dets = ev.infer(params, ds, ev.query_labels(ds, cfg), cfg.topk, cfg.workers)
    rep = ev.evaluate_detections(dets, ds.annotations, cfg)
    out = Path(args.out)
    dataio.atomic_write(out / "report.json", json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n")
    dataio.atomic_write(out / "report.csv", rep.to_csv())
    if args.plots:
        for label in ev.label_set(ds):
            dataio.atomic_write(out / f"pr_{label[0]}-{label[1]}.svg", _pr_svg(dets, ds.annotations, label, cfg))
    print(json.dumps({"mAP": rep.map, "recall_at_1": rep.recall_at_1}, sort_keys=True))


def cmd_gradcheck(args) -> int:
    if args.dim < 2 or args.instances < 1 or args.negatives < 1:
        raise UsageError("--dim must be >= 2, --instances and --negatives >= 1")
    try:
        res, secs = gradaudit.timed_audit(seed=args.seed, dim=args.dim, instances=args.instances,
                                          n_neg=args.negatives, eps=args.eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for name, err in res.items():
        print(f"{name:20s} max rel error {err:.3e}")
    worst = max(res.values())
    print(f"{'overall':20s} max rel error {worst:.3e}  ({secs:.1f} s)")
    return 0 if worst < args.tol else 2


LOSS_KEYS = ("total", "L_L", "L_T", "L_spa", "L_cls")


def cmd_report(args) -> None:
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    path = Path(args.log)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"--log {path}: {exc.strerror}") from exc
    rows = []
    for k, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            step = int(rec["step"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"--log {path} line {k + 1}: malformed record ({exc})") from exc
        if rec.get("aborted"):
            continue
        rows.append((step, [float(rec[key]) for key in LOSS_KEYS]))
    smoothed = []
    hist: dict = defaultdict(list)
    for step, vals in rows:
        for key, v in zip(LOSS_KEYS, vals):
            hist[key].append(v)
        smoothed.append((step, [sum(hist[key][-args.window:]) / len(hist[key][-args.window:]) for key in LOSS_KEYS]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", *LOSS_KEYS])
    for step, vals in smoothed:
        w.writerow([step, *(repr(v) for v in vals)])
    out = Path(args.out)
    dataio.atomic_write(out / "loss_curve.csv", buf.getvalue())
    series = {key: ([s for s, _ in smoothed], [v[i] for _, v in smoothed]) for i, key in enumerate(LOSS_KEYS)}
    dataio.atomic_write(out / "loss_curve.svg", line_chart(series, title="training losses", xlabel="step",
                                                            ylabel="loss"))
    print(out / "loss_curve.csv")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"hoic: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, DatasetError, KeyError) as exc:
        print(f"hoic {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"hoic {args.command}: error: {exc.filename}: not found", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"hoic {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"hoic {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return code or 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
