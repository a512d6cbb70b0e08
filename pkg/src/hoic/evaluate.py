"""Inference scoring and detection metrics (mAP ko/def, Recall@1, video recalls)."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .dataio import Dataset, GTPair, VideoRecord, atomic_write
from .model import ForwardOutput, ModelParams, forward_frame, video_context
from .train import project_vocab

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]
MODES = ("phrase", "relation")
SETTINGS = ("ko", "def")


@dataclass(frozen=True)
class Detection:
    video: str
    frame: int
    hidx: int
    oidx: int
    label: tuple[int, int]
    score: float
    hbox: Box
    obox: Box

    def to_json(self) -> dict:
        return {"video": self.video, "frame": self.frame, "label": {"verb": self.label[0], "object": self.label[1]},
                "hbox": list(self.hbox), "obox": list(self.obox), "score": self.score,
                "hidx": self.hidx, "oidx": self.oidx}

    @classmethod
    def from_json(cls, rec: dict) -> "Detection":
        return cls(str(rec["video"]), int(rec["frame"]), int(rec.get("hidx", 0)), int(rec.get("oidx", 0)),
                   (int(rec["label"]["verb"]), int(rec["label"]["object"])), float(rec["score"]),
                   tuple(float(x) for x in rec["hbox"]), tuple(float(x) for x in rec["obox"]))


def _rank_key(d: Detection):
    return (-d.score, d.video, d.frame, d.hidx, d.oidx)


# --------------------------------------------------------------------------
# scoring


def score_pairs(out: ForwardOutput, frame, video_id: str, label: tuple[int, int]) -> list[Detection]:
    """Confidence p * (sigma_h[i] + sigma_o[j]) / 2 for every human/object pair."""
    p = float(out.p.data)
    sh, so = out.sigma_h.data, out.sigma_o.data
    dets = []
    for i in range(len(sh)):
        hb = tuple(float(x) for x in frame.human_boxes[i])
        for j in range(len(so)):
            dets.append(Detection(video_id, out.t, i, j, label, p * (sh[i] + so[j]) / 2.0, hb,
                                  tuple(float(x) for x in frame.obj_boxes[j])))
    return dets


def top_k(detections: list[Detection], k: int = 10) -> list[Detection]:
    """Highest confidence first; ties by (human index, object index)."""
    return sorted(detections, key=lambda d: (-d.score, d.hidx, d.oidx))[:k]


# --------------------------------------------------------------------------
# geometry and matching


def iou(a, b) -> float:
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        logger.warning("degenerate box in IoU: %s vs %s", list(a), list(b))
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def union_box(a, b) -> Box:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def pair_overlap(hbox, obox, gt: GTPair, mode: str) -> float | None:
    """Relevant IoU of a predicted pair against one gt pair, or None below threshold semantics."""
    if mode == "phrase":
        return iou(union_box(hbox, obox), union_box(gt.hbox, gt.obox))
    if mode == "relation":
        return min(iou(hbox, gt.hbox), iou(obox, gt.obox))
    raise ValueError(f"unknown mode {mode!r}")


def match(det: Detection, gt_pairs: list[GTPair], mode: str, threshold: float,
          used: set[int] | None = None) -> int | None:
    """Index of the best qualifying, not yet used gt pair (highest relevant IoU), else None."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    best, best_iou = None, -1.0
    for g, gt in enumerate(gt_pairs):
        if used is not None and g in used:
            continue
        ov = pair_overlap(det.hbox, det.obox, gt, mode)
        if ov >= threshold and ov > best_iou:
            best, best_iou = g, ov
    return best


def average_precision(tp: list[bool], n_gt: int) -> float | None:
    """All-point interpolated AP over a ranked TP/FP list.

    Returns None when there is neither ground truth nor any detection, 0.0
    when there are detections but no ground truth.
    """
    if n_gt == 0:
        return 0.0 if tp else None
    if not tp:
        return 0.0
    flags = np.asarray(tp, dtype=float)
    ctp = np.cumsum(flags)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(flags) + 1)
    # running max from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _index_gt(gt: dict) -> dict[tuple[int, int], dict[tuple[str, int], list[GTPair]]]:
    by_class: dict = defaultdict(dict)
    for key, pairs in gt.items():
        for p in pairs:
            by_class[p.label].setdefault(key, []).append(p)
    return by_class


def ranked_matches(dets: list[Detection], gt_frames: dict[tuple[str, int], list[GTPair]], mode: str,
                   threshold: float) -> list[bool]:
    """Greedy assignment in confidence order; each gt pair is matched at most once."""
    used: dict = defaultdict(set)
    flags = []
    for d in sorted(dets, key=_rank_key):
        key = (d.video, d.frame)
        g = match(d, gt_frames.get(key, []), mode, threshold, used[key])
        if g is not None:
            used[key].add(g)
        flags.append(g is not None)
    return flags


def _class_map(detections: list[Detection], gt: dict, threshold: float, known_object: bool) -> dict:
    by_class = _index_gt(gt)
    det_by_class: dict = defaultdict(list)
    for d in detections:
        det_by_class[d.label].append(d)
    per_class = {m: {} for m in MODES}
    for label in sorted(set(by_class) | set(det_by_class)):
        gt_frames = by_class.get(label, {})
        dets = det_by_class.get(label, [])
        if known_object:
            dets = [d for d in dets if (d.video, d.frame) in gt_frames]
        n_gt = sum(len(v) for v in gt_frames.values())
        for m in MODES:
            ap = average_precision(ranked_matches(dets, gt_frames, m, threshold), n_gt)
            if ap is not None and n_gt > 0:
                per_class[m][label] = ap
    return per_class


def _summarise(per_class: dict) -> dict:
    empty = not any(per_class[m] for m in MODES)
    return {"per_class": per_class, "empty": empty,
            "mAP": {m: (float(np.mean(list(per_class[m].values()))) if per_class[m] else 0.0) for m in MODES}}


def map_known_object(detections: list[Detection], gt: dict, threshold: float = 0.5) -> dict:
    """Per-class AP restricted to frames whose ground truth holds the class."""
    return _summarise(_class_map(detections, gt, threshold, known_object=True))


def map_default(detections: list[Detection], gt: dict, threshold: float = 0.5) -> dict:
    """Per-class AP over every frame; detections on frames without the class are false positives."""
    return _summarise(_class_map(detections, gt, threshold, known_object=False))


def _by_frame_label(detections):
    idx: dict = defaultdict(list)
    for d in detections:
        idx[(d.video, d.frame, d.label)].append(d)
    return idx


def recall_at_1(detections: list[Detection], gt: dict, threshold: float = 0.5, mode: str = "relation") -> float:
    """Fraction of annotated frames whose top-1 detection for the true label hits a gt pair."""
    idx = _by_frame_label(detections)
    frames = [k for k, v in gt.items() if v]
    if not frames:
        return 0.0
    correct = 0
    for key in frames:
        pairs = gt[key]
        ok = True
        for label in sorted({p.label for p in pairs}):
            cands = top_k(idx.get((key[0], key[1], label), []), 1)
            same = [p for p in pairs if p.label == label]
            if not cands or match(cands[0], same, mode, threshold) is None:
                ok = False
                break
        correct += ok
    return correct / len(frames)


def video_recalls(detections: list[Detection], gt: dict, threshold: float = 0.5, mode: str = "relation",
                  k: int = 10) -> tuple[float, float]:
    """(Video One, Video All): a frame counts when every gt pair is hit within its top-k."""
    idx = _by_frame_label(detections)
    per_video: dict = defaultdict(list)
    for key in sorted(gt):
        pairs = gt[key]
        if not pairs:
            continue
        full = True
        for p in pairs:
            cands = top_k(idx.get((key[0], key[1], p.label), []), k)
            if not any(match(d, [p], mode, threshold) is not None for d in cands):
                full = False
                break
        per_video[key[0]].append(full)
    if not per_video:
        return 0.0, 0.0
    one = sum(any(v) for v in per_video.values()) / len(per_video)
    every = sum(all(v) for v in per_video.values()) / len(per_video)
    return one, every


# --------------------------------------------------------------------------
# inference


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    topk: int = 10
    setting: str = "both"  # ko | def | both
    mode: str = "both"  # phrase | relation | both
    labels_subset: int | None = None
    workers: int = 1


def label_set(dataset: Dataset) -> list[tuple[int, int]]:
    labels = {v.label for v in dataset.videos}
    for pairs in (dataset.annotations or {}).values():
        labels.update(p.label for p in pairs)
    return sorted(labels)


def infer_video(params: ModelParams, dataset: Dataset, video: VideoRecord, labels: list[tuple[int, int]] | None,
                topk: int = 10) -> list[Detection]:
    """Top-k detections per (frame, label). ``labels=None`` queries each frame's true labels only."""
    frames = video.nonempty()
    if not frames:
        return []
    ev_all, eo_all = project_vocab(dataset.vocab, params)
    ctx = video_context(video.frames, frames, params)
    dets = []
    for t in frames:
        if labels is None:
            gt_pairs = (dataset.annotations or {}).get((video.id, t), [])
            frame_labels = sorted({p.label for p in gt_pairs} | {video.label})
        else:
            frame_labels = labels
        for label in frame_labels:
            q = (ag.take(ev_all, label[0]), ag.take(eo_all, label[1]))
            out = forward_frame(video.frames[t], t, ctx, q, params)
            dets.extend(top_k(score_pairs(out, video.frames[t], video.id, label), topk))
    return dets


def _infer_worker(args):
    params, dataset, video, labels, topk = args
    return infer_video(params, dataset, video, labels, topk)


def infer(params: ModelParams, dataset: Dataset, labels: list[tuple[int, int]] | None = None, topk: int = 10,
          workers: int = 1) -> list[Detection]:
    jobs = [(params, dataset, v, labels, topk) for v in dataset.videos]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_infer_worker, jobs))
    else:
        results = [_infer_worker(j) for j in jobs]
    return [d for r in results for d in r]


def query_labels(dataset: Dataset, config: EvalConfig) -> list[tuple[int, int]] | None:
    if config.setting == "ko":
        return None
    labels = label_set(dataset)
    if config.labels_subset:
        labels = labels[:config.labels_subset]
    return labels


# --------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    iou_threshold: float
    map: dict = field(default_factory=dict)  # setting -> mode -> value
    per_class: dict = field(default_factory=dict)  # setting -> mode -> {label: ap}
    recall_at_1: dict = field(default_factory=dict)  # mode -> value
    video_one: dict = field(default_factory=dict)
    video_all: dict = field(default_factory=dict)
    n_frames: int = 0
    n_videos: int = 0
    empty: bool = False

    def to_json(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "mAP": self.map,
            "per_class": {s: {m: {f"{v}-{o}": ap for (v, o), ap in sorted(c.items())} for m, c in ms.items()}
                          for s, ms in self.per_class.items()},
            "recall_at_1": self.recall_at_1,
            "video_one_recall": self.video_one,
            "video_all_recall": self.video_all,
            "n_frames": self.n_frames,
            "n_videos": self.n_videos,
            "empty": self.empty,
        }

    def csv_rows(self) -> list[list]:
        rows = [["class", "mode", "setting", "ap"]]
        for s in sorted(self.per_class):
            for m in sorted(self.per_class[s]):
                for (v, o), ap in sorted(self.per_class[s][m].items()):
                    rows.append([f"{v}-{o}", m, s, repr(ap)])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.csv_rows())
        return buf.getvalue()


def evaluate_detections(detections: list[Detection], gt: dict, config: EvalConfig | None = None) -> MetricsReport:
    config = config or EvalConfig()
    modes = MODES if config.mode == "both" else (config.mode,)
    settings = SETTINGS if config.setting == "both" else (config.setting,)
    thr = config.iou_thresh
    annotated = {k: v for k, v in gt.items() if v}
    rep = MetricsReport(thr, n_frames=len(annotated), n_videos=len({k[0] for k in annotated}))
    for s in settings:
        res = (map_known_object if s == "ko" else map_default)(detections, gt, thr)
        rep.empty = rep.empty or res["empty"]
        rep.map[s] = {m: res["mAP"][m] for m in modes}
        rep.per_class[s] = {m: res["per_class"][m] for m in modes}
    for m in modes:
        rep.recall_at_1[m] = recall_at_1(detections, gt, thr, m)
        rep.video_one[m], rep.video_all[m] = video_recalls(detections, gt, thr, m, config.topk)
    return rep


def evaluate(params: ModelParams, dataset: Dataset, config: EvalConfig | None = None,
             split_name: str = "evaluation") -> MetricsReport:
    config = config or EvalConfig()
    if not dataset.annotations:
        raise ValueError(f"{split_name} split has no annotations")
    dets = infer(params, dataset, query_labels(dataset, config), config.topk, config.workers)
    return evaluate_detections(dets, dataset.annotations, config)


def write_predictions(path, detections: list[Detection]) -> None:
    atomic_write(path, "".join(json.dumps(d.to_json()) + "\n" for d in detections))


def read_predictions(path) -> list[Detection]:
    dets = []
    for k, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            dets.append(Detection.from_json(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path} record {k}: malformed prediction ({exc})") from exc
    return dets


def pr_curve(detections: list[Detection], gt: dict, label, mode: str, threshold: float) -> tuple[list, list]:
    gt_frames = _index_gt(gt).get(label, {})
    dets = [d for d in detections if d.label == label]
    flags = ranked_matches(dets, gt_frames, mode, threshold)
    n_gt = sum(len(v) for v in gt_frames.values())
    tp, rec, prec = 0, [], []
    for i, f in enumerate(flags, 1):
        tp += f
        rec.append(tp / n_gt if n_gt else 0.0)
        prec.append(tp / i)
    return rec, prec
