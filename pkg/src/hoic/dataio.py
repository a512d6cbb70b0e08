"""On-disk dataset format, validation, synthetic planted-signal generator and splits."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"HOIF"
VERSION_F32 = 1
VERSION_F64 = 2
MANIFEST_VERSION = 1
IMAGE_W, IMAGE_H = 640.0, 480.0


class DatasetError(ValueError):
    """Raised when a dataset fails validation; the message names file, record and reason."""


# --------------------------------------------------------------------------
# data types


@dataclass
class VocabularyBank:
    verbs: list[str]
    objects: list[str]
    verb_embeddings: np.ndarray  # (V, D_w)
    object_embeddings: np.ndarray  # (O, D_w)

    @property
    def dim(self) -> int:
        return self.verb_embeddings.shape[1]

    def validate(self, where: str = "vocab") -> None:
        for kind, names, emb in (("verbs", self.verbs, self.verb_embeddings),
                                 ("objects", self.objects, self.object_embeddings)):
            if len(set(names)) != len(names):
                raise DatasetError(f"{where}: duplicate {kind} names")
            if emb.ndim != 2 or emb.shape[0] != len(names):
                raise DatasetError(f"{where}: {kind} embeddings have shape {emb.shape}, expected {len(names)} rows")
            if not np.isfinite(emb).all():
                raise DatasetError(f"{where}: non-finite {kind} embedding")
        if self.verb_embeddings.shape[1] != self.object_embeddings.shape[1]:
            raise DatasetError(f"{where}: verb and object embedding widths differ")


@dataclass
class RegionSet:
    """Region proposals of one frame. ``empty`` frames carry no regions."""

    human_feat: np.ndarray  # (N_h, D)
    human_boxes: np.ndarray  # (N_h, 4)
    obj_feat: np.ndarray  # (N_o, D) raw object features
    obj_human_feat: np.ndarray  # (N_o, D) human-mask channel pooled over each object box
    obj_boxes: np.ndarray  # (N_o, 4)
    frame_feat: np.ndarray  # (D,)
    empty: bool = False

    @property
    def n_humans(self) -> int:
        return self.human_feat.shape[0]

    @property
    def n_objects(self) -> int:
        return self.obj_feat.shape[0]


@dataclass
class VideoRecord:
    id: str
    frames: list[RegionSet]
    label: tuple[int, int]  # (verb id, object id)

    def nonempty(self) -> list[int]:
        return [t for t, f in enumerate(self.frames) if not f.empty]


@dataclass(frozen=True)
class GTPair:
    hbox: tuple[float, float, float, float]
    obox: tuple[float, float, float, float]
    verb: int
    object: int

    @property
    def label(self) -> tuple[int, int]:
        return (self.verb, self.object)


# (video id, frame index) -> ground-truth pairs
GroundTruth = dict


@dataclass
class Dataset:
    vocab: VocabularyBank
    videos: list[VideoRecord]
    annotations: dict | None = None


@dataclass
class SyntheticConfig:
    videos: int = 20
    frames: int = 4
    humans: int = 5
    objects: int = 20
    dim: int = 128
    word_dim: int | None = None  # defaults to dim
    signal: float = 0.8
    noise: float = 0.5
    n_verbs: int = 6
    n_objects: int = 10
    human_signal: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("videos", "frames", "humans", "objects", "n_verbs", "n_objects"):
            if getattr(self, name) < 1:
                raise ValueError(f"SyntheticConfig.{name} must be >= 1")
        if self.dim < 4:
            raise ValueError("SyntheticConfig.dim must be >= 4")
        if self.word_dim is not None and self.word_dim < 1:
            raise ValueError("SyntheticConfig.word_dim must be >= 1")
        if not 0.0 < self.signal <= 1.0:
            raise ValueError("SyntheticConfig.signal must lie in (0, 1]")
        if self.noise < 0 or self.human_signal < 0:
            raise ValueError("SyntheticConfig.noise and human_signal must be >= 0")


# --------------------------------------------------------------------------
# binary matrix container


def encode_matrix(mat: np.ndarray, version: int = VERSION_F32) -> bytes:
    mat = np.asarray(mat)
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ValueError(f"HOIF stores matrices, got shape {mat.shape}")
    dtype = "<f4" if version == VERSION_F32 else "<f8"
    header = MAGIC + struct.pack("<III", version, mat.shape[0], mat.shape[1])
    return header + np.ascontiguousarray(mat, dtype=dtype).tobytes()


def decode_matrix(buf: bytes, where: str = "<buffer>", offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one HOIF block starting at ``offset``; returns (float64 matrix, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise DatasetError(f"{where}: bad magic")
    if len(buf) < offset + 16:
        raise DatasetError(f"{where}: truncated header")
    version, rows, cols = struct.unpack_from("<III", buf, offset + 4)
    if version not in (VERSION_F32, VERSION_F64):
        raise DatasetError(f"{where}: unsupported version {version}")
    width = 4 if version == VERSION_F32 else 8
    start = offset + 16
    end = start + rows * cols * width
    if len(buf) < end:
        raise DatasetError(f"{where}: payload shorter than {rows}x{cols}")
    dtype = "<f4" if version == VERSION_F32 else "<f8"
    mat = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=start).astype(np.float64)
    return mat.reshape(rows, cols), end


def write_matrix(path, mat: np.ndarray, version: int = VERSION_F32) -> None:
    atomic_write(path, encode_matrix(mat, version))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from exc
    mat, end = decode_matrix(buf, str(path))
    if end != len(buf):
        raise DatasetError(f"{path}: trailing bytes after matrix")
    return mat


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# validation


def _valid_boxes(boxes: np.ndarray) -> bool:
    return boxes.ndim == 2 and boxes.shape[1] == 4 and bool(
        np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1]))


def validate_frame(frame: RegionSet, where: str) -> None:
    if frame.empty:
        return
    nh, no = frame.human_feat.shape[0], frame.obj_feat.shape[0]
    if nh < 1 or no < 1:
        raise DatasetError(f"{where}: frame has no human or object regions and is not flagged empty")
    d = frame.human_feat.shape[1]
    if frame.human_boxes.shape != (nh, 4):
        raise DatasetError(f"{where}: human_boxes shape {frame.human_boxes.shape} does not match {nh} human features")
    if frame.obj_boxes.shape != (no, 4):
        raise DatasetError(f"{where}: obj_boxes shape {frame.obj_boxes.shape} does not match {no} object features")
    if frame.obj_human_feat.shape != frame.obj_feat.shape:
        raise DatasetError(f"{where}: obj_human_feat shape {frame.obj_human_feat.shape} != obj_feat {frame.obj_feat.shape}")
    if frame.obj_feat.shape[1] != d or frame.frame_feat.shape != (d,):
        raise DatasetError(f"{where}: feature widths disagree")
    for name in ("human_boxes", "obj_boxes"):
        if not _valid_boxes(getattr(frame, name)):
            raise DatasetError(f"{where}: malformed box in {name} (need x2>x1, y2>y1)")
    for name in ("human_feat", "obj_feat", "obj_human_feat", "frame_feat"):
        if not np.isfinite(getattr(frame, name)).all():
            raise DatasetError(f"{where}: non-finite values in {name}")


def validate_video(video: VideoRecord, vocab: VocabularyBank, where: str) -> None:
    v, o = video.label
    if not 0 <= v < len(vocab.verbs):
        raise DatasetError(f"{where}: unknown verb id {v}")
    if not 0 <= o < len(vocab.objects):
        raise DatasetError(f"{where}: unknown object id {o}")
    if not video.nonempty():
        raise DatasetError(f"{where}: video has no non-empty frame")
    for t, frame in enumerate(video.frames):
        validate_frame(frame, f"{where} frame {t}")


def validate_annotations(ann: dict, videos: list[VideoRecord], vocab: VocabularyBank, where: str) -> None:
    frames = {v.id: v.frames for v in videos}
    for k, ((vid, t), pairs) in enumerate(sorted(ann.items())):
        rec = f"{where} record {k}"
        if vid not in frames or not 0 <= t < len(frames[vid]):
            raise DatasetError(f"{rec}: unknown video/frame ({vid}, {t})")
        for p in pairs:
            for box in (p.hbox, p.obox):
                if not (box[2] > box[0] and box[3] > box[1]):
                    raise DatasetError(f"{rec}: malformed box {list(box)}")
            if not (0 <= p.verb < len(vocab.verbs) and 0 <= p.object < len(vocab.objects)):
                raise DatasetError(f"{rec}: unknown label id ({p.verb}, {p.object})")


# --------------------------------------------------------------------------
# manifest save / load

_FRAME_FILES = ("human_feat", "human_boxes", "obj_feat", "obj_human_feat", "obj_boxes", "frame_feat")


def _annotation_lines(ann: dict) -> str:
    lines = []
    for (vid, t), pairs in sorted(ann.items()):
        lines.append(json.dumps({
            "video": vid, "frame": t,
            "pairs": [{"hbox": [float(x) for x in p.hbox], "obox": [float(x) for x in p.obox],
                       "verb": p.verb, "object": p.object} for p in pairs],
        }))
    return "\n".join(lines) + ("\n" if lines else "")


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json plus one HOIF file per matrix under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = dataset.vocab
    write_matrix(out / "embeddings.hoif", np.vstack([vocab.verb_embeddings, vocab.object_embeddings]))
    videos = []
    for vi, video in enumerate(dataset.videos):
        vdir = Path("features") / f"v{vi:05d}"
        frames = []
        for t, frame in enumerate(video.frames):
            if frame.empty:
                frames.append({"empty": True})
                continue
            entry = {}
            for name in _FRAME_FILES:
                rel = vdir / f"f{t:04d}_{name}.hoif"
                write_matrix(out / rel, getattr(frame, name))
                entry[name] = rel.as_posix()
            frames.append(entry)
        videos.append({"id": video.id, "label": {"verb": video.label[0], "object": video.label[1]},
                       "frames": frames})
    manifest = {
        "version": MANIFEST_VERSION,
        "vocab": {"verbs": [{"id": i, "name": n} for i, n in enumerate(vocab.verbs)],
                  "objects": [{"id": i, "name": n} for i, n in enumerate(vocab.objects)],
                  "dim": vocab.dim, "embeddings_file": "embeddings.hoif"},
        "videos": videos,
    }
    if dataset.annotations is not None:
        atomic_write(out / "annotations.jsonl", _annotation_lines(dataset.annotations))
        manifest["annotations_file"] = "annotations.jsonl"
    path = out / "manifest.json"
    atomic_write(path, json.dumps(manifest, indent=1) + "\n")
    return path


def _ids_dense(entries: list[dict], where: str) -> list[str]:
    ids = [e["id"] for e in entries]
    if ids != list(range(len(entries))):
        raise DatasetError(f"{where}: ids must be dense 0..{len(entries) - 1} in order")
    return [str(e["name"]) for e in entries]


def load_annotations(path, videos: list[VideoRecord] | None = None,
                     vocab: VocabularyBank | None = None) -> dict:
    path = Path(path)
    ann: dict = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from exc
    for k, line in enumerate(l for l in text.splitlines() if l.strip()):
        try:
            rec = json.loads(line)
            key = (str(rec["video"]), int(rec["frame"]))
            pairs = [GTPair(tuple(float(x) for x in p["hbox"]), tuple(float(x) for x in p["obox"]),
                            int(p["verb"]), int(p["object"])) for p in rec["pairs"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path} record {k}: malformed annotation ({exc})") from exc
        if any(len(p.hbox) != 4 or len(p.obox) != 4 for p in pairs):
            raise DatasetError(f"{path} record {k}: boxes need 4 coordinates")
        ann.setdefault(key, []).extend(pairs)
    if videos is not None and vocab is not None:
        validate_annotations(ann, videos, vocab, str(path))
    return ann


def load_dataset(manifest_path) -> Dataset:
    """Load and fully validate a dataset written by :func:`save_dataset`."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DatasetError(f"{manifest_path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported manifest version {manifest.get('version')!r}")
    try:
        vm = manifest["vocab"]
        verbs = _ids_dense(vm["verbs"], f"{manifest_path} vocab.verbs")
        objects = _ids_dense(vm["objects"], f"{manifest_path} vocab.objects")
        emb = read_matrix(root / vm["embeddings_file"])
        if emb.shape != (len(verbs) + len(objects), vm["dim"]):
            raise DatasetError(f"{root / vm['embeddings_file']}: shape {emb.shape} does not match vocabulary "
                               f"({len(verbs) + len(objects)} x {vm['dim']})")
        vocab = VocabularyBank(verbs, objects, emb[:len(verbs)], emb[len(verbs):])
        vocab.validate(f"{manifest_path} vocab")
        videos = []
        for vi, vrec in enumerate(manifest["videos"]):
            where = f"{manifest_path} video {vi} ({vrec.get('id')})"
            frames = []
            for t, fr in enumerate(vrec["frames"]):
                if fr.get("empty"):
                    frames.append(empty_frame())
                    continue
                mats = {name: read_matrix(root / fr[name]) for name in _FRAME_FILES}
                frames.append(RegionSet(
                    human_feat=mats["human_feat"], human_boxes=mats["human_boxes"],
                    obj_feat=mats["obj_feat"], obj_human_feat=mats["obj_human_feat"],
                    obj_boxes=mats["obj_boxes"], frame_feat=mats["frame_feat"].reshape(-1)))
            video = VideoRecord(str(vrec["id"]), frames, (int(vrec["label"]["verb"]), int(vrec["label"]["object"])))
            validate_video(video, vocab, where)
            videos.append(video)
    except KeyError as exc:
        raise DatasetError(f"{manifest_path}: missing field {exc}") from exc
    ann = None
    if manifest.get("annotations_file"):
        ann = load_annotations(root / manifest["annotations_file"], videos, vocab)
    return Dataset(vocab, videos, ann)


def empty_frame() -> RegionSet:
    z = np.zeros((0, 0))
    return RegionSet(z, np.zeros((0, 4)), z, z, np.zeros((0, 4)), np.zeros(0), empty=True)


# --------------------------------------------------------------------------
# synthetic generator


def _f32(x: np.ndarray) -> np.ndarray:
    # keep in-memory values identical to what the float32 container stores
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _lift(rng: np.random.Generator, d_w: int, d: int) -> np.ndarray:
    """Fixed (d, d_w) map from word space to feature space; identity when widths agree."""
    if d_w == d:
        return np.eye(d)
    q, _ = np.linalg.qr(rng.standard_normal((max(d, d_w), min(d, d_w))))
    return q if d_w < d else q.T


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _random_box(rng, wmin, wmax, hmin, hmax) -> np.ndarray:
    w = rng.uniform(wmin, wmax)
    h = rng.uniform(hmin, hmax)
    x1 = rng.uniform(0, IMAGE_W - w)
    y1 = rng.uniform(0, IMAGE_H - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _distractor_box(rng, avoid, sizes, tries: int = 50) -> np.ndarray:
    box = _random_box(rng, *sizes)
    for _ in range(tries):
        if _box_iou(box, avoid) < 0.3:
            break
        box = _random_box(rng, *sizes)
    return box


def _proximity(box: np.ndarray, human: np.ndarray, radius: float = 150.0) -> float:
    cb = ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)
    ch = ((human[0] + human[2]) / 2, (human[1] + human[3]) / 2)
    return max(0.0, 1.0 - math.dist(cb, ch) / radius)


_HUMAN_SIZES = (60.0, 140.0, 140.0, 300.0)
_OBJECT_SIZES = (30.0, 90.0, 30.0, 90.0)


def generate_synthetic(cfg: SyntheticConfig, labels: list[tuple[int, int]] | None = None) -> Dataset:
    """Seeded dataset with one planted human and one planted object per frame.

    Planted human features are ``signal * lift(verb prototype) + noise`` and
    planted object features ``signal * lift(object prototype) + noise``; every
    other region is pure noise. The human-mask channel carries a proximity cue
    towards the planted human. Raw word embeddings are the prototypes.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    d_w = cfg.word_dim or d
    verb_proto = _unit_rows(rng, cfg.n_verbs, d_w)
    obj_proto = _unit_rows(rng, cfg.n_objects, d_w)
    lift = _lift(rng, d_w, d)
    human_dir = np.abs(rng.standard_normal(d))
    human_dir /= np.linalg.norm(human_dir)
    sigma = cfg.noise / math.sqrt(d)
    vocab = VocabularyBank([f"verb_{i}" for i in range(cfg.n_verbs)],
                           [f"object_{i}" for i in range(cfg.n_objects)],
                           _f32(verb_proto), _f32(obj_proto))

    def noise(*shape):
        return sigma * rng.standard_normal(shape) if sigma > 0 else np.zeros(shape)

    videos, ann = [], {}
    for vi in range(cfg.videos):
        if labels is not None:
            label = labels[vi % len(labels)]
        else:
            label = (int(rng.integers(cfg.n_verbs)), int(rng.integers(cfg.n_objects)))
        pv = lift @ verb_proto[label[0]]
        po = lift @ obj_proto[label[1]]
        vid = f"vid{vi:05d}"
        frames = []
        for t in range(cfg.frames):
            hi = int(rng.integers(cfg.humans))
            oi = int(rng.integers(cfg.objects))
            h_box = _random_box(rng, *_HUMAN_SIZES)
            # planted object sits next to the planted human
            ow, oh = rng.uniform(30, 90), rng.uniform(30, 90)
            cx = np.clip(rng.uniform(h_box[0] - ow / 2, h_box[2] - ow / 2), 0, IMAGE_W - ow)
            cy = np.clip(rng.uniform(h_box[1], h_box[3] - oh), 0, IMAGE_H - oh)
            o_box = np.array([cx, cy, cx + ow, cy + oh])
            human_boxes = np.stack([h_box if i == hi else _distractor_box(rng, h_box, _HUMAN_SIZES)
                                    for i in range(cfg.humans)])
            obj_boxes = np.stack([o_box if j == oi else _distractor_box(rng, o_box, _OBJECT_SIZES)
                                  for j in range(cfg.objects)])
            human_feat = noise(cfg.humans, d)
            human_feat[hi] += cfg.signal * pv
            obj_feat = noise(cfg.objects, d)
            obj_feat[oi] += cfg.signal * po
            obj_human = noise(cfg.objects, d)
            obj_human[oi] += cfg.human_signal * _proximity(o_box, h_box) * human_dir
            frame_feat = cfg.signal * (pv + po) / math.sqrt(2) + noise(d)
            frames.append(RegionSet(_f32(human_feat), _f32(human_boxes), _f32(obj_feat), _f32(obj_human),
                                    _f32(obj_boxes), _f32(frame_feat)))
            hb, ob = frames[-1].human_boxes[hi], frames[-1].obj_boxes[oi]
            ann[(vid, t)] = [GTPair(tuple(float(x) for x in hb), tuple(float(x) for x in ob), *label)]
        videos.append(VideoRecord(vid, frames, label))
    return Dataset(vocab, videos, ann)


def planted_indices(dataset: Dataset, video: VideoRecord, t: int) -> tuple[int, int]:
    """Indices of the ground-truth human and object boxes among the frame's regions."""
    pair = dataset.annotations[(video.id, t)][0]
    frame = video.frames[t]
    hi = int(np.flatnonzero(np.all(frame.human_boxes == np.array(pair.hbox), axis=1))[0])
    oi = int(np.flatnonzero(np.all(frame.obj_boxes == np.array(pair.obox), axis=1))[0])
    return hi, oi


def subset(dataset: Dataset, videos: list[VideoRecord]) -> Dataset:
    ids = {v.id for v in videos}
    ann = None
    if dataset.annotations is not None:
        ann = {k: v for k, v in dataset.annotations.items() if k[0] in ids}
    return Dataset(dataset.vocab, list(videos), ann)


# --------------------------------------------------------------------------
# splits


def split_sizes(n: int, fractions) -> list[int]:
    """Floor each share, then hand out the remainder by largest fractional part."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    raw = [f * n for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    for f, s in zip(fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(f"split of {n} videos with fractions {fractions} leaves a requested split empty")
    return sizes


def split(records: list, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, ...]:
    sizes = split_sizes(len(records), fractions)
    perm = np.random.default_rng(seed).permutation(len(records))
    out, start = [], 0
    for s in sizes:
        out.append([records[i] for i in perm[start:start + s]])
        start += s
    return tuple(out)
