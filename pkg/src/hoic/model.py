"""Forward computation: query embedding, feature fusion, frame context and region attention."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataio import VERSION_F64, DatasetError, RegionSet, VocabularyBank, atomic_write, decode_matrix, encode_matrix


class DegenerateError(ValueError):
    pass


# name -> shape builder given (dim, word_dim, hidden)
PARAM_SHAPES = {
    "W_v": lambda d, dw, h: (dw, d),
    "W_o": lambda d, dw, h: (dw, d),
    "att_h_W1": lambda d, dw, h: (4 * d, h),
    "att_h_b1": lambda d, dw, h: (h,),
    "att_h_w2": lambda d, dw, h: (h,),
    "att_h_b2": lambda d, dw, h: (),
    "att_o_W1": lambda d, dw, h: (4 * d, h),
    "att_o_b1": lambda d, dw, h: (h,),
    "att_o_w2": lambda d, dw, h: (h,),
    "att_o_b2": lambda d, dw, h: (),
    "ctx_Wq": lambda d, dw, h: (d, d),
    "ctx_bq": lambda d, dw, h: (d,),
    "ctx_Wk": lambda d, dw, h: (d, d),
    "ctx_bk": lambda d, dw, h: (d,),
    "ctx_Wv": lambda d, dw, h: (d, d),
    "ctx_bv": lambda d, dw, h: (d,),
    "cls_w": lambda d, dw, h: (3 * d,),
    "cls_b": lambda d, dw, h: (),
}


@dataclass
class ModelParams:
    dim: int
    word_dim: int
    hidden: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(PARAM_SHAPES)

    def values(self) -> list[Tensor]:
        return [self.tensors[n] for n in PARAM_SHAPES]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.dim, self.word_dim, self.hidden,
                           {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def validate(self) -> None:
        for name, shape_fn in PARAM_SHAPES.items():
            t = self.tensors.get(name)
            expected = shape_fn(self.dim, self.word_dim, self.hidden)
            if t is None or t.shape != expected:
                raise ValueError(f"parameter {name}: expected shape {expected}, got {None if t is None else t.shape}")
            if not np.isfinite(t.data).all():
                raise ValueError(f"parameter {name} is not finite")


def init_params(dim: int, word_dim: int | None = None, hidden: int | None = None, seed: int = 0) -> ModelParams:
    word_dim = word_dim or dim
    hidden = hidden or dim
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape_fn in PARAM_SHAPES.items():
        shape = shape_fn(dim, word_dim, hidden)
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, shape)
        elif name in ("att_h_w2", "att_o_w2", "cls_w"):
            bound = np.sqrt(6.0 / (shape[0] + 1))
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(dim, word_dim, hidden, tensors)


# --------------------------------------------------------------------------
# building blocks


def embed_query(bank: VocabularyBank, verb_id: int, object_id: int, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Project raw word embeddings and normalise: unit-length verb and object features."""
    if not 0 <= verb_id < len(bank.verbs):
        raise KeyError(f"unknown verb id {verb_id}")
    if not 0 <= object_id < len(bank.objects):
        raise KeyError(f"unknown object id {object_id}")
    out = []
    for raw, w in ((bank.verb_embeddings[verb_id], params["W_v"]), (bank.object_embeddings[object_id], params["W_o"])):
        proj = ag.matmul(Tensor(raw), w)
        if np.linalg.norm(proj.data) < 1e-12:
            raise DegenerateError("degenerate zero projection")
        out.append(ag.l2_normalize(proj))
    return out[0], out[1]


def fuse_object_features(obj_feat, obj_human_feat) -> Tensor:
    return ag.maximum(ag.as_tensor(obj_feat), ag.as_tensor(obj_human_feat))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = ag.matmul(x, w)
    return y + (ag.tile_rows(b, y.shape[0]) if y.ndim == 2 else b)


def contextual_frame_feature(frame_feats, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Self-attention over a video's frame features.

    Returns the contextual features (T, D) and the row-softmaxed similarity
    matrix (T, T).
    """
    x = ag.as_tensor(frame_feats)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ag.ShapeError(f"contextual_frame_feature: expected (T, D) with T >= 1, got {x.shape}")
    q = _affine(x, params["ctx_Wq"], params["ctx_bq"])
    k = _affine(x, params["ctx_Wk"], params["ctx_bk"])
    v = _affine(x, params["ctx_Wv"], params["ctx_bv"])
    s = ag.softmax(ag.matmul(q, k.T), axis=1)
    return ag.matmul(s, v), s


def attention_logits(features: Tensor, x_t: Tensor, query: Tensor, params: ModelParams, which: str) -> Tensor:
    n = features.shape[0]
    inp = ag.concat([features, ag.tile_rows(x_t, n), ag.tile_rows(query, n)])
    hid = ag.leaky_relu(_affine(inp, params[f"att_{which}_W1"], params[f"att_{which}_b1"]))
    return ag.matmul(hid, params[f"att_{which}_w2"]) + params[f"att_{which}_b2"]


def region_attention(features, x_t: Tensor, e_v: Tensor, e_o: Tensor, params: ModelParams, which: str) -> Tensor:
    """Simplex attention over the N regions of one frame; ``which`` is 'h' or 'o'."""
    features = ag.as_tensor(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ag.ShapeError(f"region_attention: expected (N, D) with N >= 1, got {features.shape}")
    return ag.softmax(attention_logits(features, x_t, ag.concat([e_v, e_o]), params, which))


def attended_feature(sigma: Tensor, features) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of region features: (unit-normalised, raw)."""
    raw = ag.matmul(sigma, ag.as_tensor(features))
    if np.linalg.norm(raw.data) < 1e-12:
        raise DegenerateError("attended feature has zero norm")
    return ag.l2_normalize(raw), raw


def classify(x_t: Tensor, e_v: Tensor, e_o: Tensor, params: ModelParams) -> Tensor:
    z = ag.dot(ag.concat([x_t, e_v, e_o]), params["cls_w"]) + params["cls_b"]
    return ag.sigmoid(z)


# --------------------------------------------------------------------------
# full frame


@dataclass
class ForwardOutput:
    t: int
    sigma_h: Tensor
    sigma_o: Tensor
    phi_h: Tensor
    phi_o: Tensor
    phi_h_raw: Tensor
    phi_o_raw: Tensor
    x: Tensor
    similarity: np.ndarray
    p: Tensor
    obj_feat: Tensor  # fused object features of the frame
    hard_index: int


@dataclass
class VideoContext:
    frame_index: list[int]  # position in the video of each row of ``x``
    x: Tensor
    similarity: Tensor

    def row(self, t: int) -> int:
        return self.frame_index.index(t)


def video_context(frames: list[RegionSet], indices: list[int], params: ModelParams) -> VideoContext:
    feats = np.stack([frames[t].frame_feat for t in indices])
    x, s = contextual_frame_feature(feats, params)
    return VideoContext(list(indices), x, s)


def hard_index(sigma: np.ndarray) -> int:
    """argmax with ties broken by the lowest index."""
    return int(np.argmax(sigma))


def forward_frame(frame: RegionSet, t: int, ctx: VideoContext, query: tuple[Tensor, Tensor],
                  params: ModelParams) -> ForwardOutput | None:
    """Run fusion, attention, pooling and classification for one frame; None for an empty frame."""
    if frame.empty:
        return None
    e_v, e_o = query
    r = ctx.row(t)
    x_t = ag.take(ctx.x, r)
    obj = fuse_object_features(frame.obj_feat, frame.obj_human_feat)
    human = Tensor(frame.human_feat)
    sigma_h = region_attention(human, x_t, e_v, e_o, params, "h")
    sigma_o = region_attention(obj, x_t, e_v, e_o, params, "o")
    phi_h, phi_h_raw = attended_feature(sigma_h, human)
    phi_o, phi_o_raw = attended_feature(sigma_o, obj)
    p = classify(x_t, e_v, e_o, params)
    return ForwardOutput(t, sigma_h, sigma_o, phi_h, phi_o, phi_h_raw, phi_o_raw, x_t,
                         ctx.similarity.data[r].copy(), p, obj, hard_index(sigma_o.data))


# --------------------------------------------------------------------------
# checkpoints: JSON header line, then HOIF float64 blocks in header order

CHECKPOINT_MAGIC = b"HOICKPT1\n"


def save_checkpoint(path, params: ModelParams, step: int = 0, config: dict | None = None,
                    extra: dict[str, list[np.ndarray]] | None = None) -> None:
    """``extra`` holds optimizer buffers keyed by name, one array per parameter."""
    names = params.names()
    blocks = [params[n].data for n in names]
    extra = extra or {}
    for key in sorted(extra):
        blocks.extend(extra[key])
    header = {
        "dim": params.dim, "word_dim": params.word_dim, "hidden": params.hidden, "step": step,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": sorted(extra), "config": config or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(encode_matrix(np.asarray(b).reshape(1, -1) if np.ndim(b) < 2 else b, VERSION_F64)
                    for b in blocks)
    atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body)


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, list[np.ndarray]]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise DatasetError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", buf, off)
    header = json.loads(buf[off + 4:off + 4 + hlen])
    off += 4 + hlen
    tensors = {}
    shapes = []
    for spec in header["params"]:
        mat, off = decode_matrix(buf, f"{path} param {spec['name']}", off)
        shape = tuple(spec["shape"])
        tensors[spec["name"]] = Tensor(mat.reshape(shape), requires_grad=True)
        shapes.append(shape)
    extra = {}
    for key in header["extra"]:
        arrs = []
        for shape in shapes:
            mat, off = decode_matrix(buf, f"{path} {key}", off)
            arrs.append(mat.reshape(shape))
        extra[key] = arrs
    params = ModelParams(header["dim"], header["word_dim"], header["hidden"], tensors)
    params.validate()
    return params, header, extra
