"""Frame-pair sampling, per-video loss assembly, Adam updates and checkpointed training."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from . import autograd as ag
from . import losses as L
from .autograd import Tensor
from .dataio import Dataset, VideoRecord, VocabularyBank
from .model import (DegenerateError, ModelParams, VideoContext, classify, forward_frame, init_params,
                    load_checkpoint, save_checkpoint, video_context)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    frames_per_video: int = 12
    frame_sampling: str = "random"  # or "uniform"
    lr_main: float = 1e-4
    lr_backbone: float = 1e-6  # accepted for completeness; there is no backbone to train
    alpha: float = 0.1
    n_l: int = 15
    n_neg_temporal: int = 15
    seed: int = 0
    checkpoint_interval: int = 0  # steps; 0 writes only the final checkpoint
    clip_norm: float | None = 10.0
    use_sparsity: bool = True
    use_temporal: bool = True
    hidden: int | None = None

    def validate(self) -> None:
        if self.lr_main <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be > 0")
        if self.use_temporal and self.frames_per_video < 2:
            raise ValueError("frames_per_video must be >= 2 when the temporal loss is enabled")
        if self.frames_per_video < 1 or self.epochs < 0:
            raise ValueError("frames_per_video must be >= 1 and epochs >= 0")
        if self.frame_sampling not in ("random", "uniform"):
            raise ValueError(f"unknown frame sampling mode {self.frame_sampling!r}")


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, params: list[Tensor], grads: list[np.ndarray]) -> list[np.ndarray]:
        """Return the updated parameter arrays without mutating ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        step = self.step + 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** step)
            v_hat = self.v[i] / (1 - self.beta2 ** step)
            out.append(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        self.step = step
        return out


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: Adam
    step: int
    path: Path | None = None


# --------------------------------------------------------------------------
# sampling


def select_frames(video: VideoRecord, frames_per_video: int, rng: np.random.Generator,
                  mode: str = "random") -> list[int]:
    avail = video.nonempty()
    if len(avail) <= frames_per_video:
        return avail
    if mode == "uniform":
        pos = np.linspace(0, len(avail) - 1, frames_per_video).round().astype(int)
        return [avail[i] for i in pos]
    return sorted(rng.choice(avail, size=frames_per_video, replace=False).tolist())


def sample_frame_pairs(video: VideoRecord, frames_per_video: int, seed, mode: str = "random"
                       ) -> tuple[list[int], list[tuple[int, int]]]:
    """Pick frames, then pair each picked frame with another picked frame at random."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = select_frames(video, frames_per_video, rng, mode)
    if len(chosen) < 2:
        return chosen, []
    pairs = []
    for k, t in enumerate(chosen):
        others = chosen[:k] + chosen[k + 1:]
        pairs.append((t, others[int(rng.integers(len(others)))]))
    return chosen, pairs


# --------------------------------------------------------------------------
# loss assembly


def project_vocab(vocab: VocabularyBank, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Unit-normalised projections of every verb and object embedding."""
    out = []
    for raw, w in ((vocab.verb_embeddings, params["W_v"]), (vocab.object_embeddings, params["W_o"])):
        proj = ag.matmul(Tensor(raw), w)
        if np.any(np.linalg.norm(proj.data, axis=1) < 1e-12):
            raise DegenerateError("degenerate zero projection")
        out.append(ag.l2_normalize(proj, axis=1))
    return out[0], out[1]


def negative_label(label: tuple[int, int], n_verbs: int, n_objects: int, rng: np.random.Generator) -> tuple[int, int] | None:
    total = n_verbs * n_objects
    if total < 2:
        return None
    true = label[0] * n_objects + label[1]
    k = int(rng.integers(total - 1))
    k += k >= true
    return divmod(k, n_objects)


def video_loss(params: ModelParams, vocab: VocabularyBank, video: VideoRecord, config: TrainConfig,
               rng: np.random.Generator) -> L.LossBreakdown:
    chosen, pairs = sample_frame_pairs(video, config.frames_per_video, rng, config.frame_sampling)
    ev_all, eo_all = project_vocab(vocab, params)
    v, o = video.label
    e_v, e_o = ag.take(ev_all, v), ag.take(eo_all, o)
    bank = L.NegativeBank.build(ev_all, eo_all, video.label, config.n_l)
    ctx = video_context(video.frames, chosen, params)
    outs = {t: forward_frame(video.frames[t], t, ctx, (e_v, e_o), params) for t in chosen}

    ll, spa, cls = [], [], []
    for t in chosen:
        out = outs[t]
        ll.append(L.language_alignment(out.phi_h, out.phi_o, e_v, e_o, bank, rng))
        spa.append(L.sparsity(out.sigma_h, out.sigma_o))
        c = L.classification(out.p, 1)
        neg = negative_label(video.label, len(vocab.verbs), len(vocab.objects), rng)
        if neg is not None:
            p_neg = classify(out.x, ag.take(ev_all, neg[0]), ag.take(eo_all, neg[1]), params)
            c = (c + L.classification(p_neg, 0)) * 0.5
        cls.append(c)

    zero = Tensor(0.0)
    l_t = zero
    if config.use_temporal and pairs:
        per_frame = [L.temporal_contrastive(outs[t], outs[t2], config.n_neg_temporal, rng) for t, t2 in pairs]
        per_frame = [x for x in per_frame if x is not None]
        if per_frame:
            l_t = L.filter_frames(per_frame)
    l_l = ag.mean(ag.stack(ll))
    l_spa = ag.mean(ag.stack(spa)) if config.use_sparsity else zero
    l_cls = ag.mean(ag.stack(cls))
    return L.total_loss(l_l, l_t, l_spa, l_cls, config.alpha)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_step(params: ModelParams, optimizer: Adam, vocab: VocabularyBank, video: VideoRecord,
               config: TrainConfig, rng: np.random.Generator) -> L.LossBreakdown | None:
    """One Adam update on one video's frame pairs. Returns None when the step is aborted."""
    params.zero_grad()
    tensors = params.values()
    try:
        br = video_loss(params, vocab, video, config, rng)
    except (DegenerateError, FloatingPointError) as exc:
        logger.error("step aborted on video %s: %s", video.id, exc)
        return None
    if not np.isfinite(br.total):
        logger.error("step aborted on video %s: non-finite loss %r", video.id, br.total)
        return None
    ag.backward(br.tensor)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
    if not all(np.isfinite(g).all() for g in grads):
        logger.error("step aborted on video %s: non-finite gradient", video.id)
        return None
    if config.clip_norm:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if norm > config.clip_norm:
            grads = [g * (config.clip_norm / norm) for g in grads]
    new = optimizer.update(tensors, grads)
    if not all(np.isfinite(n).all() for n in new):
        logger.error("step aborted on video %s: update produced non-finite parameters", video.id)
        return None
    for t, n in zip(tensors, new):
        t.data = n
    params.zero_grad()
    br.tensor = None
    return br


class CheckpointError(RuntimeError):
    pass


def _write_checkpoint(path: Path, ckpt: Checkpoint, config: TrainConfig) -> None:
    save_checkpoint(path, ckpt.params, ckpt.step, asdict(config),
                    {"adam_m": ckpt.optimizer.m, "adam_v": ckpt.optimizer.v} if ckpt.optimizer.m else None)


def resume(path) -> tuple[Checkpoint, TrainConfig]:
    params, header, extra = load_checkpoint(path)
    config = TrainConfig(**header["config"]) if header.get("config") else TrainConfig()
    opt = Adam(config.lr_main, step=header["step"], m=extra.get("adam_m", []), v=extra.get("adam_v", []))
    return Checkpoint(params, opt, header["step"], Path(path)), config


def train_loop(dataset: Dataset, config: TrainConfig, out_dir=None, start: Checkpoint | None = None,
               log: IO[str] | None = None, max_steps: int | None = None) -> Checkpoint:
    """Run ``epochs`` passes, one Adam step per video, in a seeded per-epoch order.

    Each step writes one JSON line to ``log``. Checkpoints go to
    ``out_dir/checkpoint.hoic`` (and ``checkpoint_<step>.hoic`` at the interval).
    """
    config.validate()
    videos = dataset.videos
    if not videos:
        raise ValueError("train_loop: dataset has no videos")
    if start is None:
        d = videos[0].frames[videos[0].nonempty()[0]].human_feat.shape[1]
        params = init_params(d, dataset.vocab.dim, config.hidden, seed=config.seed)
        start = Checkpoint(params, Adam(config.lr_main), 0)
    ckpt = start
    ckpt.optimizer.lr = config.lr_main
    out = Path(out_dir) if out_dir is not None else None
    last_good: Path | None = None
    n = len(videos)
    total_steps = config.epochs * n
    if max_steps is not None:
        total_steps = min(total_steps, ckpt.step + max_steps)
    order = None
    order_epoch = -1
    while ckpt.step < total_steps:
        epoch, pos = divmod(ckpt.step, n)
        if epoch != order_epoch:
            order = np.random.default_rng([config.seed, epoch, 7]).permutation(n)
            order_epoch = epoch
        video = videos[order[pos]]
        t0 = time.perf_counter()
        br = train_step(ckpt.params, ckpt.optimizer, dataset.vocab, video, config, step_rng(config.seed, ckpt.step))
        ms = (time.perf_counter() - t0) * 1000.0
        ckpt.step += 1
        if log is not None:
            rec = {"step": ckpt.step, "video": video.id}
            if br is None:
                rec.update({"aborted": True})
            else:
                rec.update({"L_L": br.L_L, "L_T": br.L_T, "L_spa": br.L_spa, "L_cls": br.L_cls, "total": br.total})
            rec["ms"] = round(ms, 3)
            log.write(json.dumps(rec) + "\n")
        if out is not None and config.checkpoint_interval and ckpt.step % config.checkpoint_interval == 0:
            path = out / f"checkpoint_{ckpt.step:07d}.hoic"
            try:
                _write_checkpoint(path, ckpt, config)
            except OSError as exc:
                raise CheckpointError(f"cannot write {path} ({exc}); last good checkpoint: {last_good}") from exc
            last_good = path
    if out is not None:
        path = out / "checkpoint.hoic"
        try:
            _write_checkpoint(path, ckpt, config)
        except OSError as exc:
            raise CheckpointError(f"cannot write {path} ({exc}); last good checkpoint: {last_good}") from exc
        ckpt.path = path
    return ckpt
