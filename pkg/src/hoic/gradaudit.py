"""Finite-difference audit of every training loss on small random instances."""
from __future__ import annotations

import time

import numpy as np

from . import autograd as ag
from . import losses as L
from .autograd import Tensor
from .dataio import SyntheticConfig, generate_synthetic
from .model import ForwardOutput, hard_index, init_params
from .train import TrainConfig, video_loss

LOSS_NAMES = ("contrastive", "language_alignment", "temporal", "sparsity", "classification", "total")


def _vec(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _soft_frame(logits: Tensor, feats: Tensor, t: int) -> ForwardOutput:
    # only the fields the temporal loss reads are meaningful here
    sigma = ag.softmax(logits)
    raw = ag.matmul(sigma, feats)
    phi = ag.l2_normalize(raw)
    return ForwardOutput(t, sigma, sigma, phi, phi, raw, raw, phi, np.ones(1), Tensor(0.5), feats,
                         hard_index(sigma.data))


def _check_contrastive(rng, dim, n_neg, eps):
    a, b, c = _vec(rng, dim), _vec(rng, dim), _vec(rng, n_neg, dim)
    f = lambda: L.contrastive(ag.l2_normalize(a), ag.l2_normalize(b), ag.l2_normalize(c, axis=1))
    return ag.grad_check(f, [a, b, c], eps)


def _check_alignment(rng, dim, n_neg, eps):
    phi_h, phi_o = _vec(rng, dim), _vec(rng, dim)
    verbs, objs = _vec(rng, n_neg + 1, dim), _vec(rng, n_neg + 1, dim)
    label = (int(rng.integers(n_neg + 1)), int(rng.integers(n_neg + 1)))
    seed = int(rng.integers(2**31))

    def f():
        ev, eo = ag.l2_normalize(verbs, axis=1), ag.l2_normalize(objs, axis=1)
        bank = L.NegativeBank.build(ev, eo, label, n_neg)
        return L.language_alignment(ag.l2_normalize(phi_h), ag.l2_normalize(phi_o), ag.take(ev, label[0]),
                                    ag.take(eo, label[1]), bank, np.random.default_rng(seed))
    return ag.grad_check(f, [phi_h, phi_o, verbs, objs], eps)


def _check_temporal(rng, dim, n_neg, eps):
    n1, n2 = (int(x) for x in rng.integers(3, 6, size=2))
    l1, l2, f1, f2 = _vec(rng, n1), _vec(rng, n2), _vec(rng, n1, dim), _vec(rng, n2, dim)
    seed = int(rng.integers(2**31))

    def f():
        return L.temporal_contrastive(_soft_frame(l1, f1, 0), _soft_frame(l2, f2, 1), n_neg,
                                      np.random.default_rng(seed))
    return ag.grad_check(f, [l1, l2, f1, f2], eps)


def _check_sparsity(rng, dim, n_neg, eps):
    lh, lo = _vec(rng, int(rng.integers(3, 6))), _vec(rng, int(rng.integers(3, 6)))
    return ag.grad_check(lambda: L.sparsity(ag.softmax(lh), ag.softmax(lo)), [lh, lo], eps)


def _check_classification(rng, dim, n_neg, eps):
    z = _vec(rng)
    f = lambda: L.classification(ag.sigmoid(z), 1) + L.classification(ag.sigmoid(z), 0)
    return ag.grad_check(f, [z], eps)


def _check_total(rng, dim, n_neg, eps):
    seed = int(rng.integers(2**31))
    n_h, n_o = (int(x) for x in rng.integers(3, 6, size=2))
    ds = generate_synthetic(SyntheticConfig(videos=1, frames=2, humans=n_h, objects=n_o, dim=dim, word_dim=4,
                                            n_verbs=n_neg + 1, n_objects=n_neg + 1, seed=seed))
    params = init_params(dim, 4, 4, seed=seed)
    cfg = TrainConfig(frames_per_video=2, n_l=n_neg, n_neg_temporal=n_neg, seed=seed)
    video = ds.videos[0]
    f = lambda: video_loss(params, ds.vocab, video, cfg, np.random.default_rng(seed)).tensor
    return ag.grad_check(f, params.values(), eps)


_CHECKS = {
    "contrastive": _check_contrastive,
    "language_alignment": _check_alignment,
    "temporal": _check_temporal,
    "sparsity": _check_sparsity,
    "classification": _check_classification,
    "total": _check_total,
}


def audit(seed: int = 0, dim: int = 8, instances: int = 10, n_neg: int = 3, eps: float = 1e-5,
          names=LOSS_NAMES) -> dict[str, float]:
    """Max relative gradient error per loss over ``instances`` random draws.

    Per-loss checks differentiate with respect to the loss inputs; ``total``
    differentiates the whole per-video objective with respect to every model
    parameter (hidden and word widths 4 keep it fast).
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for name in names:
        worst[name] = max(_CHECKS[name](rng, dim, n_neg, eps) for _ in range(instances))
    return worst


def timed_audit(**kw) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    res = audit(**kw)
    return res, time.perf_counter() - t0
