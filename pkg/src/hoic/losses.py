"""Training losses: contrastive alignment, temporal contrastive, sparsity and classification."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ForwardOutput

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-3
P_CLAMP = 1e-12


def _check_unit(name: str, t: Tensor) -> None:
    dev = abs(float(np.linalg.norm(t.data)) - 1.0)
    if dev > UNIT_TOL:
        raise ValueError(f"contrastive: {name} is not unit-norm (deviation {dev:.3g})")


def contrastive(f: Tensor, f_pos: Tensor, negatives) -> Tensor:
    """-f.f_pos + log sum_n exp(f.f_n) for unit-length features.

    ``negatives`` is a list of vectors or an (N, D) tensor.
    """
    if isinstance(negatives, Tensor):
        negs = negatives
        rows = list(negs.data)
    else:
        if len(negatives) == 0:
            raise ValueError("contrastive: negatives must be non-empty")
        negs = ag.stack(list(negatives))
        rows = list(negs.data)
    if negs.ndim != 2 or negs.shape[0] == 0:
        raise ValueError("contrastive: negatives must be non-empty")
    _check_unit("anchor", f)
    _check_unit("positive", f_pos)
    for i, r in enumerate(rows):
        dev = abs(float(np.linalg.norm(r)) - 1.0)
        if dev > UNIT_TOL:
            raise ValueError(f"contrastive: negative {i} is not unit-norm (deviation {dev:.3g})")
    return ag.log_sum_exp(ag.matmul(negs, f)) - ag.dot(f, f_pos)


@dataclass
class NegativeBank:
    """Projected verb/object embeddings with the ground-truth rows excluded."""

    verbs: Tensor | None  # (V-1, D) or None when the vocabulary has one verb
    objects: Tensor | None
    n_l: int = 15

    @classmethod
    def build(cls, verb_emb: Tensor, obj_emb: Tensor, label: tuple[int, int], n_l: int = 15) -> "NegativeBank":
        v, o = label
        vi = [i for i in range(verb_emb.shape[0]) if i != v]
        oi = [i for i in range(obj_emb.shape[0]) if i != o]
        return cls(ag.take(verb_emb, vi) if vi else None, ag.take(obj_emb, oi) if oi else None, n_l)

    @staticmethod
    def sample(bank: Tensor | None, n: int, rng: np.random.Generator) -> Tensor | None:
        if bank is None:
            return None
        m = bank.shape[0]
        if m <= n:
            return bank
        return ag.take(bank, np.sort(rng.choice(m, size=n, replace=False)))


_warned_empty = False


def language_alignment(phi_h: Tensor, phi_o: Tensor, e_v: Tensor, e_o: Tensor, bank: NegativeBank,
                       rng: np.random.Generator) -> Tensor:
    """Human term against verb negatives plus object term against object negatives."""
    global _warned_empty
    terms = []
    for phi, e, side in ((phi_h, e_v, bank.verbs), (phi_o, e_o, bank.objects)):
        negs = NegativeBank.sample(side, bank.n_l, rng)
        if negs is None:
            if not _warned_empty:
                logger.warning("vocabulary side has a single entry; its alignment term is dropped")
                _warned_empty = True
            continue
        terms.append(contrastive(phi, e, negs))
    if not terms:
        return Tensor(0.0)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def temporal_contrastive(anchor_out: ForwardOutput, other_out: ForwardOutput, n_neg: int,
                         rng: np.random.Generator) -> Tensor | None:
    """Pull the soft-attended object feature of frame t towards the hard-selected
    object of frame t', against other object regions of frame t.

    Returns None when frame t has no usable negative region.
    """
    j_other = other_out.hard_index
    pos = ag.take(other_out.obj_feat, j_other)
    if np.linalg.norm(pos.data) < 1e-12:
        return None
    pos = ag.l2_normalize(pos)
    feats = anchor_out.obj_feat
    pool = [j for j in range(feats.shape[0])
            if j != anchor_out.hard_index and np.linalg.norm(feats.data[j]) >= 1e-12]
    if not pool:
        return None
    n = min(n_neg, len(pool))
    chosen = sorted(rng.choice(pool, size=n, replace=False).tolist()) if n < len(pool) else pool
    negs = ag.l2_normalize(ag.take(feats, chosen), axis=1)
    return contrastive(anchor_out.phi_o, pos, negs)


def filter_frames(losses: list[Tensor]) -> Tensor:
    """Mean of the lowest half (at least one) of per-frame temporal losses."""
    if not losses:
        raise ValueError("filter_frames: empty list")
    keep = max(1, len(losses) // 2)
    order = sorted(range(len(losses)), key=lambda i: (float(losses[i].data), i))[:keep]
    return ag.mean(ag.stack([losses[i] for i in order]))


def sparsity(sigma_h: Tensor, sigma_o: Tensor) -> Tensor:
    """-log||sigma_h||_2 - log||sigma_o||_2."""
    return -(ag.log(ag.dot(sigma_h, sigma_h)) + ag.log(ag.dot(sigma_o, sigma_o))) * 0.5


def classification(p: Tensor, y: int) -> Tensor:
    """Binary cross-entropy; p is clamped to [1e-12, 1 - 1e-12] inside the log."""
    p = ag.as_tensor(p)
    if y not in (0, 1):
        raise ValueError(f"classification: label must be 0 or 1, got {y}")
    if P_CLAMP <= p.data <= 1 - P_CLAMP:
        q = p if y == 1 else 1.0 - p
        return -ag.log(q)
    # clamped region: constant value, zero gradient
    q = min(max(float(p.data), P_CLAMP), 1 - P_CLAMP)
    return Tensor(-math.log(q if y == 1 else 1 - q))


@dataclass
class LossBreakdown:
    L_L: float
    L_T: float
    L_spa: float
    L_cls: float
    L_ST: float
    total: float
    alpha: float
    tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return {"L_L": self.L_L, "L_T": self.L_T, "L_spa": self.L_spa, "L_cls": self.L_cls,
                "L_ST": self.L_ST, "total": self.total}


def total_loss(L_L, L_T, L_spa, L_cls, alpha: float = 0.1) -> LossBreakdown:
    """L_L + alpha * L_T + L_spa + L_cls with the per-term values retained."""
    L_L, L_T, L_spa, L_cls = (ag.as_tensor(x) for x in (L_L, L_T, L_spa, L_cls))
    st = L_L + ag.scale(L_T, alpha)
    tot = st + L_spa + L_cls
    return LossBreakdown(L_L.item(), L_T.item(), L_spa.item(), L_cls.item(), st.item(), tot.item(), alpha, tot)
