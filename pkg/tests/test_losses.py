import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoic import autograd as ag
from hoic import losses as L
from hoic.autograd import Tensor
from hoic.gradaudit import _soft_frame

seeds = st.integers(0, 2**31 - 1)


def unit(v):
    v = np.asarray(v, dtype=float)
    return Tensor(v / np.linalg.norm(v))


def rand_unit(rng, d, n=None):
    x = rng.standard_normal((n, d) if n else d)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# contrastive


@pytest.mark.parametrize("f,fp,negs,want", [
    ([1, 0], [1, 0], [[0, 1]], -1.0),
    ([1, 0], [0, 1], [[1, 0]], 1.0),
    ([1, 0], [1, 0], [[1, 0]], 0.0),
])
def test_contrastive_cases(f, fp, negs, want):
    got = L.contrastive(unit(f), unit(fp), [unit(n) for n in negs]).item()
    assert abs(got - want) < 1e-9


def test_contrastive_rejects_non_unit():
    with pytest.raises(ValueError, match="not unit-norm"):
        L.contrastive(Tensor([2.0, 0.0]), unit([1, 0]), [unit([0, 1])])


def test_contrastive_rejects_empty_negatives():
    with pytest.raises(ValueError):
        L.contrastive(unit([1, 0]), unit([1, 0]), [])


def test_contrastive_matches_formula_and_fd():
    rng = np.random.default_rng(0)
    f, fp, negs = rand_unit(rng, 6), rand_unit(rng, 6), rand_unit(rng, 6, 2)
    want = -f @ fp + math.log(sum(math.exp(f @ n) for n in negs))
    assert abs(L.contrastive(Tensor(f), Tensor(fp), Tensor(negs)).item() - want) < 1e-12
    a, b, c = (Tensor(rng.standard_normal(s), requires_grad=True) for s in ((6,), (6,), (2, 6)))
    err = ag.grad_check(lambda: L.contrastive(ag.l2_normalize(a), ag.l2_normalize(b), ag.l2_normalize(c, axis=1)),
                        [a, b, c], eps=1e-5)
    assert err < 1e-6


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 8))
def test_contrastive_negative_order_invariant(seed, n):
    rng = np.random.default_rng(seed)
    f, fp, negs = rand_unit(rng, 5), rand_unit(rng, 5), rand_unit(rng, 5, n)
    a = L.contrastive(Tensor(f), Tensor(fp), Tensor(negs)).item()
    b = L.contrastive(Tensor(f), Tensor(fp), Tensor(negs[rng.permutation(n)])).item()
    assert abs(a - b) < 1e-12


# language alignment


def _bank(ev, eo, label, n_l=15):
    return L.NegativeBank.build(Tensor(ev), Tensor(eo), label, n_l)


def test_alignment_perfect_match_orthogonal_negative():
    ev = np.array([[1.0, 0.0], [0.0, 1.0]])
    bank = _bank(ev, ev, (0, 0))
    got = L.language_alignment(unit([1, 0]), unit([1, 0]), unit([1, 0]), unit([1, 0]), bank,
                               np.random.default_rng(0)).item()
    assert abs(got - (-2.0)) < 1e-12


def test_alignment_negatives_equal_positive():
    ev = np.array([[1.0, 0.0], [1.0, 0.0]])
    bank = _bank(ev, ev, (0, 0))
    got = L.language_alignment(unit([1, 0]), unit([1, 0]), unit([1, 0]), unit([1, 0]), bank,
                               np.random.default_rng(0)).item()
    assert abs(got) < 1e-12


def test_alignment_matches_two_direct_terms():
    rng = np.random.default_rng(4)
    ev, eo = rand_unit(rng, 6, 7), rand_unit(rng, 6, 7)
    label = (2, 5)
    phi_h, phi_o = rand_unit(rng, 6), rand_unit(rng, 6)
    got = L.language_alignment(Tensor(phi_h), Tensor(phi_o), Tensor(ev[2]), Tensor(eo[5]), _bank(ev, eo, label, 3),
                               np.random.default_rng(11)).item()
    # replay the sampler: without replacement from the bank minus the ground-truth row
    r = np.random.default_rng(11)
    vi = np.sort(r.choice(6, size=3, replace=False))
    oi = np.sort(r.choice(6, size=3, replace=False))
    vbank, obank = np.delete(ev, 2, axis=0)[vi], np.delete(eo, 5, axis=0)[oi]
    direct = lambda f, p, ns: -f @ p + math.log(sum(math.exp(f @ n) for n in ns))
    want = direct(phi_h, ev[2], vbank) + direct(phi_o, eo[5], obank)
    assert abs(got - want) < 1e-12


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(2, 20), st.integers(1, 15))
def test_negative_bank_excludes_truth_without_duplicates(seed, n, n_l):
    rng = np.random.default_rng(seed)
    emb = rand_unit(rng, 4, n)
    label = int(rng.integers(n))
    bank = L.NegativeBank.build(Tensor(emb), Tensor(emb), (label, label), n_l)
    drawn = L.NegativeBank.sample(bank.verbs, n_l, rng).data
    assert len(drawn) == min(n_l, n - 1)
    assert len({r.tobytes() for r in drawn}) == len(drawn)
    assert not any(np.array_equal(r, emb[label]) for r in drawn)


def test_alignment_single_entry_vocabulary_drops_side(caplog):
    ev = np.array([[1.0, 0.0]])
    eo = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = L.language_alignment(unit([1, 0]), unit([1, 0]), unit([1, 0]), unit([1, 0]), _bank(ev, eo, (0, 0)),
                               np.random.default_rng(0)).item()
    assert abs(got - (-1.0)) < 1e-12


@pytest.mark.invariant
def test_alignment_monotone_in_angle():
    rng = np.random.default_rng(7)
    eo = rand_unit(rng, 6, 5)
    e = eo[0]
    ortho = rand_unit(rng, 6)
    ortho = ortho - (ortho @ e) * e
    ortho /= np.linalg.norm(ortho)
    bank = _bank(eo, eo, (0, 0), 4)
    phi_h = Tensor(eo[1])
    vals = []
    for theta in np.linspace(np.pi, 0.0, 10):
        phi_o = Tensor(np.cos(theta) * e + np.sin(theta) * ortho)
        vals.append(L.language_alignment(phi_h, phi_o, Tensor(eo[1]), Tensor(e), bank, np.random.default_rng(0)).item())
    assert all(b < a for a, b in zip(vals, vals[1:]))


# temporal


def test_temporal_hard_index_and_value():
    f_other = Tensor(np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]), requires_grad=True)
    other = _soft_frame(Tensor(np.log([0.2, 0.5, 0.3])), f_other, 1)
    assert other.hard_index == 1
    anchor_feats = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    anchor = _soft_frame(Tensor([50.0, 0.0]), anchor_feats, 0)
    got = L.temporal_contrastive(anchor, other, 15, np.random.default_rng(0)).item()
    # anchor ~ [1, 0], positive [1, 0], single orthogonal negative
    assert abs(got - (-1.0)) < 1e-9


def test_temporal_skipped_without_negatives():
    one = _soft_frame(Tensor([0.0]), Tensor(np.array([[1.0, 0.0]])), 0)
    assert L.temporal_contrastive(one, one, 15, np.random.default_rng(0)) is None


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(2, 8), st.integers(1, 15))
def test_temporal_negatives_exclude_anchor_hard_index(seed, n, n_neg):
    rng = np.random.default_rng(seed)
    feats = Tensor(rng.standard_normal((n, 4)))
    frame = _soft_frame(Tensor(rng.standard_normal(n)), feats, 0)
    other = _soft_frame(Tensor(rng.standard_normal(n)), Tensor(rng.standard_normal((n, 4))), 1)
    # recompute the draw and check the excluded row never appears
    r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
    pool = [j for j in range(n) if j != frame.hard_index]
    k = min(n_neg, len(pool))
    chosen = sorted(r1.choice(pool, size=k, replace=False).tolist()) if k < len(pool) else pool
    assert frame.hard_index not in chosen and len(set(chosen)) == k
    negs = ag.l2_normalize(ag.take(feats, chosen), axis=1)
    pos = ag.l2_normalize(ag.take(other.obj_feat, other.hard_index))
    want = L.contrastive(frame.phi_o, pos, negs).item()
    assert abs(L.temporal_contrastive(frame, other, n_neg, r2).item() - want) < 1e-12


# filtering


@pytest.mark.parametrize("vals,want", [([3.0, 1.0, 2.0, 4.0], 1.5), ([5.0], 5.0), ([2.5] * 6, 2.5)])
def test_filter_frames_cases(vals, want):
    assert abs(L.filter_frames([Tensor(v) for v in vals]).item() - want) < 1e-12


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10, 10), min_size=1, max_size=12))
def test_filter_frames_below_full_mean(vals):
    got = L.filter_frames([Tensor(float(v)) for v in vals]).item()
    full = float(np.mean(vals))
    assert got <= full + 1e-12
    if len(vals) > 1:
        assert (abs(got - full) < 1e-12) == (min(vals) == max(vals))


# sparsity


def test_sparsity_cases():
    oh = Tensor([1.0, 0.0, 0.0, 0.0])
    u4 = Tensor(np.full(4, 0.25))
    assert abs(L.sparsity(oh, oh).item()) < 1e-12
    assert abs(L.sparsity(u4, u4).item() - 1.386294) < 1e-6
    assert abs(L.sparsity(u4, u4).item() - math.log(4)) < 1e-9
    assert abs(L.sparsity(Tensor([0.5, 0.5]), Tensor([0.0, 1.0])).item() - 0.5 * math.log(2)) < 1e-9


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 10), st.integers(1, 10))
def test_sparsity_bounds(seed, nh, no):
    rng = np.random.default_rng(seed)
    sh = ag.softmax(Tensor(rng.standard_normal(nh) * 3))
    so = ag.softmax(Tensor(rng.standard_normal(no) * 3))
    v = L.sparsity(sh, so).item()
    assert -1e-12 <= v <= 0.5 * (math.log(nh) + math.log(no)) + 1e-12
    uni = L.sparsity(Tensor(np.full(nh, 1 / nh)), Tensor(np.full(no, 1 / no))).item()
    assert abs(uni - 0.5 * (math.log(nh) + math.log(no))) < 1e-12


# classification


def test_classification_cases():
    assert abs(L.classification(Tensor(0.5), 1).item() - math.log(2)) < 1e-12
    assert abs(L.classification(Tensor(0.5), 0).item() - math.log(2)) < 1e-12
    assert L.classification(Tensor(1 - 1e-15), 1).item() < 1e-11


def test_classification_clamped_at_extremes():
    assert np.isfinite(L.classification(Tensor(0.0), 1).item())
    assert abs(L.classification(Tensor(0.0), 1).item() - (-math.log(1e-12))) < 1e-9


# total


def test_total_loss_arithmetic():
    br = L.total_loss(-2.0, 1.5, 0.0, math.log(2), 0.1)
    assert abs(br.total - (-1.156853)) < 1e-6
    assert abs(br.total - (-2 + 0.15 + math.log(2))) < 1e-12


def test_total_alpha_zero_ignores_temporal():
    assert L.total_loss(1.0, 100.0, 0.5, 0.2, 0.0).total == L.total_loss(1.0, -7.0, 0.5, 0.2, 0.0).total


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(*(st.floats(-50, 50) for _ in range(4)), st.floats(0, 1))
def test_total_is_weighted_sum(ll, lt, ls, lc, alpha):
    br = L.total_loss(ll, lt, ls, lc, alpha)
    assert abs(br.total - (ll + alpha * lt + ls + lc)) < 1e-12


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(-20, 20))
def test_losses_shift_invariant_in_logits(seed, c):
    rng = np.random.default_rng(seed)
    lh, lo = rng.standard_normal(4), rng.standard_normal(5)
    fh, fo = rng.standard_normal((4, 6)), rng.standard_normal((5, 6))
    e = rand_unit(rng, 6, 4)
    bank = _bank(e, e, (0, 1), 3)

    def losses(shift):
        sh, so = ag.softmax(Tensor(lh + shift)), ag.softmax(Tensor(lo + shift))
        a = _soft_frame(Tensor(lo + shift), Tensor(fo), 0)
        b = _soft_frame(Tensor(lo[::-1] + shift), Tensor(fo[::-1]), 1)
        phi_h = ag.l2_normalize(ag.matmul(sh, Tensor(fh)))
        return [L.sparsity(sh, so).item(),
                L.language_alignment(phi_h, a.phi_o, Tensor(e[0]), Tensor(e[1]), bank, np.random.default_rng(1)).item(),
                L.temporal_contrastive(a, b, 3, np.random.default_rng(2)).item()]
    np.testing.assert_allclose(losses(c), losses(0.0), atol=1e-9)
