import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stainsep import autodiff as ad
from stainsep.autodiff import Tensor, gradcheck
from stainsep.losses import (FeatureExtractor, LossWeights, loss_color, loss_entropy,
                             loss_mask_dominance, loss_reconstruction, loss_topk_overlap,
                             loss_total, top_count, topk_membership)
from stainsep.stains import decode_tensor

# Reference stain columns (initial / learned), rows = stains.
TABLE_INITIAL = [[0.620, 0.637, 0.458], [0.290, 0.832, 0.473], [0.033, 0.343, 0.939],
                 [0.741, 0.294, 0.604], [0.300, 0.491, 0.818]]
TABLE_LEARNED = [[0.705, 0.581, 0.408], [0.242, 0.843, 0.480], [0.028, 0.239, 0.971],
                 [0.737, 0.300, 0.606], [0.330, 0.536, 0.777]]


def brute_overlap(C, p):
    """Plain-Python top-p overlap count for one (K, H, W) map."""
    K = C.shape[0]
    flat = [list(C[k].ravel()) for k in range(K)]
    P = len(flat[0])
    m = max(1, math.ceil(p * P - 1e-9))
    sets = []
    for k in range(K):
        order = sorted(range(P), key=lambda i: (-flat[k][i], i))
        sets.append(set(order[:m]))
    total = 0
    for i in range(P):
        total += max(0, sum(i in s for s in sets) - 1)
    return total / max(p * P, 1.0)


# ---------------------------------------------------------------- values

def test_reconstruction_identical_is_zero():
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    rec, l1, perc = loss_reconstruction(Tensor(x), x, FeatureExtractor.default())
    assert rec.item() == 0.0 and l1.item() == 0.0 and perc.item() == 0.0


def test_reconstruction_constant_offset():
    x = np.full((1, 3, 4, 4), 0.5)
    rec, _, _ = loss_reconstruction(Tensor(x + 0.1), x, None)
    assert rec.item() == pytest.approx(0.1, abs=1e-12)


def test_reconstruction_identity_extractor():
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 3, 6, 6)), rng.random((2, 3, 6, 6))
    rec, _, _ = loss_reconstruction(Tensor(a), b, FeatureExtractor.identity(), perceptual_weight=2.0)
    assert rec.item() == pytest.approx(3.0 * np.mean(np.abs(a - b)), rel=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_reconstruction(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 5)))


def test_entropy_uniform_and_one_hot():
    uniform = np.full((4, 4, 5), 0.3)
    assert loss_entropy(uniform)[0].item() == pytest.approx(math.log(5), abs=1e-6)
    one_hot = np.zeros((4, 4, 5))
    one_hot[..., 2] = 1.0
    assert loss_entropy(one_hot)[0].item() == pytest.approx(0.0, abs=1e-6)


def test_entropy_empty_domain():
    loss, n = loss_entropy(np.full((3, 3, 5), 1e-3))
    assert loss.item() == 0.0 and n == 0


def test_entropy_threshold_is_strict():
    C = np.zeros((1, 2, 2))
    C[0, 0, 0] = 0.01
    assert loss_entropy(C.transpose(1, 2, 0), tau=0.01)[1] == 0


def test_color_single_entry():
    S = np.random.default_rng(2).random((3, 5))
    T = S.copy()
    T[1, 3] += 0.15
    assert loss_color(Tensor(S), T).item() == pytest.approx(0.01, abs=1e-12)
    assert loss_color(Tensor(S), S).item() == 0.0


def test_color_on_reference_columns():
    init, learned = np.array(TABLE_INITIAL).T, np.array(TABLE_LEARNED).T
    expected = sum(abs(a - b) for ra, rb in zip(TABLE_INITIAL, TABLE_LEARNED)
                   for a, b in zip(ra, rb)) / 15
    got = loss_color(Tensor(learned), init).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.526 / 15, abs=1e-12)


def test_color_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_color(Tensor(np.zeros((3, 4))), np.zeros((3, 5)))


def test_overlap_disjoint_is_zero():
    C = np.zeros((8, 8, 5))
    for k in range(5):
        C.reshape(64, 5)[k * 4:(k + 1) * 4, k] = 1.0 + np.arange(4)
    loss, n = loss_topk_overlap(C, 0.05)
    assert loss.item() == 0.0 and n == 0


def test_overlap_identical_channels():
    rng = np.random.default_rng(3)
    base = rng.random((8, 8))
    C = np.repeat(base[..., None], 5, axis=2)
    loss, _ = loss_topk_overlap(C, 0.05)
    expected = brute_overlap(C.transpose(2, 0, 1), 0.05)
    assert expected == pytest.approx(4 * 4 / 3.2)
    assert loss.item() == pytest.approx(expected, abs=1e-9)


def test_overlap_single_channel_is_zero():
    C = np.random.default_rng(4).random((8, 8, 1))
    assert loss_topk_overlap(C, 0.05)[0].item() == 0.0


def test_overlap_degenerate_uses_top1():
    assert top_count(4, 0.05) == 1
    assert top_count(64, 0.05) == 4
    assert top_count(100, 0.05) == 5


def test_topk_ties_follow_pixel_order():
    member = topk_membership(np.zeros((1, 40)), 0.05)
    np.testing.assert_array_equal(np.flatnonzero(member[0]), [0, 1])


def test_overlap_gradient_vanishes_outside_sets():
    rng = np.random.default_rng(5)
    C = Tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
    C.data[0, 1] = C.data[0, 0] * 0.9  # force overlap
    loss, n = loss_topk_overlap(C, 0.05)
    assert n > 0
    loss.backward()
    member = topk_membership(C.data[0].reshape(3, -1), 0.05).reshape(3, 8, 8)
    assert np.all(C.grad[0][~member] == 0)
    assert np.any(C.grad[0][member] > 0)


def test_mask_dominance_values():
    C = np.full((4, 4, 5), 0.2)
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = True
    assert loss_mask_dominance(C, mask, 2)[0].item() == pytest.approx(0.8, abs=1e-6)
    C2 = np.zeros((4, 4, 5))
    C2[..., 4] = 1.0
    assert loss_mask_dominance(C2, mask, 4)[0].item() == pytest.approx(0.0, abs=1e-6)
    empty, n = loss_mask_dominance(C, np.zeros((4, 4), bool), 0)
    assert empty.item() == 0.0 and n == 0
    with pytest.raises(IndexError):
        loss_mask_dominance(C, mask, 5)


def test_total_reduces_to_rec_without_lambdas():
    w = LossWeights(0, 0, 0, 0, perceptual_weight=2.0)
    total, rep = loss_total(0.3, 0.1, 0.7, 0.2, 1.5, 0.4, w)
    assert total.item() == pytest.approx(0.5)
    assert rep.ent == pytest.approx(0.7)


def test_total_matches_recomputed_sum():
    rng = np.random.default_rng(6)
    for _ in range(20):
        terms = rng.random(6)
        w = LossWeights(*rng.random(4), perceptual_weight=rng.random())
        total, rep = loss_total(*terms, w)
        coefs = [1, w.perceptual_weight, w.lambda_ent, w.lambda_col, w.lambda_ov, w.lambda_mask]
        assert abs(rep.total - float(np.dot(coefs, terms))) < 1e-6
        assert total.item() == pytest.approx(rep.total)


def test_total_all_terms_vanish():
    x = np.random.default_rng(7).random((1, 3, 8, 8))
    rec, l1, perc = loss_reconstruction(Tensor(x), x, FeatureExtractor.default())
    C = np.zeros((8, 8, 5))
    for k in range(5):
        C.reshape(64, 5)[k * 4:(k + 1) * 4, k] = 1.0
    S = np.random.default_rng(8).random((3, 5))
    total, _ = loss_total(l1, perc, loss_entropy(C)[0], loss_color(Tensor(S), S),
                          loss_topk_overlap(C)[0], loss_mask_dominance(C, np.zeros((8, 8), bool), 0)[0],
                          LossWeights())
    assert total.item() == pytest.approx(0.0, abs=1e-6)


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="lambda_ov"):
        LossWeights(lambda_ov=-0.1)


# ------------------------------------------------------------- gradients

SMALL_EXTRACTOR = FeatureExtractor.default(seed=3, widths=(4, 4))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reconstruction_gradient_wrt_S_and_C(seed):
    rng = np.random.default_rng(seed)
    S = rng.random((3, 3)) + 0.1
    C = rng.random((1, 3, 8, 8))
    x = rng.random((1, 3, 8, 8)) * 0.8 + 0.1

    def f(s, c):
        return loss_reconstruction(decode_tensor(s, c), x, SMALL_EXTRACTOR)[0]

    assert gradcheck(f, [S, C]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_entropy_gradient(seed):
    C = np.random.default_rng(seed).random((1, 3, 8, 8)) + 0.05
    assert gradcheck(lambda c: loss_entropy(c)[0], [C]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_color_gradient(seed):
    rng = np.random.default_rng(seed)
    S, T = rng.random((3, 3)), rng.random((3, 3))
    T = np.where(np.abs(S - T) < 0.01, T + 0.05, T)
    assert gradcheck(lambda s: loss_color(s, T), [S]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mask_gradient(seed):
    rng = np.random.default_rng(seed)
    C = rng.random((1, 3, 8, 8)) + 0.05
    mask = rng.random((8, 8)) > 0.5
    assert gradcheck(lambda c: loss_mask_dominance(c, mask, 1)[0], [C]) < 1e-4


# ------------------------------------------------------------ properties

conc = arrays(np.float64, (6, 6, 4), elements=st.floats(0, 5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(conc)
def test_losses_nonnegative_and_bounded(C):
    ent = loss_entropy(C)[0].item()
    ov = loss_topk_overlap(C)[0].item()
    mk = loss_mask_dominance(C, np.ones((6, 6), bool), 0)[0].item()
    assert -1e-7 <= ent <= math.log(4) + 1e-6  # eps inside the log allows O(eps) negatives
    m = top_count(36, 0.05)
    assert 0 <= ov <= 3 * m / (0.05 * 36) + 1e-9
    assert -1e-9 <= mk <= 1 + 1e-9


@settings(max_examples=40, deadline=None)
@given(conc, st.permutations(range(4)), st.integers(0, 3))
def test_losses_permutation_equivariant(C, perm, c_star):
    perm = list(perm)
    Cp = C[..., perm]
    mask = np.ones((6, 6), bool)
    mask[::2] = False
    assert loss_entropy(Cp)[0].item() == pytest.approx(loss_entropy(C)[0].item(), abs=1e-9)
    assert loss_mask_dominance(Cp, mask, perm.index(c_star))[0].item() == pytest.approx(
        loss_mask_dominance(C, mask, c_star)[0].item(), abs=1e-9)
    # overlap ties depend only on pixel order, so channel permutation is exact
    assert loss_topk_overlap(Cp)[0].item() == pytest.approx(loss_topk_overlap(C)[0].item(), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5, 5), elements=st.floats(0, 1, allow_nan=False)),
       st.sampled_from([0.05, 0.1, 0.3]))
def test_overlap_matches_brute_force(C, p):
    got = loss_topk_overlap(C.transpose(1, 2, 0), p)[0].item()
    assert got == pytest.approx(brute_overlap(C, p), abs=1e-9)
