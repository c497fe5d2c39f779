"""Training objectives: photometric terms, regularizers, weighted total."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lca import engine as eng
from lca.engine import Tensor
from lca.loss import (LossReport, LossWeights, acap, asap, l1_loss,
                      perceptual_loss, skin_sparsity, total_loss)

from helpers import fd_check


def imgs(rng, h=24, w=24):
    target = rng.uniform(0, 1, (h, w, 3))
    pred = rng.uniform(0, 1, (h, w, 3)).astype(np.float32)
    mask = np.zeros((h, w), bool)
    mask[4:-4, 4:-4] = True
    return target, pred, mask


# -- l1 ----------------------------------------------------------------------

def test_l1_zero_on_identical():
    rng = np.random.default_rng(0)
    t, _, m = imgs(rng)
    assert l1_loss(t, Tensor(t.astype(np.float32)), m).item() < 1e-7


def test_l1_constant_offset():
    t = np.full((20, 20, 3), 0.5)
    p = Tensor(np.full((20, 20, 3), 0.75, np.float32))
    m = np.ones((20, 20), bool)
    assert np.isclose(l1_loss(t, p, m).item(), 0.25, atol=1e-6)


def test_l1_ignores_error_outside_mask():
    rng = np.random.default_rng(1)
    t = rng.uniform(0, 1, (20, 20, 3))
    p = t.copy()
    m = np.zeros((20, 20), bool)
    m[:, :10] = True
    p[:, 10:] = 0.0  # error only outside the mask
    assert l1_loss(t, Tensor(p.astype(np.float32)), m).item() < 1e-7


def test_l1_rejects_empty_mask_and_shape_mismatch():
    t = np.zeros((20, 20, 3))
    with pytest.raises(ValueError, match="no pixels"):
        l1_loss(t, Tensor(t.astype(np.float32)), np.zeros((20, 20), bool))
    with pytest.raises(ValueError):
        l1_loss(t, Tensor(np.zeros((20, 21, 3), np.float32)),
                np.ones((20, 20), bool))


# -- perceptual --------------------------------------------------------------

def test_perceptual_zero_on_identical():
    rng = np.random.default_rng(2)
    t, _, m = imgs(rng)
    assert perceptual_loss(t, Tensor(t.astype(np.float32)), m).item() < 1e-5


def test_perceptual_negative_image_scores_worse():
    rng = np.random.default_rng(3)
    t = rng.uniform(0, 0.4, (24, 24, 3))  # keep away from mid-gray
    m = np.ones((24, 24), bool)
    same = perceptual_loss(t, Tensor(t.astype(np.float32)), m).item()
    neg = perceptual_loss(t, Tensor((1.0 - t).astype(np.float32)), m).item()
    assert 0 < neg <= 2.0
    assert neg > same


def test_perceptual_decreases_along_interpolation():
    rng = np.random.default_rng(4)
    t, p, m = imgs(rng)
    vals = []
    for a in np.linspace(0, 1, 10):
        mix = (1 - a) * p + a * t
        vals.append(perceptual_loss(t, Tensor(mix.astype(np.float64)), m).item())
    assert all(x >= y - 1e-9 for x, y in zip(vals, vals[1:]))
    assert vals[-1] < vals[0]


def test_perceptual_invariant_outside_mask():
    rng = np.random.default_rng(5)
    t, p, m = imgs(rng)
    a = perceptual_loss(t, Tensor(p), m).item()
    p2 = p.copy()
    p2[~m] = rng.uniform(0, 1, (int((~m).sum()), 3)).astype(np.float32)
    b = perceptual_loss(t, Tensor(p2), m).item()
    assert np.isclose(a, b, atol=1e-7)


def test_perceptual_rejects_small_images():
    t = np.zeros((8, 8, 3))
    with pytest.raises(ValueError, match="16x16"):
        perceptual_loss(t, Tensor(t.astype(np.float32)), np.ones((8, 8), bool))


def test_perceptual_gradient_matches_fd():
    rng = np.random.default_rng(6)
    t, _, m = imgs(rng, 20, 20)
    with eng.precision("float64"):
        p = eng.parameter(rng.uniform(0, 1, (20, 20, 3)))
        fd_check(lambda: perceptual_loss(t, p, m), [p], rng, probes_per_param=8)


# -- regularizers ------------------------------------------------------------

def test_acap_reference_values():
    anchors = np.zeros((10, 3))
    assert acap(Tensor(anchors.astype(np.float32)), anchors).item() == 0
    pos = anchors.copy()
    pos[0, 0] = 0.1
    v = acap(Tensor(pos.astype(np.float32)), anchors).item()
    assert np.isclose(v, 1e-3, rtol=1e-5)
    v4 = acap(Tensor((2 * pos).astype(np.float32)), anchors).item()
    assert np.isclose(v4, 4 * v, rtol=1e-5)
    with pytest.raises(ValueError):
        acap(Tensor(np.zeros((9, 3), np.float32)), anchors)


def test_asap_reference_values():
    s = np.full((10, 3), 0.015, np.float32)
    assert asap(Tensor(s)).item() == 0
    s[0, 0] = 0.03  # one component 0.01 over the 0.02 default cap
    v = asap(Tensor(s)).item()
    assert np.isclose(v, 0.01 ** 2 / 30, rtol=1e-4)


def test_asap_gradient_zero_under_threshold():
    s = eng.parameter(np.full((4, 3), 0.01))
    eng.backward(asap(s))
    assert not s.grad.any()


def test_skin_sparsity_is_mean_abs():
    c = Tensor(np.array([[0.5, -0.5], [0.0, 1.0]], np.float32))
    assert np.isclose(skin_sparsity(c).item(), 0.5)


# -- total -------------------------------------------------------------------

def make_total(rng, weights, **kw):
    t, p, m = imgs(rng)
    anchors = rng.normal(0, 0.3, (12, 3))
    pos = Tensor((anchors + rng.normal(0, 0.01, anchors.shape)).astype(np.float32))
    scales = Tensor(rng.uniform(0.005, 0.04, (12, 3)).astype(np.float32))
    return total_loss(t, Tensor(p), Tensor(p.copy()), m, pos, scales,
                      anchors, weights, **kw)


def test_total_zero_on_perfect_input():
    rng = np.random.default_rng(7)
    t, _, m = imgs(rng)
    anchors = rng.normal(0, 0.3, (12, 3))
    tt = Tensor(t.astype(np.float32))
    total, rep = total_loss(t, tt, Tensor(t.astype(np.float32)), m,
                            Tensor(anchors.astype(np.float32)),
                            Tensor(np.full((12, 3), 0.01, np.float32)),
                            anchors, LossWeights())
    assert total.item() < 1e-4
    assert rep.acap == 0 and rep.asap == 0


def test_total_report_recomputes_bit_exactly():
    rng = np.random.default_rng(8)
    w = LossWeights()
    arap_t = Tensor(np.float32(0.125))
    skin_t = Tensor(np.float32(0.25))
    total, rep = make_total(rng, w, arap_term=arap_t, skin_term=skin_t)
    assert rep.recompute_total(w) == pytest.approx(rep.total, abs=1e-9)
    assert rep.arap == 0.125 and rep.skw == 0.25


def test_total_weight_linearity():
    rng = np.random.default_rng(9)
    _, rep1 = make_total(np.random.default_rng(9), LossWeights(reg=1.0))
    _, rep2 = make_total(np.random.default_rng(9), LossWeights(reg=2.0))
    photo = 0.1 * (rep1.l1_cano + rep1.l1_pose) \
        + 0.1 * (rep1.perc_cano + rep1.perc_pose)
    assert np.isclose(rep2.total - photo, 2 * (rep1.total - photo), rtol=1e-5)


def test_zero_reg_weight_leaves_photometric_sum():
    rng = np.random.default_rng(10)
    total, rep = make_total(rng, LossWeights(reg=0.0))
    expect = 0.1 * (rep.l1_cano + rep.l1_pose) \
        + 0.1 * (rep.perc_cano + rep.perc_pose)
    assert np.isclose(total.item(), expect, rtol=1e-6)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(w_l1=-0.1)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    total, rep = make_total(rng, LossWeights())
    d = rep.to_dict()
    assert all(np.isfinite(v) for v in d.values())
    for k in ("l1_cano", "l1_pose", "acap", "asap", "total"):
        assert d[k] >= 0
