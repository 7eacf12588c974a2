import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdal import autodiff as ad
from mdal.errors import ContractViolation
from mdal.losses import pseudo_loss, seg_loss, soft_jaccard

import oracles

probs = arrays(np.float64, (6, 6), elements=st.floats(1e-6, 1 - 1e-6))
masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))
tris = arrays(np.int8, (6, 6), elements=st.integers(-1, 1))


@given(p=probs, y=masks)
def test_seg_loss_matches_oracle(p, y):
    assert seg_loss(p[None], y).item() == pytest.approx(oracles.seg_loss(p, y), rel=1e-10, abs=1e-12)


@given(p=probs, y=masks)
def test_seg_loss_nonnegative(p, y):
    assert seg_loss(p[None], y).item() >= -1e-12


@given(p=probs, t=tris)
def test_pseudo_loss_matches_oracle(p, t):
    assert pseudo_loss(p[None], t).item() == pytest.approx(oracles.pseudo_loss(p, t), rel=1e-10, abs=1e-14)


def test_perfect_prediction_has_near_zero_loss():
    y = np.zeros((4, 4), np.uint8)
    y[:2] = 1
    assert seg_loss(y[None].astype(float), y).item() == pytest.approx(0.0, abs=1e-9)


def test_all_ignore_pseudo_loss_is_zero_and_has_zero_grad():
    t = np.full((4, 4), -1, np.int8)
    with ad.Graph():
        p = ad.Tensor(np.full((1, 4, 4), 0.3), requires_grad=True)
        loss = pseudo_loss(p, t)
        (g,) = ad.grad(loss, [p])
    assert loss.item() == 0.0
    np.testing.assert_array_equal(g.data, 0.0)


def test_pseudo_normalizations():
    t = np.array([[1, -1], [0, -1]], np.int8)
    p = np.full((1, 2, 2), 0.5)
    px = pseudo_loss(p, t, "pixels").item()
    lab = pseudo_loss(p, t, "labeled").item()
    assert px == pytest.approx(2 * np.log(2) / 4)
    assert lab == pytest.approx(2 * np.log(2) / 2)
    with pytest.raises(ContractViolation):
        pseudo_loss(p, t, "bogus")


def test_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        seg_loss(np.full((1, 4, 4), 0.5), np.zeros((3, 3)))


def test_soft_jaccard_range():
    y = np.eye(4)
    assert soft_jaccard(y, y) == pytest.approx(1.0)
    assert soft_jaccard(1 - y, y) < 1e-6
