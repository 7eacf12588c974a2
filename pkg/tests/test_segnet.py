import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdal import segnet
from mdal.errors import ConfigurationError, ContractViolation
from mdal.params import Arch
from mdal.synthvid import REFERENCE_SPECS, render_sequence

import oracles
from conftest import random_theta

GOLDEN = Path(__file__).parent / "golden" / "segnet_forward.sha256"


def test_param_count():
    assert segnet.param_count() == 3857
    assert segnet.init_params().size == 3857


def test_init_is_seeded():
    assert segnet.init_params(seed=3) == segnet.init_params(seed=3)
    assert not segnet.init_params(seed=3) == segnet.init_params(seed=4)
    assert all(np.all(v == 0) for k, v in segnet.init_params().items() if k.endswith(".bias"))


@pytest.mark.parametrize("ch", [(1, 4, 1), (3, 4, 2), (3,)])
def test_bad_arch_rejected(ch):
    with pytest.raises(ConfigurationError):
        segnet.init_params(Arch(ch))


def test_frame_shape_checked():
    with pytest.raises(ContractViolation):
        segnet.predict(segnet.init_params(), np.zeros((8, 8)))


@given(seed=st.integers(0, 500), h=st.integers(1, 12), w=st.integers(1, 12))
def test_forward_matches_oracle(seed, h, w):
    th = random_theta(seed, Arch((3, 8, 16, 16, 1)))
    frame = np.random.default_rng(seed).random((h, w, 3))
    p = segnet.predict(th, frame)
    assert p.shape == (h, w)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(p, oracles.forward(dict(th), frame), rtol=1e-10, atol=1e-13)


def test_zero_weights_give_half():
    th = segnet.init_params().map(np.zeros_like)
    np.testing.assert_array_equal(segnet.predict(th, np.random.default_rng(0).random((5, 5, 3))), 0.5)


def test_sgd_step_elementwise():
    th = segnet.init_params(Arch((3, 1)))
    g = th.full_like(2.0)
    al = th.full_like(0.25)
    out = segnet.sgd_step(th, al, g)
    for k in th:
        np.testing.assert_array_equal(out[k], th[k] - 0.5)


def test_forward_output_hash_golden():
    th = segnet.init_params(seed=0)
    frame = render_sequence(REFERENCE_SPECS["srcA"], seed=7).frames[0]
    digest = hashlib.sha256(np.ascontiguousarray(segnet.predict(th, frame), "<f8").tobytes()).hexdigest()
    if os.environ.get("MDAL_REGEN_GOLDEN") or not GOLDEN.exists():
        GOLDEN.write_text(digest + "\n")
    assert digest == GOLDEN.read_text().strip()
