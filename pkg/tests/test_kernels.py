import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdal import _pykernels, kernels
from mdal.online import distance_map

import oracles

BACKENDS = kernels.available()


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
@given(c=st.integers(1, 5), h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 99))
def test_im2col_col2im_backends_bitwise_equal(c, h, w, seed):
    from mdal import _ckernels
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    assert np.array_equal(_ckernels.im2col3(x), _pykernels.im2col3(x))
    cols = rng.standard_normal((c * 9, h * w))
    assert np.array_equal(_ckernels.col2im3(cols, c, h, w), _pykernels.col2im3(cols, c, h, w))


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
@given(m=arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_edt_backends_equal(m):
    from mdal import _ckernels
    assert np.array_equal(_ckernels.edt_sq(m), _pykernels.edt_sq(m))


def test_col2im_is_adjoint_of_im2col(backend):
    # <im2col(x), c> == <x, col2im(c)> for every x, c
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5, 7))
    c = rng.standard_normal((27, 35))
    lhs = np.vdot(kernels.im2col3(x), c)
    rhs = np.vdot(x, kernels.col2im3(c, 3, 5, 7))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(m=arrays(np.uint8, st.tuples(st.integers(1, 10), st.integers(1, 10)), elements=st.integers(0, 1)))
def test_distance_map_matches_brute_force(m):
    np.testing.assert_array_equal(distance_map(m), oracles.brute_distance(m))


def test_distance_map_examples(backend):
    m = np.zeros((3, 3), np.uint8)
    m[1, 1] = 1
    np.testing.assert_allclose(distance_map(m), [[2 ** .5, 1, 2 ** .5], [1, 0, 1], [2 ** .5, 1, 2 ** .5]],
                               rtol=0, atol=0)
    row = np.zeros((1, 5), np.uint8)
    row[0, 0] = 1
    np.testing.assert_array_equal(distance_map(row), [[0, 1, 2, 3, 4]])
    assert np.all(np.isinf(distance_map(np.zeros((4, 4), np.uint8))))
    np.testing.assert_array_equal(distance_map(np.ones((4, 4), np.uint8)), 0.0)


@given(m=arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
def test_distance_map_properties(m):
    d = distance_map(m)
    assert np.all(d[m > 0] == 0)
    if m.any():
        assert np.all(d[m == 0] >= 1)
        # 1-Lipschitz between 4-neighbours
        assert np.all(np.abs(np.diff(d, axis=0)) <= 1 + 1e-12)
        assert np.all(np.abs(np.diff(d, axis=1)) <= 1 + 1e-12)
