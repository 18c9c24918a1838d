"""Equivalence of the numba kernels and their pure-numpy fallbacks."""

import numpy as np
import pytest

from tokencast import kernels
from tokencast.backend import NUMBA_ENABLED, backend_name

pytestmark = pytest.mark.skipif(
    not NUMBA_ENABLED, reason="numba backend disabled; nothing to compare against"
)


def _pair(name):
    return kernels.KERNEL_PAIRS[name]


def test_backend_reports_name():
    assert backend_name() in ("numba", "numpy")


def test_nearest_code_pair():
    rng = np.random.default_rng(0)
    for _ in range(20):
        lat = rng.normal(size=(rng.integers(1, 200), rng.integers(1, 12)))
        cb = rng.normal(size=(rng.integers(2, 64), lat.shape[1]))
        np_fn, nb_fn = _pair("nearest_code")
        assert np.array_equal(np_fn(lat, cb), nb_fn(lat, cb))


def test_nearest_code_tie_break_matches():
    # codebook rows 0 and 2 equidistant from the latent; both paths pick 0
    cb = np.array([[1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
    lat = np.array([[0.0, 0.0]])
    np_fn, nb_fn = _pair("nearest_code")
    assert np_fn(lat, cb)[0] == nb_fn(lat, cb)[0] == 0


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 3, 9, 9), 3, 1, 1),
    ((2, 3, 9, 9), 3, 2, 1),
    ((1, 1, 8, 8), 1, 1, 0),
    ((3, 4, 16, 12), 3, 2, 1),
    ((2, 2, 7, 7), 3, 1, 0),
])
def test_im2col_col2im_pairs_bit_identical(shape, k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape).astype(np.float32)
    np_i, nb_i = _pair("im2col")
    cols_np = np_i(x, k, stride, pad)
    cols_nb = nb_i(x, k, stride, pad)
    assert cols_np.dtype == cols_nb.dtype
    assert np.array_equal(cols_np, cols_nb)
    np_c, nb_c = _pair("col2im")
    dcols = rng.normal(size=cols_np.shape).astype(np.float32)
    assert np.array_equal(np_c(dcols, shape, k, stride, pad), nb_c(dcols, shape, k, stride, pad))


def test_render_cells_pair_close():
    rng = np.random.default_rng(2)
    cells = np.column_stack([
        rng.uniform(0, 32, 5),
        rng.uniform(0, 32, 5),
        rng.uniform(0.01, 0.3, 5),
        rng.uniform(-0.05, 0.05, 5),
        rng.uniform(0.01, 0.3, 5),
        rng.uniform(10, 55, 5),
    ])
    np_fn, nb_fn = _pair("render_cells")
    a = np_fn(24, 32, cells)
    b = nb_fn(24, 32, cells)
    # exp() may differ in the last ulp between libm implementations
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_crps_pixels_pair():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(17, 400))
    o = rng.normal(size=400)
    np_fn, nb_fn = _pair("crps_pixels")
    assert np.allclose(np_fn(m, o), nb_fn(m, o), rtol=0, atol=1e-12)


def test_ensemble_ranks_pair():
    rng = np.random.default_rng(4)
    m = np.round(rng.normal(size=(9, 500)), 1)  # rounding forces ties
    o = np.round(rng.normal(size=500), 1)
    u = rng.random(500)
    np_fn, nb_fn = _pair("ensemble_ranks")
    assert np.array_equal(np_fn(m, o, u), nb_fn(m, o, u))
