import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from wmoe.errors import InputError
from wmoe.gradcheck import grad_check
from wmoe.params import NamedParamSet
from wmoe.tensor import Tensor, tsum
from wmoe.wcma import (WcmaParams, anomaly_map, bilinear_matrix, cross_attend, frequency_attention,
                       fuse_maps, haar_decompose, high_freq_aggregate, upsample_bilinear,
                       wcma_forward)

C = 6


def _params(seed=0):
    ps = NamedParamSet()
    return ps, WcmaParams(ps, C, np.random.default_rng(seed))


grids = st.tuples(st.integers(2, 8), st.integers(2, 8), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-1e3, 1e3)))


@given(grids)
def test_haar_bands_sum_to_input(F):
    b = haar_decompose(F)
    rec = b.F_L.data + b.F_LH.data + b.F_HL.data + b.F_HH.data
    assert_allclose(rec, F, atol=1e-12 * max(1.0, np.abs(F).max()))
    assert b.F_L.shape == F.shape


@given(st.integers(2, 8), st.integers(2, 8), st.floats(-10, 10))
def test_haar_constant_has_no_detail(H, W, c):
    b = haar_decompose(np.full((H, W, 3), c))
    for band in (b.F_LH, b.F_HL, b.F_HH):
        assert not np.any(band.data)
    assert_array_equal(b.F_L.data, np.full((H, W, 3), c))


def test_haar_hand_values():
    F = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    b = haar_decompose(F)
    # top-left: a=1, b=2, c=3, d=4
    assert b.F_L.data[0, 0, 0] == 2.5
    assert b.F_LH.data[0, 0, 0] == -0.5
    assert b.F_HL.data[0, 0, 0] == -1.0
    assert b.F_HH.data[0, 0, 0] == 0.0


def test_haar_rejects_tiny():
    with pytest.raises(InputError):
        haar_decompose(np.zeros((1, 4, 2)))


def test_zero_high_band_passes_low_band():
    _, p = _params()
    F_L = np.random.default_rng(0).standard_normal((4, 4, C))
    assert_array_equal(frequency_attention(p, F_L, np.zeros_like(F_L)).data, F_L)


def test_attention_rows_are_convex_combinations():
    _, p = _params(1)
    rng = np.random.default_rng(2)
    F_T = rng.standard_normal((2, C))
    F_p = rng.standard_normal((2, 2, C))  # 4 value rows in C=6 dims: weights are identifiable
    out, attn = cross_attend(p, F_T, F_p, return_attention=True)
    a = attn.data
    assert np.all(a >= 0)
    assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    V = F_p.reshape(4, C) @ p.w_v.data
    # recover the weights from the output by least squares on the value rows
    w, *_ = np.linalg.lstsq(V.T, out.data.T, rcond=None)
    assert_allclose(w.T, a, atol=1e-8)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_anomaly_map_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    M = anomaly_map(rng.standard_normal((2, C)), rng.standard_normal((3, 4, C))).data
    assert M.shape == (3, 4)
    assert np.all((M > 0) & (M < 1))


def test_anomaly_map_rejects_bad_tau():
    with pytest.raises(InputError):
        anomaly_map(np.ones((2, C)), np.ones((2, 2, C)), tau=0.0)


def test_upsample_keeps_corners():
    M = np.array([[0.1, 0.9], [0.4, 0.7]])
    up = upsample_bilinear(M, (4, 4)).data
    assert_allclose(up[[0, 0, -1, -1], [0, -1, 0, -1]], [0.1, 0.9, 0.4, 0.7], atol=1e-15)
    assert_allclose(bilinear_matrix(2, 3), [[1, 0], [0.5, 0.5], [0, 1]], atol=1e-15)


def test_fuse_is_mean_of_upsampled():
    a, b = np.full((2, 2), 0.2), np.full((2, 2), 0.8)
    assert_allclose(fuse_maps([a, b], (8, 8)).data, 0.5, atol=1e-15)


def test_forward_shapes_and_ranges():
    _, p = _params()
    rng = np.random.default_rng(3)
    out = wcma_forward(p, rng.standard_normal((2, 2, C)), rng.standard_normal((2, 3, 4, 4, C)), (8, 8))
    assert out.per_layer.shape == (2, 3, 4, 4)
    assert out.fused.shape == (2, 8, 8)
    assert out.refined_text.shape == (2, 3, 2, C)
    assert np.all((out.fused.data >= 0) & (out.fused.data <= 1))


def test_gradients_reach_every_wcma_parameter():
    ps, p = _params(4)
    rng = np.random.default_rng(5)
    F_T = rng.standard_normal((2, C))
    G = rng.standard_normal((2, 4, 4, C))
    w = rng.random((8, 8))

    def f(_):
        return tsum(wcma_forward(p, F_T, G, (8, 8)).fused * Tensor(w))

    assert grad_check(f, ps, eps=1e-6, n_samples=15, rng=np.random.default_rng(0)) <= 1e-5


def test_high_freq_is_detail_sum():
    b = haar_decompose(np.random.default_rng(0).standard_normal((3, 3, 2)))
    assert_array_equal(high_freq_aggregate(b).data, b.F_LH.data + b.F_HL.data + b.F_HH.data)
