import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from windtunnel.quant import (
    CalibrationSet,
    GPTQQuantizer,
    HessianError,
    QuantizedMatrix,
    dequantize,
    dequantize_group,
    gptq_quantize,
    load_quantized,
    pack_nibbles,
    quantization_objective,
    quantize_group,
    quantize_rtn,
    save_quantized,
    unpack_nibbles,
)


def test_group_hand_values():
    ints, scale, zero = quantize_group(np.array([0.0, 1.5, 3.0]))
    assert scale == pytest.approx(0.2)
    assert zero == pytest.approx(-8.0)
    np.testing.assert_array_equal(ints, [-8, 0, 7])  # 7.5 rounds to even
    np.testing.assert_allclose(dequantize_group(ints, scale, zero), [0.0, 1.6, 3.0], atol=1e-12)


def test_constant_group_exact():
    for c in (0.0, -3.25, 1e3):
        ints, scale, zero = quantize_group(np.full(16, c))
        np.testing.assert_allclose(dequantize_group(ints, scale, zero), c, rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 32, elements=st.floats(-100, 100)))
def test_rtn_error_bounded_by_half_scale(w):
    q = quantize_rtn(w[None, :], 32)
    err = np.abs(dequantize(q)[0] - w)
    assert np.all(err <= q.scales[0, 0] / 2 + 1e-7)
    assert q.ints.min() >= -8 and q.ints.max() <= 7


def test_rtn_rejects_bad_group():
    with pytest.raises(ValueError):
        quantize_rtn(np.zeros((2, 10)), 4)
    with pytest.raises(ValueError):
        quantize_rtn(np.array([[np.nan, 1.0]]), 2)


def test_quantized_matrix_validation():
    with pytest.raises(ValueError):
        QuantizedMatrix(np.full((1, 4), 9, dtype=np.int8), np.ones((1, 1)), np.zeros((1, 1)), 4)
    with pytest.raises(ValueError):
        QuantizedMatrix(np.zeros((1, 4), dtype=np.int8), np.ones((1, 2)), np.zeros((1, 1)), 4)


@pytest.mark.parametrize("G", [8, 16, 32])
def test_gptq_not_worse_than_rtn(G):
    rng = np.random.default_rng(G)
    for _ in range(10):
        W = rng.normal(size=(32, 32))
        X = rng.normal(size=(32, 128)) * rng.uniform(0.1, 3.0, size=(32, 1))
        _, rep = gptq_quantize(W, X, G)
        assert rep["gptq_objective"] <= rep["rtn_objective"]


def test_diagonal_hessian_equals_rtn():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(8, 16))
    X = np.diag(rng.uniform(0.5, 2.0, size=16)) @ np.eye(16)
    q, _ = gptq_quantize(W, X, 8)
    r = quantize_rtn(W, 8)
    np.testing.assert_array_equal(q.ints, r.ints)
    np.testing.assert_array_equal(q.scales, r.scales)


def test_singular_hessian_without_damping():
    W = np.ones((2, 4))
    X = np.zeros((4, 3))
    with pytest.raises(HessianError, match="damping"):
        gptq_quantize(W, X, 2, damping=0.0)
    with pytest.raises(ValueError):
        gptq_quantize(W, np.zeros((3, 3)), 2)


def test_objective():
    W = np.eye(2)
    assert quantization_objective(W, np.zeros((2, 2)), np.eye(2)) == 2.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-8, 7), min_size=0, max_size=33))
def test_nibble_roundtrip(vals):
    a = np.array(vals, dtype=np.int8)
    assert len(pack_nibbles(a)) == (a.size + 1) // 2
    np.testing.assert_array_equal(unpack_nibbles(pack_nibbles(a), a.size), a)


def test_nibble_low_first():
    assert pack_nibbles(np.array([1, -1], dtype=np.int8)) == bytes([0xF1])


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    mats = {"layers.0/q": quantize_rtn(rng.normal(size=(6, 8)), 4), "b": quantize_rtn(rng.normal(size=(3, 16)), 16)}
    save_quantized(str(tmp_path), mats, extra={"source": "x"})
    back = load_quantized(str(tmp_path))
    assert set(back) == set(mats)
    for k in mats:
        np.testing.assert_array_equal(back[k].ints, mats[k].ints)
        np.testing.assert_allclose(back[k].scales, mats[k].scales, rtol=1e-6)
        assert back[k].group_size == mats[k].group_size


def test_estimator():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(8, 16))
    X = rng.normal(size=(16, 40))
    g = GPTQQuantizer(group_size=8).fit(W, CalibrationSet(X))
    r = GPTQQuantizer(group_size=8, method="rtn").fit(W, X)
    assert g.report_["gptq_objective"] <= r.report_["rtn_objective"]
    np.testing.assert_allclose(g.transform(X), g.weight_ @ X)
    with pytest.raises(ValueError):
        GPTQQuantizer(method="awq").fit(W)
