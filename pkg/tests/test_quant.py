import numpy as np
import pytest

from lcdet.errors import ConfigError, UsageError
from lcdet.model import init_model
from lcdet.quant import (QuantParams, QuantizedTensor, calibrate, dequantize,
                         qconv2d, qmaxpool2d, quantize, quantize_with)
from lcdet.tensor import activate, conv2d

from conftest import tiny_head_spec, tiny_net_spec


def test_quantize_endpoints():
    w = np.array([-2.0, 0.5, 7.0], dtype=np.float32)
    q = quantize(w)
    assert q.params.min == -2.0 and q.params.max == 7.0
    assert q.data[0] == 0      # element at min
    assert q.data[2] == 255    # element at max


def test_quantize_ties_away_from_zero():
    # 0 in range (-1, 1) lands on 127.5 and rounds up to 128
    q = quantize(np.array([-1.0, 0.0, 1.0], dtype=np.float32))
    assert q.data[1] == 128


def test_dequantize_endpoints():
    p = QuantParams(-3.0, 5.0)
    q = QuantizedTensor(np.array([0, 255], dtype=np.uint8), p)
    out = dequantize(q)
    assert out[0] == pytest.approx(-3.0)
    assert out[1] == pytest.approx(5.0)


def test_dequantize_midpoint():
    q = QuantizedTensor(np.array([128], dtype=np.uint8), QuantParams(-1.0, 1.0))
    assert dequantize(q)[0] == pytest.approx(-1.0 + 128 * 2.0 / 255.0, abs=1e-6)
    assert dequantize(q)[0] == pytest.approx(0.003922, abs=1e-5)


def test_round_trip_bound(rng):
    for _ in range(100):
        n = int(rng.integers(1, 512))
        span = 10.0 ** rng.uniform(-3, 3)
        center = span * rng.uniform(-2, 2)
        w = (center + span * (rng.random(n) - 0.5)).astype(np.float32)
        q = quantize(w)
        back = dequantize(q)
        bound = (q.params.max - q.params.min) / 510.0 + 1e-6
        assert np.abs(back - w).max() <= bound


def test_quantize_monotone(rng):
    w = rng.normal(size=200).astype(np.float32)
    q = quantize(w)
    order = np.argsort(w)
    assert np.all(np.diff(q.data[order].astype(int)) >= 0)


def test_requantize_is_identity_on_bytes(rng):
    w = rng.normal(size=300).astype(np.float32)
    q = quantize(w)
    again = quantize_with(dequantize(q), q.params)
    np.testing.assert_array_equal(q.data, again.data)


def test_constant_tensor():
    w = np.full((4, 4), 2.5, dtype=np.float32)
    q = quantize(w)
    assert np.all(q.data == 0)
    assert q.params.scale == 0.0
    np.testing.assert_array_equal(dequantize(q), w)


def test_quantize_empty_rejected():
    with pytest.raises(ConfigError):
        quantize(np.zeros(0, dtype=np.float32))


def test_qconv_zero_input_identity_kernel():
    # zero bytes with range (0,1) decode to 0.0; conv reduces to the bias
    x = QuantizedTensor(np.zeros((3, 3, 1), dtype=np.uint8), QuantParams(0.0, 1.0))
    w = quantize(np.ones((1, 1, 1, 1), dtype=np.float32))
    bias = np.array([0.7], dtype=np.float32)
    out_params = QuantParams(0.0, 1.0)
    got = qconv2d(x, w, bias, out_params=out_params, activation="relu")
    want = quantize_with(np.full((3, 3, 1), 0.7, dtype=np.float32), out_params)
    np.testing.assert_array_equal(got.data, want.data)


def test_qconv_matches_float_reference(rng):
    x = rng.normal(size=(8, 8, 4)).astype(np.float32)
    w = rng.normal(scale=0.5, size=(3, 3, 4, 6)).astype(np.float32)
    b = rng.normal(scale=0.1, size=6).astype(np.float32)
    xq, wq = quantize(x), quantize(w)
    ref = activate(conv2d(dequantize(xq), dequantize(wq), b, 1, "same"), "relu")
    out_params = QuantParams(float(ref.min()), float(ref.max()))
    got = dequantize(qconv2d(xq, wq, b, 1, "same", out_params, activation="relu"))
    assert np.abs(got - ref).max() <= out_params.scale * 1.5


def test_qconv_two_layer_chain(rng):
    # chained fixed-point layers vs the float chain over the same dequantized
    # operands: only the intermediate requantization may differ (2 steps max)
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.normal(size=(6, 6, 3)).astype(np.float32)
        w1 = r.normal(scale=0.4, size=(3, 3, 3, 5)).astype(np.float32)
        b1 = r.normal(scale=0.1, size=5).astype(np.float32)
        w2 = r.normal(scale=0.4, size=(3, 3, 5, 4)).astype(np.float32)
        b2 = r.normal(scale=0.1, size=4).astype(np.float32)
        xq, w1q, w2q = quantize(x), quantize(w1), quantize(w2)

        f1 = activate(conv2d(dequantize(xq), dequantize(w1q), b1), "relu")
        f2 = activate(conv2d(f1, dequantize(w2q), b2), "relu")
        p1 = QuantParams(float(f1.min()), float(f1.max()))
        p2 = QuantParams(float(f2.min()), float(f2.max()))

        q1 = qconv2d(xq, w1q, b1, out_params=p1, activation="relu")
        q2 = qconv2d(q1, w2q, b2, out_params=p2, activation="relu")
        ref = quantize_with(f2, p2)
        assert np.abs(q2.data.astype(int) - ref.data.astype(int)).max() <= 2


def test_qconv_requires_out_params():
    x = QuantizedTensor(np.zeros((2, 2, 1), dtype=np.uint8), QuantParams(0, 1))
    w = quantize(np.ones((1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(ConfigError):
        qconv2d(x, w, np.zeros(1, dtype=np.float32))


def test_qconv_overflow_bound_enforced():
    cin = 4000  # 3*3*4000 > 2**15
    x = QuantizedTensor(np.zeros((3, 3, cin), dtype=np.uint8), QuantParams(0, 1))
    w = QuantizedTensor(np.zeros((3, 3, cin, 1), dtype=np.uint8), QuantParams(0, 1))
    with pytest.raises(ConfigError):
        qconv2d(x, w, np.zeros(1, dtype=np.float32), out_params=QuantParams(0, 1))


def test_qmaxpool_matches_float_pool(rng):
    x = rng.normal(size=(6, 6, 3)).astype(np.float32)
    q = quantize(x)
    from lcdet.tensor import maxpool2d
    got = dequantize(qmaxpool2d(q, 2, 2))
    want = maxpool2d(dequantize(q), 2, 2)
    np.testing.assert_array_equal(got, want)


def test_calibrate_identity_layer_records_input_range(rng):
    # head-only net with an identity 1x1 kernel: output range == input range
    spec = tiny_head_spec(num_classes=1, boxes_per_cell=3, input_channels=16)
    model = init_model(spec, seed=0)
    model.weights[0].w = np.eye(16, dtype=np.float32).reshape(1, 1, 16, 16)
    model.weights[0].b = np.zeros(16, dtype=np.float32)
    img = rng.normal(size=(4, 4, 16)).astype(np.float32)
    rec = calibrate(model, [img])
    assert rec.layers[0].min == pytest.approx(float(img.min()))
    assert rec.layers[0].max == pytest.approx(float(img.max()))


def test_calibrate_running_min_max(rng):
    spec = tiny_head_spec(num_classes=1, boxes_per_cell=3, input_channels=16)
    model = init_model(spec, seed=0)
    model.weights[0].w = np.eye(16, dtype=np.float32).reshape(1, 1, 16, 16)
    model.weights[0].b = np.zeros(16, dtype=np.float32)
    a = np.linspace(0.0, 1.0, 4 * 4 * 16, dtype=np.float32).reshape(4, 4, 16)
    b = np.linspace(-1.0, 2.0, 4 * 4 * 16, dtype=np.float32).reshape(4, 4, 16)
    rec = calibrate(model, [a, b])
    assert rec.layers[0].min == pytest.approx(-1.0)
    assert rec.layers[0].max == pytest.approx(2.0)


def test_calibrate_relu_layer_nonnegative(rng):
    spec = tiny_net_spec()
    model = init_model(spec, seed=3)
    images = [rng.normal(size=(8, 8, 3)).astype(np.float32) for _ in range(3)]
    rec = calibrate(model, images)
    # layer 0 is conv+relu
    assert rec.layers[0].min >= 0.0


def test_calibrate_empty_set_rejected():
    model = init_model(tiny_net_spec(), seed=0)
    with pytest.raises(UsageError):
        calibrate(model, [])
