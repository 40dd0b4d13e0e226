import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

# Ensure src is in path
sys.path.append(os.path.abspath(os.path.dirname(__file__)))

from src.exceptions import CheckpointError, ShapeMismatch  # noqa: E402
from src.layer3 import autograd as ag  # noqa: E402
from src.layer3.autograd import Tensor, float64_mode, no_grad, numerical_gradient, parameter  # noqa: E402

RNG_SEED = 2024


@pytest.fixture(autouse=True)
def _float64():
    with float64_mode():
        yield


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def _check_gradients(fn, params, tol=1e-4):
    """Recorded-graph gradients of scalar fn() against central differences."""
    for p in params:
        p.zero_grad()
    fn().backward()
    for p in params:
        assert p.grad is not None, f"no gradient reached {p.name}"
        numeric = numerical_gradient(fn, p)
        err = _rel_error(p.grad, numeric)
        assert err < tol, f"{p.name}: relative error {err:.2e}"


def _weighted(out: Tensor, seed: int = 0) -> Tensor:
    """sum(out * R) with fixed random R, so every output entry matters."""
    r = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return ag.tensor_sum(ag.mul(out, r))


def _param(shape, name, low=-1.0, high=1.0, seed=0):
    return parameter(np.random.default_rng([RNG_SEED, seed]).uniform(low, high, size=shape), name=name)


# --- elementwise ---

def test_elementwise_binary_ops():
    a = _param((3, 4), "a", seed=1)
    b = _param((3, 4), "b", 0.5, 2.0, seed=2)
    _check_gradients(lambda: _weighted(a + b), [a, b])
    _check_gradients(lambda: _weighted(a - b), [a, b])
    _check_gradients(lambda: _weighted(a * b), [a, b])
    _check_gradients(lambda: _weighted(a / b), [a, b])


def test_scalar_operands():
    b = _param((2, 5), "b", 0.5, 2.0, seed=3)
    _check_gradients(lambda: _weighted(3.0 - b), [b])
    _check_gradients(lambda: _weighted(2.0 / b), [b])
    _check_gradients(lambda: _weighted(-b * 0.5 + 1.0), [b])


def test_unary_ops():
    x = _param((4, 3), "x", 0.2, 3.0, seed=4)
    y = _param((4, 3), "y", -2.0, 2.0, seed=5)
    _check_gradients(lambda: _weighted(ag.log(x)), [x])
    _check_gradients(lambda: _weighted(ag.exp(y)), [y])
    _check_gradients(lambda: _weighted(ag.relu(y)), [y])


def test_reductions_and_movement():
    x = _param((2, 3, 4), "x", seed=6)
    _check_gradients(lambda: _weighted(ag.tensor_sum(x, axis=1)), [x])
    _check_gradients(lambda: _weighted(ag.mean(x, axis=(0, 2), keepdims=True)), [x])
    _check_gradients(lambda: ag.mean(x), [x])
    _check_gradients(lambda: _weighted(x.reshape(6, 4)), [x])
    _check_gradients(lambda: _weighted(x.transpose(2, 0, 1)), [x])


def test_concat_and_downsample():
    a = _param((1, 2, 4, 4), "a", seed=7)
    b = _param((1, 3, 4, 4), "b", seed=8)
    _check_gradients(lambda: _weighted(ag.concat([a, b], axis=1)), [a, b])
    _check_gradients(lambda: _weighted(ag.downsample_nearest(a, 2)), [a])
    with pytest.raises(ShapeMismatch):
        ag.concat([a, _param((1, 2, 3, 4), "c")], axis=1)


def test_softmax_and_log_softmax():
    x = _param((2, 5, 3), "x", -3.0, 3.0, seed=9)
    _check_gradients(lambda: _weighted(ag.softmax(x, axis=1)), [x])
    _check_gradients(lambda: _weighted(ag.log_softmax(x, axis=1)), [x])
    probs = ag.softmax(x, axis=1).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ag.log_softmax(x, axis=1).data, np.log(probs), atol=1e-12)


def test_softmax_is_stable_for_large_logits():
    x = Tensor(np.array([[1000.0, 0.0, -1000.0]]))
    out = ag.log_softmax(x, axis=1).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(0.0)


def test_batch_affine():
    x = _param((2, 3, 4, 5), "x", seed=10)
    scale = _param((3,), "scale", 0.5, 1.5, seed=11)
    shift = _param((3,), "shift", seed=12)
    _check_gradients(lambda: _weighted(ag.batch_affine(x, scale, shift)), [x, scale, shift])


# --- linear algebra ---

def test_batched_matmul():
    a = _param((2, 3, 4), "a", seed=13)
    b = _param((2, 4, 5), "b", seed=14)
    _check_gradients(lambda: _weighted(a @ b), [a, b])
    np.testing.assert_allclose((a @ b).data, np.matmul(a.data, b.data), atol=1e-12)
    with pytest.raises(ShapeMismatch):
        ag.matmul(a, _param((2, 3, 5), "c"))


def test_attention():
    q = _param((1, 6, 4), "q", seed=15)
    k = _param((1, 6, 4), "k", seed=16)
    v = _param((1, 6, 3), "v", seed=17)
    _check_gradients(lambda: _weighted(ag.scale_dot_attention(q, k, v)), [q, k, v])


# --- convolutions ---

@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(stride, padding):
    x = _param((2, 3, 6, 8), "x", seed=18)
    w = _param((4, 3, 3, 3), "w", seed=19)
    b = _param((4,), "b", seed=20)
    _check_gradients(lambda: _weighted(ag.conv2d(x, w, b, stride=stride, padding=padding)), [x, w, b])


def test_conv2d_matches_direct_sum():
    x = _param((1, 2, 5, 5), "x", seed=21)
    w = _param((3, 2, 3, 3), "w", seed=22)
    out = ag.conv2d(x, w, padding=0).data
    assert out.shape == (1, 3, 3, 3)
    expected = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[o, i, j] = np.sum(x.data[0, :, i:i + 3, j:j + 3] * w.data[o])
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


@pytest.mark.parametrize("stride,padding,k", [(2, 0, 2), (2, 1, 4), (1, 1, 3)])
def test_deconv2d_gradients(stride, padding, k):
    x = _param((2, 3, 4, 5), "x", seed=23)
    w = _param((3, 2, k, k), "w", seed=24)
    b = _param((2,), "b", seed=25)
    out = ag.deconv2d(x, w, b, stride=stride, padding=padding)
    assert out.shape == (2, 2, (4 - 1) * stride - 2 * padding + k, (5 - 1) * stride - 2 * padding + k)
    _check_gradients(lambda: _weighted(ag.deconv2d(x, w, b, stride=stride, padding=padding)), [x, w, b])


@pytest.mark.parametrize("stride,padding,k", [(2, 1, 4), (1, 1, 3)])
def test_deconv2d_is_adjoint_of_conv2d(stride, padding, k):
    rng = np.random.default_rng(26)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)))
    w = Tensor(rng.normal(size=(4, 3, k, k)))
    y_shape = ag.conv2d(x, w, stride=stride, padding=padding).shape
    y = Tensor(rng.normal(size=y_shape))
    lhs = np.sum(ag.conv2d(x, w, stride=stride, padding=padding).data * y.data)
    rhs = np.sum(x.data * ag.deconv2d(y, w, stride=stride, padding=padding).data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_conv_shape_errors():
    x = _param((1, 3, 4, 4), "x")
    with pytest.raises(ShapeMismatch):
        ag.conv2d(x, _param((2, 4, 3, 3), "w"))
    with pytest.raises(ShapeMismatch):
        ag.conv2d(x, _param((2, 3, 3, 3), "w"), _param((3,), "b"))
    with pytest.raises(ShapeMismatch):
        ag.conv2d(x, _param((2, 3, 7, 7), "w"))
    with pytest.raises(ShapeMismatch):
        ag.deconv2d(x, _param((2, 3, 3, 3), "w"))


# --- graph behavior ---

def test_reused_tensor_accumulates_gradient():
    x = _param((5,), "x", seed=27)
    y = ag.tensor_sum(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-12)


def test_binary_ops_reject_mismatched_shapes():
    with pytest.raises(ShapeMismatch):
        _param((2, 3), "a") + _param((3, 2), "b")


def test_backward_needs_scalar_or_explicit_gradient():
    x = _param((2, 2), "x")
    y = x * 2.0
    with pytest.raises(ShapeMismatch):
        y.backward()
    y.backward(np.ones((2, 2)))
    np.testing.assert_allclose(x.grad, 2.0)


def test_no_grad_records_nothing():
    x = _param((3,), "x")
    with no_grad():
        y = ag.tensor_sum(x * 3.0)
    assert not y.requires_grad
    assert ag.tensor_sum(x * 3.0).requires_grad


def test_no_grad_and_dtype_stay_on_their_thread():
    x = _param((3,), "x")
    entered, release = threading.Barrier(5, timeout=10), threading.Barrier(5, timeout=10)

    def worker():
        with no_grad():
            ag.set_default_dtype(np.float32)
            entered.wait()
            release.wait()
            return ag.is_grad_enabled(), Tensor([1.0]).dtype

    with ThreadPoolExecutor(max_workers=4) as pool:
        futures = [pool.submit(worker) for _ in range(4)]
        entered.wait()
        assert ag.is_grad_enabled()
        assert ag.tensor_sum(x * 2.0).requires_grad
        assert Tensor([1.0]).dtype == np.float64
        release.wait()
        assert [f.result() for f in futures] == [(False, np.float32)] * 4
    assert ag.is_grad_enabled()



def test_default_dtype_follows_mode():
    assert Tensor([1, 2, 3]).dtype == np.float64
    ag.set_default_dtype(np.float32)
    try:
        assert Tensor([1, 2, 3]).dtype == np.float32
    finally:
        ag.set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        ag.set_default_dtype(np.int32)


def test_numerical_gradient_subset():
    x = _param((3, 4), "x", seed=28)
    fn = lambda: _weighted(ag.exp(x))  # noqa: E731
    full = numerical_gradient(fn, x)
    part = numerical_gradient(fn, x, indices=[0, 5, 11])
    np.testing.assert_allclose(part, full.reshape(-1)[[0, 5, 11]])


# --- serialization ---

def test_tensor_file_round_trip(tmp_path):
    path = str(tmp_path / "t.bin")
    tensors = {
        "w": np.random.default_rng(0).normal(size=(2, 3, 3, 3)).astype(np.float32),
        "b": np.arange(4, dtype=np.float64),
        "steps": np.array([7], dtype=np.int64),
        "scalar": Tensor(np.array(1.5)),
    }
    ag.save_tensors(path, tensors, header={"preset": "small", "epoch": 3})
    header, loaded = ag.load_tensors(path)
    assert header == {"preset": "small", "epoch": 3}
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        ref = arr.data if isinstance(arr, Tensor) else arr
        np.testing.assert_array_equal(loaded[name], ref)
        assert loaded[name].dtype == ref.dtype
    loaded["w"][0, 0, 0, 0] = 99.0   # loaded arrays are writable copies


def test_tensor_file_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        ag.load_tensors(str(bad))

    good = str(tmp_path / "good.bin")
    ag.save_tensors(good, {"w": np.ones((4, 4))})
    with open(good, "rb") as f:
        raw = f.read()
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        ag.load_tensors(str(truncated))


def test_unsupported_dtype_is_refused(tmp_path):
    with pytest.raises(CheckpointError):
        ag.save_tensors(str(tmp_path / "x.bin"), {"flags": np.zeros(3, dtype=bool)})


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
