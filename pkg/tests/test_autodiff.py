import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradient_errors
from hyperdas.autodiff import (Adam, AdamState, ContractError, NonFiniteError, Tensor, adam_step,
                               checkpoint, no_grad, precision)
from hyperdas.autodiff import tensor as T

TOL = 1e-4


def test_matmul_hand_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_column_sums(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 5))
    T.tsum(T.matmul(a, Tensor(b))).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.sum(axis=1), (3, 4)), rtol=1e-6)


def test_softmax_values():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0, 0.0])).data, [0.5, 0.25, 0.25], rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-6)
    with pytest.raises(ContractError):
        T.softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50)), st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    y = T.softmax(Tensor(x), axis=axis).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


def test_cross_entropy_values():
    assert T.cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), rel=1e-6)
    losses = [T.cross_entropy(Tensor([m, 0.0, 0.0]), 0).item() for m in (1.0, 5.0, 20.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-6
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros(4)), 4)


def test_rms_norm_of_constant_vector():
    gain = np.array([1.0, 2.0, 3.0])
    out = T.rms_norm(Tensor(np.full((1, 3), 5.0)), Tensor(gain))
    np.testing.assert_allclose(out.data[0], gain, rtol=1e-5)


def test_concat_split_round_trip(rng):
    x = Tensor(rng.normal(size=(3, 7)))
    parts = T.split(x, [2, 4, 1], axis=1)
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)
    with pytest.raises(ContractError):
        T.split(x, [2, 2], axis=1)


# --- finite-difference checks, 20 random inputs in [-2, 2] per op ----------

def _away_from(x, points, margin=0.05):
    for p in points:
        x = np.where(np.abs(x - p) < margin, p + margin * np.sign(x - p + 1e-12) * 2, x)
    return x


def _cases():
    ids = np.array([[0, 3, 1], [2, 2, 4]])
    mask = np.array([[True, False, False, True], [False, False, True, False], [False, True, False, False]])
    return {
        "add": ([(3, 4), (4,)], lambda a, b: T.add(a, b)),
        "mul": ([(3, 4), (3, 4)], lambda a, b: T.mul(a, b)),
        "scale": ([(3, 4)], lambda a: T.scale(a, -1.7)),
        "neg": ([(5,)], lambda a: T.neg(a)),
        "relu": ([(3, 4)], lambda a: T.relu(a)),
        "gelu": ([(3, 4)], lambda a: T.gelu(a)),
        "tanh": ([(3, 4)], lambda a: T.tanh(a)),
        "masked_fill": ([(3, 4)], lambda a: T.masked_fill(a, mask, -3.0)),
        "where_gt": ([(3, 4)], lambda a: T.where_gt(a, 0.3)),
        "matmul": ([(2, 3, 4), (4, 5)], lambda a, b: T.matmul(a, b)),
        "transpose": ([(2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
        "reshape": ([(2, 6)], lambda a: T.reshape(a, (3, 4))),
        "concat": ([(2, 3), (2, 2)], lambda a, b: T.concat([a, b], axis=1)),
        "split": ([(2, 5)], lambda a: T.split(a, [2, 3], axis=1)[1]),
        "getitem": ([(4, 3)], lambda a: T.getitem(a, np.array([0, 2, 2]))),
        "embedding": ([(5, 3)], lambda a: T.embedding(a, ids)),
        "sum": ([(3, 4)], lambda a: T.tsum(a, axis=0)),
        "mean": ([(3, 4)], lambda a: T.mean(a, axis=1, keepdims=True)),
        "softmax": ([(3, 5)], lambda a: T.softmax(a, axis=0)),
        "log_softmax": ([(3, 5)], lambda a: T.log_softmax(a)),
        "cross_entropy": ([(4, 6)], lambda a: T.cross_entropy(a, [0, 5, 2, 2])),
        "layer_norm": ([(3, 6), (6,), (6,)], lambda x, g, b: T.layer_norm(x, g, b)),
        "rms_norm": ([(3, 6), (6,)], lambda x, g: T.rms_norm(x, g)),
        "householder_apply": ([(3, 6), (6,)], lambda x, v: T.householder_apply(x, v)),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_gradient_matches_central_differences(name):
    shapes, build = _cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        arrays_ = [rng.uniform(-2, 2, size=s) for s in shapes]
        if name == "relu":
            arrays_[0] = _away_from(arrays_[0], [0.0])
        if name == "where_gt":
            arrays_[0] = _away_from(arrays_[0], [0.3])
        if name == "householder_apply":
            arrays_[1] = arrays_[1] + np.sign(arrays_[1]) * 0.5
        worst = max(worst, *gradient_errors(build, arrays_))
    assert worst <= TOL, f"{name}: max relative error {worst:.2e}"


def test_backward_is_linear_in_outputs(rng):
    x = rng.normal(size=(3, 4))
    with precision(np.float64):
        a = Tensor(x, requires_grad=True)
        T.add(T.tsum(T.tanh(a)), T.tsum(T.mul(a, a))).backward()
        joint = a.grad.copy()
        b = Tensor(x, requires_grad=True)
        T.tsum(T.tanh(b)).backward()
        T.tsum(T.mul(b, b)).backward()
    np.testing.assert_allclose(joint, b.grad, rtol=1e-12)


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    grads = []
    for _ in range(2):
        a = Tensor(x, requires_grad=True)
        T.cross_entropy(T.gelu(T.matmul(a, Tensor(np.ones((8, 3))))), [0, 1, 2, 0]).backward()
        grads.append(a.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_no_grad_builds_no_graph(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        out = T.mul(a, a)
    assert out._parents == () and not out.requires_grad


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.mul(Tensor([np.inf]), Tensor([1.0]))


def test_default_dtype_is_float32_and_precision_scoped():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    state = AdamState(1, [np.array([0.5, 0.5])], [np.array([0.25, 0.25])])
    new, st_ = adam_step(p, [np.zeros(2)], state, lr=0.1)
    np.testing.assert_allclose(st_.m[0], 0.9 * 0.5)
    np.testing.assert_allclose(st_.v[0], 0.999 * 0.25)
    assert st_.step == 2
    fresh, _ = adam_step(p, [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(fresh[0], p[0])


def test_adam_one_step_by_hand():
    # m = 0.1 g, v = 0.001 g^2, bias-corrected: m_hat = g, v_hat = g^2 -> step lr * g / (|g| + eps)
    new, state = adam_step([np.array([3.0])], [np.array([2.0])], AdamState(), lr=0.5)
    assert new[0][0] == pytest.approx(3.0 - 0.5 * 2.0 / (2.0 + 1e-8))
    assert state.m[0][0] == pytest.approx(0.2) and state.v[0][0] == pytest.approx(0.004)


def test_adam_minimises_square():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([x], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        T.tsum(T.mul(x, x)).backward()
        opt.step()
    assert abs(x.data[0]) < 1e-2


def test_adam_rejects_mismatched_state():
    with pytest.raises(ContractError):
        adam_step([np.zeros(2)], [np.zeros(2)], AdamState(0, [np.zeros(3)], [np.zeros(3)]), lr=0.1)


# --- checkpoint container ---------------------------------------------------

def test_checkpoint_round_trip_and_corruption(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b.c": np.arange(4, dtype=np.float32)}
    checkpoint.save(tmp_path / "ck", tensors)
    back = checkpoint.load(tmp_path / "ck")
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)
    raw = bytearray((tmp_path / "ck.bin").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "ck.bin").write_bytes(bytes(raw))
    with pytest.raises(checkpoint.IntegrityError):
        checkpoint.load(tmp_path / "ck")
