import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilateral_sod.autograd import FrozenTapeError, ShapeError, Tape, Tensor, default_dtype, no_grad
from bilateral_sod.autograd import functional as F


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_sigmoid_of_zero_is_half():
    assert F.sigmoid(Tensor(np.zeros(3))).numpy().tolist() == [0.5, 0.5, 0.5]


def test_invert_is_complement():
    assert F.invert(Tensor([0.3], dtype=np.float64)).item() == pytest.approx(0.7, abs=1e-15)


def test_log_of_clamped_tiny_value():
    out = F.log(F.clamp(Tensor([1e-12], dtype=np.float64), 1e-7, 1 - 1e-7)).item()
    assert out == pytest.approx(math.log(1e-7))
    assert out == pytest.approx(-16.1181, abs=1e-4)


def test_clamp_gradient_is_zero_outside_interval():
    x = leaf([-1.0, 0.5, 2.0])
    F.clamp(x, 0.0, 1.0).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_sigmoid_is_stable_for_large_inputs():
    out = F.sigmoid(Tensor([-800.0, 800.0], dtype=np.float64)).numpy()
    assert np.isfinite(out).all()
    assert out.tolist() == [0.0, 1.0]


def test_non_broadcastable_shapes_are_reported():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_broadcast_gradient_sums_over_expanded_axes():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones((1, 3)))
    (a * b).sum().backward()
    assert b.grad.shape == (1, 3)
    assert b.grad.tolist() == [[2.0, 2.0, 2.0]]


def test_sum_loss_gives_unit_gradient():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_reused_input_accumulates_gradient():
    x = leaf([1.0, -2.0])
    (x + x).sum().backward()
    assert x.grad.tolist() == [2.0, 2.0]


def test_diamond_graph_sums_per_consumer_gradients():
    x = leaf([0.5, 1.5])
    shared = x * x
    left = F.exp(shared)
    right = shared * 3.0
    (left + right).sum().backward()
    expected = (np.exp(x.data ** 2) + 3.0) * 2 * x.data
    assert np.allclose(x.grad, expected, rtol=1e-14)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_second_backward_on_consumed_graph_is_rejected():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(FrozenTapeError):
        loss.backward()


def test_tape_is_topologically_ordered_and_visits_each_node_once():
    x = leaf([1.0, 2.0])
    a = x * 2.0
    b = a + x
    loss = (a * b).sum()
    tape = Tape.from_output(loss)
    position = {id(node): i for i, node in enumerate(tape.nodes)}
    assert len(position) == len(tape.nodes)
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert tape.nodes[-1] is loss


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_grad_matches_data_shape_and_stays_finite():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    F.mean(F.sigmoid(x) * F.relu(x)).backward()
    assert x.grad.shape == x.shape and np.isfinite(x.grad).all()
    assert x.data.size == int(np.prod(x.shape))


def test_default_dtype_context_restores():
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_transpose_gradient_is_transposed_upstream():
    x = leaf(np.arange(6.0).reshape(2, 3))
    upstream = np.random.default_rng(1).normal(size=(3, 2))
    F.transpose(x, (1, 0)).backward(upstream)
    assert np.array_equal(x.grad, upstream.T)


def test_concat_shapes():
    out = F.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))], axis=1)
    assert out.shape == (1, 5, 4, 4)
    with pytest.raises(ShapeError):
        F.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 5, 4)))], axis=1)


def test_window_partition_merge_roundtrip():
    x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 8, 3)))
    back = F.window_merge(F.window_partition(x, 4), 4, 8, 8)
    assert np.array_equal(back.numpy(), x.numpy())


dims = st.integers(1, 4)


@settings(max_examples=60, deadline=None)
@given(st.lists(dims, min_size=1, max_size=4), st.data())
def test_broadcast_forward_equals_explicit_tiling(shape, data):
    # b keeps a random subset of a's axes at size one and may drop leading axes
    b_shape = [1 if data.draw(st.booleans()) else s for s in shape]
    b_shape = b_shape[data.draw(st.integers(0, len(shape) - 1)):]
    rng = np.random.default_rng(len(shape))
    a = rng.normal(size=shape)
    b = rng.normal(size=b_shape)
    tiled = np.tile(b.reshape([1] * (len(shape) - len(b_shape)) + b_shape),
                    [s // t for s, t in zip(shape, [1] * (len(shape) - len(b_shape)) + b_shape)])
    ta, tb = Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)
    assert np.array_equal((ta + tb).numpy(), a + tiled)
    assert np.array_equal((ta * tb).numpy(), a * tiled)
    left = F.broadcast_shape(F.broadcast_shape(shape, b_shape), [1])
    assert left == F.broadcast_shape(shape, F.broadcast_shape(b_shape, [1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2), st.integers(1, 11), st.integers(1, 11), st.integers(1, 3), st.integers(1, 5))
def test_window_partition_merge_identity_on_any_shape(b, h, w, c, window):
    x = Tensor(np.random.default_rng(h * w).normal(size=(b, h, w, c)), dtype=np.float64)
    windows = F.window_partition(x, window)
    assert windows.shape[1:] == (window * window, c)
    assert np.array_equal(F.window_merge(windows, window, h, w).numpy(), x.numpy())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.floats(-3, 3), st.floats(-3, 3))
def test_two_consumers_gradient_is_sum(n, alpha, beta):
    values = np.linspace(-1, 1, n)
    x = leaf(values)
    (F.sum(x * alpha) + F.sum(x * x * beta)).backward()
    assert np.allclose(x.grad, alpha + 2 * beta * values, atol=1e-12)
