import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bilateral_sod.autograd import Tensor, default_dtype
from bilateral_sod.detail import BasicBlock, DetailBranch
from bilateral_sod.semantic import (SemanticBranch, SwinBlock, WindowAttention, downsample_input,
                                    stage_sizes)

F64 = np.float64
NARROW = (4, 6, 8, 10)


def image(size, seed=0, batch=1):
    return Tensor(np.random.default_rng(seed).normal(size=(batch, 3, size, size)), dtype=F64)


# ---------------------------------------------------------------- detail branch

def test_detail_pyramid_at_full_resolution(f64):
    pyramid = DetailBranch(np.random.default_rng(0), NARROW)(image(352))
    assert pyramid.spatial_sizes == (176, 88, 44, 22)
    assert pyramid.strides == (2, 4, 8, 16)


def test_detail_pyramid_at_toy_resolution(f64):
    pyramid = DetailBranch(np.random.default_rng(0))(image(64, batch=2))
    assert pyramid.spatial_sizes == (32, 16, 8, 4)
    assert [f.shape[1] for f in pyramid] == [16, 32, 64, 128]


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([32, 64, 96, 352]), st.integers(1, 2))
def test_detail_strides_hold_for_every_valid_size(size, batch):
    with default_dtype(F64):
        branch = DetailBranch(np.random.default_rng(size), NARROW)
        pyramid = branch(image(size, batch=batch))
    assert pyramid.spatial_sizes == tuple(size // s for s in (2, 4, 8, 16))
    assert all(f.shape[0] == batch for f in pyramid)


def test_detail_zero_image_gives_finite_features(f64):
    pyramid = DetailBranch(np.random.default_rng(0), NARROW)(Tensor(np.zeros((2, 3, 64, 64)), dtype=F64))
    assert all(np.isfinite(f.numpy()).all() for f in pyramid)


def test_detail_rejects_bad_inputs(f64):
    branch = DetailBranch(np.random.default_rng(0), NARROW)
    with pytest.raises(ValueError, match="multiple of 32"):
        branch(image(48))
    with pytest.raises(ValueError, match="3 input channels"):
        branch(Tensor(np.zeros((1, 4, 32, 32)), dtype=F64))
    with pytest.raises(ValueError, match="increasing"):
        DetailBranch(np.random.default_rng(0), (8, 8, 16, 32))


def test_residual_block_with_zero_second_conv_is_its_shortcut(f64):
    rng = np.random.default_rng(1)
    same = BasicBlock(6, 6, 1, rng)
    same.conv2.weight.data[...] = 0.0
    x = np.abs(rng.normal(size=(2, 6, 8, 8)))  # post-ReLU activations
    assert np.array_equal(same(Tensor(x, dtype=F64)).numpy(), x)

    down = BasicBlock(6, 10, 2, rng)
    down.conv2.weight.data[...] = 0.0
    xt = Tensor(rng.normal(size=(2, 6, 8, 8)), dtype=F64)
    shortcut = down.shortcut(xt).numpy()
    assert np.array_equal(down(xt).numpy(), np.maximum(shortcut, 0.0))


# ---------------------------------------------------------------- semantic branch

def test_semantic_pyramid_at_full_resolution(f64):
    branch = SemanticBranch(np.random.default_rng(0), 56, dims=(8, 16, 24, 32), head_dim=8)
    pyramid = branch(image(56))
    assert pyramid.spatial_sizes == (28, 14, 7, 4)


def test_semantic_pyramid_at_toy_resolution(f64):
    pyramid = SemanticBranch(np.random.default_rng(0))(image(64, batch=2))
    assert pyramid.spatial_sizes == (8, 4, 2, 1)
    assert [t.shape[1] for t in pyramid] == [32, 64, 128, 256]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60).map(lambda k: 2 * k))
def test_token_counts_follow_ceil_merging(size):
    sizes = stage_sizes(size, patch=2)
    assert sizes[0] ** 2 == (size // 2) ** 2
    for prev, nxt in zip(sizes, sizes[1:]):
        assert nxt == math.ceil(prev / 2)


def test_semantic_rejects_size_not_multiple_of_patch():
    with pytest.raises(ValueError, match="patch"):
        SemanticBranch(np.random.default_rng(0), input_size=15)


def test_single_window_shifted_block_equals_plain_block(f64):
    x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 4, 8)), dtype=F64)
    plain = SwinBlock(8, 2, 4, False, 4, np.random.default_rng(9))
    shifted = SwinBlock(8, 2, 4, True, 4, np.random.default_rng(9))
    assert shifted.shift == 0
    assert np.array_equal(plain(x).numpy(), shifted(x).numpy())


def test_window_attention_is_equivariant_to_window_order(f64):
    rng = np.random.default_rng(4)
    attn = WindowAttention(8, 2, 3, rng)
    windows = rng.normal(size=(5, 9, 8))
    perm = rng.permutation(5)
    direct = attn(Tensor(windows, dtype=F64)).numpy()
    permuted = attn(Tensor(windows[perm], dtype=F64)).numpy()
    assert np.array_equal(permuted[np.argsort(perm)], direct)


def test_value_identity_attention_averages_each_window(f64):
    dim, window = 6, 2
    block = SwinBlock(dim, 2, window, False, 4, np.random.default_rng(5))
    attn = block.attn
    attn.qkv.weight.data[...] = 0.0
    attn.qkv.weight.data[2 * dim:] = np.eye(dim)
    attn.qkv.bias.data[...] = 0.0
    attn.proj.weight.data[...] = np.eye(dim)
    attn.proj.bias.data[...] = 0.0
    attn.rel_bias_table.data[...] = 0.25
    block.mlp.fc2.weight.data[...] = 0.0
    block.mlp.fc2.bias.data[...] = 0.0

    x = np.random.default_rng(6).normal(size=(1, 4, 4, dim))
    normed = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    expected = x.copy()
    for i in range(0, 4, window):
        for j in range(0, 4, window):
            cell = (slice(None), slice(i, i + window), slice(j, j + window))
            expected[cell] += normed[cell].mean(axis=(1, 2), keepdims=True)
    assert np.allclose(block(Tensor(x, dtype=F64)).numpy(), expected, rtol=0, atol=1e-13)


# ---------------------------------------------------------------- input downsampling

def test_downsample_constant_image():
    out = downsample_input(Tensor(np.full((1, 3, 64, 64), 0.3), dtype=F64), 16).numpy()
    assert out.shape == (1, 3, 16, 16)
    assert np.allclose(out, 0.3, atol=1e-15)


def test_downsample_preserves_a_linear_ramp():
    ramp = np.broadcast_to(0.01 * np.arange(352.0) + 0.2, (1, 3, 352, 352))
    out = downsample_input(Tensor(ramp, dtype=F64), 56).numpy()
    scale = 352 / 56
    centres = (np.arange(56) + 0.5) * scale - 0.5
    assert np.abs(out - (0.01 * centres + 0.2)).max() <= 1e-6


def test_downsample_random_image_matches_bilinear_oracle():
    x = np.random.default_rng(7).uniform(size=(1, 1, 352, 352))
    out = downsample_input(Tensor(x, dtype=F64), 56).numpy()
    assert np.allclose(out[0, 0], oracles.bilinear(x[0, 0], 56, 56), atol=1e-12)


def test_downsample_errors():
    with pytest.raises(ValueError, match="patch"):
        downsample_input(image(64), 1)
    with pytest.raises(ValueError, match="larger"):
        downsample_input(image(32), 64)
