import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bilateral_sod import data as D

# Regression values for the synthetic generator, frozen from a reviewed run.
SAMPLE0_SEED42_IMAGE_SHA = "ec1c7130c826bdbfe3370f9c43932632a800bb0fd7614f72daa355f06f368315"
SAMPLE0_SEED42_MASK_SHA = "82e9af68e58d5ef593fa496673c929f13badba5c82b7e175ac2b4a6627eb3ae6"
AUGMENTED_BATCH_SHA = "ed498ad8ad79266b3a09e9444ca253f5c79770a6fdbaf46ac09dd128de8c3e7b"


def sha(b):
    return hashlib.sha256(b).hexdigest()


# ---------------------------------------------------------------- netpbm

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.booleans(), st.integers(0, 10_000))
def test_netpbm_roundtrip(h, w, colour, seed):
    shape = (h, w, 3) if colour else (h, w)
    a = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
    out = D.decode_netpbm(D.encode_netpbm(a))
    assert out.dtype == np.uint8
    assert np.array_equal(out, a)


def test_hand_written_pgm_bytes():
    buf = b"P5\n# a comment\n3 2\n255\n" + bytes([0, 1, 2, 253, 254, 255])
    assert np.array_equal(D.decode_netpbm(buf), np.array([[0, 1, 2], [253, 254, 255]], np.uint8))


def test_white_mask_loads_as_ones(tmp_path):
    D.write_netpbm(tmp_path / "m.pgm", np.full((4, 5), 255, np.uint8))
    D.write_netpbm(tmp_path / "i.ppm", np.zeros((4, 5, 3), np.uint8))
    sample = D.load_sample(tmp_path / "i.ppm", tmp_path / "m.pgm")
    assert np.array_equal(sample.mask, np.ones((4, 5)))
    assert sample.id == "i"


@pytest.mark.parametrize("buf,match", [
    (b"P3\n1 1\n255\n0", "magic"),
    (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
    (b"P5\n2 x\n255\n\x00\x00", "malformed"),
    (b"P5\n2 2\n255\n\x00\x00", "truncated"),
    (b"P5\n2 2", "early"),
    (b"P6\n0 2\n255\n", "dimensions"),
])
def test_malformed_netpbm_is_rejected(buf, match):
    with pytest.raises(D.NetpbmError, match=match):
        D.decode_netpbm(buf)


def test_wrong_kind_of_file(tmp_path):
    D.write_netpbm(tmp_path / "a.pgm", np.zeros((2, 2), np.uint8))
    with pytest.raises(D.NetpbmError, match="colour"):
        D.read_ppm(tmp_path / "a.pgm")
    with pytest.raises(TypeError):
        D.encode_netpbm(np.zeros((2, 2)))


# ---------------------------------------------------------------- synthetic corpus

def test_golden_sample():
    image, mask = D.synthesize(np.random.default_rng([42, 0]), 64)
    assert sha(D.encode_netpbm(D.to_uint8(image))) == SAMPLE0_SEED42_IMAGE_SHA
    assert sha(D.encode_netpbm(D.to_uint8(mask))) == SAMPLE0_SEED42_MASK_SHA


def test_generation_is_deterministic_and_indexed(tmp_path):
    D.generate_synthetic(tmp_path / "a", 3, seed=5)
    D.generate_synthetic(tmp_path / "b", 5, seed=5)
    for stem in ("00000", "00001", "00002"):
        for sub, ext in (("images", "ppm"), ("masks", "pgm")):
            a = (tmp_path / "a" / sub / f"{stem}.{ext}").read_bytes()
            assert a == (tmp_path / "b" / sub / f"{stem}.{ext}").read_bytes()
    other = D.generate_synthetic(tmp_path / "c", 1, seed=6)
    assert (other.root / "images/00000.ppm").read_bytes() != (tmp_path / "a/images/00000.ppm").read_bytes()


def test_corpus_roundtrip(tmp_path):
    manifest = D.generate_synthetic(tmp_path, 4, size=32, seed=1)
    assert (tmp_path / "manifest.txt").read_text().split() == ["00000", "00001", "00002", "00003"]
    samples = D.load_dataset(tmp_path)
    assert [s.id for s in samples] == manifest.stems
    for s in samples:
        assert s.image.shape == (32, 32, 3) and s.mask.shape == (32, 32)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_samples_have_bounded_foreground_and_contrast(seed):
    image, mask = D.synthesize(np.random.default_rng(seed), 64)
    assert D.FG_FRACTION[0] <= mask.mean() <= D.FG_FRACTION[1]
    assert set(np.unique(mask)) <= {0.0, 1.0}
    fg = image[mask > 0].mean(axis=0)
    bg = image[mask == 0].mean(axis=0)
    assert np.linalg.norm(fg - bg) > 0.2


def test_generation_errors(tmp_path):
    with pytest.raises(ValueError, match="positive"):
        D.generate_synthetic(tmp_path, 0)
    with pytest.raises(ValueError, match="multiple of 32"):
        D.generate_synthetic(tmp_path, 1, size=48)
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "missing")


# ---------------------------------------------------------------- augmentation

def _sample(seed=0, size=64):
    image, mask = D.synthesize(np.random.default_rng(seed), size)
    return D.Sample(image.astype(np.float32), mask, f"s{seed}")


def test_flip_is_an_involution():
    s = _sample()
    twice = D.flip(D.flip(s))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)
    assert np.array_equal(D.flip(s).mask, s.mask[:, ::-1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([32, 64, 96]))
def test_augmented_mask_stays_binary_and_sized(seed, size):
    out = D.augment(_sample(seed % 7), np.random.default_rng(seed), size)
    assert out.image.shape == (size, size, 3) and out.mask.shape == (size, size)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    assert 0.0 <= out.image.min() and out.image.max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_image_and_mask_share_geometry(seed, flipped):
    # Put the mask into every image channel: after augmentation the image must
    # binarise to the same mask, up to pixels sitting exactly on the 0.5 boundary.
    s = _sample(seed % 5)
    tracer = D.Sample(np.repeat(s.mask[..., None], 3, axis=2), s.mask, s.id)
    out = D.augment(tracer, np.random.default_rng(seed), 96, force_flip=flipped)
    grey = out.image[..., 0].astype(np.float64)
    disagree = (grey >= 0.5) != (out.mask > 0)
    assert np.all(np.abs(grey[disagree] - 0.5) < 1e-6)


def test_augment_crop_matches_direct_slicing():
    s = _sample(3)
    cfg = D.AugmentConfig(flip_prob=0.0)
    rng = np.random.default_rng(11)
    out = D.augment(s, np.random.default_rng(11), 32, cfg)
    rng.random()
    top, left = int(rng.integers(0, 64 - 58 + 1)), int(rng.integers(0, 64 - 58 + 1))
    crop = s.image[top:top + 58, left:left + 58, 1].astype(np.float64)
    assert np.allclose(out.image[..., 1], np.clip(oracles.bilinear(crop, 32, 32), 0, 1), atol=1e-6)


def test_scale_choices_are_multiples_of_32():
    rng = np.random.default_rng(0)
    sizes = {D.choose_scale(rng, 352) for _ in range(200)}
    assert sizes == {256, 352, 448}
    assert {D.choose_scale(rng, 64) for _ in range(200)} <= {32, 64, 96}


# ---------------------------------------------------------------- batching

def test_golden_augmented_batch():
    image, mask = D.synthesize(np.random.default_rng([42, 0]), 64)
    s = D.Sample(image.astype(np.float32), mask, "0")
    batch = next(D.iterate_batches([s] * 4, 4, seed=42, epoch=0, base_size=64, augment_cfg=D.AugmentConfig()))
    assert batch.images.shape == (4, 3, 64, 64)
    assert sha(batch.images.tobytes() + batch.masks.tobytes()) == AUGMENTED_BATCH_SHA


def test_collate_normalises_and_orders():
    samples = [_sample(i, 32) for i in range(3)]
    batch = D.collate(samples)
    assert batch.images.shape == (3, 3, 32, 32) and batch.masks.shape == (3, 1, 32, 32)
    assert batch.ids == ["s0", "s1", "s2"]
    assert np.allclose(batch.images[1], (samples[1].image.transpose(2, 0, 1) - 0.5) / 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 8), st.integers(0, 1000), st.integers(0, 5))
def test_epoch_visits_each_sample_at_most_once(n, batch_size, seed, epoch):
    samples = [D.Sample(np.zeros((32, 32, 3), np.float32), np.zeros((32, 32), np.float32), str(i))
               for i in range(n)]
    batches = list(D.iterate_batches(samples, batch_size, seed, epoch, 32))
    ids = [i for b in batches for i in b.ids]
    assert len(ids) == len(set(ids))
    if n >= batch_size:
        assert len(batches) == n // batch_size and all(len(b.ids) == batch_size for b in batches)
    else:
        assert len(batches) == 1 and len(ids) == n


def test_epochs_replay_independently():
    samples = [_sample(i, 32) for i in range(6)]
    cfg = D.AugmentConfig()
    first = [b.images for b in D.iterate_batches(samples, 2, 9, 3, 32, cfg)]
    again = [b.images for b in D.iterate_batches(samples, 2, 9, 3, 32, cfg)]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    other = [b.images for b in D.iterate_batches(samples, 2, 9, 4, 32, cfg)]
    assert not all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(first, other))


def test_sample_validation():
    with pytest.raises(ValueError, match="HxWx3"):
        D.Sample(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError, match="differ"):
        D.Sample(np.zeros((4, 4, 3)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="binary"):
        D.Sample(np.zeros((4, 4, 3)), np.full((4, 4), 0.5))
