import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion.data import (
    AUGMENTATIONS,
    DatasetMeta,
    DatasetSpec,
    augment,
    bayes_accuracy,
    collate,
    generate,
    image_prototype,
    indicator_configs,
    pad_or_truncate,
    read_dataset,
    save_dataset,
    standardize,
    struct_prototype,
)
from mmfusion.errors import BadMagic, BadSpec, FormatError, NonSquareRotate, VersionMismatch
from mmfusion.tensor import Rng


@pytest.fixture(scope="module")
def default_bayes():
    return bayes_accuracy(DatasetSpec(), n=10_000)


def test_generate_is_deterministic():
    a = generate(DatasetSpec(n_samples=50, seed=4))
    b = generate(DatasetSpec(n_samples=50, seed=4))
    assert a == b
    assert a != generate(DatasetSpec(n_samples=50, seed=5))


def test_samples_are_well_formed(default_samples):
    spec = DatasetSpec()
    for s in default_samples:
        assert s.image.shape == (6, 6) and s.structured.shape == (4,)
        assert 0 <= s.label < 3
        assert spec.min_len <= len(s.tokens) <= spec.max_len
        assert all(1 <= t < spec.vocab_size for t in s.tokens)


def test_class_balance(default_samples):
    n, C = len(default_samples), 3
    counts = np.bincount([s.label for s in default_samples], minlength=C)
    sigma = np.sqrt(n * (1 / C) * (1 - 1 / C))
    assert np.all(np.abs(counts - n / C) <= 3 * sigma)


def test_default_bayes_calibration(default_bayes):
    for view in ("image", "tokens", "structured"):
        assert 0.70 <= default_bayes[view] <= 0.80
        assert 0.65 <= default_bayes[view] <= 0.85
    assert default_bayes["joint"] >= 0.95


def test_noiseless_bayes_matches_closed_form():
    # a single view shows the true class with prob s, else a uniform class
    spec = DatasetSpec(noise=0.0)
    acc = bayes_accuracy(spec, n=4000)
    for view in ("image", "tokens", "structured"):
        assert acc[view] == pytest.approx(0.75 + 0.25 / 3, abs=0.025)
    assert acc["joint"] >= 0.99


def test_no_signal_is_chance():
    acc = bayes_accuracy(DatasetSpec(s_img=0, s_seq=0, s_struct=0), n=3000)
    for value in acc.values():
        assert value == pytest.approx(1 / 3, abs=1e-9)


def test_full_signal_noiseless_is_separable():
    spec = DatasetSpec(n_samples=200, s_img=1, s_seq=1, s_struct=1, noise=0.0)
    for s in generate(spec):
        np.testing.assert_array_equal(s.image, image_prototype(spec, s.label))
        np.testing.assert_array_equal(s.structured, struct_prototype(spec, s.label))
        pairs = list(zip(s.tokens, s.tokens[1:]))
        assert (2 * s.label + 1, 2 * s.label + 2) in pairs
    assert all(v == 1.0 for v in bayes_accuracy(spec, n=500).values())


def test_indicator_patterns_are_anticorrelated():
    configs = dict((k, p) for p, k in indicator_configs([0.75, 0.75, 0.75]))
    assert configs[(True, True, True)] == pytest.approx(0.25)
    assert sum(p for k, p in configs.items() if sum(k) < 2) == 0.0
    assert sum(configs.values()) == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs", [dict(n_samples=0), dict(n_classes=1), dict(n_classes=5),
                                    dict(size=7), dict(vocab_size=5), dict(s_img=1.5), dict(noise=-1)])
def test_bad_specs(kwargs):
    with pytest.raises(BadSpec):
        generate(DatasetSpec(**kwargs))


# --- preprocessing ---------------------------------------------------------------


def test_standardize_examples():
    out, (mean, std) = standardize([[1.0], [3.0]])
    assert out.ravel().tolist() == [-1.0, 1.0] and mean[0] == 2.0 and std[0] == 1.0
    out, _ = standardize([[4.0], [4.0], [4.0]])
    assert not out.any()
    test, _ = standardize([[10.0]], (mean, std))
    assert test.tolist() == [[8.0]]


def _outcomes(image, kinds, n=64):
    return [augment(image, Rng(seed), kinds) for seed in range(n)]


def test_rotate_and_flip_examples():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    rotated = [o for o in _outcomes(img, ("rotate90",)) if not np.array_equal(o, img)]
    assert rotated and all(o.tolist() == [[3, 1], [4, 2]] for o in rotated)
    flipped = [o for o in _outcomes(img, ("flip_h",)) if not np.array_equal(o, img)]
    assert flipped and all(o.tolist() == [[2, 1], [4, 3]] for o in flipped)
    assert np.array_equal(flipped[0][:, ::-1], img)


def test_augment_applies_half_the_time():
    img = np.arange(4.0).reshape(2, 2)
    changed = sum(not np.array_equal(o, img) for o in _outcomes(img, ("flip_v",), 400))
    assert 150 <= changed <= 250


def test_scale_range_and_errors():
    img = np.ones((3, 3))
    for out in _outcomes(img, ("scale",)):
        assert 0.8 <= out[0, 0] <= 1.2 and np.all(out == out[0, 0])
    with pytest.raises(NonSquareRotate):
        augment(np.ones((2, 3)), Rng(0), ("rotate90",))
    with pytest.raises(ValueError):
        augment(img, Rng(0), ("blur",))
    assert set(AUGMENTATIONS) == {"rotate90", "flip_h", "flip_v", "scale"}


def test_pad_or_truncate_examples():
    assert pad_or_truncate([5, 6], 4) == [5, 6, 0, 0]
    assert pad_or_truncate([1, 2, 3, 4, 5], 3) == [1, 2, 3]
    assert pad_or_truncate([], 2) == [0, 0]


@given(st.lists(st.integers(0, 50), max_size=20), st.integers(1, 12))
def test_pad_or_truncate_length(tokens, L):
    out = pad_or_truncate(tokens, L)
    assert len(out) == L and out[:min(L, len(tokens))] == tokens[:L]


def test_collate_shapes(default_samples):
    b = collate(default_samples[:5], 8)
    assert b.images.shape == (5, 6, 6) and b.tokens.shape == (5, 8)
    assert b.structured.shape == (5, 4) and b.labels.tolist() == [s.label for s in default_samples[:5]]


# --- MMDS files ------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    spec = DatasetSpec(n_samples=30, seed=2)
    samples = generate(spec)
    path = tmp_path / "d.mmds"
    save_dataset(path, samples, DatasetMeta.from_spec(spec))
    back, meta = read_dataset(path)
    assert back == samples and meta == DatasetMeta.from_spec(spec)
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(samples, back))


def test_dataset_corruption(tmp_path):
    spec = DatasetSpec(n_samples=5)
    path = tmp_path / "d.mmds"
    save_dataset(path, generate(spec), DatasetMeta.from_spec(spec))
    raw = path.read_bytes()
    bad = tmp_path / "bad.mmds"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_dataset(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(VersionMismatch):
        read_dataset(bad)
    for cut in (0, 3, 20, len(raw) // 2, len(raw) - 1):
        bad.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_dataset(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        read_dataset(bad)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.sampled_from([2, 3, 4]), st.sampled_from([6, 12]))
def test_generated_samples_respect_their_spec(seed, C, size):
    spec = DatasetSpec(n_samples=4, n_classes=C, size=size, vocab_size=2 * C + 4, seed=seed)
    for s in generate(spec):
        assert 0 <= s.label < C and s.image.shape == (size, size)
        assert all(1 <= t < spec.vocab_size for t in s.tokens)
        assert np.all(np.isfinite(s.image)) and np.all(np.isfinite(s.structured))
