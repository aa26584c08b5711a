import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctsynth.data import (
    CTImage,
    DataError,
    ManifestRow,
    OneHotMap,
    PairedSample,
    SegMap,
    ShapeError,
    encode_onehot,
    half_resolution,
    hu_window,
    inverse_hu_window,
    load_image_png,
    load_manifest_samples,
    load_map_png,
    lung_mask,
    read_manifest,
    save_image_png,
    save_map_png,
    write_manifest,
)

label_maps = st.integers(1, 5).flatmap(
    lambda k: arrays(np.uint8, (2 * k, 2 * k), elements=st.integers(0, 3)))


@pytest.mark.parametrize("hu, expected", [(-600, 0.0), (1500, 1.0), (450, 0.5)])
def test_hu_window_examples(hu, expected):
    assert hu_window(np.array([[hu]])).intensities[0, 0] == pytest.approx(expected, abs=1e-7)


def test_hu_window_clamps_and_rejects_non_finite():
    out = hu_window(np.array([[-2000.0, 3000.0]]))
    assert out.intensities.tolist() == [[0.0, 1.0]]
    with pytest.raises(DataError):
        hu_window(np.array([[np.nan, 0.0]]))
    with pytest.raises(DataError):
        hu_window(np.array([[np.inf, 0.0]]))


@given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=50))
def test_hu_window_monotone(values):
    v = np.sort(np.array(values))[None, :]
    out = hu_window(v).intensities[0]
    assert np.all(np.diff(out) >= 0)


@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_hu_window_idempotent_on_windowed_values(x):
    img = CTImage(x)
    again = hu_window(inverse_hu_window(img))
    np.testing.assert_allclose(again.intensities, img.intensities, atol=1e-6)


def test_encode_onehot_examples():
    oh = encode_onehot(SegMap(np.array([[1, 3]])))
    assert oh.channels[:, 0, 0].tolist() == [0, 1, 0, 0]
    assert oh.channels[:, 0, 1].tolist() == [0, 0, 0, 1]
    bg = encode_onehot(SegMap(np.zeros((4, 4), int)))
    assert np.all(bg.channels[0] == 1) and np.all(bg.channels[1:] == 0)


def test_out_of_range_label_rejected():
    with pytest.raises(DataError):
        SegMap(np.array([[0, 4]]))
    with pytest.raises(DataError):
        SegMap(np.array([[-1, 0]]))


def test_onehot_invariant_enforced():
    with pytest.raises(DataError):
        OneHotMap(np.zeros((4, 2, 2)))


@given(label_maps)
def test_onehot_roundtrip(labels):
    seg = SegMap(labels)
    oh = encode_onehot(seg)
    assert np.all(oh.channels.sum(axis=0) == 1)
    assert oh.argmax() == seg


@given(label_maps)
def test_lung_mask_counts(labels):
    mask = lung_mask(SegMap(labels))
    assert mask.sum() == np.count_nonzero(np.isin(labels, [1, 2, 3]))
    assert set(np.unique(mask)) <= {0, 1}


def test_lung_mask_examples():
    m = lung_mask(SegMap(np.array([[0, 1, 2, 3]])))
    assert m.tolist() == [[0, 1, 1, 1]]


def test_half_resolution_examples():
    c = half_resolution(CTImage(np.full((4, 4), 0.3)))
    assert c.intensities.shape == (2, 2)
    np.testing.assert_allclose(c.intensities, 0.3, atol=1e-7)
    block = CTImage(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert half_resolution(block).intensities[0, 0] == pytest.approx(0.5)
    single = encode_onehot(SegMap(np.full((8, 8), 2)))
    half = half_resolution(single)
    assert half.channels.shape == (4, 4, 4)
    assert np.all(half.argmax().labels == 2)


def test_half_resolution_odd_dims():
    with pytest.raises(ShapeError):
        half_resolution(CTImage(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        half_resolution(encode_onehot(SegMap(np.zeros((4, 5), int))))


@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_half_resolution_associative(x):
    twice = half_resolution(half_resolution(CTImage(x))).intensities
    direct = x.reshape(2, 4, 2, 4).mean(axis=(1, 3))
    np.testing.assert_allclose(twice, direct, atol=1e-6)


@given(label_maps)
def test_half_resolution_onehot_stays_onehot(labels):
    half = half_resolution(encode_onehot(SegMap(labels)))
    assert np.all(half.channels.sum(axis=0) == 1)


def test_half_resolution_majority_label():
    labels = np.array([[3, 3], [3, 1]])
    assert half_resolution(SegMap(labels)).labels[0, 0] == 3


def test_paired_sample_dims_checked():
    with pytest.raises(ShapeError):
        PairedSample(SegMap(np.zeros((4, 4), int)), CTImage(np.zeros((2, 2))), "x")


def test_png_and_manifest_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = CTImage(rng.random((16, 16)))
    seg = SegMap(rng.integers(0, 4, (16, 16)))
    save_image_png(img, tmp_path / "a.png")
    save_map_png(seg, tmp_path / "m.png")
    back = load_image_png(tmp_path / "a.png")
    assert np.max(np.abs(back.intensities - img.intensities)) <= 0.5 / 65535 + 1e-7
    assert load_map_png(tmp_path / "m.png") == seg
    save_image_png(img, tmp_path / "b8.png", bits=8)
    assert np.max(np.abs(load_image_png(tmp_path / "b8.png").intensities - img.intensities)) <= 0.5 / 255 + 1e-7
    write_manifest([ManifestRow("s0", "m.png", "a.png", "p0")], tmp_path / "man.txt")
    rows = read_manifest(tmp_path / "man.txt")
    assert rows == [ManifestRow("s0", "m.png", "a.png", "p0")]
    (s,) = load_manifest_samples(tmp_path / "man.txt")
    assert s.id == "s0" and s.patient_tag == "p0" and s.map == seg


def test_manifest_bad_row(tmp_path):
    (tmp_path / "bad.txt").write_text("only, three, fields\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "bad.txt")
