import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from kernelga.data import (
    Dataset,
    SplitSpec,
    epoch_batches,
    load_cache,
    load_idx,
    load_image_dir,
    make_synthetic,
    nearest_resize,
    preprocess,
    preprocess_dataset,
    save_cache,
    split_train_val,
    square_pad,
    write_idx,
)
from kernelga.errors import ConfigError, DataFormatError, DegenerateInputError


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (4, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


def test_idx_round_trip(idx_files):
    ip, lp, images, labels = idx_files
    assert ip.read_bytes()[:16] == struct.pack(">4I", 0x803, 4, 28, 28)
    ds = load_idx(ip, lp)
    assert ds.images.shape == (4, 1, 28, 28) and ds.images.dtype == np.uint8
    np.testing.assert_array_equal(ds.images[:, 0], images)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_bad_magic(idx_files):
    ip, lp, *_ = idx_files
    buf = bytearray(ip.read_bytes())
    buf[:4] = struct.pack(">I", 0x802)
    ip.write_bytes(bytes(buf))
    with pytest.raises(DataFormatError, match="offset 0"):
        load_idx(ip, lp)


def test_idx_truncated(idx_files):
    ip, lp, *_ = idx_files
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path, idx_files):
    ip, _, images, _ = idx_files
    lp = tmp_path / "short.idx"
    lp.write_bytes(struct.pack(">2I", 0x801, 3) + bytes([0, 1, 2]))
    with pytest.raises(DataFormatError, match="offset 4"):
        load_idx(ip, lp)


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def test_image_dir_labels_and_order(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {}
    for cls in ("0", "1"):
        for name in ("b.png", "a.png"):
            arr = rng.integers(0, 256, (10 + len(arrays), 12), dtype=np.uint8)
            arrays[(cls, name)] = arr
            write_png(tmp_path / cls / name, arr)
    ds = load_image_dir(tmp_path)
    assert list(ds.labels) == [0, 0, 1, 1]
    np.testing.assert_array_equal(ds.images[0], arrays[("0", "a.png")])
    np.testing.assert_array_equal(ds.images[3], arrays[("1", "b.png")])
    again = load_image_dir(tmp_path)
    assert all(np.array_equal(a, b) for a, b in zip(ds.images, again.images))


def test_image_dir_rejects_named_class(tmp_path):
    write_png(tmp_path / "cat" / "x.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(ConfigError, match="cat"):
        load_image_dir(tmp_path)


def test_image_dir_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_image_dir(tmp_path / "nope")


def square_glyph():
    img = np.full((32, 32), 255, np.uint8)
    img[8:24, 8:24] = 0
    for r, c in [(8, 8), (8, 23), (23, 8), (23, 23)]:
        img[r, c] = 255
    return img


def test_preprocess_square_is_exact_upscale():
    img = square_glyph()
    expected = np.kron((img[8:24, 8:24] == 0).astype(np.float32), np.ones((2, 2), np.float32))
    out = preprocess(img)
    assert out.shape == (1, 32, 32) and out.dtype == np.float32
    np.testing.assert_array_equal(out[0], expected)
    # auto polarity: light ink on a dark page gives the same glyph
    np.testing.assert_array_equal(preprocess(255 - img)[0], expected)


def test_preprocess_explicit_polarity():
    img = square_glyph()
    np.testing.assert_array_equal(preprocess(img, polarity="dark"), preprocess(img))
    light = preprocess(img, polarity="light")[0]
    # the white page is the ink: a full frame with the square punched out
    assert light[0].all() and light[-1].all() and light[:, 0].all() and light[:, -1].all()
    assert not light[10:22, 10:22].any()


def test_preprocess_all_foreground_and_blank():
    out = preprocess(np.full((20, 20), 255, np.uint8))
    np.testing.assert_array_equal(out, np.ones((1, 32, 32), np.float32))
    with pytest.raises(DegenerateInputError):
        preprocess(np.zeros((20, 20), np.uint8))


def test_preprocess_crops_and_centres_off_centre_glyph():
    img = np.zeros((40, 60), np.float32)
    img[2:12, 40:58] = 1.0
    out = preprocess(img, filters=())[0]
    # 10x18 box padded to 18x18: rows 4..13 of 18 are ink
    rows = np.flatnonzero(out.any(axis=1))
    assert out[:, 0].any() and out[:, -1].any()
    assert 0 < rows[0] and rows[-1] < 31
    assert abs((rows[0] + rows[-1]) / 2 - 15.5) <= 1


@pytest.mark.parametrize("width", [4, 8, 12, 20])
def test_preprocess_idempotent_on_stripes(width):
    g = np.zeros((32, 32), np.float32)
    left = (32 - width) // 2
    g[:, left:left + width] = 1
    once = preprocess(g)
    np.testing.assert_array_equal(preprocess(once), once)


def test_nearest_resize_and_square_pad():
    m = np.array([[1, 0], [0, 1]], dtype=bool)
    np.testing.assert_array_equal(nearest_resize(m, 4), np.kron(m, np.ones((2, 2), bool)))
    padded = square_pad(np.ones((2, 4), bool))
    assert padded.shape == (4, 4)
    np.testing.assert_array_equal(padded.sum(axis=1), [0, 4, 4, 0])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_preprocess_output_is_binary(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (int(rng.integers(8, 40)), int(rng.integers(8, 40))), dtype=np.uint8)
    try:
        out = preprocess(img)
    except DegenerateInputError:
        return
    assert out.shape == (1, 32, 32)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_preprocess_dataset_fingerprint():
    raw = Dataset([square_glyph(), 255 - square_glyph()], np.array([0, 1]))
    a = preprocess_dataset(raw)
    assert a.images.shape == (2, 1, 32, 32)
    assert a.provenance["preprocessing"] == preprocess_dataset(raw).provenance["preprocessing"]
    assert a.provenance["preprocessing"] != preprocess_dataset(raw, polarity="dark").provenance["preprocessing"]


def labelled(n, classes=10):
    return Dataset(np.zeros((n, 1, 2, 2), np.float32), np.arange(n) % classes)


def test_split_partition_and_sizes():
    ds = labelled(100)
    ds.images[:, 0, 0, 0] = np.arange(100)
    train, val = split_train_val(ds, SplitSpec(20, split_seed=3))
    assert (len(train), len(val)) == (80, 20)
    ids = np.concatenate([train.images[:, 0, 0, 0], val.images[:, 0, 0, 0]])
    assert sorted(ids) == list(range(100))
    train2, val2 = split_train_val(ds, SplitSpec(20, split_seed=3))
    np.testing.assert_array_equal(val.images, val2.images)
    _, val3 = split_train_val(ds, SplitSpec(20, split_seed=4))
    assert not np.array_equal(val.images, val3.images)


@pytest.mark.parametrize("size", [0, 100])
def test_split_size_bounds(size):
    with pytest.raises(ConfigError):
        split_train_val(labelled(100), SplitSpec(size))


def test_split_label_balance():
    ds = labelled(10_000)
    for seed in range(5):
        _, val = split_train_val(ds, SplitSpec(2000, split_seed=seed))
        share = np.bincount(val.labels, minlength=10) / 2000
        assert np.all(np.abs(share - 0.1) <= 0.1)


def test_epoch_batches():
    b = epoch_batches(1000, 250, epoch_seed=0)
    assert [len(x) for x in b] == [250] * 4
    assert sorted(np.concatenate(b)) == list(range(1000))
    assert [len(x) for x in epoch_batches(10, 250)] == [10]
    assert [len(x) for x in epoch_batches(1001, 250)] == [250] * 4 + [1]
    assert all(np.array_equal(x, y) for x, y in zip(b, epoch_batches(1000, 250, epoch_seed=0)))
    assert not np.array_equal(b[0], epoch_batches(1000, 250, epoch_seed=1)[0])


def test_cache_round_trip(tmp_path):
    ds = make_synthetic(5, 3, seed=2)
    path = tmp_path / "d.kgad"
    save_cache(path, ds)
    back = load_cache(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.provenance == ds.provenance
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(DataFormatError):
        load_cache(path)


def test_synthetic_is_separable_by_nearest_centroid():
    train = make_synthetic(100, 3, seed=0)
    test = make_synthetic(100, 3, seed=1)
    cents = np.stack([train.images[train.labels == c].mean(axis=0).ravel() for c in range(3)])
    d = ((test.images.reshape(len(test), -1)[:, None, :] - cents[None]) ** 2).sum(axis=2)
    assert np.mean(d.argmin(axis=1) == test.labels) >= 0.99


def test_synthetic_shape_and_balance():
    ds = make_synthetic(20, 4, seed=5)
    assert ds.images.shape == (80, 1, 32, 32) and ds.images.dtype == np.float32
    assert list(np.bincount(ds.labels)) == [20] * 4
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    ds.check(4)
    with pytest.raises(ConfigError):
        make_synthetic(5, 9)
