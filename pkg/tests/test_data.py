import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyngate import data as D
from dyngate.errors import FormatError, ParseError, ValidationError


@pytest.fixture(scope="module")
def photo():
    return D.generate("photo", num_classes=4, n=400, seed=3)


def test_regeneration_is_bitwise_identical(photo):
    again = D.generate("photo", num_classes=4, n=400, seed=3)
    assert again.images.tobytes() == photo.images.tobytes()
    assert photo.equals(again)


def test_different_seed_differs(photo):
    other = D.generate("photo", num_classes=4, n=8, seed=4)
    assert not np.array_equal(other.images, photo.images[:8])


def test_class_balance(photo):
    assert photo.class_counts().tolist() == [100, 100, 100, 100]


@pytest.mark.parametrize("k,n", [(3, 10), (10, 23), (2, 2)])
def test_balance_within_one(k, n):
    counts = D.generate("sketch", num_classes=k, n=n, seed=0).class_counts()
    assert counts.min() >= 1 and counts.max() - counts.min() <= 1


def test_pixel_range(photo):
    assert photo.images.shape == (400, 3, 32, 32)
    assert photo.images.min() >= 0.0 and photo.images.max() <= 1.0


@pytest.mark.parametrize("preset", D.PRESETS)
def test_every_preset_in_range(preset):
    ds = D.generate(preset, n=12, seed=1)
    assert np.all((ds.images >= 0) & (ds.images <= 1))
    assert np.all(np.isfinite(ds.images))


def test_photo_and_sketch_differ_everywhere():
    a = D.generate("photo", n=100, seed=0)
    b = D.generate("sketch", n=100, seed=0)
    diff = np.abs(a.images - b.images).reshape(100, -1).sum(axis=1)
    assert np.all(diff > 0)
    assert np.array_equal(a.labels, b.labels)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), index=st.integers(0, 10_000), k=st.integers(2, 10))
def test_geometry_independent_of_preset(seed, index, k):
    masks = []
    for preset in D.PRESETS:
        geo, _ = D._sample_streams(seed, "test", index, preset)
        masks.append(D.render_geometry(D.SHAPES[index % k], geo))
    for m in masks[1:]:
        assert np.array_equal(m, masks[0])
    assert np.array_equal(masks[0], D.geometry_for(seed, "test", index, k))


def test_geometry_is_nonempty_and_bounded():
    for i, shape in enumerate(D.SHAPES):
        m = D.render_geometry(shape, np.random.default_rng(i))
        assert 0.0 <= m.min() and m.max() <= 1.0
        assert 10 < m.sum() < 0.9 * m.size


def test_samples_are_independent_of_dataset_size():
    small = D.generate("cartoon", n=10, seed=5)
    big = D.generate("cartoon", n=30, seed=5)
    assert np.array_equal(small.images, big.images[:10])


def test_unknown_preset_lists_presets():
    with pytest.raises(ValidationError) as err:
        D.generate("underwater")
    for name in D.PRESETS:
        assert name in str(err.value)


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(num_classes=11), dict(n=3), dict(split="holdout")])
def test_generate_preconditions(kwargs):
    with pytest.raises(ValidationError):
        D.generate("photo", **kwargs)


def test_save_load_roundtrip(tmp_path, photo):
    path = tmp_path / "photo.dgds"
    D.save(photo, path)
    back = D.load(path)
    assert back.equals(photo)
    assert back.images.tobytes() == photo.images.tobytes()


def test_truncated_file_reports_offset(tmp_path, photo):
    path = tmp_path / "t.dgds"
    D.save(photo.subset(np.arange(5), "train"), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(FormatError, match="byte"):
        D.load(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="byte 10"):
        D.load(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.dgds"
    path.write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(FormatError, match="magic"):
        D.load(path)


def test_version_mismatch_names_versions(tmp_path, photo):
    path = tmp_path / "v.dgds"
    D.save(photo.subset(np.arange(4), "train"), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as err:
        D.load(path)
    assert "7" in str(err.value) and str(D.VERSION) in str(err.value)


def test_manifest_roundtrip(tmp_path):
    entries = [D.ManifestEntry("photo", "train", tmp_path / "photo.dgds"),
               D.ManifestEntry("sketch", "test", tmp_path / "sub" / "sketch.dgds")]
    mpath = tmp_path / "manifest.tsv"
    D.write_manifest(mpath, entries)
    assert "sub/sketch.dgds" in mpath.read_text()
    back = D.read_manifest(mpath)
    assert [(e.domain, e.split, e.path) for e in back] == [(e.domain, e.split, e.path) for e in entries]


def test_manifest_parse_error_has_line(tmp_path):
    mpath = tmp_path / "bad.tsv"
    mpath.write_text("# header\nphoto\ttrain\tp.dgds\nsketch only\n")
    with pytest.raises(ParseError, match="line 3"):
        D.read_manifest(mpath)
