import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cotrainseg.dataio import (Batch, DatasetSplit, extract_patch,
                               generate_synthetic_dataset, make_batch,
                               read_dataset, read_volume, split_dataset,
                               write_dataset, write_volume)
from cotrainseg.volumes import LabelVolume, Sample, Volume


def test_vol1_roundtrip_zeros(tmp_path):
    v = Volume(np.zeros((2, 2, 2)))
    write_volume(v, tmp_path / "z.vol1")
    back = read_volume(tmp_path / "z.vol1")
    assert isinstance(back, Volume)
    assert np.array_equal(back.voxels, v.voxels)


def test_vol1_label_dtype_recorded(tmp_path):
    lab = LabelVolume(np.ones((2, 2, 2)), num_classes=2)
    path = tmp_path / "l.vol1"
    write_volume(lab, path)
    raw = path.read_bytes()
    assert raw[:4] == b"VOL1"
    assert b'"dtype":"u8"' in raw.split(b"\n", 1)[0]
    back = read_volume(path)
    assert isinstance(back, LabelVolume)
    assert back.num_classes == 2
    assert np.array_equal(back.classes, lab.classes)


def test_vol1_write_twice_byte_identical(tmp_path):
    rng = np.random.default_rng(5)
    v = Volume(rng.normal(size=(8, 8, 8)).astype(np.float32))
    write_volume(v, tmp_path / "a.vol1")
    write_volume(read_volume(tmp_path / "a.vol1"), tmp_path / "b.vol1")
    ha = hashlib.sha256((tmp_path / "a.vol1").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b.vol1").read_bytes()).hexdigest()
    assert ha == hb


def test_vol1_bad_magic(tmp_path):
    path = tmp_path / "bad.vol1"
    path.write_bytes(b"VOL2" + b'{"shape":[1,1,1],"dtype":"f32","kind":"image"}\n' + b"\x00" * 4)
    with pytest.raises(ValueError, match="magic"):
        read_volume(path)


def test_vol1_truncated_payload(tmp_path):
    path = tmp_path / "t.vol1"
    v = Volume(np.zeros((2, 2, 2)))
    write_volume(v, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="length"):
        read_volume(path)


def test_vol1_unknown_dtype(tmp_path):
    path = tmp_path / "d.vol1"
    path.write_bytes(b"VOL1" + b'{"shape":[1,1,1],"dtype":"f16","kind":"image"}\n' + b"\x00" * 2)
    with pytest.raises(ValueError, match="dtype"):
        read_volume(path)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_vol1_roundtrip_bit_exact_property(tmp_path_factory, vox):
    tmp = tmp_path_factory.mktemp("vol")
    v = Volume(vox)
    write_volume(v, tmp / "v.vol1")
    back = read_volume(tmp / "v.vol1")
    assert back.voxels.tobytes() == v.voxels.tobytes()


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(7, 4, (16, 16, 16), 0.5)
    b = generate_synthetic_dataset(7, 4, (16, 16, 16), 0.5)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image.voxels, sb.image.voxels)
        assert np.array_equal(sa.label.classes, sb.label.classes)
        assert sa.id == sb.id


def test_synthetic_noise_free_threshold():
    for s in generate_synthetic_dataset(3, 3, (16, 16, 16), 0.0):
        thresholded = (s.image.voxels >= 0.5).astype(np.uint8)
        assert np.array_equal(thresholded, s.label.classes)


def test_synthetic_foreground_fraction():
    samples = generate_synthetic_dataset(1, 24, (32, 32, 32), 0.5)
    for s in samples:
        frac = s.label.classes.mean()
        assert 0.02 <= frac <= 0.20, f"{s.id}: {frac}"


def test_synthetic_rejects_degenerate():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, 4, (8, 32, 32), 0.5)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(1, 1, (32, 32, 32), 0.5)


def test_split_counts_and_determinism():
    samples = generate_synthetic_dataset(2, 20, (16, 16, 16), 0.3)
    split = split_dataset(samples, 0.1, seed=11)
    assert len(split.labeled) == 2 and len(split.unlabeled) == 18
    again = split_dataset(samples, 0.5, seed=4)
    twice = split_dataset(samples, 0.5, seed=4)
    assert [s.id for s in again.labeled] == [s.id for s in twice.labeled]
    assert all(s.label is None for s in split.unlabeled)


def test_split_zero_labeled_errors():
    samples = generate_synthetic_dataset(2, 20, (16, 16, 16), 0.3)
    with pytest.raises(ValueError, match="zero labeled"):
        split_dataset(samples, 0.04, seed=1)


def test_extract_patch_identity_and_offset():
    s = generate_synthetic_dataset(5, 2, (32, 32, 32), 0.4)[0]
    full = extract_patch(s, (0, 0, 0), (32, 32, 32))
    assert np.array_equal(full.image.voxels, s.image.voxels)
    sub = extract_patch(s, (8, 8, 8), (16, 16, 16))
    assert sub.image.voxels[0, 0, 0] == s.image.voxels[8, 8, 8]
    assert np.array_equal(sub.label.classes, s.label.classes[8:24, 8:24, 8:24])
    with pytest.raises(ValueError):
        extract_patch(s, (20, 0, 0), (16, 16, 16))


def test_patch_label_image_correspondence():
    s = generate_synthetic_dataset(9, 2, (32, 32, 32), 0.0)[0]
    p = extract_patch(s, (4, 6, 2), (24, 24, 24))
    # at difficulty 0 the threshold rule survives cropping voxel-for-voxel
    assert np.array_equal(p.label.classes, (p.image.voxels >= 0.5).astype(np.uint8))


def test_make_batch_parity_and_determinism():
    samples = generate_synthetic_dataset(2, 10, (16, 16, 16), 0.3)
    split = split_dataset(samples, 0.3, seed=2)
    b1 = make_batch(split, 4, (16, 16, 16), np.random.default_rng(3))
    b2 = make_batch(split, 4, (16, 16, 16), np.random.default_rng(3))
    assert len(b1.labeled_images) == 2 and len(b1.unlabeled_images) == 2
    for x, y in zip(b1.labeled_images, b2.labeled_images):
        assert np.array_equal(x.voxels, y.voxels)
    with pytest.raises(ValueError, match="even"):
        make_batch(split, 3, (16, 16, 16), np.random.default_rng(0))


def test_make_batch_empty_labeled_pool():
    samples = generate_synthetic_dataset(2, 4, (16, 16, 16), 0.3)
    empty = DatasetSplit(labeled=[], unlabeled=[
        Sample(image=s.image, label=None, id=s.id) for s in samples], seed=0)
    with pytest.raises(ValueError, match="labeled"):
        make_batch(empty, 2, (16, 16, 16), np.random.default_rng(0))


def test_batch_invariant_enforced():
    v = Volume(np.zeros((4, 4, 4)))
    lab = LabelVolume(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        Batch(labeled_images=[v], labeled_targets=[lab], unlabeled_images=[], patch_size=(4, 4, 4))


def test_manifest_roundtrip(tmp_path):
    samples = generate_synthetic_dataset(4, 6, (16, 16, 16), 0.5)
    split = split_dataset(samples, 0.34, seed=4)
    manifest = write_dataset(split, tmp_path / "ds")
    back = read_dataset(manifest)
    assert back.seed == split.seed
    assert [s.id for s in back.labeled] == [s.id for s in split.labeled]
    for a, b in zip(back.labeled, split.labeled):
        assert np.array_equal(a.image.voxels, b.image.voxels)
        assert np.array_equal(a.label.classes, b.label.classes)
    assert all(s.label is None for s in back.unlabeled)
