import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripleprompt import data_protocol as dp


def small_spec(**kw):
    base = dict(num_images=30, num_classes=5, height=3, width=3, feature_dim=6)
    base.update(kw)
    return dp.SyntheticSpec(**base)


def test_zero_noise_planted_region_is_prototype():
    spec = small_spec(noise_sigma=0.0, min_planted=1, max_planted=1)
    ds = dp.generate_synthetic(spec)
    protos = dp.class_prototypes(spec).astype(np.float32)
    flat = ds.flat_features()
    for i in range(ds.num_images):
        (cls,) = np.flatnonzero(ds.labels[i] == 1)
        nz = np.flatnonzero(np.abs(flat[i]).sum(-1) > 0)
        assert len(nz) == 1
        assert np.array_equal(ds.features.reshape(30, 9, 6)[i, nz[0]], protos[cls])


def test_confusion_pair_angle():
    spec = small_spec(confusion_pairs=((0, 1, math.pi / 2), (2, 3, 0.35)))
    u = dp.class_prototypes(spec)
    assert abs(u[0] @ u[1]) <= 1e-12
    assert u[2] @ u[3] == pytest.approx(math.cos(0.35), abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)


def test_labels_fully_annotated():
    ds = dp.generate_synthetic(small_spec(min_planted=2, max_planted=3))
    assert set(np.unique(ds.labels)) <= {-1, 1}
    k = (ds.labels == 1).sum(1)
    assert k.min() >= 2 and k.max() <= 3


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(height=1, width=1, max_planted=2)
    with pytest.raises(ValueError):
        small_spec(confusion_pairs=((0, 9, 0.1),))


def test_generate_deterministic_bytes(tmp_path):
    a = dp.generate_synthetic(small_spec())
    b = dp.generate_synthetic(small_spec())
    dp.save_dataset(tmp_path / "a", a)
    dp.save_dataset(tmp_path / "b", b)
    for f in ("manifest.json", "features.bin", "labels.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- masking ----------------------------------------------------------------

def test_mask_identity_and_count():
    full = dp.generate_synthetic(small_spec(num_images=10, num_classes=8)).labels
    assert np.array_equal(dp.mask_labels(full, 1.0, 0), full)
    m = dp.mask_labels(full, 0.5, 0)
    assert int((m != 0).sum()) == 40
    assert np.all((m == 0) | (m == full))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_mask_count_property(n, m, keep, seed):
    full = np.where(np.random.default_rng(seed).random((n, m)) < 0.3, 1, -1).astype(np.int8)
    out = dp.mask_labels(full, keep, seed)
    assert int((out != 0).sum()) == math.floor(keep * n * m + 0.5)
    assert np.array_equal(dp.mask_labels(full, keep, seed), out)


def test_mask_errors():
    with pytest.raises(ValueError):
        dp.mask_labels(np.ones((2, 2)), 0.0, 0)
    with pytest.raises(ValueError):
        dp.mask_labels(np.array([[1, 0]]), 0.5, 0)


# -- zero-shot split --------------------------------------------------------

def test_split_sizes_and_determinism():
    s = dp.split_zero_shot(65, 17 / 65, 0)
    assert len(s.seen_classes) == 48 and len(s.unseen_classes) == 17
    assert s.all_classes == tuple(range(65))
    assert dp.split_zero_shot(65, 17 / 65, 0) == s


def test_split_errors():
    with pytest.raises(ValueError):
        dp.split_zero_shot(3, 0.1, 0)
    with pytest.raises(ValueError):
        dp.split_zero_shot(3, 1.0, 0)


def test_hide_unseen():
    full = dp.generate_synthetic(small_spec(num_classes=8)).labels
    s = dp.split_zero_shot(8, 0.25, 1)
    h = dp.hide_unseen(full, s)
    assert np.all(h[:, list(s.unseen_classes)] == 0)
    assert np.array_equal(h[:, list(s.seen_classes)], full[:, list(s.seen_classes)])


# -- persistence ------------------------------------------------------------

def test_round_trip_bit_exact(tmp_path):
    ds = dp.generate_synthetic(small_spec())
    manifest = dp.save_dataset(tmp_path, ds)
    back = dp.load_dataset(tmp_path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert back.checksum() == ds.checksum() == manifest["checksum"]
    assert back.meta == json.loads(json.dumps(ds.meta))


def test_layout_on_disk(tmp_path):
    dp.save_dataset(tmp_path, dp.generate_synthetic(small_spec(num_images=2, num_classes=3)))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["features.bin", "labels.csv", "manifest.json"]
    rows = (tmp_path / "labels.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("1,")


def test_corrupt_payload_byte(tmp_path):
    dp.save_dataset(tmp_path, dp.generate_synthetic(small_spec()))
    blob = bytearray((tmp_path / "features.bin").read_bytes())
    blob[17] ^= 0x01
    (tmp_path / "features.bin").write_bytes(bytes(blob))
    with pytest.raises(dp.ChecksumError):
        dp.load_dataset(tmp_path)


def test_corrupt_label_byte(tmp_path):
    dp.save_dataset(tmp_path, dp.generate_synthetic(small_spec()))
    text = (tmp_path / "labels.csv").read_text()
    (tmp_path / "labels.csv").write_text(text.replace(",-1", ",1", 1))
    with pytest.raises(dp.ChecksumError):
        dp.load_dataset(tmp_path)


def test_header_dims_inconsistent(tmp_path):
    dp.save_dataset(tmp_path, dp.generate_synthetic(small_spec()))
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["num_images"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(dp.DatasetFormatError) as e:
        dp.load_dataset(tmp_path)
    assert not isinstance(e.value, dp.ChecksumError)


def test_missing_file(tmp_path):
    with pytest.raises(dp.DatasetFormatError):
        dp.load_dataset(tmp_path)
