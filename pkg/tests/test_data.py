"""IDX parsing against hand-composed fixtures, plus the synthetic generator."""

import struct

import numpy as np
import pytest

from npattack.data import downscale, load_idx, synth_dataset
from npattack.errors import ContractViolation, IdxFormatError


def write_idx_pair(tmp_path, pixels, labels, rows=2, cols=2,
                   image_magic=0x00000803, label_magic=0x00000801):
    n = len(labels)
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", image_magic, n, rows, cols))
        fh.write(bytes(pixels))
    with open(lab_path, "wb") as fh:
        fh.write(struct.pack(">II", label_magic, n))
        fh.write(bytes(labels))
    return img_path, lab_path


def test_hand_built_single_image(tmp_path):
    img, lab = write_idx_pair(tmp_path, [0, 85, 170, 255], [7])
    ds = load_idx(img, lab)
    assert ds.images.shape == (1, 2, 2, 1)
    expected = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    assert np.abs(ds.images.ravel() - expected).max() < 1e-9
    assert ds.labels.tolist() == [7]


def test_label_magic_on_image_path_rejected(tmp_path):
    img, lab = write_idx_pair(tmp_path, [0, 0, 0, 0], [1])
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(lab, lab)


def test_empty_file_is_truncation_error(tmp_path):
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(empty, empty)


def test_truncated_payload(tmp_path):
    img, lab = write_idx_pair(tmp_path, [0, 0], [1])  # promises 4 pixels, has 2
    with pytest.raises(IdxFormatError, match="truncated image payload"):
        load_idx(img, lab)


def test_count_mismatch(tmp_path):
    one = tmp_path / "one"
    two = tmp_path / "two"
    one.mkdir()
    two.mkdir()
    img, _ = write_idx_pair(one, [0] * 4, [1])
    _, lab = write_idx_pair(two, [0] * 8, [1, 2])
    with pytest.raises(IdxFormatError, match="does not match"):
        load_idx(img, lab)


def test_gzip_transparent(tmp_path):
    import gzip

    img, lab = write_idx_pair(tmp_path, [0, 85, 170, 255], [3])
    gz = tmp_path / "images.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    ds = load_idx(gz, lab)
    assert ds.labels.tolist() == [3]


class TestSyntheticDataset:
    def test_same_seed_byte_identical(self):
        a = synth_dataset(4, 14, 40, seed=5)
        b = synth_dataset(4, 14, 40, seed=5)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seed_differs(self):
        a = synth_dataset(4, 14, 40, seed=5)
        b = synth_dataset(4, 14, 40, seed=6)
        assert a.images.tobytes() != b.images.tobytes()

    def test_values_in_unit_interval(self):
        ds = synth_dataset(10, 14, 100, seed=0)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_labels_balanced_round_robin(self):
        ds = synth_dataset(5, 8, 25, seed=1)
        assert np.bincount(ds.labels).tolist() == [5] * 5

    def test_rejects_single_class(self):
        with pytest.raises(ContractViolation):
            synth_dataset(1, 8, 10, seed=0)


def test_downscale_mean_pools():
    ds = synth_dataset(3, 4, 6, seed=2)
    down = downscale(ds, 2)
    assert down.images.shape == (6, 2, 2, 1)
    manual = ds.images[0, :2, :2, 0].mean()
    assert down.images[0, 0, 0, 0] == pytest.approx(manual)


def test_downscale_rejects_nondivisible():
    ds = synth_dataset(3, 5, 4, seed=2)
    with pytest.raises(ContractViolation):
        downscale(ds, 2)
