import gzip
import struct

import numpy as np
import pytest

from src.data import (
    REGRESSION_INTERVALS,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    SplitError,
    load_dataset,
    locate_dataset,
    parse_idx,
    regression_dataset,
    split,
    subsample,
    target_function,
    write_idx,
)
from src.models import SplitSpec
from tests.conftest import write_idx_pair


class TestIdx:
    def test_round_trip_is_exact(self, idx_dataset):
        images, labels = write_idx(idx_dataset, (2, 3))
        parsed = parse_idx(images, labels)
        np.testing.assert_array_equal(parsed.inputs, idx_dataset.inputs)
        np.testing.assert_array_equal(parsed.targets, idx_dataset.targets)

    def test_gzip_is_inflated(self, idx_dataset):
        images, labels = write_idx(idx_dataset)
        parsed = parse_idx(gzip.compress(images), gzip.compress(labels))
        np.testing.assert_array_equal(parsed.inputs, idx_dataset.inputs)

    def test_pixels_scale_to_unit_interval(self):
        images = struct.pack(">4I", 0x803, 1, 1, 2) + bytes([0, 255])
        labels = struct.pack(">2I", 0x801, 1) + bytes([7])
        parsed = parse_idx(images, labels)
        np.testing.assert_array_equal(parsed.inputs, [[0.0, 1.0]])
        assert parsed.labels[0] == 7

    def test_corrupt_magic(self, idx_dataset):
        images, labels = write_idx(idx_dataset)
        with pytest.raises(IdxMagicError):
            parse_idx(struct.pack(">I", 0x804) + images[4:], labels)

    def test_truncated_images(self, idx_dataset):
        images, labels = write_idx(idx_dataset)
        with pytest.raises(IdxTruncatedError):
            parse_idx(images[:-1], labels)

    def test_truncated_header(self, idx_dataset):
        _, labels = write_idx(idx_dataset)
        with pytest.raises(IdxTruncatedError):
            parse_idx(b"\x00\x00\x08", labels)

    def test_count_mismatch(self, idx_dataset):
        images, _ = write_idx(idx_dataset)
        _, labels = write_idx(idx_dataset.subset(range(10)))
        with pytest.raises(IdxCountMismatchError):
            parse_idx(images, labels)

    def test_errors_are_distinct(self):
        assert len({IdxMagicError, IdxTruncatedError, IdxCountMismatchError}) == 3
        assert not issubclass(IdxMagicError, IdxTruncatedError)


def test_locate_accepts_gzip(tmp_path, idx_dataset):
    write_idx_pair(tmp_path / "fashion_mnist", idx_dataset, "test")
    image_path, _ = locate_dataset(tmp_path, "fashion_mnist", "test")
    gz = image_path.with_name(image_path.name + ".gz")
    gz.write_bytes(gzip.compress(image_path.read_bytes()))
    image_path.unlink()
    assert locate_dataset(tmp_path, "fashion_mnist", "test")[0] == gz
    assert len(load_dataset(tmp_path, "fashion_mnist", "test")) == len(idx_dataset)


def test_locate_reports_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        locate_dataset(tmp_path, "mnist", "train")


def test_split_is_disjoint_and_seeded(idx_dataset):
    spec = SplitSpec(train_count=10, eval_count=8, reserve_count=6, seed=3)
    train, held_out, reserve = split(idx_dataset, spec)
    assert (len(train), len(held_out), len(reserve)) == (10, 8, 6)
    rows = {row.tobytes() for part in (train, held_out, reserve) for row in part.inputs}
    assert len(rows) == len({row.tobytes() for row in idx_dataset.inputs})
    again, _, _ = split(idx_dataset, spec)
    np.testing.assert_array_equal(train.inputs, again.inputs)


def test_split_too_large(idx_dataset):
    with pytest.raises(SplitError):
        split(idx_dataset, SplitSpec(train_count=20, eval_count=5, reserve_count=0))


def test_subsample(idx_dataset):
    assert len(subsample(idx_dataset, 5, seed=1)) == 5
    assert subsample(idx_dataset, 100) is idx_dataset


def test_target_function():
    np.testing.assert_allclose(target_function(np.array([-4.0, -3.5, -3.0, 0.0, 3.5, 4.0])), [0.5, 0.25, 0.0, 0.0, 0.25, 0.5])


def test_regression_samples_lie_in_sampling_set():
    data = regression_dataset(100, noise=0.02, seed=0)
    x = data.inputs[:, 0]
    inside = np.zeros(len(x), dtype=bool)
    for lo, hi in REGRESSION_INTERVALS:
        inside |= (x >= lo) & (x <= hi)
    assert len(data) == 100 and inside.all()
    assert np.abs(data.targets[:, 0] - target_function(x)).max() <= 6 * 0.02


def test_regression_dataset_is_seeded():
    a, b = regression_dataset(seed=4), regression_dataset(seed=4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
