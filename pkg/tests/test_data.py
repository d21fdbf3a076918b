"""IDX parsing, feature CSV, stratified split, normalization, schedules."""

import struct

import numpy as np
import pytest

from cadet.data import (
    BatchSchedule,
    SplitSpec,
    apply_normalization,
    build_stream,
    fit_normalization,
    load_feature_csv,
    load_idx,
    normalize_features,
    stratified_split,
    write_feature_csv,
    write_idx,
)
from cadet.errors import ConfigError, DataError, FormatError
from cadet.pipeline import Sample


def write_pair(tmp_path, pixels, labels):
    images_path = tmp_path / "images.idx"
    labels_path = tmp_path / "labels.idx"
    write_idx(images_path, labels_path, pixels, labels)
    return images_path, labels_path


class TestLoadIdx:
    def test_round_trip_preserves_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(5, 7, 7), dtype=np.uint8)
        labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
        paths = write_pair(tmp_path, pixels, labels)
        ds = load_idx(*paths)
        assert ds.images.shape == (5, 49)
        np.testing.assert_array_equal(
            np.round(ds.images * 255).astype(np.uint8), pixels.reshape(5, 49)
        )
        np.testing.assert_array_equal(ds.labels, labels)

    def test_two_images_28x28(self, tmp_path):
        pixels = np.zeros((2, 28, 28), dtype=np.uint8)
        ds = load_idx(*write_pair(tmp_path, pixels, np.array([3, 7], dtype=np.uint8)))
        assert ds.images.shape == (2, 784)
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_values_scaled_to_unit_interval(self, tmp_path):
        pixels = np.full((1, 2, 2), 255, dtype=np.uint8)
        ds = load_idx(*write_pair(tmp_path, pixels, np.array([0], dtype=np.uint8)))
        np.testing.assert_array_equal(ds.images, np.ones((1, 4)))

    def test_wrong_image_magic(self, tmp_path):
        paths = write_pair(
            tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), np.array([0], np.uint8)
        )
        raw = paths[0].read_bytes()
        paths[0].write_bytes(struct.pack(">I", 0x00000802) + raw[4:])
        with pytest.raises(FormatError, match="magic"):
            load_idx(*paths)

    def test_truncated_file(self, tmp_path):
        paths = write_pair(
            tmp_path, np.zeros((2, 3, 3), dtype=np.uint8), np.array([0, 1], np.uint8)
        )
        raw = paths[0].read_bytes()
        paths[0].write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            load_idx(*paths)

    def test_count_mismatch_is_pairing_error(self, tmp_path):
        images_path = tmp_path / "images.idx"
        labels_path = tmp_path / "labels.idx"
        with open(images_path, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 2, 2))
            f.write(bytes(8))
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 3))
            f.write(bytes(3))
        with pytest.raises(FormatError, match="pair"):
            load_idx(images_path, labels_path)


class TestFeatureCsv:
    def test_minimal_document(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("label,f0,f1\n0,0.0,1.0\n")
        samples = load_feature_csv(path)
        assert len(samples) == 1
        assert samples[0].label == 0
        np.testing.assert_array_equal(samples[0].features, [0.0, 1.0])

    def test_empty_body_raises(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("label,f0\n")
        with pytest.raises(DataError):
            load_feature_csv(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("label,f0,f1,f2\n0,1.0,2.0,3.0\n1,1.0,2.0\n")
        with pytest.raises(FormatError, match=":3"):
            load_feature_csv(path)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("label,f0\n0,abc\n")
        with pytest.raises(FormatError, match=":2"):
            load_feature_csv(path)

    def test_write_read_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        samples = [
            Sample(rng.normal(size=4), int(rng.integers(0, 3)), -1, i)
            for i in range(10)
        ]
        path = tmp_path / "f.csv"
        write_feature_csv(path, samples)
        back = load_feature_csv(path)
        for a, b in zip(samples, back):
            assert a.label == b.label
            np.testing.assert_array_equal(a.features, b.features)


def make_samples(counts, width=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for label, n in counts.items():
        for _ in range(n):
            out.append(Sample(rng.normal(size=width), label, -1, len(out)))
    return out


class TestStratifiedSplit:
    def test_eighty_twenty_counts(self):
        samples = make_samples({0: 10, 1: 10})
        train, test = stratified_split(samples, SplitSpec(0.8, 7))
        for c in (0, 1):
            assert sum(1 for s in train if s.label == c) == 8
            assert sum(1 for s in test if s.label == c) == 2

    def test_same_seed_same_membership(self):
        samples = make_samples({0: 9, 1: 14})
        a = stratified_split(samples, SplitSpec(0.8, 3))
        b = stratified_split(samples, SplitSpec(0.8, 3))
        assert [s.sample_id for s in a[0]] == [s.sample_id for s in b[0]]
        assert [s.sample_id for s in a[1]] == [s.sample_id for s in b[1]]

    def test_partition_is_exact(self):
        samples = make_samples({0: 7, 1: 5, 2: 6})
        train, test = stratified_split(samples, SplitSpec(0.6, 11))
        train_ids = {s.sample_id for s in train}
        test_ids = {s.sample_id for s in test}
        assert not (train_ids & test_ids)
        assert train_ids | test_ids == {s.sample_id for s in samples}

    def test_single_sample_class_raises(self):
        with pytest.raises(DataError):
            stratified_split(make_samples({0: 1, 1: 5}), SplitSpec(0.8, 0))

    def test_bad_fraction_raises(self):
        with pytest.raises(ConfigError):
            SplitSpec(1.0, 0)


class TestNormalization:
    def test_constant_coordinate_floored(self):
        samples = [Sample(np.array([5.0, i * 1.0]), 0, -1, i) for i in range(4)]
        normed, stats = normalize_features(samples)
        assert all(s.features[0] == 0.0 for s in normed)

    def test_zscore_arithmetic(self):
        stats = fit_normalization(
            [Sample(np.array([3.0]), 0, -1, 0), Sample(np.array([7.0]), 0, -1, 1)]
        )
        out = apply_normalization([Sample(np.array([7.0]), 0, -1, 2)], stats)
        assert out[0].features[0] == pytest.approx(1.0)

    def test_train_set_is_centered(self):
        rng = np.random.default_rng(9)
        samples = [Sample(rng.normal(5, 2, size=3), 0, -1, i) for i in range(50)]
        normed, stats = normalize_features(samples)
        X = np.stack([s.features for s in normed])
        np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-9)

    def test_stats_frozen_for_other_sets(self):
        train = [Sample(np.array([0.0]), 0, -1, 0), Sample(np.array([2.0]), 0, -1, 1)]
        other = [Sample(np.array([4.0]), 0, -1, 2)]
        train_n, other_n, stats = normalize_features(train, other)
        assert other_n[0].features[0] == pytest.approx(3.0)


class TestSchedule:
    def test_overlapping_batches_rejected(self):
        with pytest.raises(ConfigError):
            BatchSchedule(((0, 1), (1, 2)), ())

    def test_aux_overlap_rejected(self):
        with pytest.raises(ConfigError):
            BatchSchedule(((0, 1), (2, 3)), (3, 9))

    def test_build_stream_labels_and_truth(self):
        samples = make_samples({0: 4, 1: 4, 2: 4})
        schedule = BatchSchedule(((0, 1), (2,)), ())
        stream, truth = build_stream(samples, schedule)
        assert len(stream) == 2
        assert all(s.label is not None and s.batch_id == 0 for s in stream[0])
        assert all(s.label is None and s.batch_id == 1 for s in stream[1])
        for s in stream[1]:
            assert truth[s.sample_id] == 2

    def test_missing_batch_class_raises(self):
        samples = make_samples({0: 4, 1: 4})
        with pytest.raises(DataError):
            build_stream(samples, BatchSchedule(((0, 1), (5,)), ()))
