import tempfile
import unittest
from pathlib import Path

import numpy as np

from tools.feature_dataset import (
    BadMagicError,
    Dataset,
    DimensionMismatchError,
    FeatureRecord,
    SyntheticConfig,
    TruncatedFileError,
    VersionMismatchError,
    decode_dataset,
    encode_dataset,
    generate_synthetic,
    known_class_ids,
    labeled_count,
    load_dataset,
    make_batches,
    save_dataset,
)


def _tiny_dataset(n=10, labeled=None):
    labeled = labeled if labeled is not None else [i % 2 == 0 for i in range(n)]
    rng = np.random.default_rng(3)
    records = [
        FeatureRecord(
            id=i,
            f_s=rng.standard_normal(4),
            f_t=rng.standard_normal(4),
            f_st=rng.standard_normal(4),
            gt_label=0 if labeled[i] else 1,
            is_labeled=labeled[i],
        )
        for i in range(n)
    ]
    return Dataset.from_records(records, num_classes_total=2, known_classes=(0,))


class SyntheticGeneratorTests(unittest.TestCase):
    def test_zero_noise_midpoint_and_shared_spatial_view(self):
        ds = generate_synthetic(
            SyntheticConfig(n_spatial_protos=2, temporal_per_spatial=2, dim=16, noise_sigma=0.0, samples_per_class=1)
        )
        self.assertEqual(len(ds), 4)
        expected = (ds.f_s + ds.f_t) / np.float32(2.0)
        np.testing.assert_array_equal(ds.f_st, expected)
        np.testing.assert_array_equal(ds.f_s[0], ds.f_s[1])
        np.testing.assert_array_equal(ds.f_s[2], ds.f_s[3])
        self.assertFalse(np.array_equal(ds.f_s[1], ds.f_s[2]))

    def test_same_seed_is_byte_identical(self):
        cfg = SyntheticConfig(seed=7, samples_per_class=20)
        self.assertEqual(encode_dataset(generate_synthetic(cfg)), encode_dataset(generate_synthetic(cfg)))

    def test_default_confounded_counts(self):
        ds = generate_synthetic(SyntheticConfig())
        self.assertEqual(ds.num_classes_total, 8)
        self.assertEqual(len(ds), 1600)
        self.assertEqual(ds.known_classes, (0, 2, 4, 6))
        self.assertEqual(int(ds.is_labeled.sum()), 400)
        self.assertTrue(np.all(np.isin(ds.gt_labels[ds.is_labeled], [0, 2, 4, 6])))

    def test_contiguous_split(self):
        self.assertEqual(known_class_ids(8, "contiguous"), (0, 1, 2, 3))
        self.assertEqual(known_class_ids(8, "even_odd"), (0, 2, 4, 6))
        ds = generate_synthetic(SyntheticConfig(samples_per_class=4, split="contiguous"))
        self.assertEqual(ds.known_classes, (0, 1, 2, 3))

    def test_labeled_count_rounds_before_ceiling(self):
        self.assertEqual(labeled_count(0.1, 30), 3)
        self.assertEqual(labeled_count(0.5, 200), 100)
        self.assertEqual(labeled_count(0.25, 3), 1)

    def test_invalid_config_is_rejected(self):
        with self.assertRaises(ValueError):
            SyntheticConfig(n_spatial_protos=0).validate()
        with self.assertRaises(ValueError):
            SyntheticConfig(labeled_fraction=0.0).validate()
        with self.assertRaises(ValueError):
            SyntheticConfig(split="random").validate()


class DatasetValidationTests(unittest.TestCase):
    def test_labeled_unknown_class_is_rejected(self):
        records = [
            FeatureRecord(0, np.zeros(2), np.zeros(2), np.zeros(2), gt_label=1, is_labeled=True),
            FeatureRecord(1, np.zeros(2), np.zeros(2), np.zeros(2), gt_label=0, is_labeled=True),
        ]
        with self.assertRaises(ValueError):
            Dataset.from_records(records, num_classes_total=2, known_classes=(0,))

    def test_duplicate_ids_are_rejected(self):
        records = [FeatureRecord(5, np.zeros(2), np.zeros(2), np.zeros(2), 0, False) for _ in range(2)]
        with self.assertRaises(ValueError):
            Dataset.from_records(records, num_classes_total=2, known_classes=(0,))

    def test_training_labels_hide_unlabeled_ground_truth(self):
        ds = _tiny_dataset(4)
        np.testing.assert_array_equal(ds.training_labels(), [0, -1, 0, -1])
        np.testing.assert_array_equal(ds.gt_labels, [0, 1, 0, 1])
        self.assertEqual(ds.unknown_classes, (1,))

    def test_columns_are_read_only(self):
        ds = _tiny_dataset(4)
        with self.assertRaises(ValueError):
            ds.f_s[0, 0] = 1.0


class FeatureFileTests(unittest.TestCase):
    def test_save_and_load_preserve_every_field(self):
        ds = generate_synthetic(SyntheticConfig(samples_per_class=5, seed=2))
        with tempfile.TemporaryDirectory() as tmpdir:
            path = save_dataset(ds, Path(tmpdir) / "nested" / "features.vgcd")
            loaded = load_dataset(path)
        self.assertEqual(loaded, ds)
        self.assertEqual(loaded.known_classes, ds.known_classes)

    def test_bad_magic(self):
        payload = bytearray(encode_dataset(_tiny_dataset()))
        payload[:4] = b"XXXX"
        with self.assertRaises(BadMagicError):
            decode_dataset(bytes(payload))

    def test_version_mismatch(self):
        payload = bytearray(encode_dataset(_tiny_dataset()))
        payload[4:6] = (2).to_bytes(2, "little")
        with self.assertRaises(VersionMismatchError):
            decode_dataset(bytes(payload))

    def test_truncation_names_record_index(self):
        payload = encode_dataset(_tiny_dataset(10))
        # id, label, flag and padding, then three 4-dim float32 views
        record_size = 16 + 3 * 4 * 4
        cut = len(payload) - 7 * record_size - 5
        with self.assertRaises(TruncatedFileError) as ctx:
            decode_dataset(payload[:cut])
        self.assertEqual(ctx.exception.record_index, 2)
        self.assertIn("record 2", str(ctx.exception))

    def test_expected_dimension(self):
        payload = encode_dataset(_tiny_dataset())
        with self.assertRaises(DimensionMismatchError):
            decode_dataset(payload, expected_dim=8)

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            with self.assertRaises(FileNotFoundError):
                load_dataset(Path(tmpdir) / "absent.vgcd")


class MakeBatchesTests(unittest.TestCase):
    def test_trailing_pair_is_kept(self):
        batches = make_batches(_tiny_dataset(10), batch_size=4, seed=0)
        self.assertEqual([b.size for b in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(10)))

    def test_trailing_singleton_is_dropped(self):
        batches = make_batches(_tiny_dataset(5), batch_size=4, seed=0)
        self.assertEqual([b.size for b in batches], [4])

    def test_labeled_only_and_determinism(self):
        ds = _tiny_dataset(10)
        first = make_batches(ds, batch_size=2, seed=11, labeled_only=True)
        second = make_batches(ds, batch_size=2, seed=11, labeled_only=True)
        self.assertEqual([b.tolist() for b in first], [b.tolist() for b in second])
        self.assertTrue(all(ds.is_labeled[i] for b in first for i in b))

    def test_batch_size_must_be_at_least_two(self):
        with self.assertRaises(ValueError):
            make_batches(_tiny_dataset(), batch_size=1, seed=0)

    def test_no_labeled_records(self):
        ds = _tiny_dataset(4, labeled=[False] * 4)
        with self.assertRaises(ValueError):
            make_batches(ds, batch_size=2, seed=0, labeled_only=True)


if __name__ == "__main__":
    unittest.main()
