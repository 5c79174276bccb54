import itertools
import unittest

import numpy as np

from tools.cluster_evaluation import EvalConfig, acc_metrics, estimate_k, evaluate, hungarian
from tools.feature_dataset import Dataset, SyntheticConfig, generate_synthetic


def _brute_force(cost):
    n = cost.shape[0]
    best, best_perm = None, None
    # permutations come out in lexicographic order, so the first optimum is the smallest
    for perm in itertools.permutations(range(n)):
        total = cost[np.arange(n), perm].sum()
        if best is None or total < best:
            best, best_perm = total, perm
    return best, list(best_perm)


def _separated_dataset(per_class=5):
    """Four known classes packed near the origin, four unknown classes far out."""
    centers = np.array(
        [[0, 0], [1, 0], [0, 1], [1, 1], [1000, 0], [0, 1000], [-1000, 0], [0, -1000]], dtype=np.float64
    )
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(8), per_class)
    points = centers[labels] + rng.normal(0.0, 0.01, size=(labels.size, 2))
    is_labeled = (labels < 4) & (np.tile(np.arange(per_class), 8) < 3)
    return Dataset(
        ids=np.arange(labels.size),
        f_s=points,
        f_t=points,
        f_st=points,
        gt_labels=labels,
        is_labeled=is_labeled,
        num_classes_total=8,
        known_classes=(0, 1, 2, 3),
    )


class HungarianTests(unittest.TestCase):
    def test_worked_example(self):
        match = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        self.assertEqual(match.cols.tolist(), [0, 1])
        self.assertEqual(match.total_cost, 2.0)

    def test_matches_brute_force_with_smallest_tie_break(self):
        rng = np.random.default_rng(0)
        for n in range(2, 8):
            for _ in range(100):
                cost = rng.integers(0, 4, size=(n, n)).astype(np.float64)
                best, perm = _brute_force(cost)
                match = hungarian(cost)
                self.assertEqual(match.total_cost, best)
                self.assertEqual(match.cols.tolist(), perm)

    def test_real_valued_costs_match_brute_force(self):
        rng = np.random.default_rng(1)
        for n in range(2, 8):
            for _ in range(100):
                cost = rng.random((n, n))
                best, _ = _brute_force(cost)
                self.assertAlmostEqual(hungarian(cost).total_cost, best, places=9)

    def test_rectangular_matrices(self):
        wide = hungarian(np.array([[5.0, 1.0, 3.0], [2.0, 4.0, 0.0]]))
        self.assertEqual(wide.as_dict(), {0: 1, 1: 2})
        self.assertEqual(wide.total_cost, 1.0)

        tall = hungarian(np.array([[3.0], [1.0], [2.0]]))
        self.assertEqual(tall.as_dict(), {1: 0})

    def test_rejects_bad_matrices(self):
        with self.assertRaises(ValueError):
            hungarian(np.zeros((0, 2)))
        with self.assertRaises(ValueError):
            hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class AccMetricsTests(unittest.TestCase):
    def test_perfect_up_to_relabeling(self):
        gt = np.array([0, 0, 1, 1, 2, 2])
        result = acc_metrics(np.array([5, 5, 3, 3, 9, 9]), gt, known_classes=[0])
        self.assertEqual((result.all_acc, result.old_acc, result.new_acc), (1.0, 1.0, 1.0))
        self.assertEqual(result.mapping, {3: 1, 5: 0, 9: 2})

    def test_invariant_under_cluster_permutation(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gt = rng.integers(0, 5, size=40)
            pred = rng.integers(0, 5, size=40)
            relabel = rng.permutation(5)
            first = acc_metrics(pred, gt, known_classes=[0, 1])
            second = acc_metrics(relabel[pred], gt, known_classes=[0, 1])
            self.assertEqual(first.all_acc, second.all_acc)

    def test_invariant_under_record_reordering(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gt = rng.integers(0, 6, size=50)
            pred = rng.integers(0, 7, size=50)
            order = rng.permutation(50)
            first = acc_metrics(pred, gt, known_classes=[0, 2, 4])
            second = acc_metrics(pred[order], gt[order], known_classes=[0, 2, 4])
            self.assertEqual(
                (first.all_acc, first.old_acc, first.new_acc),
                (second.all_acc, second.old_acc, second.new_acc),
            )

    def test_constant_prediction(self):
        result = acc_metrics(np.zeros(5, dtype=int), np.array([0, 0, 1, 1, 1]), known_classes=[0])
        self.assertAlmostEqual(result.all_acc, 0.6)
        self.assertEqual(result.old_acc, 0.0)
        self.assertEqual(result.new_acc, 1.0)

    def test_empty_subgroup_scores_zero(self):
        result = acc_metrics(np.array([0, 1]), np.array([0, 1]), known_classes=[0, 1])
        self.assertEqual(result.new_acc, 0.0)
        self.assertEqual(result.old_acc, 1.0)

    def test_shape_checks(self):
        with self.assertRaises(ValueError):
            acc_metrics(np.zeros(3), np.zeros(4), known_classes=[0])
        with self.assertRaises(ValueError):
            acc_metrics(np.zeros(0), np.zeros(0), known_classes=[0])


class EvaluateTests(unittest.TestCase):
    def test_raw_space_report(self):
        ds = generate_synthetic(SyntheticConfig(samples_per_class=10))
        report = evaluate(ds, None, k=8, space="raw_st", seed=0)
        self.assertEqual(report.k_used, 8)
        self.assertEqual(report.space, "raw_st")
        self.assertEqual(report.cluster_assignments.shape, (len(ds),))
        self.assertLessEqual(len(report.mapping), 8)
        for value in (report.all_acc, report.old_acc, report.new_acc):
            self.assertTrue(0.0 <= value <= 1.0)

    def test_separated_classes_are_recovered(self):
        report = evaluate(_separated_dataset(), None, k=8, space="raw_st")
        self.assertEqual(report.new_acc, 1.0)

    def test_errors(self):
        ds = generate_synthetic(SyntheticConfig(samples_per_class=4))
        with self.assertRaises(ValueError):
            evaluate(ds, None, k=1, space="raw_st")
        with self.assertRaises(ValueError):
            evaluate(ds, None, k=8, space="proj_stf")
        with self.assertRaises(ValueError):
            evaluate(ds, None, k=8, space="pixels")


class EstimateKTests(unittest.TestCase):
    def test_recovers_true_class_count(self):
        ds = _separated_dataset()
        estimate = estimate_k(ds, None, range(4, 17), seed=0, space="raw_st")
        self.assertEqual(estimate.k, 8)
        self.assertEqual(sorted(estimate.scores), list(range(4, 17)))
        self.assertEqual(estimate.scores[8], 1.0)
        self.assertLess(max(estimate.scores[k] for k in range(4, 8)), 1.0)

    def test_noise_free_twins_settle_below_true_count(self):
        # Labeled records cover only the known classes, so any k that keeps
        # them apart scores 1.0 and the smallest such k wins.
        ds = generate_synthetic(SyntheticConfig(noise_sigma=0.0))
        for seed in (0, 1, 2):
            estimate = estimate_k(ds, None, range(4, 17), seed=seed, space="raw_st")
            self.assertEqual(estimate.scores[8], 1.0)
            self.assertEqual(estimate.scores[estimate.k], 1.0)
            self.assertLess(estimate.k, 8)
            self.assertTrue(all(estimate.scores[k] < 1.0 for k in range(4, estimate.k)))

    def test_grid_checks(self):
        ds = _separated_dataset()
        with self.assertRaises(ValueError):
            estimate_k(ds, None, [], space="raw_st")
        with self.assertRaises(ValueError):
            estimate_k(ds, None, [2, 8], space="raw_st")
        with self.assertRaises(ValueError):
            estimate_k(ds, None, [4, 41], space="raw_st")

    def test_default_grid(self):
        ds = generate_synthetic(SyntheticConfig(samples_per_class=4))
        self.assertEqual(EvalConfig().resolve_grid(ds), tuple(range(4, 17)))
        self.assertEqual(EvalConfig(k_grid=(5, 9)).resolve_grid(ds), (5, 9))
        self.assertEqual(EvalConfig().resolve_k(8), 8)
        self.assertEqual(EvalConfig(k=6).resolve_k(8), 6)


if __name__ == "__main__":
    unittest.main()
