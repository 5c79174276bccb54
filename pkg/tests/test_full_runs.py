"""Full-size runs; enable with GCD_RUN_SLOW_TESTS=1."""

import tempfile
import time
import unittest
from pathlib import Path

from discovery.config import AppConfig, RunConfig
from discovery.services.experiments import run_ablation
from discovery.services.pipeline_runner import run_generate, run_gradcheck, run_pipeline

RUN_SLOW = AppConfig.from_env().run_slow_tests


@unittest.skipUnless(RUN_SLOW, "set GCD_RUN_SLOW_TESTS=1 to run full-size checks")
class FullRunTests(unittest.TestCase):
    def test_default_gradcheck_in_binary64(self):
        started = time.monotonic()
        report = run_gradcheck(RunConfig())
        self.assertTrue(report.passed, report.errors)
        self.assertLess(report.max_error, 1e-6)
        self.assertLess(time.monotonic() - started, 60.0)

    def test_end_to_end_runs_are_byte_identical(self):
        config = RunConfig().with_overrides({"train.epochs_stage1": "3", "train.epochs_stage2": "3"})
        with tempfile.TemporaryDirectory() as tmpdir:
            first = run_pipeline(config, Path(tmpdir) / "a")
            second = run_pipeline(config, Path(tmpdir) / "b")
            for name in ("features.vgcd", "model.vgck", "metrics.csv", "eval_report.json"):
                self.assertEqual(
                    (Path(tmpdir) / "a" / name).read_bytes(),
                    (Path(tmpdir) / "b" / name).read_bytes(),
                    name,
                )
        self.assertEqual(first["eval"], second["eval"])

    def test_full_model_beats_the_baseline(self):
        config = RunConfig().with_overrides({"train.eval_every_epoch": "false"})
        with tempfile.TemporaryDirectory() as tmpdir:
            data = Path(tmpdir) / "features.vgcd"
            run_generate(config, data)
            medians = run_ablation(
                config, data, Path(tmpdir) / "ablate.csv", seeds=[0, 1, 2], variants=("baseline", "full")
            )
        self.assertGreaterEqual(medians["full"], medians["baseline"] + 0.05, medians)
        self.assertGreaterEqual(medians["full"], 0.80, medians)


if __name__ == "__main__":
    unittest.main()
