import contextlib
import csv
import io
import json
import tempfile
import unittest
from pathlib import Path

from discovery.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from discovery.config import RunConfig

SMALL_DATA = ["--set", "data.samples_per_class=6"]
SMALL_TRAIN = [
    "--set", "train.epochs_stage1=1",
    "--set", "train.epochs_stage2=1",
    "--set", "train.batch_size=16",
    "--set", "model.hidden=8",
    "--set", "model.proj_dim=4",
]
SMALL_GRADCHECK = [
    "--set", "data.dim=6",
    "--set", "gradcheck.hidden=6",
    "--set", "gradcheck.proj_dim=4",
]


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.messages = []

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv):
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            code = main(list(argv), logger=self.messages.append)
        return code, stdout.getvalue()

    def generate(self, *extra):
        path = self.tmp / "features.vgcd"
        code, _ = self.run_cli("gen", "--out", str(path), *SMALL_DATA, *extra)
        self.assertEqual(code, EXIT_OK)
        return path


class GenerateCommandTests(CliTestCase):
    def test_default_dataset(self):
        path = self.tmp / "features.vgcd"
        code, out = self.run_cli("gen", "--out", str(path))
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith("8 classes, 1600 records (400 labeled)"))
        self.assertTrue(path.exists())
        self.assertTrue((self.tmp / "features.vgcd.config").exists())

    def test_config_file_and_overrides(self):
        config = self.tmp / "run.config"
        config.write_text("data.classes_spatial = 2\ndata.samples_per_class = 3\nvote.levels = 4\n", encoding="utf-8")
        code, out = self.run_cli("gen", "--out", str(self.tmp / "f.vgcd"), "--config", str(config), "--set", "data.seed=9")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith("4 classes, 12 records"))

    def test_unknown_key_is_a_config_error(self):
        code, _ = self.run_cli("gen", "--out", str(self.tmp / "f.vgcd"), "--set", "train.learning_rate=1")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertTrue(any("Unknown config key" in m for m in self.messages))

    def test_malformed_set_and_bad_threads(self):
        code, _ = self.run_cli("gen", "--out", str(self.tmp / "f.vgcd"), "--set", "novalue")
        self.assertEqual(code, EXIT_CONFIG)
        code, _ = self.run_cli("--threads", "0", "gen", "--out", str(self.tmp / "f.vgcd"))
        self.assertEqual(code, EXIT_CONFIG)

    def test_missing_config_file(self):
        code, _ = self.run_cli("gen", "--out", str(self.tmp / "f.vgcd"), "--config", str(self.tmp / "absent.config"))
        self.assertEqual(code, EXIT_IO)


class EvaluateCommandTests(CliTestCase):
    def test_raw_space_without_checkpoint(self):
        data = self.generate()
        code, out = self.run_cli("eval", "--data", str(data), "--space", "raw_st", "--k", "8")
        self.assertEqual(code, EXIT_OK)
        report = json.loads(out)
        self.assertEqual(report["k_used"], 8)
        self.assertEqual(report["space"], "raw_st")

    def test_projected_space_needs_checkpoint(self):
        data = self.generate()
        code, _ = self.run_cli("eval", "--data", str(data))
        self.assertEqual(code, EXIT_CONFIG)

    def test_missing_checkpoint(self):
        data = self.generate()
        code, _ = self.run_cli("eval", "--data", str(data), "--checkpoint", str(self.tmp / "absent.vgck"))
        self.assertEqual(code, EXIT_IO)

    def test_corrupt_feature_file(self):
        data = self.generate()
        data.write_bytes(b"XXXX" + data.read_bytes()[4:])
        code, _ = self.run_cli("eval", "--data", str(data), "--space", "raw_st")
        self.assertEqual(code, EXIT_IO)
        self.assertTrue(any(m.startswith("I/O error") for m in self.messages))

    def test_estimated_k(self):
        data = self.generate()
        code, out = self.run_cli("eval", "--data", str(data), "--space", "raw_st", "--estimate-k", "--k-grid", "4:10")
        self.assertEqual(code, EXIT_OK)
        report = json.loads(out)
        self.assertEqual(sorted(report["k_scores"], key=int), [str(k) for k in range(4, 11)])
        self.assertIn(report["k_used"], range(4, 11))


class TrainingCommandTests(CliTestCase):
    def test_train_eval_vote_report(self):
        data = self.generate()
        checkpoint, metrics = self.tmp / "model.vgck", self.tmp / "metrics.csv"
        code, _ = self.run_cli(
            "train", "--data", str(data), "--out", str(checkpoint), "--metrics", str(metrics), *SMALL_TRAIN
        )
        self.assertEqual(code, EXIT_OK)
        with metrics.open(newline="", encoding="utf-8") as handle:
            self.assertEqual([row["epoch"] for row in csv.DictReader(handle)], ["1", "2"])
        self.assertTrue((self.tmp / "model.vgck.config").exists())

        report_path = self.tmp / "eval.json"
        code, _ = self.run_cli(
            "eval", "--data", str(data), "--checkpoint", str(checkpoint), "--out", str(report_path), *SMALL_TRAIN
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(report_path.read_text(encoding="utf-8"))["space"], "proj_stf")
        self.assertEqual(RunConfig.load(self.tmp / "eval.json.config"), RunConfig.load(self.tmp / "model.vgck.config"))

        votes = self.tmp / "votes.csv"
        code, _ = self.run_cli("vote", "--data", str(data), "--checkpoint", str(checkpoint), "--out", str(votes))
        self.assertEqual(code, EXIT_OK)
        with votes.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(len(rows), 49)
        self.assertEqual(rows[1][0], "5")
        self.assertTrue((self.tmp / "votes_scores.csv").exists())
        for name in ("votes.csv.config", "votes_scores.csv.config"):
            self.assertTrue((self.tmp / name).exists(), name)

        markdown = self.tmp / "report.md"
        code, _ = self.run_cli("report", "--metrics", str(metrics), "--eval-report", str(report_path), "--out", str(markdown))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("## Training Curve", markdown.read_text(encoding="utf-8"))

    def test_checkpoint_dimension_must_match_data(self):
        data = self.generate()
        checkpoint = self.tmp / "model.vgck"
        code, _ = self.run_cli(
            "train", "--data", str(data), "--out", str(checkpoint), "--metrics", str(self.tmp / "m.csv"),
            "--set", "train.epochs_stage1=0", "--set", "train.epochs_stage2=0",
        )
        self.assertEqual(code, EXIT_OK)
        other = self.tmp / "other.vgcd"
        self.run_cli("gen", "--out", str(other), *SMALL_DATA, "--set", "data.dim=8")
        code, _ = self.run_cli("eval", "--data", str(other), "--checkpoint", str(checkpoint))
        self.assertEqual(code, EXIT_IO)

    def test_sweep_and_ablate(self):
        data = self.generate()
        sweep_csv = self.tmp / "sweep.csv"
        code, out = self.run_cli(
            "sweep", "--data", str(data), "--key", "vote.eta", "--values", "0.3,0.7", "--out", str(sweep_csv), *SMALL_TRAIN
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(out.strip().splitlines()), 2)
        with sweep_csv.open(newline="", encoding="utf-8") as handle:
            self.assertEqual([row["value"] for row in csv.DictReader(handle)], ["0.3", "0.7"])
        self.assertTrue((self.tmp / "sweep.csv.config").exists())

        ablate_csv = self.tmp / "ablate.csv"
        code, out = self.run_cli(
            "ablate", "--data", str(data), "--out", str(ablate_csv), "--variants", "baseline,full", "--seeds", "0,1",
            *SMALL_TRAIN,
        )
        self.assertEqual(code, EXIT_OK)
        self.assertIn("baseline\tmedian_all_acc=", out)
        with ablate_csv.open(newline="", encoding="utf-8") as handle:
            self.assertEqual(len(list(csv.DictReader(handle))), 4)
        self.assertTrue((self.tmp / "ablate.csv.config").exists())

    def test_sweep_rejects_unknown_key_and_variant(self):
        data = self.generate()
        code, _ = self.run_cli("sweep", "--data", str(data), "--key", "vote.bogus", "--values", "1", "--out", str(self.tmp / "s.csv"))
        self.assertEqual(code, EXIT_CONFIG)
        code, _ = self.run_cli("ablate", "--data", str(data), "--out", str(self.tmp / "a.csv"), "--variants", "nothing")
        self.assertEqual(code, EXIT_CONFIG)

    def test_pipeline(self):
        out_dir = self.tmp / "run"
        code, out = self.run_cli("pipeline", "--out-dir", str(out_dir), *SMALL_DATA, *SMALL_TRAIN)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("all_acc", json.loads(out))
        for name in ("features.vgcd", "model.vgck", "metrics.csv", "eval_report.json"):
            self.assertTrue((out_dir / name).exists(), name)
        self.assertTrue((out_dir / "eval_report.json.config").exists())

    def test_identical_configs_give_identical_artifacts(self):
        for name in ("a", "b"):
            code, _ = self.run_cli("pipeline", "--out-dir", str(self.tmp / name), *SMALL_DATA, *SMALL_TRAIN)
            self.assertEqual(code, EXIT_OK)
        for artifact in ("features.vgcd", "model.vgck", "metrics.csv", "eval_report.json"):
            first = (self.tmp / "a" / artifact).read_bytes()
            self.assertEqual(first, (self.tmp / "b" / artifact).read_bytes(), artifact)


class GradCheckCommandTests(CliTestCase):
    def test_passes_in_binary64(self):
        code, out = self.run_cli("gradcheck", *SMALL_GRADCHECK)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("\tPASS", out.strip().splitlines()[-1])

    def test_corrupted_gradient_fails(self):
        code, out = self.run_cli("gradcheck", "--corrupt", "gate.b", *SMALL_GRADCHECK)
        self.assertEqual(code, EXIT_CHECK_FAILED)
        self.assertIn("gate.b\t", out)

    def test_unknown_tensor(self):
        code, _ = self.run_cli("gradcheck", "--corrupt", "gate.z", *SMALL_GRADCHECK)
        self.assertEqual(code, EXIT_CONFIG)


if __name__ == "__main__":
    unittest.main()
