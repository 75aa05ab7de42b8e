import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from typer.testing import CliRunner

from cli.__main__ import app
from cli.config import RUN_CONFIG_NAME, load_run_config
from cli.metrics import SWEEP_COLUMNS, read_metrics
from m2at import tensor as T


def _tiny_config(out_dir: Path) -> dict:
    return {
        "run.output_dir": str(out_dir),
        "run.seed": 1,
        "run.progress": False,
        "data.synth_classes": 3,
        "data.synth_train": 48,
        "data.synth_test": 24,
        "data.synth_shape": [1, 8, 8],
        "model.arch": "linear",
        "train.epochs": 2,
        "train.batch_size": 16,
        "train.eval_rounds": 2,
        "train.select_rounds": 2,
        "attack.rounds": 2,
        "eval.samples": 12,
        "eval.transfer_rounds": 2,
        "sweep.budgets": [0, 4, 8],
        "sweep.step_sizes": [2, 8],
        "sweep.rounds": 2,
    }


class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.out = self.tmp / "run"
        self.config = self.tmp / "tiny.yaml"
        self._write_config(_tiny_config(self.out))
        self.runner = CliRunner()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _write_config(self, values: dict) -> None:
        self.config.write_text(yaml.safe_dump(values), encoding="utf-8")

    def _invoke(self, *args: str):
        return self.runner.invoke(app, [str(a) for a in args])

    def _train(self):
        result = self._invoke("train", "--config", self.config)
        self.assertEqual(result.exit_code, 0, result.output)
        return result

    def test_train_writes_run_artifacts(self):
        result = self._train()
        for name in (RUN_CONFIG_NAME, "metrics.jsonl", "final.ckpt", "best.ckpt"):
            self.assertTrue((self.out / name).exists(), name)
        self.assertIn("Trained m2at for 2 epochs", result.output)
        records = read_metrics(self.out / "metrics.jsonl")
        self.assertTrue(any(r.metric == "loss" for r in records))
        self.assertEqual(len({r.run_id for r in records}), 1)

    def test_saved_run_config_reproduces_the_run(self):
        self._train()
        reloaded = load_run_config(self.out / RUN_CONFIG_NAME)
        self.assertEqual(reloaded, load_run_config(self.config))

    def test_reruns_write_identical_metrics(self):
        self._train()
        first = (self.out / "metrics.jsonl").read_text(encoding="utf-8")
        self._train()
        self.assertEqual((self.out / "metrics.jsonl").read_text(encoding="utf-8"), first)

    def test_same_seed_in_other_directories_writes_identical_metrics(self):
        first, second = self.tmp / "a", self.tmp / "b"
        for out in (first, second):
            result = self._invoke("train", "--config", self.config, "--seed", "7", "-o", out, "--no-progress")
            self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(
            (first / "metrics.jsonl").read_bytes(),
            (second / "metrics.jsonl").read_bytes(),
        )

    def test_flags_override_file_values(self):
        result = self._invoke("train", "--config", self.config, "--epochs", "1", "--method", "pgd_at")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("Trained pgd_at for 1 epochs", result.output)

    def test_eval_attack_sweep_and_transfer(self):
        self._train()
        final, best = self.out / "final.ckpt", self.out / "best.ckpt"

        result = self._invoke("eval", final, "--config", self.config)
        self.assertEqual(result.exit_code, 0, result.output)
        eval_csv = pd.read_csv(self.out / "eval.csv")
        self.assertEqual(list(eval_csv.columns), SWEEP_COLUMNS)
        self.assertEqual(list(eval_csv["attack"]), ["clean", "FGSM", "PGD-10", "PGD-20", "CW-20"])

        result = self._invoke("attack", final, "--config", self.config, "--count", "5")
        self.assertEqual(result.exit_code, 0, result.output)
        dump = np.load(self.out / "attack_dump.npz")
        self.assertEqual(dump["adversarial"].shape, (5, 1, 8, 8))
        self.assertLessEqual(np.abs(dump["delta"]).max(), 8 / 255 + 1e-9)

        result = self._invoke("sweep", final, best, "--config", self.config)
        self.assertEqual(result.exit_code, 0, result.output)
        sweep_csv = pd.read_csv(self.out / "sweep.csv")
        self.assertEqual(len(sweep_csv), 2 * 3 * 2 * 2)
        self.assertTrue((self.out / "sweep_alpha2.svg").exists())
        self.assertTrue((self.out / "sweep_alpha8.svg").exists())
        self.assertTrue((self.out / "sweep.vl.json").exists())

        result = self._invoke("transfer", final, best, "--config", self.config)
        self.assertEqual(result.exit_code, 0, result.output)
        transfer_csv = pd.read_csv(self.out / "transfer.csv")
        self.assertEqual(len(transfer_csv), 4)
        self.assertEqual(int(transfer_csv["white_box"].sum()), 2)

    def test_curves_from_two_runs(self):
        first, second = self.tmp / "seed1", self.tmp / "seed2"
        for out, seed in ((first, "1"), (second, "2")):
            result = self._invoke("train", "--config", self.config, "--seed", seed, "-o", out)
            self.assertEqual(result.exit_code, 0, result.output)
        plots_dir = self.tmp / "plots"
        result = self._invoke(
            "curves", first / "metrics.jsonl", second / "metrics.jsonl", "--config", self.config, "-o", plots_dir
        )
        self.assertEqual(result.exit_code, 0, result.output)
        curves = pd.read_csv(plots_dir / "curves.csv")
        self.assertEqual(list(curves["series"].unique()), ["seed1", "seed2"])
        # Two epochs, clean plus one robust accuracy each.
        self.assertEqual(len(curves), 2 * 2 * 2)
        self.assertEqual(sorted(curves["attack"].unique()), ["PGD-2", "clean"])
        self.assertTrue((plots_dir / "curves.svg").exists())
        self.assertTrue((plots_dir / "curves.vl.json").exists())
        self.assertIn("seed2 final epoch", result.output)

    def test_curves_rejects_a_log_without_eval_accuracy(self):
        log = self.tmp / "metrics.jsonl"
        log.write_text(
            '{"timestamp":"0","run_id":"r","phase":"train","epoch":0,"metric":"lr","value":0.1,"attack":null,"seed":0}\n',
            encoding="utf-8",
        )
        result = self._invoke("curves", log, "--config", self.config)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("no per-epoch eval accuracy", result.output)

    def test_transfer_needs_two_checkpoints(self):
        self._train()
        result = self._invoke("transfer", self.out / "final.ckpt", "--config", self.config)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("at least 2 checkpoints", result.output)

    def test_unknown_config_key(self):
        values = _tiny_config(self.out)
        values["train.warmup"] = 5
        self._write_config(values)
        result = self._invoke("train", "--config", self.config)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("unknown config key: train.warmup", result.output)

    def test_nested_config_rejected(self):
        self.config.write_text("train:\n  epochs: 3\n", encoding="utf-8")
        result = self._invoke("train", "--config", self.config)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("dotted keys", result.output)

    def test_missing_dataset_path(self):
        missing = self.tmp / "no-cifar"
        result = self._invoke("train", "--config", self.config, "--data", "cifar10", "--data-root", missing)
        self.assertEqual(result.exit_code, 1)
        self.assertIn(f"Dataset path not found: {missing}", result.output)

    def test_missing_checkpoint(self):
        result = self._invoke("eval", self.tmp / "absent.ckpt", "--config", self.config)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("Checkpoint not found", result.output)

    def test_gradcheck_passes(self):
        result = self._invoke("--verbose", "gradcheck")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("PASS", result.output)

    def test_gradcheck_catches_broken_backward(self):
        def doubled(grad, saved, inputs, needs):
            return (grad * saved * 2.0 if needs[0] else None,)

        with T.override_backward("relu", doubled):
            result = self._invoke("gradcheck")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("FAIL", result.output)


if __name__ == "__main__":
    unittest.main()
