"""
Unit tests for the command-line interface.
"""
import contextlib
import io
import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cli import EXIT_INVALID, EXIT_OK, main
from cvae_model import CvaeRegistrationModel
from grid_field import FieldKind, Grid, VectorField
from similarity import parse_report
from tensor_io import load_field, read_container, save_field, save_image, write_container
from tests.test_cvae_model import blob_image, small_config


class TestCli(unittest.TestCase):
    """Test commands end to end on tiny inputs."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.model_path = CvaeRegistrationModel(small_config(), seed=0).save(self.tmp / "model.bin")
        grid = small_config().grid
        self.moving = save_image(self.tmp / "moving.tc", blob_image(grid, (7, 8), 2.5))
        self.fixed = save_image(self.tmp / "fixed.tc", blob_image(grid, (8, 8), 3.0))

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def run_cli(self, *argv) -> int:
        with contextlib.redirect_stdout(io.StringIO()):
            return main([str(a) for a in argv])

    def test_exp_of_zero_field(self):
        """Test the exponential of a zero field is the identity."""
        v = VectorField(Grid((16, 16)), np.zeros((16, 16, 2)), kind=FieldKind.VELOCITY)
        path = save_field(self.tmp / "v.tc", v)
        out = self.tmp / "exp"
        self.assertEqual(self.run_cli("exp", "--velocity", path, "--out", out), EXIT_OK)
        report = parse_report((out / "report.txt").read_text(encoding="utf-8"))
        self.assertEqual(report["scaling_steps"], 0)
        self.assertEqual(report["neg_jac_fraction"], 0.0)
        self.assertEqual(report["min_jacobian"], 1.0)
        np.testing.assert_array_equal(load_field(out / "displacement.tc").vectors, 0.0)

    def test_register(self):
        """Test registration writes fields, code and metrics."""
        out = self.tmp / "reg"
        mask = np.zeros((16, 16))
        mask[5:11, 5:11] = 1.0
        mask_path = write_container(self.tmp / "mask.tc", mask)
        code = self.run_cli("register", "--model", self.model_path, "--moving", self.moving,
                            "--fixed", self.fixed, "--out", out, "--no-wall-time",
                            "--moving-mask", f"disk={mask_path}", "--fixed-mask", f"disk={mask_path}")
        self.assertEqual(code, EXIT_OK)
        for name in ("velocity.tc", "displacement.tc", "warped.tc", "jacobian.tc", "z.tc", "metrics.txt"):
            self.assertTrue((out / name).is_file(), name)
        metrics = parse_report((out / "metrics.txt").read_text(encoding="utf-8"))
        self.assertEqual(metrics["wall_ms"], 0.0)
        self.assertIn("dice_disk", metrics)

        transported = self.tmp / "transport"
        code = self.run_cli("transport", "--model", self.model_path, "--zcode", out / "z.tc",
                            "--target", self.fixed, "--out", transported)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((transported / "warped.tc").is_file())

    def test_transport_from_source_pair(self):
        """Test a code encoded from a source pair and applied to its own moving image matches register."""
        registered = self.tmp / "reg"
        self.assertEqual(self.run_cli("register", "--model", self.model_path, "--moving", self.moving,
                                      "--fixed", self.fixed, "--out", registered, "--no-wall-time"), EXIT_OK)
        transported = self.tmp / "transport"
        code = self.run_cli("transport", "--model", self.model_path, "--source-pair", self.moving, self.fixed,
                            "--target", self.moving, "--out", transported, "--no-wall-time")
        self.assertEqual(code, EXIT_OK)
        np.testing.assert_array_equal(load_field(transported / "velocity.tc").vectors,
                                      load_field(registered / "velocity.tc").vectors)
        z_registered, _ = read_container(registered / "z.tc")
        z_transported, _ = read_container(transported / "z.tc")
        np.testing.assert_array_equal(z_transported, z_registered)

    def test_invalid_registration_inputs(self):
        """Test usage and input errors exit with code 2."""
        out = self.tmp / "bad"
        self.assertEqual(self.run_cli("register", "--model", self.model_path, "--moving", self.moving,
                                      "--fixed", self.fixed, "--out", out, "--stochastic"), EXIT_INVALID)
        self.assertEqual(self.run_cli("register", "--model", self.model_path, "--moving", self.tmp / "none.tc",
                                      "--fixed", self.fixed, "--out", out), EXIT_INVALID)
        self.assertEqual(self.run_cli("register", "--model", self.tmp / "none.bin", "--moving", self.moving,
                                      "--fixed", self.fixed, "--out", out), EXIT_INVALID)
        self.assertEqual(self.run_cli("register", "--model", self.model_path, "--moving", self.moving,
                                      "--fixed", self.fixed, "--out", out, "--moving-mask", "nolabel"),
                         EXIT_INVALID)

    def test_sample(self):
        """Test seeded sampling, including a count of zero."""
        out = self.tmp / "samples"
        self.assertEqual(self.run_cli("sample", "--model", self.model_path, "--conditioning", self.moving,
                                      "--count", 2, "--seed", 4, "--out", out), EXIT_OK)
        first, _ = read_container(out / "sample_000_z.tc")
        self.assertEqual(first.shape, (4,))
        self.assertTrue((out / "sample_001_velocity.tc").is_file())
        empty = self.tmp / "none"
        self.assertEqual(self.run_cli("sample", "--model", self.model_path, "--conditioning", self.moving,
                                      "--count", 0, "--seed", 4, "--out", empty), EXIT_OK)
        self.assertEqual(list(empty.iterdir()), [])

    def test_seed_required(self):
        """Test commands drawing random numbers insist on a seed."""
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                self.run_cli("synth", "--out", self.tmp / "data")
        self.assertEqual(ctx.exception.code, 2)

    def test_synth_train_eval(self):
        """Test a tiny dataset can be generated, trained on and evaluated."""
        data = self.tmp / "data"
        self.assertEqual(self.run_cli("synth", "--out", data, "--n-per-class", 1, "--size", 16, 16,
                                      "--seed", 3), EXIT_OK)
        self.assertTrue((data / "manifest.csv").is_file())

        config = self.tmp / "run.json"
        model_cfg = small_config().model_dump(mode="json", by_alias=True)
        config.write_text(json.dumps({"model": model_cfg, "train": {"epochs": 1}}), encoding="utf-8")
        run = self.tmp / "run"
        self.assertEqual(self.run_cli("train", "--config", config, "--data", data, "--out", run), EXIT_OK)
        self.assertTrue((run / "loss_log.txt").is_file())
        self.assertTrue((run / "ckpt_2.bin").is_file())
        self.assertTrue((run / "run_config.json").is_file())

        report = self.tmp / "eval"
        self.assertEqual(self.run_cli("eval", "--model", run / "ckpt_2.bin", "--manifest", data / "manifest.csv",
                                      "--out", report), EXIT_OK)
        metrics = parse_report((report / "metrics.txt").read_text(encoding="utf-8"))
        self.assertEqual(metrics["n_cases"], 4)

    def test_bad_config_and_empty_manifest(self):
        """Test invalid configs and empty manifests exit with code 2."""
        config = self.tmp / "run.json"
        config.write_text(json.dumps({"train": {"learning_rate": -1}}), encoding="utf-8")
        self.assertEqual(self.run_cli("train", "--config", config, "--data", self.tmp, "--out", self.tmp / "r"),
                         EXIT_INVALID)
        manifest = self.tmp / "manifest.csv"
        manifest.write_text("filename,class_id,split\n", encoding="utf-8")
        self.assertEqual(self.run_cli("eval", "--model", self.model_path, "--manifest", manifest,
                                      "--out", self.tmp / "e"), EXIT_INVALID)


if __name__ == "__main__":
    unittest.main()
