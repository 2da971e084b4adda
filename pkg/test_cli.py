import json
import os
import shutil
import tempfile
import unittest

import pandas as pd
from click.testing import CliRunner

from cli import EXIT_ESTIMATION, EXIT_INPUT, cli, resolve_threads
from errors import ConfigError
from test_drdtd import covariate_frame
from test_paneldata import six_cell_frame


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        """Set up a CLI runner and a scratch directory."""
        self.runner = CliRunner()
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up after each test method."""
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.tmpdir, name)

    def write_csv(self, frame, name="panel.csv"):
        path = self.path(name)
        frame.to_csv(path, index=False)
        return path

    def invoke(self, *args, **kwargs):
        return self.runner.invoke(cli, [str(a) for a in args], **kwargs)

    def test_estimate_dtd_on_twelve_rows(self):
        data = self.write_csv(six_cell_frame())
        out = self.path("est.csv")
        result = self.invoke("estimate", "--data", data, "--i", "i", "--model", "dtd", "--out", out)
        self.assertEqual(result.exit_code, 0, result.output)
        frame = pd.read_csv(out).set_index("estimand")
        self.assertAlmostEqual(frame.loc["ATT_delta", "point"], 6.0, places=9)
        self.assertAlmostEqual(frame.loc["Spillover_psi", "point"], 2.0, places=9)
        self.assertEqual(frame.loc["ATT_delta", "model"], "DTD_2P")
        partition = pd.read_csv(self.path("est.partition.csv"))
        self.assertEqual(list(partition["cell"][:6]), ["T1", "I1", "C1", "T0", "I0", "C0"])

    def test_estimate_json(self):
        data = self.write_csv(six_cell_frame())
        out = self.path("est.json")
        result = self.invoke(
            "estimate", "--data", data, "--i", "i", "--model", "td", "--out", out, "--format", "json"
        )
        self.assertEqual(result.exit_code, 0, result.output)
        with open(out, "r", encoding="utf-8") as f:
            payload = json.load(f)
        self.assertAlmostEqual(payload["estimates"][0]["point"], 5.0, places=9)
        self.assertEqual(payload["partition"]["counts"]["I1"], 1)

    def test_dtd_needs_interference_column(self):
        data = self.write_csv(six_cell_frame())
        result = self.invoke("estimate", "--data", data, "--model", "dtd", "--out", self.path("x.csv"))
        self.assertEqual(result.exit_code, EXIT_INPUT)
        self.assertIn("interference column required", result.output)

    def test_invalid_panel(self):
        frame = six_cell_frame()
        frame.loc[0, "g"] = 3
        data = self.write_csv(frame)
        result = self.invoke("estimate", "--data", data, "--i", "i", "--model", "dtd", "--out", self.path("x.csv"))
        self.assertEqual(result.exit_code, EXIT_INPUT)
        self.assertIn("non-binary", result.output)

    def test_empty_cell_is_an_estimation_failure(self):
        frame = six_cell_frame()
        data = self.write_csv(frame[frame["unit"] != "C0_0"])
        result = self.invoke("estimate", "--data", data, "--i", "i", "--model", "dtd", "--out", self.path("x.csv"))
        self.assertEqual(result.exit_code, EXIT_ESTIMATION)

    def test_doubly_robust_estimate(self):
        data = self.write_csv(covariate_frame(seed=3))
        out = self.path("dr.json")
        result = self.invoke(
            "estimate", "--data", data, "--i", "i", "--covariates", "x", "--model", "dr-dtd",
            "--bootstrap-b", 0, "--max-weight-share", 1.0, "--format", "json", "--out", out,
        )
        self.assertEqual(result.exit_code, 0, result.output)
        with open(out, "r", encoding="utf-8") as f:
            estimands = [row["estimand"] for row in json.load(f)["estimates"]]
        self.assertEqual(estimands, ["DR_delta", "DR_phi"])

    def test_doubly_robust_needs_covariates(self):
        data = self.write_csv(covariate_frame(seed=3))
        result = self.invoke("estimate", "--data", data, "--i", "i", "--model", "dr-td", "--out", self.path("x.csv"))
        self.assertEqual(result.exit_code, EXIT_INPUT)
        self.assertIn("covariate columns required", result.output)

    def test_generate_then_estimate(self):
        panel = self.path("sim.csv")
        result = self.invoke(
            "generate", "--design", "sim1", "--scenario", "S1", "--n-units", 200, "--psi1", 0.1,
            "--seed", 4, "--out", panel,
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("200 units x 10 periods", result.output)

        out = self.path("fe.csv")
        result = self.invoke(
            "estimate", "--data", panel, "--i", "i", "--model", "dtd3fe", "--post-from", 6, "--out", out
        )
        self.assertEqual(result.exit_code, 0, result.output)
        frame = pd.read_csv(out)
        self.assertEqual(list(frame["model"]), ["DTD_3FE", "DTD_3FE"])

        collapsed = self.path("two.csv")
        result = self.invoke(
            "estimate", "--data", panel, "--i", "i", "--model", "dtd", "--post-from", 6, "--out", collapsed
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(pd.read_csv(collapsed)["n_units"].iloc[0], 200)

    def test_generate_unknown_scenario(self):
        result = self.invoke("generate", "--design", "sim2", "--scenario", "S1", "--out", self.path("x.csv"))
        self.assertEqual(result.exit_code, EXIT_INPUT)

    def test_pretrend_tt_on_pure_controls(self):
        panel = self.path("sim.csv")
        self.invoke("generate", "--n-units", 200, "--seed", 1, "--out", panel)
        out = self.path("leads.csv")
        result = self.invoke(
            "pretrend", "--data", panel, "--i", "i", "--design", "tt", "--subset", "i0",
            "--base", 1, "--post-from", 6, "--out", out,
        )
        self.assertEqual(result.exit_code, 0, result.output)
        frame = pd.read_csv(out)
        self.assertEqual(len(frame), 13)
        self.assertEqual(frame["family"].iloc[-1], "joint")
        self.assertIn("joint s:g", result.output)

    def test_pretrend_reports_pruned_leads(self):
        panel = self.path("sim.csv")
        self.invoke("generate", "--n-units", 200, "--seed", 1, "--out", panel)
        frame = pd.read_csv(panel)
        treated_only = self.write_csv(frame[frame["s"] == 1], "treated.csv")
        result = self.invoke(
            "pretrend", "--data", treated_only, "--design", "did", "--base", 1, "--post-from", 6,
            "--out", self.path("leads.csv"),
        )
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("joint test unavailable (every s lead was pruned as collinear)", result.output)

    def test_pretrend_subset_needs_interference_column(self):
        data = self.write_csv(six_cell_frame())
        result = self.invoke(
            "pretrend", "--data", data, "--subset", "g0", "--base", 0, "--out", self.path("x.csv")
        )
        self.assertEqual(result.exit_code, EXIT_INPUT)

    def test_pretrend_needs_two_periods(self):
        frame = six_cell_frame()
        data = self.write_csv(frame[frame["time"] == 0])
        result = self.invoke(
            "pretrend", "--data", data, "--i", "i", "--design", "did", "--base", 0, "--out", self.path("x.csv")
        )
        self.assertEqual(result.exit_code, EXIT_INPUT)
        self.assertIn("at least two pre-policy periods", result.output)

    def test_simulate(self):
        config = self.path("study.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "grid": [{"id": "tiny", "design": "sim1", "scenario": "SUTVA", "config": {"n_units": 200}}],
                    "models": ["TD_3FE"],
                    "K": 2,
                    "threads": 1,
                    "bootstrap_b": 0,
                },
                f,
            )
        out = self.path("report.csv")
        result = self.invoke("simulate", "--config", config, "--out", out, "--raw")
        self.assertEqual(result.exit_code, 0, result.output)
        report = pd.read_csv(out)
        self.assertEqual(list(report["model"]), ["TD_3FE"])
        self.assertEqual(len(pd.read_csv(self.path("report.raw.csv"))), 2)

    def test_simulate_rejects_bad_config(self):
        config = self.path("study.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"preset": "table1", "K": 0}, f)
        result = self.invoke("simulate", "--config", config, "--out", self.path("r.csv"))
        self.assertEqual(result.exit_code, EXIT_INPUT)

    def test_thread_resolution(self):
        os.environ.pop("TRIDIFF_THREADS", None)
        self.assertIsNone(resolve_threads(None))
        self.assertEqual(resolve_threads(3), 3)
        os.environ["TRIDIFF_THREADS"] = "0"
        try:
            self.assertEqual(resolve_threads(None), 0)
            os.environ["TRIDIFF_THREADS"] = "many"
            with self.assertRaises(ConfigError):
                resolve_threads(None)
        finally:
            os.environ.pop("TRIDIFF_THREADS", None)
        with self.assertRaises(ConfigError):
            resolve_threads(-2)


if __name__ == "__main__":
    unittest.main(verbosity=2)
