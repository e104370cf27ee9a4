import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest.mock import patch

from django.core.management import call_command
from django.test import SimpleTestCase, override_settings

from core.artifacts import read_csv, read_field, read_grid, read_json, write_json
from core.covariance_models import BivariateMaternParams, FullBivariateMatern
from core.exceptions import NumericalError, OptimizationError
from core.fit import fit
from core.management.commands._base import EXIT_NUMERICAL, EXIT_USER_ERROR, model_document
from core.management.commands.darcy import PROFILE_HEADER
from scripts.cli import main

TINY_CONFIG = {
    "schema_version": 1,
    "name": "tiny",
    "seed": 11,
    "grid": {"extent": [1.0, 1.0], "shape": [16, 16]},
    "fine": {"sigma": 1.0, "lam": 0.1, "nu": 0.5},
    "observations": {"n_fine": 20, "n_coarse": 20, "noise_sigma": 0.05, "window_cells": 4},
    "nystrom": {"shape": [8, 8]},
    "fit": {"n_starts": 1, "max_evals": 200, "max_iter": 10, "quadrature_order": 4},
    "darcy": {"n_head_obs": 5, "n_real": 4},
}

PARAMS = BivariateMaternParams(
    lambda_c=0.3,
    lambda_f=0.1,
    lambda_cf=0.169,
    nu_c=1.5,
    nu_f=0.5,
    sigma_c=0.8,
    sigma_f=1.0,
    rho=0.4,
    sigma_nc=0.01,
    sigma_nf=0.01,
)

# coarse data nearly as informative as fine data
STRONG_PARAMS = BivariateMaternParams(
    lambda_c=0.1,
    lambda_f=0.1,
    lambda_cf=0.1,
    nu_c=0.5,
    nu_f=0.5,
    sigma_c=0.9,
    sigma_f=1.0,
    rho=0.95,
    sigma_nc=0.01,
    sigma_nf=0.01,
)


class CommandTestCase(SimpleTestCase):
    """Runs generate once and shares its outputs with every test."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.root = Path(tempfile.mkdtemp())
        cls.config = cls.root / "tiny.json"
        cls.config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
        cls.params = cls.root / "params.json"
        write_json(cls.params, model_document(FullBivariateMatern(PARAMS)))
        cls.strong_params = cls.root / "strong_params.json"
        write_json(cls.strong_params, model_document(FullBivariateMatern(STRONG_PARAMS)))
        cls.generated = cls.root / "generate"
        call_command("generate", config=str(cls.config), out_dir=str(cls.generated), stdout=StringIO())
        cls.dataset = cls.generated / "dataset.csv"

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)
        super().tearDownClass()

    def command(self, name, **options):
        out = StringIO()
        options.setdefault("config", str(self.config))
        call_command(name, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()


class GenerateCommandTests(CommandTestCase):
    def test_outputs(self):
        header, rows = read_csv(self.dataset)
        self.assertEqual(header, ["scale", "x", "y", "value", "noise_sigma"])
        self.assertEqual(len(rows), 40)
        fine = read_field(self.generated / "fine_field.grd")
        self.assertEqual(fine.grid.shape, (16, 16))
        coarse = read_field(self.generated / "coarse_field.grd")
        self.assertLess(coarse.values.var(), fine.values.var())
        true_params = read_json(self.generated / "true_params.json")
        self.assertEqual(true_params["model"], "blockavg")
        self.assertLessEqual(true_params["true_sigma_c"], 1.0)

    def test_manifest(self):
        manifest = read_json(self.generated / "manifest.json")
        self.assertEqual(manifest["command"], "generate")
        self.assertEqual(manifest["seeds"]["base"], 11)
        paths = {entry["path"] for entry in manifest["outputs"]}
        self.assertIn("dataset.csv", paths)
        self.assertEqual(manifest["stages"]["nystrom"]["rank"], 64)

    def test_same_seed_same_data(self):
        again = self.root / "again"
        self.command("generate", out_dir=str(again))
        self.assertEqual(self.dataset.read_bytes(), (again / "dataset.csv").read_bytes())

    @override_settings(TIME_ZONE="Asia/Kolkata")
    def test_manifest_timestamps_follow_time_zone(self):
        out_dir = self.root / "kolkata"
        self.command("generate", out_dir=str(out_dir))
        timestamps = read_json(out_dir / "manifest.json")["timestamps"]
        self.assertTrue(timestamps["started"].endswith("+05:30"))
        self.assertTrue(timestamps["finished"].endswith("+05:30"))


class FitCommandTests(CommandTestCase):
    def test_fit_writes_params_and_report(self):
        out_dir = self.root / "fit"
        self.command("fit", dataset=[str(self.dataset)], criterion="loo", out_dir=str(out_dir))
        params = read_json(out_dir / "params.json")
        self.assertEqual(params["model"], "bimatern")
        report = read_json(out_dir / "fit_report.json")
        self.assertEqual(report["criterion"], "loo")
        self.assertEqual(len(report["fits"]), 1)
        header, rows = read_csv(out_dir / "fit_table.csv")
        self.assertEqual(header[:2], ["dataset", "criterion"])
        self.assertEqual(rows[0][1], "LOO")

    def test_failed_replicate_does_not_stop_the_others(self):
        out_dir = self.root / "fit_partial"
        calls = []

        def flaky(data, criterion, **kwargs):
            calls.append(criterion)
            if len(calls) == 1:
                raise OptimizationError("all starts failed", diagnostics=[{"start": 0, "ok": False}])
            return fit(data, criterion, **kwargs)

        with patch("core.management.commands.fit.fit", side_effect=flaky):
            output = self.command("fit", dataset=[str(self.dataset)] * 2, criterion="loo", out_dir=str(out_dir))
        self.assertIn("1 failed", output)
        self.assertFalse((out_dir / "params_0000.json").exists())
        self.assertTrue((out_dir / "params_0001.json").exists())
        report = read_json(out_dir / "fit_report.json")
        self.assertEqual(len(report["fits"]), 1)
        self.assertEqual(report["failed"], [self.dataset.as_posix()])
        diagnostics = read_json(out_dir / "fit_diagnostics.json")
        self.assertFalse(diagnostics[0]["starts"][0]["ok"])

    def test_every_replicate_failing(self):
        out_dir = self.root / "fit_failed"
        error = OptimizationError("all starts failed", diagnostics=[{"start": 0, "ok": False}])
        with patch("core.management.commands.fit.fit", side_effect=error):
            with self.assertRaises(SystemExit) as ctx:
                self.command("fit", dataset=[str(self.dataset)] * 2, out_dir=str(out_dir))
        self.assertEqual(ctx.exception.code, EXIT_NUMERICAL)
        self.assertEqual(len(read_json(out_dir / "fit_diagnostics.json")), 2)
        self.assertFalse((out_dir / "manifest.json").exists())


class PredictCommandTests(CommandTestCase):
    def test_grid_prediction_with_reference(self):
        out_dir = self.root / "predict"
        self.command(
            "predict",
            dataset=str(self.dataset),
            params=str(self.params),
            reference=[str(self.generated / "fine_field.grd"), str(self.generated / "coarse_field.grd")],
            out_dir=str(out_dir),
        )
        grid, variance, header = read_grid(out_dir / "fine_variance.grd")
        self.assertEqual(header["scale"], "fine")
        self.assertTrue((variance >= 0.0).all())
        report = read_json(out_dir / "prediction_report.json")
        self.assertGreaterEqual(report["scales"]["fine"]["mse"], 0.0)
        self.assertIn("coarse", report["scales"])

    def test_observation_targets(self):
        out_dir = self.root / "predict_obs"
        self.command(
            "predict", dataset=str(self.dataset), params=str(self.params), targets="observations", out_dir=str(out_dir)
        )
        header, rows = read_csv(out_dir / "posterior_observations.csv")
        self.assertEqual(header, ["scale", "x", "y", "mean", "variance"])
        self.assertEqual(len(rows), 40)
        self.assertTrue((out_dir / "manifest.json").exists())


class VariogramCommandTests(CommandTestCase):
    def test_empirical_and_model_curves(self):
        out_dir = self.root / "variogram"
        self.command("variogram", dataset=str(self.dataset), params=str(self.params), bins=5, out_dir=str(out_dir))
        header, rows = read_csv(out_dir / "variogram.csv")
        self.assertEqual(header, ["curve", "lag", "value", "count", "kind"])
        curves = {row[0] for row in rows}
        self.assertTrue({"fine", "coarse", "cross", "fine_model"} <= curves)

    def test_needs_an_input(self):
        with self.assertRaises(SystemExit) as ctx:
            self.command("variogram", out_dir=str(self.root / "nothing"))
        self.assertEqual(ctx.exception.code, EXIT_USER_ERROR)


class SimulateCommandTests(CommandTestCase):
    def test_unconditional_realizations_are_reproducible(self):
        first, second = self.root / "sim_a", self.root / "sim_b"
        self.command("simulate", n_real=2, out_dir=str(first))
        self.command("simulate", n_real=1, start=1, out_dir=str(second))
        self.assertEqual(
            read_field(first / "realization_0001.grd").values.tolist(),
            read_field(second / "realization_0001.grd").values.tolist(),
        )

    def test_conditional_realizations(self):
        out_dir = self.root / "sim_cond"
        self.command("simulate", params=str(self.params), dataset=str(self.dataset), n_real=2, out_dir=str(out_dir))
        _, _, header = read_grid(out_dir / "realization_0000.grd")
        self.assertEqual(header["mode"], "conditional")

    def test_dataset_without_params(self):
        with self.assertRaises(SystemExit) as ctx:
            self.command("simulate", dataset=str(self.dataset), out_dir=str(self.root / "sim_bad"))
        self.assertEqual(ctx.exception.code, EXIT_USER_ERROR)


class DarcyCommandTests(CommandTestCase):
    def test_propagation_report(self):
        out_dir = self.root / "darcy"
        output = self.command(
            "darcy",
            dataset=str(self.dataset),
            params=str(self.params),
            reference=str(self.generated / "fine_field.grd"),
            out_dir=str(out_dir),
        )
        self.assertIn("fine_only=", output)
        report = read_json(out_dir / "darcy_report.json")
        self.assertEqual(report["n_real"], 4)
        self.assertEqual(report["n_head_obs"], 5)
        for stage in ("prior", "conditioned"):
            self.assertEqual(set(report["variance_norm"][stage]), {"fine_only", "multiscale"})
        fluxes = report["reference_fluxes"]
        self.assertAlmostEqual(fluxes["inflow"] / fluxes["outflow"], 1.0, delta=1e-9)
        header, rows = read_csv(out_dir / "profile_multiscale.csv")
        self.assertEqual(header, PROFILE_HEADER)
        self.assertEqual(len(rows), 16)

    def test_conditioning_orders_head_variance(self):
        out_dir = self.root / "darcy_order"
        self.command(
            "darcy",
            dataset=str(self.dataset),
            params=str(self.strong_params),
            reference=str(self.generated / "fine_field.grd"),
            n_real=128,
            out_dir=str(out_dir),
        )
        norms = read_json(out_dir / "darcy_report.json")["variance_norm"]
        for name in ("fine_only", "multiscale"):
            self.assertLess(norms["conditioned"][name], norms["prior"][name])
        self.assertLess(norms["prior"]["multiscale"], norms["prior"]["fine_only"])

    def test_config_without_darcy_section(self):
        config = dict(TINY_CONFIG, darcy=None)
        path = self.root / "no_darcy.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        with self.assertRaises(SystemExit) as ctx:
            self.command(
                "darcy",
                config=str(path),
                dataset=str(self.dataset),
                params=str(self.params),
                reference=str(self.generated / "fine_field.grd"),
                out_dir=str(self.root / "darcy_bad"),
            )
        self.assertEqual(ctx.exception.code, EXIT_USER_ERROR)


class DeterminismTests(CommandTestCase):
    """Worker threads never change what a command writes."""

    def assert_same_outputs(self, name, **options):
        dirs = []
        for threads in (1, 4):
            out_dir = self.root / f"{name}_threads_{threads}"
            self.command(name, threads=threads, out_dir=str(out_dir), **options)
            dirs.append(out_dir)
        files = [sorted(p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file()) for d in dirs]
        self.assertEqual(files[0], files[1])
        for path in files[0]:
            first, second = (d / path for d in dirs)
            if path == "manifest.json":
                manifests = [read_json(p) for p in (first, second)]
                for manifest in manifests:
                    manifest.pop("timestamps")
                self.assertEqual(manifests[0], manifests[1])
            else:
                self.assertEqual(first.read_bytes(), second.read_bytes(), msg=path)

    def test_generate(self):
        self.assert_same_outputs("generate", replicates=3)

    def test_fit(self):
        self.assert_same_outputs("fit", dataset=[str(self.dataset)], criterion="ml", n_starts=3)

    def test_darcy(self):
        self.assert_same_outputs(
            "darcy",
            dataset=str(self.dataset),
            params=str(self.params),
            reference=str(self.generated / "fine_field.grd"),
            n_real=8,
        )


class ExitCodeTests(CommandTestCase):
    def test_unknown_preset(self):
        with self.assertRaises(SystemExit) as ctx:
            self.command("generate", config="test9", out_dir=str(self.root / "bad"))
        self.assertEqual(ctx.exception.code, EXIT_USER_ERROR)

    def test_numerical_failure_removes_partial_outputs(self):
        out_dir = self.root / "failed"
        with patch("core.management.commands.generate.write_dataset", side_effect=NumericalError("broken")):
            with self.assertRaises(SystemExit) as ctx:
                self.command("generate", out_dir=str(out_dir))
        self.assertEqual(ctx.exception.code, EXIT_NUMERICAL)
        self.assertFalse((out_dir / "true_params.json").exists())
        self.assertFalse((out_dir / "manifest.json").exists())


class CliTests(SimpleTestCase):
    def test_usage(self):
        with patch("sys.stdout", new_callable=StringIO) as stdout:
            self.assertEqual(main(["--help"]), 0)
        self.assertIn("generate|fit|predict", stdout.getvalue())

    def test_unknown_command(self):
        with patch("sys.stderr", new_callable=StringIO) as stderr:
            self.assertEqual(main(["serve"]), 1)
        self.assertIn("unknown command 'serve'", stderr.getvalue())
