import math
import os
from unittest import skipUnless
from unittest.mock import patch

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings
from numpy.testing import assert_allclose

from core.covariance_models import BivariateMaternParams, BlockAvgModel, FullBivariateMatern, Rectangle, check_validity
from core.exceptions import ConfigError, NumericalError, OptimizationError
from core.fit import (
    LARGE,
    BivariateMaternSpace,
    BlockAverageSpace,
    FitOptions,
    ProjectedObjective,
    fd_gradient,
    fit,
    init_from_empirical,
    objective,
    rho_to_xi,
    start_points,
    xi_to_rho,
)
from core.gp import CRITERIA, MultiscaleDataset, log_marginal_likelihood

TRUE = BivariateMaternParams(
    lambda_c=0.3,
    lambda_f=0.1,
    lambda_cf=0.169,
    nu_c=1.5,
    nu_f=0.5,
    sigma_c=0.8,
    sigma_f=1.0,
    rho=0.4,
)


def simulated_dataset(n_f: int, n_c: int, seed: int = 11, noise: float = 0.02) -> MultiscaleDataset:
    """Exact draw from the bivariate model by dense Cholesky."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n_c + n_f, 2))
    tags = np.array([0] * n_c + [1] * n_f)
    C = FullBivariateMatern(TRUE).assemble(X, tags, X, tags)
    L = np.linalg.cholesky(C + 1e-10 * np.eye(len(X)))
    y = L @ rng.standard_normal(len(X)) + noise * rng.standard_normal(len(X))
    return MultiscaleDataset(X[n_c:], y[n_c:], X[:n_c], y[:n_c], noise_f=noise, noise_c=noise)


class TransformTests(SimpleTestCase):
    def test_correlation_transform(self):
        for rho in (-0.9, -0.2, 0.0, 0.5, 0.99):
            self.assertAlmostEqual(xi_to_rho(rho_to_xi(rho)), rho, places=12)
        self.assertAlmostEqual(rho_to_xi(0.5), math.log(3.0))

    def test_bivariate_round_trip(self):
        space = BivariateMaternSpace()
        params = TRUE.replace(sigma_nc=0.01, sigma_nf=0.02)
        back = space.untransform(space.transform(params))
        assert_allclose(space.values(back), space.values(params), rtol=1e-12)

    def test_zero_nugget_is_floored(self):
        space = BivariateMaternSpace()
        back = space.untransform(space.transform(TRUE))
        self.assertLess(back.sigma_nf, 1e-11)

    def test_projection_restores_validity(self):
        space = BivariateMaternSpace()
        bad = TRUE.replace(lambda_cf=0.6, rho=0.95)
        self.assertFalse(check_validity(bad).feasible)
        fixed = space.project(bad)
        self.assertTrue(check_validity(fixed).feasible)
        self.assertLess(fixed.lambda_cf, bad.lambda_cf)
        self.assertLess(abs(fixed.rho), 0.95)
        self.assertEqual(space.project(TRUE), TRUE)

    def test_order_box_comes_from_settings(self):
        space = BivariateMaternSpace()
        z = space.transform(TRUE.replace(nu_c=5.0))
        self.assertAlmostEqual(space.untransform(z).nu_c, 5.0)
        with override_settings(MULTISCALE_GP={**settings.MULTISCALE_GP, "NU_BOX": (0.05, 2.0)}):
            clipped = space.untransform(z)
        self.assertAlmostEqual(clipped.nu_c, 2.0)
        self.assertAlmostEqual(clipped.nu_f, TRUE.nu_f)

    def test_block_average_space(self):
        template = BlockAvgModel(1.0, 0.05, 0.5, 0.0625, domain=Rectangle(0.0, 0.0, 2.0, 1.0))
        space = BlockAverageSpace(template, fit_eta=True)
        self.assertEqual(space.names, ("fine_sigma", "fine_lambda", "fine_nu", "eta_c", "sigma_nc", "sigma_nf"))
        model = template.replace(fine_sigma=1.3, eta_c=0.1, sigma_nf=0.01)
        back = space.untransform(space.transform(model))
        self.assertAlmostEqual(back.fine_sigma, 1.3)
        self.assertAlmostEqual(back.eta_c, 0.1)
        self.assertEqual(back.domain, template.domain)


class ObjectiveTests(SimpleTestCase):
    def setUp(self):
        self.data = simulated_dataset(15, 10)
        self.space = BivariateMaternSpace()

    def test_feasible_point_is_negative_likelihood(self):
        z = self.space.transform(TRUE.replace(sigma_nc=0.01, sigma_nf=0.01))
        model = FullBivariateMatern(self.space.untransform(z))
        self.assertAlmostEqual(objective(self.data, z), -log_marginal_likelihood(self.data, model), places=8)

    def test_infeasible_point_is_penalized(self):
        z = self.space.transform(TRUE.replace(lambda_cf=0.6))
        value = objective(self.data, z)
        self.assertGreater(value, LARGE)
        further = objective(self.data, self.space.transform(TRUE.replace(lambda_cf=1.2)))
        self.assertGreater(further, value)

    def test_projected_objective_tracks_best_feasible_point(self):
        fun = ProjectedObjective(self.data, "loo", self.space, max_evals=10)
        fun(self.space.transform(TRUE.replace(lambda_cf=0.6)))
        self.assertTrue(check_validity(fun.best_params).feasible)
        self.assertEqual(fun.n_evals, 1)

    def test_unknown_criterion(self):
        with self.assertRaises(ConfigError):
            objective(self.data, self.space.transform(TRUE), criterion="aic")


class GradientTests(SimpleTestCase):
    def test_quadratic_is_exact(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        z = np.array([0.3, -1.2])
        assert_allclose(fd_gradient(lambda v: 0.5 * v @ A @ v, z), A @ z, rtol=1e-8)

    def test_second_order_accuracy(self):
        z = np.array([0.7])
        exact = np.cos(0.7)
        errors = [abs(fd_gradient(lambda v: float(np.sin(v[0])), z, h)[0] - exact) for h in (1e-2, 5e-3, 2.5e-3)]
        self.assertAlmostEqual(errors[0] / errors[1], 4.0, delta=0.1)
        self.assertAlmostEqual(errors[1] / errors[2], 4.0, delta=0.1)


class FitTests(SimpleTestCase):
    def setUp(self):
        self.data = simulated_dataset(20, 12)
        self.options = FitOptions(n_starts=2, max_evals=800, max_iter=30, seed=5)

    def test_options_validation(self):
        with self.assertRaises(ConfigError):
            FitOptions(n_starts=0)
        self.assertNotIn("threads", FitOptions(threads=4).to_dict())

    def test_start_points_are_feasible_and_reproducible(self):
        space = BivariateMaternSpace()
        init = init_from_empirical(self.data)
        options = FitOptions(n_starts=4, seed=3)
        first = start_points(space, init, options)
        second = start_points(space, init, options)
        self.assertEqual(len(first), 4)
        for a, b in zip(first, second):
            assert_allclose(a, b)
            self.assertTrue(check_validity(space.untransform(a)).feasible)

    def test_fit_improves_on_initial_point(self):
        init = init_from_empirical(self.data)
        start_value = log_marginal_likelihood(self.data, FullBivariateMatern(init))
        result = fit(self.data, "ml", init=init, options=self.options)
        self.assertTrue(check_validity(result.theta_star).feasible)
        self.assertGreaterEqual(result.objective_value, start_value - 1e-9)
        self.assertEqual(len(result.starts), 2)
        self.assertLessEqual(result.n_evals, 2 * self.options.max_evals)
        row = result.table_row()
        self.assertEqual(row["criterion"], "ML")
        self.assertIn("lambda_cf", row)

    def test_thread_count_does_not_change_result(self):
        serial = fit(self.data, "loo", options=self.options)
        threaded_options = FitOptions(n_starts=2, max_evals=800, max_iter=30, seed=5, threads=2)
        threaded = fit(self.data, "loo", options=threaded_options)
        self.assertEqual(serial.params_dict(), threaded.params_dict())
        self.assertEqual(serial.objective_value, threaded.objective_value)

    def test_all_starts_failing(self):
        def broken(data, model, stats=None):
            raise NumericalError("not positive definite")

        with patch.dict(CRITERIA, {"ml": broken}):
            with self.assertRaises(OptimizationError) as ctx:
                fit(self.data, "ml", options=FitOptions(n_starts=2, max_evals=50, seed=1))
        self.assertEqual(len(ctx.exception.diagnostics), 2)
        self.assertFalse(ctx.exception.diagnostics[0]["ok"])


@skipUnless(os.environ.get("MSGP_SLOW_TESTS") == "1", "set MSGP_SLOW_TESTS=1 to run")
class RecoveryTests(SimpleTestCase):
    """Both criteria recover the generating variances from a few hundred points."""

    def test_variances_and_correlation_sign(self):
        data = simulated_dataset(150, 150, seed=8)
        for criterion in ("ml", "loo"):
            with self.subTest(criterion=criterion):
                result = fit(data, criterion, options=FitOptions(n_starts=3, seed=2))
                params = result.theta_star
                self.assertTrue(check_validity(params).feasible)
                self.assertLess(abs(math.log(params.sigma_f / TRUE.sigma_f)), math.log(1.3))
                self.assertLess(abs(math.log(params.sigma_c / TRUE.sigma_c)), math.log(1.3))
                self.assertGreater(params.rho, 0.0)


class InitializationTests(SimpleTestCase):
    def test_needs_observations_at_both_scales(self):
        data = simulated_dataset(10, 3)
        with self.assertRaises(ConfigError):
            init_from_empirical(data)

    def test_rough_estimates_from_variograms(self):
        data = simulated_dataset(100, 100, seed=4)
        params = init_from_empirical(data)
        self.assertTrue(check_validity(params).feasible)
        self.assertLess(abs(math.log(params.sigma_f / TRUE.sigma_f)), math.log(1.5))
        self.assertLess(abs(math.log(params.lambda_f / TRUE.lambda_f)), math.log(3.0))
