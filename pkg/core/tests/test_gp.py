import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings
from numpy.testing import assert_allclose
from scipy import stats

from core.covariance_models import BivariateMaternParams, FullBivariateMatern, ScaleTag
from core.exceptions import DomainError, NumericalError
from core.gp import (
    FactorizationStats,
    MultiscaleDataset,
    TaggedPoints,
    condition,
    factorize,
    log_marginal_likelihood,
    loo_cv_pseudolikelihood,
    observation_covariance,
)
from core.kernels import matern

PARAMS = BivariateMaternParams(
    lambda_c=0.3,
    lambda_f=0.1,
    lambda_cf=0.169,
    nu_c=1.5,
    nu_f=0.5,
    sigma_c=0.8,
    sigma_f=1.0,
    rho=0.4,
    sigma_nc=0.05,
    sigma_nf=0.02,
)


def random_dataset(seed: int = 0, n_f: int = 12, n_c: int = 8, noise: float = 0.03) -> MultiscaleDataset:
    rng = np.random.default_rng(seed)
    return MultiscaleDataset(
        X_f=rng.uniform(0.0, 1.0, size=(n_f, 2)),
        y_f=rng.normal(size=n_f),
        X_c=rng.uniform(0.0, 1.0, size=(n_c, 2)),
        y_c=rng.normal(size=n_c),
        noise_f=noise,
        noise_c=noise,
    )


class FactorizeTests(SimpleTestCase):
    def test_positive_definite_needs_no_jitter(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        factor = factorize(A)
        self.assertEqual(factor.jitter, 0.0)
        assert_allclose(factor.lower @ factor.lower.T, A)
        assert_allclose(factor.solve(np.array([1.0, 2.0])), np.linalg.solve(A, [1.0, 2.0]))
        self.assertAlmostEqual(factor.logdet(), np.log(np.linalg.det(A)))

    def test_rank_one_matrix_gets_jitter(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        with self.assertLogs("core.gp", level="WARNING"):
            factor = factorize(np.outer(v, v))
        self.assertGreater(factor.jitter, 0.0)
        self.assertIn(factor.delta, (1e-12, 1e-10, 1e-8))
        stats_ = FactorizationStats()
        stats_.record(factor)
        self.assertEqual(stats_.jitter_events, 1)

    def test_indefinite_matrix_fails(self):
        with self.assertRaises(NumericalError) as ctx:
            factorize(np.diag([1.0, -1.0]))
        self.assertLess(ctx.exception.min_pivot, 0.0)

    def test_shape_checks(self):
        with self.assertRaises(DomainError):
            factorize(np.ones((2, 3)))
        self.assertEqual(factorize(np.zeros((0, 0))).n, 0)

    def test_ladder_comes_from_settings(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        with override_settings(MULTISCALE_GP={**settings.MULTISCALE_GP, "JITTER_LADDER": (1e-6,)}):
            with self.assertLogs("core.gp", level="WARNING"):
                factor = factorize(np.outer(v, v))
            self.assertEqual(factor.delta, 1e-6)
        with override_settings(MULTISCALE_GP={**settings.MULTISCALE_GP, "JITTER_LADDER": ()}):
            with self.assertRaises(NumericalError):
                factorize(np.outer(v, v))


class ConditionTests(SimpleTestCase):
    def setUp(self):
        self.model = FullBivariateMatern(PARAMS)

    def test_single_observation_closed_form(self):
        x = np.array([[0.4, 0.4]])
        data = MultiscaleDataset(x, [1.3], np.zeros((0, 2)), [], noise_f=0.1)
        t = np.array([[0.45, 0.4]])
        summary = condition(data, self.model, TaggedPoints.at_scale(t, ScaleTag.FINE))
        k = self.model.cov(t[0], ScaleTag.FINE, x[0], ScaleTag.FINE)
        c = PARAMS.sigma_f**2 + PARAMS.sigma_nf**2 + 0.1**2
        self.assertAlmostEqual(summary.mean[0], k / c * 1.3)
        self.assertAlmostEqual(summary.variance[0], PARAMS.sigma_f**2 - k * k / c)

    def test_coarse_data_informs_fine_scale(self):
        data = MultiscaleDataset(np.zeros((0, 2)), [], [[0.5, 0.5]], [2.0], noise_c=0.01)
        target = TaggedPoints.at_scale([[0.5, 0.5]], ScaleTag.FINE)
        summary = condition(data, self.model, target)
        self.assertGreater(summary.mean[0], 0.0)
        self.assertLess(summary.variance[0], PARAMS.sigma_f**2)

    def test_covariance_diagonal_matches_variance(self):
        data = random_dataset(1)
        targets = TaggedPoints(np.array([[0.2, 0.2], [0.5, 0.6], [0.9, 0.1]]), [1, 0, 1])
        plain = condition(data, self.model, targets)
        full = condition(data, self.model, targets, want_cov=True)
        assert_allclose(np.diag(full.covariance), plain.variance, rtol=1e-8, atol=1e-12)
        assert_allclose(full.mean, plain.mean)
        self.assertTrue(np.all(plain.variance >= 0.0))

    def test_empty_targets(self):
        summary = condition(random_dataset(), self.model, TaggedPoints.at_scale(np.zeros((0, 2)), ScaleTag.FINE))
        self.assertEqual(len(summary.mean), 0)


class PseudoLikelihoodTests(SimpleTestCase):
    def setUp(self):
        self.model = FullBivariateMatern(PARAMS)
        self.data = random_dataset(2)

    def test_marginal_likelihood_matches_gaussian_density(self):
        C = observation_covariance(self.data, self.model)
        expected = stats.multivariate_normal(mean=np.zeros(self.data.n), cov=C).logpdf(self.data.y)
        self.assertAlmostEqual(log_marginal_likelihood(self.data, self.model), expected, places=8)

    def test_loo_matches_brute_force(self):
        data = self.data
        total = 0.0
        for i in range(data.n):
            keep_c = [j for j in range(data.n_c) if j != i]
            keep_f = [j for j in range(data.n_f) if j != i - data.n_c]
            reduced = MultiscaleDataset(
                data.X_f[keep_f], data.y_f[keep_f], data.X_c[keep_c], data.y_c[keep_c], data.noise_f, data.noise_c
            )
            point = data.points.subset([i])
            scale = ScaleTag(point.tags[0])
            summary = condition(reduced, self.model, point)
            noise = data.noise_c if scale == ScaleTag.COARSE else data.noise_f
            var = summary.variance[0] + self.model.nugget_variance(scale) + noise**2
            total += stats.norm(summary.mean[0], np.sqrt(var)).logpdf(data.y[i])
        self.assertAlmostEqual(loo_cv_pseudolikelihood(data, self.model), total, places=7)

    def test_invalid_parameters_score_minus_infinity(self):
        invalid = FullBivariateMatern(PARAMS.replace(lambda_cf=0.5))
        self.assertEqual(log_marginal_likelihood(self.data, invalid), -np.inf)
        self.assertEqual(loo_cv_pseudolikelihood(self.data, invalid), -np.inf)

    def test_noise_adds_to_nugget(self):
        quiet = random_dataset(2, noise=0.0)
        C_quiet = observation_covariance(quiet, self.model)
        C_noisy = observation_covariance(self.data, self.model)
        assert_allclose(np.diag(C_noisy) - np.diag(C_quiet), 0.03**2)

    def test_dataset_validation(self):
        with self.assertRaises(DomainError):
            MultiscaleDataset(np.zeros((0, 2)), [], np.zeros((0, 2)), [])
        with self.assertRaises(DomainError):
            MultiscaleDataset([[0.1, 0.2]], [1.0, 2.0], np.zeros((0, 2)), [])


class PosteriorPropertyTests(SimpleTestCase):
    """Properties that hold for any data set, not just closed forms."""

    def setUp(self):
        self.model = FullBivariateMatern(PARAMS)
        rng = np.random.default_rng(7)
        self.targets = TaggedPoints(rng.uniform(0.0, 1.0, size=(200, 2)), rng.integers(0, 2, size=200))

    def test_exact_interpolation_without_noise(self):
        model = FullBivariateMatern(PARAMS.replace(sigma_nc=0.0, sigma_nf=0.0))
        data = random_dataset(3, noise=0.0)
        summary = condition(data, model, data.points)
        assert_allclose(summary.mean, data.y, atol=1e-8)
        self.assertLessEqual(summary.variance.max(), 1e-8)

    def test_posterior_variance_never_exceeds_prior(self):
        for seed in range(3):
            with self.subTest(seed=seed):
                summary = condition(random_dataset(seed), self.model, self.targets)
                prior = self.model.prior_variance(self.targets.X, self.targets.tags)
                self.assertTrue(np.all(summary.variance <= prior * (1.0 + 1e-10)))

    def test_more_observations_never_increase_variance(self):
        full = random_dataset(4, n_f=10, n_c=6)
        previous = self.model.prior_variance(self.targets.X, self.targets.tags)
        for k in range(1, full.n_f + 1):
            nested = MultiscaleDataset(full.X_f[:k], full.y_f[:k], full.X_c, full.y_c, full.noise_f, full.noise_c)
            variance = condition(nested, self.model, self.targets).variance
            self.assertTrue(np.all(variance <= previous + 1e-10), msg=f"{k} fine observations")
            previous = variance

    def test_criteria_ignore_observation_order(self):
        data = random_dataset(5)
        rng = np.random.default_rng(1)
        pf, pc = rng.permutation(data.n_f), rng.permutation(data.n_c)
        shuffled = MultiscaleDataset(
            data.X_f[pf], data.y_f[pf], data.X_c[pc], data.y_c[pc], data.noise_f, data.noise_c
        )
        for criterion in (log_marginal_likelihood, loo_cv_pseudolikelihood):
            with self.subTest(criterion=criterion.__name__):
                self.assertAlmostEqual(criterion(shuffled, self.model), criterion(data, self.model), delta=1e-10)

    def test_single_scale_data_is_simple_kriging(self):
        data = random_dataset(6, n_c=0)
        targets = TaggedPoints.at_scale(self.targets.X[:20], ScaleTag.FINE)
        summary = condition(data, self.model, targets)

        def kernel(a, b):
            r = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
            return PARAMS.sigma_f**2 * matern(r / PARAMS.lambda_f, PARAMS.nu_f)

        C = kernel(data.X_f, data.X_f) + (PARAMS.sigma_nf**2 + data.noise_f**2) * np.eye(data.n_f)
        k = kernel(targets.X, data.X_f)
        assert_allclose(summary.mean, k @ np.linalg.solve(C, data.y_f), atol=1e-10)
        expected = PARAMS.sigma_f**2 - np.sum(k * np.linalg.solve(C, k.T).T, axis=1)
        assert_allclose(summary.variance, expected, atol=1e-10)
