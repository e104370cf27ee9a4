"""
Dense Gaussian-process engine for multiscale data.

Observations are stacked coarse first, then fine. The observation covariance
carries the nugget and observation noise on its diagonal; predictions target
the noise-free latent field.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from django.conf import settings
from scipy import linalg

from core.covariance_models import MultiscaleCovariance, ScaleTag
from core.exceptions import DomainError, NumericalError

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class TaggedPoints:
    """Locations with one scale tag per row."""

    X: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.size == 0:
            self.X = self.X.reshape(0, 2)
        self.tags = np.asarray(self.tags, dtype=int).ravel()
        if len(self.tags) != len(self.X):
            raise DomainError(f"{len(self.X)} locations but {len(self.tags)} scale tags")

    def __len__(self) -> int:
        return len(self.X)

    @classmethod
    def at_scale(cls, X: np.ndarray, scale: ScaleTag) -> "TaggedPoints":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.size == 0:
            X = X.reshape(0, 2)
        return cls(X, np.full(len(X), int(scale)))

    @classmethod
    def concat(cls, *parts: "TaggedPoints") -> "TaggedPoints":
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.tags for p in parts]))

    def subset(self, index) -> "TaggedPoints":
        return TaggedPoints(self.X[index], self.tags[index])


@dataclass
class MultiscaleDataset:
    X_f: np.ndarray
    y_f: np.ndarray
    X_c: np.ndarray
    y_c: np.ndarray
    noise_f: float = 0.0
    noise_c: float = 0.0

    def __post_init__(self):
        self.X_f = np.asarray(self.X_f, dtype=float).reshape(-1, 2)
        self.X_c = np.asarray(self.X_c, dtype=float).reshape(-1, 2)
        self.y_f = np.asarray(self.y_f, dtype=float).ravel()
        self.y_c = np.asarray(self.y_c, dtype=float).ravel()
        if len(self.X_f) != len(self.y_f) or len(self.X_c) != len(self.y_c):
            raise DomainError("each observation location needs exactly one value")
        if self.n == 0:
            raise DomainError("a data set needs at least one observation")
        if self.noise_f < 0.0 or self.noise_c < 0.0:
            raise DomainError("observation noise must be nonnegative")

    @property
    def n_f(self) -> int:
        return len(self.y_f)

    @property
    def n_c(self) -> int:
        return len(self.y_c)

    @property
    def n(self) -> int:
        return self.n_f + self.n_c

    @property
    def points(self) -> TaggedPoints:
        return TaggedPoints.concat(
            TaggedPoints.at_scale(self.X_c, ScaleTag.COARSE),
            TaggedPoints.at_scale(self.X_f, ScaleTag.FINE),
        )

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.y_c, self.y_f])

    def noise_variance(self) -> np.ndarray:
        return np.concatenate(
            [np.full(self.n_c, self.noise_c**2), np.full(self.n_f, self.noise_f**2)]
        )

    def check_duplicates(self) -> None:
        for X, noise, label in ((self.X_f, self.noise_f, "fine"), (self.X_c, self.noise_c, "coarse")):
            if noise > 0.0 or len(X) < 2:
                continue
            if len(np.unique(X, axis=0)) < len(X):
                logger.warning(f"Repeated {label} observation locations without observation noise")


@dataclass
class PosteriorSummary:
    targets: TaggedPoints
    mean: np.ndarray
    variance: np.ndarray
    covariance: Optional[np.ndarray] = None
    n_clamped: int = 0


@dataclass
class Factorization:
    """Lower Cholesky factor of a symmetric positive definite matrix."""

    lower: np.ndarray
    jitter: float = 0.0
    delta: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b)

    def half_solve(self, b: np.ndarray) -> np.ndarray:
        """L^{-1} b."""
        return linalg.solve_triangular(self.lower, b, lower=True)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))


@dataclass
class FactorizationStats:
    """Counters collected across repeated factorizations."""

    factorizations: int = 0
    jitter_events: int = 0
    failures: int = 0
    jitters: list = field(default_factory=list)

    def record(self, factor: Factorization) -> None:
        self.factorizations += 1
        if factor.jitter > 0.0:
            self.jitter_events += 1
            self.jitters.append(factor.delta)


def _min_pivot(C: np.ndarray) -> float:
    try:
        _, d, _ = linalg.ldl(C, lower=True)
        return float(np.min(np.diag(d)))
    except (ValueError, linalg.LinAlgError):
        return float("nan")


def factorize(C: np.ndarray, ladder: Optional[Sequence[float]] = None) -> Factorization:
    """
    Cholesky factorization with escalating diagonal jitter.

    Jitter levels are relative to trace / N and default to
    `MULTISCALE_GP["JITTER_LADDER"]`.
    """
    if ladder is None:
        ladder = settings.MULTISCALE_GP["JITTER_LADDER"]
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {C.shape}")
    n = C.shape[0]
    if n == 0:
        return Factorization(np.zeros((0, 0)))
    if not np.all(np.isfinite(C)):
        raise NumericalError("covariance matrix contains non-finite entries")
    scale = float(np.trace(C)) / n
    deltas = (0.0,) + tuple(ladder)
    for delta in deltas:
        jitter = delta * scale
        try:
            lower = linalg.cholesky(C + jitter * np.eye(n) if jitter else C, lower=True)
        except linalg.LinAlgError:
            logger.debug(f"Cholesky failed for N={n} with jitter delta={delta:g}")
            continue
        if jitter:
            logger.warning(f"Cholesky of N={n} matrix needed jitter {jitter:.3e} (delta={delta:g})")
        return Factorization(lower, jitter=jitter, delta=delta)
    pivot = _min_pivot(C)
    raise NumericalError(
        f"matrix of size {n} is not positive definite after jitter {deltas[-1]:g}; "
        f"min pivot {pivot:.3e}",
        min_pivot=pivot,
    )


def assemble_cov(a: TaggedPoints, b: TaggedPoints, model: MultiscaleCovariance, nugget: bool = False) -> np.ndarray:
    """Covariance matrix between two tagged location sets."""
    if a.X.shape[1] != b.X.shape[1]:
        raise DomainError(f"dimension mismatch: {a.X.shape[1]} vs {b.X.shape[1]}")
    if a is b:
        return model.assemble(a.X, a.tags, a.X, a.tags, nugget=nugget)
    return model.assemble(a.X, a.tags, b.X, b.tags, nugget=nugget)


def observation_covariance(data: MultiscaleDataset, model: MultiscaleCovariance) -> np.ndarray:
    points = data.points
    model.check_points(points.X)
    C = assemble_cov(points, points, model, nugget=True)
    C[np.diag_indices_from(C)] += data.noise_variance()
    return C


def observation_factor(
    data: MultiscaleDataset,
    model: MultiscaleCovariance,
    stats: Optional[FactorizationStats] = None,
) -> Factorization:
    try:
        factor = factorize(observation_covariance(data, model))
    except NumericalError:
        if stats is not None:
            stats.failures += 1
        raise
    if stats is not None:
        stats.record(factor)
    return factor


def condition(
    data: MultiscaleDataset,
    model: MultiscaleCovariance,
    targets: TaggedPoints,
    want_cov: bool = False,
    factor: Optional[Factorization] = None,
) -> PosteriorSummary:
    """Posterior mean and variance of the latent field at tagged targets."""
    m = len(targets)
    if m == 0:
        return PosteriorSummary(
            targets, np.zeros(0), np.zeros(0), np.zeros((0, 0)) if want_cov else None
        )
    model.check_points(targets.X)
    if factor is None:
        factor = observation_factor(data, model)
    cross = assemble_cov(targets, data.points, model)
    mean = cross @ factor.solve(data.y)
    V = factor.half_solve(cross.T)
    prior = model.prior_variance(targets.X, targets.tags)
    variance = prior - np.sum(V * V, axis=0)
    covariance = None
    if want_cov:
        covariance = assemble_cov(targets, targets, model) - V.T @ V
        covariance = 0.5 * (covariance + covariance.T)
        variance = np.diag(covariance).copy()

    slack = 1e-10 * np.maximum(prior, np.finfo(float).tiny)
    negative = variance < 0.0
    n_clamped = int(np.count_nonzero(negative))
    if np.any(variance < -slack):
        logger.warning(
            f"Posterior variance below roundoff slack at {int(np.count_nonzero(variance < -slack))} targets"
        )
    if n_clamped:
        variance = np.where(negative, 0.0, variance)
        if covariance is not None:
            covariance[np.diag_indices_from(covariance)] = variance
    return PosteriorSummary(targets, mean, variance, covariance, n_clamped)


def log_marginal_likelihood(
    data: MultiscaleDataset,
    model: MultiscaleCovariance,
    stats: Optional[FactorizationStats] = None,
) -> float:
    """Log marginal likelihood; -inf when the model parameters are not valid."""
    if not model.is_valid():
        return -np.inf
    factor = observation_factor(data, model, stats)
    y = data.y
    alpha = factor.solve(y)
    return float(-0.5 * y @ alpha - 0.5 * factor.logdet() - 0.5 * data.n * _LOG_2PI)


def loo_cv_pseudolikelihood(
    data: MultiscaleDataset,
    model: MultiscaleCovariance,
    stats: Optional[FactorizationStats] = None,
) -> float:
    """Sum of leave-one-out log predictive densities from one factorization."""
    if not model.is_valid():
        return -np.inf
    factor = observation_factor(data, model, stats)
    precision = factor.inverse()
    alpha = precision @ data.y
    d = np.diag(precision)
    if np.any(d <= 0.0):
        raise NumericalError("non-positive diagonal in the inverse observation covariance")
    # residual y_i - mu_{-i} = alpha_i / d_i, predictive variance 1 / d_i
    return float(np.sum(-0.5 * _LOG_2PI + 0.5 * np.log(d) - 0.5 * alpha * alpha / d))


CRITERIA = {
    "ml": log_marginal_likelihood,
    "loo": loo_cv_pseudolikelihood,
}
