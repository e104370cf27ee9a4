"""
Univariate Matérn correlation functions.

The correlation of order ``nu`` is evaluated on the scaled distance ``r``
(already divided by the correlation length, or the Mahalanobis norm for the
anisotropic form)::

    M(r | nu) = 2**(1 - nu) / Gamma(nu) * (sqrt(2 nu) r)**nu * K_nu(sqrt(2 nu) r)

Evaluation happens in log space with the exponentially scaled Bessel function
so that large arguments underflow to exactly zero and large orders never
overflow.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg
from scipy.special import gammaln, kve

from core.exceptions import DomainError

logger = logging.getLogger(__name__)

# Above this order the Gaussian limit exp(-r**2 / 2) is returned.
NU_MAX = 50.0

_LOG2 = np.log(2.0)

ArrayLike = Union[float, np.ndarray]


def _check_order(nu: float) -> float:
    nu = float(nu)
    if not np.isfinite(nu) or nu <= 0.0:
        raise DomainError(f"Matérn order must be a positive finite number, got {nu}")
    return nu


def matern(r: ArrayLike, nu: float) -> ArrayLike:
    """Matérn correlation of order ``nu`` at scaled distance(s) ``r``.

    Returns a float for scalar input and an array of the same shape otherwise.
    ``matern(0, nu)`` is exactly 1.
    """
    nu = _check_order(nu)
    arr = np.asarray(r, dtype=float)
    if np.isnan(arr).any():
        raise DomainError("Matérn distance contains NaN")
    if (arr < 0.0).any():
        raise DomainError(f"Matérn distance must be nonnegative, got min {arr.min()}")

    flat = np.atleast_1d(arr).ravel()
    if nu > NU_MAX:
        out = np.exp(-0.5 * flat * flat)
    else:
        out = np.ones_like(flat)
        positive = (flat > 0.0) & np.isfinite(flat)
        if positive.any():
            z = np.sqrt(2.0 * nu) * flat[positive]
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                log_m = (
                    (1.0 - nu) * _LOG2
                    - gammaln(nu)
                    + nu * np.log(z)
                    + np.log(kve(nu, z))
                    - z
                )
            # kve overflows only at tiny arguments where the limit is 1
            out[positive] = np.exp(np.minimum(log_m, 0.0))
        out[np.isinf(flat)] = 0.0

    if np.ndim(r) == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def gaussian_limit(r: ArrayLike) -> ArrayLike:
    """Squared-exponential kernel recovered by the Matérn family as nu grows."""
    arr = np.asarray(r, dtype=float)
    out = np.exp(-0.5 * arr * arr)
    return float(out) if np.ndim(r) == 0 else out


def _check_spd(D: np.ndarray):
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1] or not 1 <= D.shape[0] <= 3:
        raise DomainError(f"D must be a d x d matrix with 1 <= d <= 3, got shape {D.shape}")
    if not np.allclose(D, D.T, rtol=1e-10, atol=0.0):
        raise DomainError(f"matrix D is not symmetric: {D.tolist()}")
    try:
        factor = linalg.cho_factor(D, lower=True)
    except linalg.LinAlgError:
        raise DomainError(f"matrix D is not positive definite: {D.tolist()}") from None
    return D, factor


def mahalanobis(r: np.ndarray, D: np.ndarray) -> ArrayLike:
    """Mahalanobis norm ``sqrt(r^T D^{-1} r)``.

    ``r`` is a single d-vector or an (n, d) array of lag vectors.
    """
    D, factor = _check_spd(D)
    lags = np.asarray(r, dtype=float)
    single = lags.ndim == 1
    lags = np.atleast_2d(lags)
    if lags.shape[1] != D.shape[0]:
        raise DomainError(
            f"lag dimension {lags.shape[1]} does not match D dimension {D.shape[0]}"
        )
    solved = linalg.cho_solve(factor, lags.T)
    quad = np.einsum("ij,ji->i", lags, solved)
    out = np.sqrt(np.maximum(quad, 0.0))
    return float(out[0]) if single else out


def isotropic_metric(lam: float, d: int = 2) -> np.ndarray:
    """The metric D = lambda**-2 I of the isotropic case."""
    if lam <= 0.0:
        raise DomainError(f"correlation length must be positive, got {lam}")
    return np.eye(d) / (lam * lam)


@dataclass(frozen=True)
class MaternShape:
    """Shape of a univariate Matérn correlation: order, length and metric."""

    nu: float
    lam: float
    D: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_order(self.nu)
        if not np.isfinite(self.lam) or self.lam <= 0.0:
            raise DomainError(f"correlation length must be positive, got {self.lam}")
        if self.D is not None:
            _check_spd(self.D)

    def metric(self, d: int = 2) -> np.ndarray:
        if self.D is not None:
            return np.asarray(self.D, dtype=float)
        return isotropic_metric(self.lam, d)

    def correlation(self, lags: np.ndarray) -> ArrayLike:
        """Correlation at lag vector(s), using ``D`` when present."""
        lags = np.asarray(lags, dtype=float)
        d = lags.shape[-1]
        if self.D is None:
            dist = np.sqrt(np.sum(lags * lags, axis=-1)) / self.lam
        else:
            dist = mahalanobis(lags, self.metric(d))
        return matern(dist, self.nu)
