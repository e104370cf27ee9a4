"""
Multiscale covariance models.

Two interchangeable models share the ``MultiscaleCovariance`` interface:

* ``FullBivariateMatern`` is a 2 x 2 matrix-valued Matérn kernel with one
  shape per block and the cross order fixed to the mean of the two marginal
  orders, valid under the ``check_validity`` conditions.
* ``BlockAvgModel`` is a fine Matérn field and the coarse field obtained by
  averaging it over a square window of side ``eta_c`` clipped to the domain.
  Window integrals are evaluated by tensor-product Gauss-Legendre quadrature
  on panels split where the integrand is not smooth.

Block layouts always order coarse before fine.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from scipy.spatial.distance import cdist
from scipy.special import gammaln

from core.exceptions import ConfigError, ConstraintViolationError, DomainError
from core.kernels import matern

logger = logging.getLogger(__name__)

# Published parameter tables carry three significant figures.
TABLE_VALIDITY_TOL = 1e-2
DEFAULT_QUADRATURE_ORDER = 16

# Upper bound on kernel evaluations held in memory per quadrature chunk.
_CHUNK_EVALS = 4_000_000


class ScaleTag(IntEnum):
    COARSE = 0
    FINE = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "ScaleTag":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise DomainError(f"unknown scale '{value}' (expected fine or coarse)") from None
        return cls(int(value))


# ---------------------------------------------------------------------------
# Full bivariate Matérn
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BivariateMaternParams:
    lambda_c: float
    lambda_f: float
    lambda_cf: float
    nu_c: float
    nu_f: float
    sigma_c: float
    sigma_f: float
    rho: float
    sigma_nc: float = 0.0
    sigma_nf: float = 0.0

    FIELDS = (
        "lambda_c",
        "lambda_f",
        "lambda_cf",
        "nu_c",
        "nu_f",
        "sigma_c",
        "sigma_f",
        "rho",
        "sigma_nc",
        "sigma_nf",
    )

    def __post_init__(self):
        for name in self.FIELDS:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
        for name in ("lambda_c", "lambda_f", "lambda_cf", "nu_c", "nu_f", "sigma_c", "sigma_f"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.sigma_nc < 0.0 or self.sigma_nf < 0.0:
            raise DomainError("nugget standard deviations must be nonnegative")

    @property
    def nu_cf(self) -> float:
        return 0.5 * (self.nu_c + self.nu_f)

    @property
    def a_c(self) -> float:
        return np.sqrt(2.0 * self.nu_c) / self.lambda_c

    @property
    def a_f(self) -> float:
        return np.sqrt(2.0 * self.nu_f) / self.lambda_f

    @property
    def a_cf(self) -> float:
        return np.sqrt(2.0 * self.nu_cf) / self.lambda_cf

    def shape(self, scale_a: ScaleTag, scale_b: ScaleTag) -> Tuple[float, float, float]:
        """(variance factor, length, order) of the requested block."""
        if scale_a != scale_b:
            return self.rho * self.sigma_c * self.sigma_f, self.lambda_cf, self.nu_cf
        if scale_a == ScaleTag.COARSE:
            return self.sigma_c**2, self.lambda_c, self.nu_c
        return self.sigma_f**2, self.lambda_f, self.nu_f

    def nugget_variance(self, scale: ScaleTag) -> float:
        return (self.sigma_nc if scale == ScaleTag.COARSE else self.sigma_nf) ** 2

    def to_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "BivariateMaternParams":
        missing = [name for name in cls.FIELDS[:8] if name not in data]
        if missing:
            raise ConfigError(f"bivariate Matérn parameters missing: {', '.join(missing)}")
        return cls(**{name: float(data[name]) for name in cls.FIELDS if name in data})

    def replace(self, **changes) -> "BivariateMaternParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class ValidityReport:
    feasible: bool
    margin_a: float
    margin_rho: float
    rho_bound: float

    def active_constraints(self, params: BivariateMaternParams, rel: float = 1e-6) -> List[str]:
        active = []
        if abs(self.margin_a) <= rel * params.a_cf**2:
            active.append("a_cf")
        if abs(self.margin_rho) <= rel * max(self.rho_bound, 1.0):
            active.append("rho")
        return active

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def rho_bound(params: BivariateMaternParams) -> float:
    """Largest admissible |rho| for the given shapes, computed in log space."""
    nu_c, nu_f, nu_cf = params.nu_c, params.nu_f, params.nu_cf
    log_bound = (
        nu_c * np.log(params.a_c)
        + nu_f * np.log(params.a_f)
        - 2.0 * nu_cf * np.log(params.a_cf)
        + gammaln(nu_cf)
        - 0.5 * gammaln(nu_c)
        - 0.5 * gammaln(nu_f)
    )
    return float(np.exp(log_bound))


def check_validity(params: BivariateMaternParams, tol: Optional[float] = None) -> ValidityReport:
    if tol is None:
        tol = settings.MULTISCALE_GP["VALIDITY_TOL"]
    a_cf2 = params.a_cf**2
    margin_a = a_cf2 - 0.5 * (params.a_c**2 + params.a_f**2)
    bound = rho_bound(params)
    margin_rho = bound - abs(params.rho)
    feasible = bool(margin_a >= -tol * a_cf2 and margin_rho >= -tol)
    return ValidityReport(
        feasible=feasible,
        margin_a=float(margin_a),
        margin_rho=float(margin_rho),
        rho_bound=bound,
    )


def ensure_valid(params: BivariateMaternParams, tol: Optional[float] = None) -> ValidityReport:
    report = check_validity(params, tol)
    if not report.feasible:
        raise ConstraintViolationError(
            f"bivariate Matérn parameters are not valid: margin_a={report.margin_a:.6g}, "
            f"margin_rho={report.margin_rho:.6g}",
            report=report,
        )
    return report


def cov_full_matern(
    x: Sequence[float],
    scale_x: ScaleTag,
    y: Sequence[float],
    scale_y: ScaleTag,
    params: BivariateMaternParams,
) -> float:
    """One entry of the full bivariate Matérn covariance, nugget included."""
    ensure_valid(params)
    model = FullBivariateMatern(params)
    return model.cov(x, scale_x, y, scale_y)


# ---------------------------------------------------------------------------
# Common interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ConfigError(f"domain must be a nonempty rectangle, got {self}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x0, self.y0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x1, self.y1])

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        slack = 1e-12 * max(self.x1 - self.x0, self.y1 - self.y0)
        return np.all((points >= self.lo - slack) & (points <= self.hi + slack), axis=1)

    def require(self, points: np.ndarray, what: str = "point") -> None:
        inside = self.contains(points)
        if not inside.all():
            bad = np.atleast_2d(points)[~inside][:3]
            raise DomainError(f"{what} outside the domain {self}: {bad.tolist()}")


def _as_points(x, d: int = 2) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if pts.shape[-1] != d:
        raise DomainError(f"expected {d}-dimensional points, got shape {pts.shape}")
    return pts


class MultiscaleCovariance(ABC):
    """Pointwise and batch evaluation of a two-scale covariance."""

    kind = "abstract"
    domain: Optional[Rectangle] = None

    @abstractmethod
    def paired(self, xa: np.ndarray, xb: np.ndarray, scale_a: ScaleTag, scale_b: ScaleTag) -> np.ndarray:
        """Latent covariance between matching rows of ``xa`` and ``xb``."""

    @abstractmethod
    def nugget_variance(self, scale: ScaleTag) -> float:
        """Zero-lag variance added on the diagonal of observation blocks."""

    def block(
        self,
        xa: np.ndarray,
        xb: np.ndarray,
        scale_a: ScaleTag,
        scale_b: ScaleTag,
        symmetric: bool = False,
    ) -> np.ndarray:
        """Latent covariance matrix between the rows of ``xa`` and ``xb``."""
        na, nb = len(xa), len(xb)
        if symmetric:
            iu, ju = np.triu_indices(na)
            vals = self.paired(xa[iu], xb[ju], scale_a, scale_b)
            out = np.empty((na, nb))
            out[iu, ju] = vals
            out[ju, iu] = vals
            return out
        ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
        vals = self.paired(xa[ia.ravel()], xb[ib.ravel()], scale_a, scale_b)
        return vals.reshape(na, nb)

    def validity(self) -> Optional[ValidityReport]:
        return None

    def is_valid(self, tol: Optional[float] = None) -> bool:
        return True

    def check_points(self, points: np.ndarray) -> None:
        if self.domain is not None:
            self.domain.require(points)

    def cov(self, x, scale_x, y, scale_y) -> float:
        scale_x, scale_y = ScaleTag.parse(scale_x), ScaleTag.parse(scale_y)
        xa, xb = _as_points(x), _as_points(y)
        self.check_points(np.vstack([xa, xb]))
        value = float(self.paired(xa, xb, scale_x, scale_y)[0])
        if scale_x == scale_y and np.array_equal(xa, xb):
            value += self.nugget_variance(scale_x)
        return value

    def assemble(
        self,
        xa: np.ndarray,
        tags_a: np.ndarray,
        xb: np.ndarray,
        tags_b: np.ndarray,
        nugget: bool = False,
    ) -> np.ndarray:
        """Covariance matrix between two tagged location sets.

        With ``nugget`` the zero-lag nugget is added where two entries share
        both location and scale.
        """
        xa, xb = np.asarray(xa, dtype=float), np.asarray(xb, dtype=float)
        tags_a, tags_b = np.asarray(tags_a), np.asarray(tags_b)
        if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
            raise DomainError(f"dimension mismatch between {xa.shape} and {xb.shape}")
        if len(tags_a) != len(xa) or len(tags_b) != len(xb):
            raise DomainError("each location needs exactly one scale tag")
        same_set = xa is xb and tags_a is tags_b
        out = np.zeros((len(xa), len(xb)))
        for sa in ScaleTag:
            rows = np.flatnonzero(tags_a == sa)
            if rows.size == 0:
                continue
            for sb in ScaleTag:
                cols = np.flatnonzero(tags_b == sb)
                if cols.size == 0:
                    continue
                if same_set and sb < sa:
                    out[np.ix_(rows, cols)] = out[np.ix_(cols, rows)].T
                    continue
                out[np.ix_(rows, cols)] = self.block(
                    xa[rows], xb[cols], sa, sb, symmetric=same_set and sa == sb
                )
        if nugget:
            for scale in ScaleTag:
                variance = self.nugget_variance(scale)
                if variance == 0.0:
                    continue
                rows = np.flatnonzero(tags_a == scale)
                cols = np.flatnonzero(tags_b == scale)
                if rows.size == 0 or cols.size == 0:
                    continue
                coincide = np.all(xa[rows][:, None, :] == xb[cols][None, :, :], axis=2)
                ri, ci = np.nonzero(coincide)
                out[rows[ri], cols[ci]] += variance
        return out

    def prior_variance(self, x: np.ndarray, tags: np.ndarray) -> np.ndarray:
        """Latent variance at each tagged location."""
        x = np.asarray(x, dtype=float)
        tags = np.asarray(tags)
        out = np.zeros(len(x))
        for scale in ScaleTag:
            idx = np.flatnonzero(tags == scale)
            if idx.size:
                out[idx] = self.paired(x[idx], x[idx], scale, scale)
        return out

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class FullBivariateMatern(MultiscaleCovariance):
    params: BivariateMaternParams
    domain: Optional[Rectangle] = None

    kind = "bimatern"

    def paired(self, xa, xb, scale_a, scale_b) -> np.ndarray:
        variance, lam, nu = self.params.shape(scale_a, scale_b)
        diff = np.asarray(xa, dtype=float) - np.asarray(xb, dtype=float)
        r = np.sqrt(np.sum(diff * diff, axis=-1))
        return variance * matern(r / lam, nu)

    def block(self, xa, xb, scale_a, scale_b, symmetric=False) -> np.ndarray:
        variance, lam, nu = self.params.shape(scale_a, scale_b)
        return variance * matern(cdist(xa, xb) / lam, nu)

    def nugget_variance(self, scale: ScaleTag) -> float:
        return self.params.nugget_variance(scale)

    def validity(self) -> ValidityReport:
        return check_validity(self.params)

    def is_valid(self, tol: Optional[float] = None) -> bool:
        return check_validity(self.params, tol).feasible

    def describe(self) -> dict:
        return {"kind": self.kind, "params": self.params.to_dict()}


# ---------------------------------------------------------------------------
# Block-average model
# ---------------------------------------------------------------------------


def _panel_rule(breaks: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on consecutive panels.

    ``breaks`` has shape (P, k + 1); the result has shape (P, k * order).
    Zero-width panels get zero weight.
    """
    t, w = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (breaks[:, 1:] + breaks[:, :-1])
    half = 0.5 * (breaks[:, 1:] - breaks[:, :-1])
    nodes = mid[:, :, None] + half[:, :, None] * t[None, None, :]
    weights = half[:, :, None] * w[None, None, :]
    P = breaks.shape[0]
    return nodes.reshape(P, -1), weights.reshape(P, -1)


def _overlap_length(u: np.ndarray, a, b, c, d) -> np.ndarray:
    """Length of [a, b] intersected with [c + u, d + u] (broadcast over u)."""
    return np.maximum(0.0, np.minimum(b, d + u) - np.maximum(a, c + u))


@dataclass(frozen=True)
class BlockAvgModel(MultiscaleCovariance):
    fine_sigma: float
    fine_lambda: float
    fine_nu: float
    eta_c: float
    domain: Rectangle = field(default_factory=lambda: Rectangle(0.0, 0.0, 1.0, 1.0))
    quadrature_order: int = DEFAULT_QUADRATURE_ORDER
    sigma_nc: float = 0.0
    sigma_nf: float = 0.0

    kind = "blockavg"

    def __post_init__(self):
        if self.quadrature_order < 2:
            raise ConfigError(f"quadrature order must be at least 2, got {self.quadrature_order}")
        for name in ("fine_sigma", "fine_lambda", "fine_nu", "eta_c"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise DomainError(f"{name} must be positive, got {value}")
        if self.sigma_nc < 0.0 or self.sigma_nf < 0.0:
            raise DomainError("nugget standard deviations must be nonnegative")

    def replace(self, **changes) -> "BlockAvgModel":
        return replace(self, **changes)

    def fine_kernel(self, r: np.ndarray) -> np.ndarray:
        return self.fine_sigma**2 * matern(np.asarray(r) / self.fine_lambda, self.fine_nu)

    def window(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Averaging window H(z) clipped to the domain, as (lo, hi) corners."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        half = 0.5 * self.eta_c
        lo = np.maximum(z - half, self.domain.lo)
        hi = np.minimum(z + half, self.domain.hi)
        return lo, hi

    def nugget_variance(self, scale: ScaleTag) -> float:
        return (self.sigma_nc if scale == ScaleTag.COARSE else self.sigma_nf) ** 2

    def block(self, xa, xb, scale_a, scale_b, symmetric=False) -> np.ndarray:
        if scale_a == ScaleTag.FINE and scale_b == ScaleTag.FINE:
            return self.fine_kernel(cdist(xa, xb))
        return super().block(xa, xb, scale_a, scale_b, symmetric=symmetric)

    def paired(self, xa, xb, scale_a, scale_b) -> np.ndarray:
        xa = np.atleast_2d(np.asarray(xa, dtype=float))
        xb = np.atleast_2d(np.asarray(xb, dtype=float))
        if scale_a == ScaleTag.FINE and scale_b == ScaleTag.FINE:
            diff = xa - xb
            return self.fine_kernel(np.sqrt(np.sum(diff * diff, axis=-1)))
        if scale_a == ScaleTag.COARSE and scale_b == ScaleTag.FINE:
            return self._window_point(xa, xb)
        if scale_a == ScaleTag.FINE and scale_b == ScaleTag.COARSE:
            return self._window_point(xb, xa)
        return self._window_window(xa, xb)

    def _chunks(self, n: int, evals_per_pair: int) -> Iterable[slice]:
        step = max(1, _CHUNK_EVALS // evals_per_pair)
        for start in range(0, n, step):
            yield slice(start, min(n, start + step))

    def _window_point(self, coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
        """Average of the fine kernel over H(coarse) against a fine point."""
        q = self.quadrature_order
        lo, hi = self.window(coarse)
        out = np.empty(len(coarse))
        for sl in self._chunks(len(coarse), (2 * q) ** 2):
            l, h, y = lo[sl], hi[sl], fine[sl]
            axes = []
            for i in range(2):
                breaks = np.stack([l[:, i], np.clip(y[:, i], l[:, i], h[:, i]), h[:, i]], axis=1)
                axes.append(_panel_rule(breaks, q))
            (u1, w1), (u2, w2) = axes
            d1 = u1 - y[:, :1]
            d2 = u2 - y[:, 1:2]
            r = np.sqrt(d1[:, :, None] ** 2 + d2[:, None, :] ** 2)
            integral = np.einsum("pi,pj,pij->p", w1, w2, self.fine_kernel(r))
            out[sl] = integral / np.prod(h - l, axis=1)
        return out

    def _window_window(self, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
        """Average of the fine kernel over H(xa) x H(xb).

        The double window integral is reduced to an integral over the lag
        u = x - y weighted by the per-axis overlap length, which is piecewise
        linear; panels are split at its kinks and at zero lag.
        """
        q = self.quadrature_order
        lo_a, hi_a = self.window(xa)
        lo_b, hi_b = self.window(xb)
        out = np.empty(len(xa))
        for sl in self._chunks(len(xa), (4 * q) ** 2):
            axes = []
            for i in range(2):
                a, b = lo_a[sl, i], hi_a[sl, i]
                c, d = lo_b[sl, i], hi_b[sl, i]
                t_lo, t_hi = a - d, b - c
                breaks = np.sort(
                    np.stack([t_lo, a - c, b - d, np.clip(0.0, t_lo, t_hi), t_hi], axis=1),
                    axis=1,
                )
                u, w = _panel_rule(breaks, q)
                weight = w * _overlap_length(u, a[:, None], b[:, None], c[:, None], d[:, None])
                axes.append((u, weight))
            (u1, g1), (u2, g2) = axes
            r = np.sqrt(u1[:, :, None] ** 2 + u2[:, None, :] ** 2)
            integral = np.einsum("pi,pj,pij->p", g1, g2, self.fine_kernel(r))
            area_a = np.prod(hi_a[sl] - lo_a[sl], axis=1)
            area_b = np.prod(hi_b[sl] - lo_b[sl], axis=1)
            out[sl] = integral / (area_a * area_b)
        return out

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "fine_sigma": self.fine_sigma,
            "fine_lambda": self.fine_lambda,
            "fine_nu": self.fine_nu,
            "eta_c": self.eta_c,
            "domain": [self.domain.x0, self.domain.y0, self.domain.x1, self.domain.y1],
            "quadrature_order": self.quadrature_order,
            "sigma_nc": self.sigma_nc,
            "sigma_nf": self.sigma_nf,
        }


def cov_block_avg(
    x: Sequence[float],
    scale_x: ScaleTag,
    y: Sequence[float],
    scale_y: ScaleTag,
    model: BlockAvgModel,
) -> float:
    """One entry of the block-average covariance, nugget included."""
    return model.cov(x, scale_x, y, scale_y)


def true_coarse_parameters(model: BlockAvgModel, x: Sequence[float]) -> Tuple[float, float]:
    """Coarse standard deviation and collocated correlation implied at ``x``."""
    pts = _as_points(x)
    model.check_points(pts)
    var_c = float(model.paired(pts, pts, ScaleTag.COARSE, ScaleTag.COARSE)[0])
    cross = float(model.paired(pts, pts, ScaleTag.COARSE, ScaleTag.FINE)[0])
    sigma_c = np.sqrt(var_c)
    return float(sigma_c), float(cross / (sigma_c * model.fine_sigma))


def pseudo_isotropic_variogram(
    model: MultiscaleCovariance,
    scale_pair: Tuple[ScaleTag, ScaleTag],
    x: Sequence[float],
    r_values: Sequence[float],
) -> np.ndarray:
    """C(x, x) - C(x, x + r e1) for each r in the requested block."""
    sa, sb = (ScaleTag.parse(s) for s in scale_pair)
    origin = _as_points(x)
    r = np.asarray(r_values, dtype=float)
    shifted = np.repeat(origin, len(r), axis=0)
    shifted[:, 0] += r
    if model.domain is not None:
        model.domain.require(origin)
        inside = model.domain.contains(shifted)
        if not inside.all():
            raise DomainError(f"displaced point leaves the domain for r = {r[~inside].tolist()}")
    at_zero = float(model.paired(origin, origin, sa, sb)[0])
    return at_zero - model.paired(np.repeat(origin, len(r), axis=0), shifted, sa, sb)


def pseudo_cross_variogram(
    model: MultiscaleCovariance, x: Sequence[float], r_values: Sequence[float]
) -> np.ndarray:
    """½(C_cc(0) + C_ff(0)) - C_cf(r e1): the model counterpart of the
    empirical pseudo cross-variogram."""
    origin = _as_points(x)
    half_sill = 0.5 * (
        float(model.paired(origin, origin, ScaleTag.COARSE, ScaleTag.COARSE)[0])
        + float(model.paired(origin, origin, ScaleTag.FINE, ScaleTag.FINE)[0])
    )
    cross_zero = float(model.paired(origin, origin, ScaleTag.COARSE, ScaleTag.FINE)[0])
    gamma = pseudo_isotropic_variogram(model, (ScaleTag.COARSE, ScaleTag.FINE), x, r_values)
    return half_sill - cross_zero + gamma


def make_model(kind: str, params, domain: Optional[Rectangle] = None, **options) -> MultiscaleCovariance:
    """Build a covariance model from its kind and parameter mapping/object."""
    if kind == FullBivariateMatern.kind:
        if not isinstance(params, BivariateMaternParams):
            params = BivariateMaternParams.from_dict(params)
        return FullBivariateMatern(params, domain=domain)
    if kind == BlockAvgModel.kind:
        if isinstance(params, BlockAvgModel):
            return params
        values = dict(params)
        values.update(options)
        values.pop("kind", None)
        if "domain" in values:
            values["domain"] = Rectangle(*values["domain"])
        elif domain is not None:
            values["domain"] = domain
        return BlockAvgModel(**values)
    raise ConfigError(f"unknown covariance model '{kind}' (expected bimatern or blockavg)")
