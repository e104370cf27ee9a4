"""
Hyperparameter estimation by maximizing the marginal likelihood or the
leave-one-out pseudo-likelihood.

Parameters are searched in a transformed space where every coordinate is
unconstrained: lengths, orders and standard deviations are log-transformed
and the collocated correlation uses xi = log((1 + rho) / (1 - rho)). The
validity conditions of the bivariate Matérn model are enforced by projection
(shrinking lambda_cf, then |rho|) plus a quadratic penalty on the distance to
the projected point, which keeps the surface continuous for the
finite-difference BFGS search.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from django.conf import settings
from scipy import optimize

from core.covariance_models import (
    BivariateMaternParams,
    BlockAvgModel,
    FullBivariateMatern,
    MultiscaleCovariance,
    Rectangle,
    ScaleTag,
    check_validity,
    ensure_valid,
    rho_bound,
)
from core.exceptions import ConfigError, DomainError, NumericalError, OptimizationError
from core.fields import ObservationSet, VariogramTable, empirical_variogram
from core.gp import CRITERIA, FactorizationStats, MultiscaleDataset
from core.tasks.task_manager import TaskManager
from utils.rng import generator

logger = logging.getLogger(__name__)

# Objective value assigned to parameters that cannot be evaluated.
LARGE = 1e10
PENALTY_WEIGHT = 1e6
NU_PENALTY_WEIGHT = 1e2
# Zero nuggets are mapped to this value before the log transform.
NUGGET_FLOOR = 1e-12
# Relative margins used when projecting onto the validity region.
_A_MARGIN = 1e-9
_RHO_MARGIN = 1e-10
_RHO_CLIP = 1.0 - 1e-15


def log_nu_box() -> Tuple[float, float]:
    lo, hi = settings.MULTISCALE_GP["NU_BOX"]
    return math.log(lo), math.log(hi)


def rho_to_xi(rho: float) -> float:
    if not -1.0 < rho < 1.0:
        raise DomainError(f"rho must lie strictly inside (-1, 1), got {rho}")
    return math.log((1.0 + rho) / (1.0 - rho))


def xi_to_rho(xi: float) -> float:
    return float(np.clip(np.tanh(0.5 * xi), -_RHO_CLIP, _RHO_CLIP))


def _nu_penalty(log_nu: np.ndarray) -> float:
    lo, hi = log_nu_box()
    over = np.maximum(0.0, log_nu - hi)
    under = np.maximum(0.0, lo - log_nu)
    return float(NU_PENALTY_WEIGHT * np.sum(over * over + under * under))


class ParameterSpace(ABC):
    """A covariance family seen through its unconstrained coordinates."""

    names: Tuple[str, ...] = ()
    nu_index: Tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.names)

    @abstractmethod
    def transform(self, params) -> np.ndarray:
        pass

    @abstractmethod
    def untransform(self, z: np.ndarray):
        pass

    @abstractmethod
    def make_model(self, params) -> MultiscaleCovariance:
        pass

    def violation(self, params) -> float:
        """Squared magnitude of the validity-constraint violation; 0 when feasible."""
        return 0.0

    def project(self, params):
        return params

    def active_constraints(self, params) -> List[str]:
        return []

    def nu_penalty(self, z: np.ndarray) -> float:
        return _nu_penalty(np.asarray(z)[list(self.nu_index)])

    def to_dict(self, params) -> Dict[str, float]:
        return dict(zip(self.names, self.values(params)))

    def values(self, params) -> List[float]:
        return [float(getattr(params, name)) for name in self.names]


class BivariateMaternSpace(ParameterSpace):
    names = BivariateMaternParams.FIELDS
    nu_index = (3, 4)
    kind = FullBivariateMatern.kind

    def __init__(self, domain: Optional[Rectangle] = None):
        self.domain = domain

    def transform(self, params: BivariateMaternParams) -> np.ndarray:
        p = params
        return np.array(
            [
                math.log(p.lambda_c),
                math.log(p.lambda_f),
                math.log(p.lambda_cf),
                math.log(p.nu_c),
                math.log(p.nu_f),
                math.log(p.sigma_c),
                math.log(p.sigma_f),
                rho_to_xi(p.rho),
                math.log(max(p.sigma_nc, NUGGET_FLOOR)),
                math.log(max(p.sigma_nf, NUGGET_FLOOR)),
            ]
        )

    def untransform(self, z: np.ndarray) -> BivariateMaternParams:
        z = np.asarray(z, dtype=float)
        if z.shape != (10,):
            raise DomainError(f"expected 10 transformed coordinates, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise DomainError("transformed parameters must be finite")
        nu = np.exp(np.clip(z[3:5], *log_nu_box()))
        with np.errstate(over="raise"):
            try:
                e = np.exp(z)
            except FloatingPointError:
                raise DomainError("transformed parameters overflow") from None
        return BivariateMaternParams(
            lambda_c=float(e[0]),
            lambda_f=float(e[1]),
            lambda_cf=float(e[2]),
            nu_c=float(nu[0]),
            nu_f=float(nu[1]),
            sigma_c=float(e[5]),
            sigma_f=float(e[6]),
            rho=xi_to_rho(z[7]),
            sigma_nc=float(e[8]),
            sigma_nf=float(e[9]),
        )

    def make_model(self, params: BivariateMaternParams) -> FullBivariateMatern:
        return FullBivariateMatern(params, domain=self.domain)

    def violation(self, params: BivariateMaternParams) -> float:
        report = check_validity(params)
        if report.feasible:
            return 0.0
        va = max(0.0, -report.margin_a) / params.a_cf**2
        vr = max(0.0, -report.margin_rho)
        return va * va + vr * vr

    def project(self, params: BivariateMaternParams) -> BivariateMaternParams:
        """Nearest feasible point along lambda_cf, then |rho|."""
        a_cf2_min = 0.5 * (params.a_c**2 + params.a_f**2)
        if params.a_cf**2 < a_cf2_min * (1.0 + _A_MARGIN):
            a_cf = math.sqrt(a_cf2_min * (1.0 + 2.0 * _A_MARGIN))
            params = params.replace(lambda_cf=math.sqrt(2.0 * params.nu_cf) / a_cf)
        bound = rho_bound(params)
        if abs(params.rho) > bound * (1.0 - _RHO_MARGIN):
            params = params.replace(rho=math.copysign(bound * (1.0 - 2.0 * _RHO_MARGIN), params.rho))
        return params

    def active_constraints(self, params: BivariateMaternParams) -> List[str]:
        return check_validity(params).active_constraints(params)


class BlockAverageSpace(ParameterSpace):
    """Fine-field parameters of a block-average model, optionally with eta_c."""

    kind = BlockAvgModel.kind

    def __init__(self, template: BlockAvgModel, fit_eta: bool = False):
        self.template = template
        self.fit_eta = fit_eta
        names = ["fine_sigma", "fine_lambda", "fine_nu"]
        if fit_eta:
            names.append("eta_c")
        names += ["sigma_nc", "sigma_nf"]
        self.names = tuple(names)
        self.nu_index = (2,)

    def transform(self, params: BlockAvgModel) -> np.ndarray:
        out = []
        for name in self.names:
            value = float(getattr(params, name))
            if name.startswith("sigma_n"):
                value = max(value, NUGGET_FLOOR)
            out.append(math.log(value))
        return np.array(out)

    def untransform(self, z: np.ndarray) -> BlockAvgModel:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.size,):
            raise DomainError(f"expected {self.size} transformed coordinates, got shape {z.shape}")
        if not np.all(np.isfinite(z)) or np.any(z > 700.0):
            raise DomainError("transformed parameters must be finite")
        values = dict(zip(self.names, np.exp(z).tolist()))
        values["fine_nu"] = float(np.exp(np.clip(z[2], *log_nu_box())))
        return self.template.replace(**values)

    def make_model(self, params: BlockAvgModel) -> BlockAvgModel:
        return params


@dataclass
class FitOptions:
    n_starts: int = 5
    max_evals: int = 4000
    max_iter: int = 200
    tol: float = 1e-5
    fd_step: float = 1e-5
    jitter_sd: float = 0.25
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_starts < 1:
            raise ConfigError(f"n_starts must be at least 1, got {self.n_starts}")
        if self.max_evals < 1 or self.max_iter < 1:
            raise ConfigError("max_evals and max_iter must be positive")
        if self.tol <= 0.0 or self.fd_step <= 0.0:
            raise ConfigError("tol and fd_step must be positive")

    def to_dict(self) -> dict:
        # thread count never changes results
        data = asdict(self)
        data.pop("threads")
        return data


@dataclass
class StartOutcome:
    index: int
    params: Any = None
    value: float = float("inf")
    initial_value: float = float("inf")
    n_evals: int = 0
    converged: bool = False
    message: str = ""
    jitter_events: int = 0
    failures: int = 0

    @property
    def ok(self) -> bool:
        return self.params is not None and np.isfinite(self.value)

    def diagnostics(self, space: ParameterSpace) -> dict:
        return {
            "start_index": self.index,
            "ok": self.ok,
            "objective": self.value if self.ok else None,
            "initial_objective": self.initial_value if np.isfinite(self.initial_value) else None,
            "n_evals": self.n_evals,
            "converged": self.converged,
            "message": self.message,
            "jitter_events": self.jitter_events,
            "factorization_failures": self.failures,
            "params": space.to_dict(self.params) if self.params is not None else None,
        }


@dataclass
class FitResult:
    theta_star: Any
    objective_value: float
    criterion: str
    n_evals: int
    converged: bool
    active_constraints: List[str]
    jitter_events: int
    start_index: int
    space: ParameterSpace = field(repr=False)
    starts: List[dict] = field(default_factory=list)
    options: Optional[FitOptions] = None

    @property
    def model(self) -> MultiscaleCovariance:
        return self.space.make_model(self.theta_star)

    def params_dict(self) -> Dict[str, float]:
        return self.space.to_dict(self.theta_star)

    def table_row(self) -> Dict[str, Any]:
        row = {"criterion": self.criterion.upper()}
        row.update(self.params_dict())
        return row

    def to_dict(self) -> dict:
        out = {
            "model": self.space.kind,
            "criterion": self.criterion,
            "params": self.params_dict(),
            "objective_value": self.objective_value,
            "n_evals": self.n_evals,
            "converged": self.converged,
            "active_constraints": list(self.active_constraints),
            "jitter_events": self.jitter_events,
            "start_index": self.start_index,
            "starts": self.starts,
        }
        if isinstance(self.theta_star, BivariateMaternParams):
            out["validity"] = check_validity(self.theta_star).to_dict()
        if self.options is not None:
            out["options"] = self.options.to_dict()
        return out


class EvaluationBudgetExceeded(Exception):
    pass


def _criterion(name: str):
    try:
        return CRITERIA[name]
    except KeyError:
        raise ConfigError(f"unknown criterion '{name}' (expected one of {', '.join(CRITERIA)})") from None


def objective(
    data: MultiscaleDataset,
    z: np.ndarray,
    criterion: str = "ml",
    space: Optional[ParameterSpace] = None,
    stats: Optional[FactorizationStats] = None,
) -> float:
    """Negative pseudo-likelihood at the transformed point ``z``.

    Infeasible points score LARGE plus a quadratic penalty on the violation,
    and so does a factorization failure at a feasible point.
    """
    space = space or BivariateMaternSpace()
    evaluate = _criterion(criterion)
    z = np.asarray(z, dtype=float)
    penalty = space.nu_penalty(z)
    try:
        params = space.untransform(z)
    except DomainError:
        return 2.0 * LARGE
    violation = space.violation(params)
    if violation > 0.0:
        return LARGE + PENALTY_WEIGHT * violation + penalty
    try:
        value = evaluate(data, space.make_model(params), stats)
    except NumericalError as e:
        logger.debug(f"Factorization failed at a feasible point: {e}")
        if stats is not None:
            stats.failures += 1
        return LARGE + penalty
    if not np.isfinite(value):
        return LARGE + penalty
    return -value + penalty


class ProjectedObjective:
    """Objective evaluated at the feasible projection of each point.

    The squared distance between ``z`` and its projection is penalized, so
    the surface is continuous across the constraint boundary. The best
    projected point seen so far is retained.
    """

    def __init__(self, data: MultiscaleDataset, criterion: str, space: ParameterSpace, max_evals: Optional[int] = None):
        self.data = data
        self.criterion = criterion
        self.evaluate = _criterion(criterion)
        self.space = space
        self.max_evals = max_evals
        self.stats = FactorizationStats()
        self.n_evals = 0
        self.best_value = float("inf")
        self.best_params = None

    def __call__(self, z: np.ndarray) -> float:
        if self.max_evals is not None and self.n_evals >= self.max_evals:
            raise EvaluationBudgetExceeded()
        self.n_evals += 1
        z = np.asarray(z, dtype=float)
        try:
            params = self.space.project(self.space.untransform(z))
        except DomainError:
            return 2.0 * LARGE
        distance = self.space.transform(params) - z
        distance[list(self.space.nu_index)] = 0.0
        penalty = PENALTY_WEIGHT * float(distance @ distance) + self.space.nu_penalty(z)
        try:
            value = -self.evaluate(self.data, self.space.make_model(params), self.stats)
        except NumericalError as e:
            logger.debug(f"Objective evaluation failed: {e}")
            return LARGE + penalty
        if not np.isfinite(value):
            return LARGE + penalty
        if value < self.best_value:
            self.best_value = value
            self.best_params = params
        logger.debug(f"objective {value:.10g} (penalty {penalty:.3g})")
        return value + penalty


def fd_gradient(fun, z: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``step * max(1, |z_i|)``."""
    z = np.asarray(z, dtype=float)
    h = step * np.maximum(1.0, np.abs(z))
    grad = np.empty_like(z)
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h[i]
        grad[i] = (fun(z + e) - fun(z - e)) / (2.0 * h[i])
    return grad


def _run_start(
    data: MultiscaleDataset,
    criterion: str,
    space: ParameterSpace,
    options: FitOptions,
    start: Tuple[int, np.ndarray],
) -> StartOutcome:
    index, z0 = start
    fun = ProjectedObjective(data, criterion, space, options.max_evals)
    outcome = StartOutcome(index=index)
    try:
        outcome.initial_value = fun(z0)
        if fun.best_params is not None:
            outcome.initial_value = fun.best_value
        result = optimize.minimize(
            fun,
            z0,
            jac=lambda z: fd_gradient(fun, z, options.fd_step),
            method="BFGS",
            options={"gtol": options.tol, "maxiter": options.max_iter},
        )
        # status 2 is a line-search stall; every evaluated point is feasible
        outcome.converged = result.status in (0, 2)
        outcome.message = str(result.message)
    except EvaluationBudgetExceeded:
        outcome.message = f"evaluation budget of {options.max_evals} exhausted"
    outcome.params = fun.best_params
    outcome.value = fun.best_value
    outcome.n_evals = fun.n_evals
    outcome.jitter_events = fun.stats.jitter_events
    outcome.failures = fun.stats.failures
    if not outcome.converged:
        logger.warning(f"Fit start {index} did not converge: {outcome.message}")
    else:
        logger.info(f"Fit start {index} finished: objective {outcome.value:.10g} after {outcome.n_evals} evaluations")
    return outcome


def start_points(space: ParameterSpace, init, options: FitOptions) -> List[np.ndarray]:
    """The initial point plus jittered restarts re-projected to feasibility."""
    z_init = space.transform(space.project(init))
    points = [z_init]
    for k in range(1, options.n_starts):
        jitter = generator(options.seed, k).normal(0.0, options.jitter_sd, size=len(z_init))
        params = space.project(space.untransform(z_init + jitter))
        points.append(space.transform(params))
    return points


def fit(
    data: MultiscaleDataset,
    criterion: str = "ml",
    init=None,
    options: Optional[FitOptions] = None,
    space: Optional[ParameterSpace] = None,
    task_manager: Optional[TaskManager] = None,
) -> FitResult:
    """Maximize the chosen criterion from ``init`` and jittered restarts."""
    _criterion(criterion)
    options = options or FitOptions()
    space = space or BivariateMaternSpace()
    if init is None:
        if isinstance(space, BlockAverageSpace):
            init = space.template
        else:
            init = init_from_empirical(data)
    starts = start_points(space, init, options)
    logger.info(f"Fitting {space.kind} by {criterion.upper()} with {len(starts)} starts on N={data.n}")

    def run(start):
        return _run_start(data, criterion, space, options, start)

    own_manager = task_manager is None
    manager = task_manager or TaskManager(max_workers=options.threads)
    try:
        outcomes = manager.map_ordered("fit-start", run, list(enumerate(starts)))
    finally:
        if own_manager:
            manager.shutdown()

    diagnostics = [o.diagnostics(space) for o in outcomes]
    finished = [o for o in outcomes if o.ok]
    if not finished:
        raise OptimizationError(f"all {len(outcomes)} fit starts failed", diagnostics=diagnostics)
    best = min(finished, key=lambda o: (o.value, o.index))
    value = _criterion(criterion)(data, space.make_model(best.params))
    if isinstance(best.params, BivariateMaternParams):
        ensure_valid(best.params)
    return FitResult(
        theta_star=best.params,
        objective_value=float(value),
        criterion=criterion,
        n_evals=sum(o.n_evals for o in outcomes),
        converged=best.converged,
        active_constraints=space.active_constraints(best.params),
        jitter_events=sum(o.jitter_events for o in outcomes),
        start_index=best.index,
        space=space,
        starts=diagnostics,
        options=options,
    )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _correlation_length(table: VariogramTable, sill: float) -> float:
    filled = table.counts > 0
    lags, values = table.lags[filled], table.values[filled]
    reached = np.flatnonzero(values >= (1.0 - math.exp(-1.0)) * sill)
    return float(lags[reached[0]] if reached.size else lags[-1])


def init_from_empirical(data: MultiscaleDataset, n_bins: int = 15) -> BivariateMaternParams:
    """Feasible starting point read off the empirical variograms."""
    if data.n_f < 5 or data.n_c < 5:
        raise ConfigError(
            f"initialization needs at least 5 observations per scale, got {data.n_f} fine and {data.n_c} coarse"
        )
    fine = ObservationSet(data.X_f, data.y_f, ScaleTag.FINE)
    coarse = ObservationSet(data.X_c, data.y_c, ScaleTag.COARSE)
    gamma_f = empirical_variogram(fine, n_bins=n_bins)
    gamma_c = empirical_variogram(coarse, n_bins=n_bins)
    sill_f, sill_c = gamma_f.plateau(), gamma_c.plateau()
    if not (np.isfinite(sill_f) and np.isfinite(sill_c)) or sill_f <= 0.0 or sill_c <= 0.0:
        raise ConfigError("degenerate variogram: observations show no variability")

    lambda_f = _correlation_length(gamma_f, sill_f)
    lambda_c = _correlation_length(gamma_c, sill_c)
    nu_f, nu_c = 0.5, 1.5
    nu_cf = 0.5 * (nu_f + nu_c)
    a_c2 = 2.0 * nu_c / lambda_c**2
    a_f2 = 2.0 * nu_f / lambda_f**2
    lambda_cf = math.sqrt(lambda_f * lambda_c)
    a_cf2_min = 1.05 * 0.5 * (a_c2 + a_f2)
    if 2.0 * nu_cf / lambda_cf**2 < a_cf2_min:
        lambda_cf = math.sqrt(2.0 * nu_cf / a_cf2_min)

    sigma_f, sigma_c = math.sqrt(sill_f), math.sqrt(sill_c)
    params = BivariateMaternParams(
        lambda_c=lambda_c,
        lambda_f=lambda_f,
        lambda_cf=lambda_cf,
        nu_c=nu_c,
        nu_f=nu_f,
        sigma_c=sigma_c,
        sigma_f=sigma_f,
        rho=0.0,
        sigma_nc=1e-2 * sigma_c,
        sigma_nf=1e-2 * sigma_f,
    )
    cross = empirical_variogram(coarse, fine, n_bins=n_bins)
    first = np.flatnonzero(cross.counts > 0)
    rho_est = 0.0
    if first.size:
        rho_est = (0.5 * (sill_c + sill_f) - cross.values[first[0]]) / (sigma_c * sigma_f)
    limit = min(0.9 * rho_bound(params), 0.99)
    params = params.replace(rho=float(np.clip(rho_est, -limit, limit)))
    ensure_valid(params)
    logger.info(f"Initial parameters from empirical variograms: {params.to_dict()}")
    return params
