"""
Steady saturated Darcy flow on a structured grid and Monte-Carlo propagation
of log-conductivity uncertainty to the hydraulic head.

The flow problem div(K grad h) = 0 with K = K_G exp(Y) is discretized by
cell-centered finite volumes. Interior faces use the harmonic mean of the
two cell conductivities; the Dirichlet faces at x = x0 (head h_L) and
x = x1 (head h_R) use the half-cell transmissibility 2K; top and bottom are
no-flow boundaries.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from core.exceptions import ConfigError, DomainError, NumericalError
from core.fields import FieldRealization, StructuredGrid
from core.gp import factorize
from core.tasks.task_manager import TaskManager
from utils.rng import generator

logger = logging.getLogger(__name__)

SOLVER_TOL = 1e-10
BAND_Z = 1.96
_MAX_REFINEMENTS = 3


@dataclass(frozen=True)
class DarcyProblem:
    grid: StructuredGrid
    K_G: float = 1.0
    h_L: float = 1.0
    h_R: float = 0.0
    solver: str = "direct"
    tol: float = SOLVER_TOL

    def __post_init__(self):
        if not np.isfinite(self.K_G) or self.K_G <= 0.0:
            raise ConfigError(f"K_G must be positive, got {self.K_G}")
        if self.h_L == self.h_R:
            raise ConfigError("h_L and h_R must differ for a nontrivial flow")
        if self.solver not in ("direct", "cg"):
            raise ConfigError(f"unknown linear solver '{self.solver}' (expected direct or cg)")

    def conductivity(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).ravel()
        if len(Y) != self.grid.size:
            raise DomainError(f"log-conductivity has {len(Y)} values for {self.grid.size} cells")
        if not np.all(np.isfinite(Y)):
            raise DomainError("log-conductivity must be finite")
        return (self.K_G * np.exp(Y)).reshape(self.grid.shape)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "K_G": self.K_G,
            "h_L": self.h_L,
            "h_R": self.h_R,
            "solver": self.solver,
            "tol": self.tol,
        }


@dataclass
class HeadSolution:
    head: np.ndarray
    conductivity: np.ndarray
    residuals: List[float] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return self.head.reshape(self.conductivity.shape)


def _harmonic(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    return 2.0 * k1 * k2 / (k1 + k2)


def assemble_system(problem: DarcyProblem, K: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Five-point finite-volume matrix and right-hand side (square cells)."""
    n1, n2 = K.shape
    index = np.arange(n1 * n2).reshape(n1, n2)
    rows, cols, vals = [], [], []
    diag = np.zeros(n1 * n2)

    for T, p, q in (
        (_harmonic(K[:-1, :], K[1:, :]), index[:-1, :], index[1:, :]),
        (_harmonic(K[:, :-1], K[:, 1:]), index[:, :-1], index[:, 1:]),
    ):
        T, p, q = T.ravel(), p.ravel(), q.ravel()
        rows += [p, q]
        cols += [q, p]
        vals += [-T, -T]
        np.add.at(diag, p, T)
        np.add.at(diag, q, T)

    rhs = np.zeros((n1, n2))
    np.add.at(diag, index[0, :], 2.0 * K[0, :])
    rhs[0, :] += 2.0 * K[0, :] * problem.h_L
    np.add.at(diag, index[-1, :], 2.0 * K[-1, :])
    rhs[-1, :] += 2.0 * K[-1, :] * problem.h_R

    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diag)
    A = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n1 * n2, n1 * n2)
    ).tocsr()
    return A, rhs.ravel()


def _relative_residual(A, h, b) -> float:
    return float(np.linalg.norm(b - A @ h) / np.linalg.norm(b))


def solve_darcy(problem: DarcyProblem, Y) -> HeadSolution:
    """Head at the cell centers for the log-conductivity field ``Y``."""
    values = Y.values if isinstance(Y, FieldRealization) else Y
    K = problem.conductivity(values)
    A, b = assemble_system(problem, K)
    residuals: List[float] = []

    if problem.solver == "cg":
        h, info = splinalg.cg(
            A,
            b,
            rtol=0.1 * problem.tol,
            maxiter=20 * A.shape[0],
            callback=lambda xk: residuals.append(_relative_residual(A, xk, b)),
        )
        if info != 0:
            raise NumericalError(
                f"conjugate gradients did not converge (info={info})", residuals=residuals
            )
    else:
        lu = splinalg.splu(A.tocsc())
        h = lu.solve(b)
        residuals.append(_relative_residual(A, h, b))
        for _ in range(_MAX_REFINEMENTS):
            if residuals[-1] <= problem.tol:
                break
            h = h + lu.solve(b - A @ h)
            residuals.append(_relative_residual(A, h, b))

    if not residuals:
        residuals.append(_relative_residual(A, h, b))
    if not np.all(np.isfinite(h)) or residuals[-1] > problem.tol:
        raise NumericalError(
            f"Darcy solve reached relative residual {residuals[-1]:.3e} > {problem.tol:.1e}",
            residuals=residuals,
        )
    return HeadSolution(h, K, residuals)


def boundary_fluxes(problem: DarcyProblem, solution: HeadSolution) -> Tuple[float, float]:
    """(inflow at x = x0, outflow at x = x1), per unit depth."""
    h = solution.as_array()
    K = solution.conductivity
    inflow = float(np.sum(2.0 * K[0, :] * (problem.h_L - h[0, :])))
    outflow = float(np.sum(2.0 * K[-1, :] * (h[-1, :] - problem.h_R)))
    return inflow, outflow


def normalized_head(problem: DarcyProblem, head: np.ndarray) -> np.ndarray:
    return (np.asarray(head) - problem.h_R) / (problem.h_L - problem.h_R)


def profile_nodes(grid: StructuredGrid, x2: Optional[float] = None) -> np.ndarray:
    """Flat indices of the centroid row nearest to ``x2`` (mid-height by default)."""
    if x2 is None:
        x2 = grid.origin[1] + 0.5 * grid.extent[1]
    centers = grid.axis_centers(1)
    # argmin keeps the lower row on ties
    j = int(np.argmin(np.abs(centers - x2)))
    return np.arange(grid.shape[0]) * grid.shape[1] + j


class LogConductivitySampler(Protocol):
    def sample(self, k: int, seed: int) -> np.ndarray:
        ...


@dataclass
class HeadEnsembleStats:
    mean: np.ndarray
    covariance: np.ndarray
    n_real: int
    seed: int
    nodes: np.ndarray

    def __post_init__(self):
        if self.n_real < 2:
            raise ConfigError("ensemble statistics need at least two realizations")

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


@dataclass
class HeadObservationSet:
    """Noisy heads at ``rows`` of an ensemble's node set."""

    rows: np.ndarray
    h_obs: np.ndarray
    sigma_eh: float
    n_nodes: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=int).ravel()
        self.h_obs = np.asarray(self.h_obs, dtype=float).ravel()
        if len(self.rows) != len(self.h_obs):
            raise DomainError("each head observation needs exactly one node")
        if len(np.unique(self.rows)) != len(self.rows):
            raise DomainError("head observations must select distinct nodes")
        if len(self.rows) and (self.rows.min() < 0 or self.rows.max() >= self.n_nodes):
            raise DomainError(f"head observation rows outside 0..{self.n_nodes - 1}")
        if self.sigma_eh <= 0.0:
            raise ConfigError("head observation noise must be positive")

    @property
    def H(self) -> np.ndarray:
        H = np.zeros((len(self.rows), self.n_nodes))
        H[np.arange(len(self.rows)), self.rows] = 1.0
        return H


@dataclass
class MMSEUpdate:
    h_hat: np.ndarray
    C_hat: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.C_hat).copy()


def mc_propagate(
    problem: DarcyProblem,
    sampler: LogConductivitySampler,
    n_real: int,
    seed: int,
    nodes: Optional[Sequence[int]] = None,
    task_manager: Optional[TaskManager] = None,
) -> HeadEnsembleStats:
    """Head mean and covariance at ``nodes`` over ``n_real`` sampled fields."""
    if n_real < 2:
        raise ConfigError(f"Monte-Carlo propagation needs n_real >= 2, got {n_real}")
    nodes = profile_nodes(problem.grid) if nodes is None else np.asarray(nodes, dtype=int)
    step = max(1, n_real // 10)

    def realize(k: int) -> np.ndarray:
        try:
            head = solve_darcy(problem, sampler.sample(k, seed)).head
        except NumericalError as e:
            raise NumericalError(f"Darcy solve failed for realization {k}: {e}", residuals=e.residuals, index=k) from e
        if (k + 1) % step == 0:
            logger.info(f"Monte-Carlo realization {k + 1}/{n_real}")
        return head[nodes]

    own_manager = task_manager is None
    manager = task_manager or TaskManager(max_workers=1)
    try:
        heads = np.vstack(manager.map_ordered("darcy-mc", realize, range(n_real)))
    finally:
        if own_manager:
            manager.shutdown()
    mean = heads.mean(axis=0)
    covariance = np.atleast_2d(np.cov(heads, rowvar=False))
    return HeadEnsembleStats(mean, 0.5 * (covariance + covariance.T), n_real, seed, nodes)


def mmse_update(stats: HeadEnsembleStats, obs: HeadObservationSet) -> MMSEUpdate:
    """Linear-Gaussian update of the head moments from noisy head observations."""
    n = len(stats.mean)
    if obs.n_nodes != n or stats.covariance.shape != (n, n):
        raise DomainError(f"observation operator has {obs.n_nodes} columns, ensemble has {n} nodes")
    if len(obs.rows) == 0:
        return MMSEUpdate(stats.mean.copy(), stats.covariance.copy())
    C = stats.covariance
    cross = C[:, obs.rows]
    S = C[np.ix_(obs.rows, obs.rows)] + obs.sigma_eh**2 * np.eye(len(obs.rows))
    factor = factorize(S)
    gain = factor.solve(cross.T).T
    h_hat = stats.mean + gain @ (obs.h_obs - stats.mean[obs.rows])
    C_hat = C - gain @ cross.T
    C_hat = 0.5 * (C_hat + C_hat.T)
    diag = np.diag(C_hat)
    clamped = np.minimum(np.maximum(diag, 0.0), np.diag(C))
    C_hat[np.diag_indices(n)] = clamped
    return MMSEUpdate(h_hat, C_hat)


def profile_variance_norm(variance: np.ndarray, grid: StructuredGrid) -> float:
    """L2 norm of a variance profile along x with the cell rule."""
    v = np.asarray(variance, dtype=float)
    return float(np.sqrt(np.sum(v * v) * grid.dx))


def predictive_band(mean: np.ndarray, variance: np.ndarray, z: float = BAND_Z) -> Tuple[np.ndarray, np.ndarray]:
    half = z * np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    return mean - half, mean + half


def sample_head_observations(
    problem: DarcyProblem, reference: HeadSolution, n_obs: int, sigma_eh: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct random grid nodes and their reference heads plus N(0, sigma_eh^2) noise."""
    total = problem.grid.size
    if n_obs < 0 or n_obs > total:
        raise ConfigError(f"cannot draw {n_obs} head observations from {total} nodes")
    rng = generator(seed)
    nodes = np.sort(rng.choice(total, size=n_obs, replace=False))
    noise = rng.standard_normal(n_obs)
    return nodes, reference.head[nodes] + sigma_eh * noise


def observation_rows(nodes: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Positions of ``observed`` grid nodes within the ensemble node list."""
    lookup = {int(n): i for i, n in enumerate(nodes)}
    missing = [int(n) for n in observed if int(n) not in lookup]
    if missing:
        raise DomainError(f"observed nodes {missing[:5]} are not part of the ensemble")
    return np.array([lookup[int(n)] for n in observed], dtype=int)
