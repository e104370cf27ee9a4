"""
Gaussian random fields on structured grids.

Simulation and full-grid prediction use the Nyström rank-M approximation
C(Y, Z) ~ C(Y, Xq) C(Xq, Xq)^{-1} C(Xq, Z) built on a grid of quadrature
nodes Xq, together with the rectangular factor L = (Lq^{-1} C(Xq, Y))^T.
The module also holds the synthetic-experiment helpers: discrete block
averaging, observation sampling, empirical variograms and the MSE metric.
"""

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from core.covariance_models import MultiscaleCovariance, Rectangle, ScaleTag
from core.exceptions import ConfigError, DomainError
from core.gp import (
    Factorization,
    MultiscaleDataset,
    PosteriorSummary,
    TaggedPoints,
    factorize,
    observation_factor,
)
from utils.rng import generator, standard_normal_columns

logger = logging.getLogger(__name__)

# Rows of the rectangular factor materialized at once.
TARGET_CHUNK = 4096


@dataclass(frozen=True)
class StructuredGrid:
    extent: Tuple[float, float]
    shape: Tuple[int, int]
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise ConfigError(f"grid shape must be two positive integers, got {self.shape}")
        if min(self.extent) <= 0.0:
            raise ConfigError(f"grid extent must be positive, got {self.extent}")
        dx, dy = self.extent[0] / self.shape[0], self.extent[1] / self.shape[1]
        if abs(dx - dy) > 1e-9 * max(dx, dy):
            raise ConfigError(f"grid cells must be square, got {dx} x {dy}")

    @property
    def dx(self) -> float:
        return self.extent[0] / self.shape[0]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def length_scale(self) -> float:
        """Domain length scale L (the shorter side)."""
        return min(self.extent)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dx

    @property
    def domain(self) -> Rectangle:
        x0, y0 = self.origin
        return Rectangle(x0, y0, x0 + self.extent[0], y0 + self.extent[1])

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.dx

    @property
    def centroids(self) -> np.ndarray:
        """Cell centers, x index outermost (flat index i * n2 + j)."""
        cx, cy = np.meshgrid(self.axis_centers(0), self.axis_centers(1), indexing="ij")
        return np.column_stack([cx.ravel(), cy.ravel()])

    def points(self, scale: ScaleTag) -> TaggedPoints:
        return TaggedPoints.at_scale(self.centroids, scale)

    def to_dict(self) -> dict:
        return {"extent": list(self.extent), "shape": list(self.shape), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, data: dict) -> "StructuredGrid":
        return cls(tuple(data["extent"]), tuple(data["shape"]), tuple(data.get("origin", (0.0, 0.0))))


@dataclass
class FieldRealization:
    grid: StructuredGrid
    values: np.ndarray
    scale: ScaleTag
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.values) != self.grid.size:
            raise DomainError(f"field has {len(self.values)} values for a grid of {self.grid.size} cells")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field values must be finite")

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass
class ObservationSet:
    X: np.ndarray
    y: np.ndarray
    scale: ScaleTag
    indices: Optional[np.ndarray] = None


def dataset_from_observations(
    fine: ObservationSet, coarse: ObservationSet, noise_f: float = 0.0, noise_c: float = 0.0
) -> MultiscaleDataset:
    return MultiscaleDataset(fine.X, fine.y, coarse.X, coarse.y, noise_f=noise_f, noise_c=noise_c)


def single_scale(data: MultiscaleDataset, scale: ScaleTag) -> MultiscaleDataset:
    """Drop the observations of the other scale."""
    empty = np.zeros((0, 2))
    if scale == ScaleTag.FINE:
        return MultiscaleDataset(data.X_f, data.y_f, empty, np.zeros(0), data.noise_f, data.noise_c)
    return MultiscaleDataset(empty, np.zeros(0), data.X_c, data.y_c, data.noise_f, data.noise_c)


# ---------------------------------------------------------------------------
# Nyström factorization
# ---------------------------------------------------------------------------


@dataclass
class NystromFactor:
    model: MultiscaleCovariance
    scale: ScaleTag
    quad_nodes: np.ndarray
    weight: float
    chol_lower: Factorization

    @property
    def rank(self) -> int:
        return len(self.quad_nodes)

    @property
    def quad_points(self) -> TaggedPoints:
        return TaggedPoints.at_scale(self.quad_nodes, self.scale)

    def cross(self, targets: TaggedPoints) -> np.ndarray:
        """C(Xq, targets), latent."""
        quad = self.quad_points
        return self.model.assemble(quad.X, quad.tags, targets.X, targets.tags)

    def rectangular(self, targets: TaggedPoints) -> np.ndarray:
        """Rows of L with L L^T ~ C(targets, targets)."""
        return self.chol_lower.half_solve(self.cross(targets)).T

    def covariance(self, a: TaggedPoints, b: Optional[TaggedPoints] = None) -> np.ndarray:
        La = self.rectangular(a)
        Lb = La if b is None else self.rectangular(b)
        return La @ Lb.T

    def chunks(self, targets: TaggedPoints) -> Iterator[Tuple[slice, np.ndarray]]:
        for start in range(0, len(targets), TARGET_CHUNK):
            sl = slice(start, min(len(targets), start + TARGET_CHUNK))
            yield sl, self.rectangular(targets.subset(sl))


def nystrom_factor(model: MultiscaleCovariance, scale: ScaleTag, quad_grid: StructuredGrid) -> NystromFactor:
    nodes = quad_grid.centroids
    tags = np.full(len(nodes), int(scale))
    logger.info(f"Nyström factorization with M={len(nodes)} {ScaleTag(scale).label} nodes")
    C = model.assemble(nodes, tags, nodes, tags)
    chol = factorize(C)
    return NystromFactor(
        model=model,
        scale=ScaleTag(scale),
        quad_nodes=nodes,
        weight=quad_grid.domain.area / len(nodes),
        chol_lower=chol,
    )


def sample_points(
    factor: NystromFactor, targets: TaggedPoints, n_real: int, seed: int, start: int = 0
) -> np.ndarray:
    """Unconditional samples at ``targets``, one column per realization."""
    xi = standard_normal_columns(seed, factor.rank, tuple(range(start, start + n_real)))
    out = np.empty((len(targets), n_real))
    for sl, L in factor.chunks(targets):
        out[sl] = L @ xi
    return out


def simulate(
    factor: NystromFactor, grid: StructuredGrid, n_real: int, seed: int, start: int = 0
) -> List[FieldRealization]:
    """Realizations y_k = L xi_k on the grid centroids, xi_k from substream k."""
    if n_real <= 0:
        return []
    values = sample_points(factor, grid.points(factor.scale), n_real, seed, start)
    return [
        FieldRealization(grid, values[:, k], factor.scale, seed=seed, index=start + k)
        for k in range(n_real)
    ]


class NystromPosterior:
    """Conditional field under the rank-M prior.

    With G = Lq^{-1} C(Xq, Xs) and Cs = Ls Ls^T the observation covariance,
    the posterior in node coordinates has mean Gs Ls^{-1} y and covariance
    I - Gs Gs^T, where Gs = G Ls^{-T}. Its symmetric square root is
    I - U diag(1 - sqrt(1 - s^2)) U^T from the thin SVD Gs = U diag(s) V^T.
    """

    def __init__(self, data: MultiscaleDataset, factor: NystromFactor, obs_factor: Optional[Factorization] = None):
        self.data = data
        self.factor = factor
        model = factor.model
        self.obs_factor = obs_factor or observation_factor(data, model)
        G = factor.chol_lower.half_solve(factor.cross(data.points))
        Gs = self.obs_factor.half_solve(G.T).T
        self.beta = Gs @ self.obs_factor.half_solve(data.y)
        U, s, _ = linalg.svd(Gs, full_matrices=False)
        s = np.clip(s, 0.0, 1.0)
        self.U = U
        self.s2 = s * s
        self.shrink = 1.0 - np.sqrt(1.0 - self.s2)

    def mean(self, targets: TaggedPoints) -> np.ndarray:
        out = np.empty(len(targets))
        for sl, L in self.factor.chunks(targets):
            out[sl] = L @ self.beta
        return out

    def summary(self, targets: TaggedPoints) -> PosteriorSummary:
        mean = np.empty(len(targets))
        variance = np.empty(len(targets))
        for sl, L in self.factor.chunks(targets):
            mean[sl] = L @ self.beta
            LU = L @ self.U
            variance[sl] = np.sum(L * L, axis=1) - (LU * LU) @ self.s2
        negative = variance < 0.0
        return PosteriorSummary(targets, mean, np.where(negative, 0.0, variance), None, int(negative.sum()))

    def sampler(self, targets: TaggedPoints, batch_size: int = 32) -> "PosteriorSampler":
        return PosteriorSampler(self, targets, batch_size=batch_size)

    def _node_draw(self, xi: np.ndarray) -> np.ndarray:
        return self.beta[:, None] + xi - self.U @ (self.shrink[:, None] * (self.U.T @ xi))

    def samples(self, targets: TaggedPoints, n_real: int, seed: int, start: int = 0) -> np.ndarray:
        xi = standard_normal_columns(seed, self.factor.rank, tuple(range(start, start + n_real)))
        nodes = self._node_draw(xi)
        out = np.empty((len(targets), n_real))
        for sl, L in self.factor.chunks(targets):
            out[sl] = L @ nodes
        return out


@dataclass
class PosteriorSampler:
    """Conditional realizations at a fixed target set.

    Realization k uses substream k. Draws are computed ``batch_size`` at a
    time and the most recent batches are kept, so the sampler never holds
    the full rectangular factor of a large grid.
    """

    posterior: NystromPosterior
    targets: TaggedPoints
    batch_size: int = 32
    max_batches: int = 4
    _batches: "OrderedDict[Tuple[int, int], np.ndarray]" = field(init=False, repr=False)
    _lock: threading.Lock = field(init=False, repr=False)

    def __post_init__(self):
        if self.batch_size < 1 or self.max_batches < 1:
            raise ConfigError("sampler batch size and cache length must be positive")
        self._batches = OrderedDict()
        self._lock = threading.Lock()

    def _batch(self, start: int, seed: int) -> np.ndarray:
        key = (seed, start)
        with self._lock:
            cached = self._batches.get(key)
            if cached is not None:
                return cached
        values = self.posterior.samples(self.targets, self.batch_size, seed, start)
        with self._lock:
            self._batches[key] = values
            while len(self._batches) > self.max_batches:
                self._batches.popitem(last=False)
        return values

    def sample(self, k: int, seed: int) -> np.ndarray:
        if k < 0:
            raise ConfigError(f"realization index must be nonnegative, got {k}")
        start = k - k % self.batch_size
        return self._batch(start, seed)[:, k - start].copy()


# ---------------------------------------------------------------------------
# Synthetic experiments
# ---------------------------------------------------------------------------


def block_average_grid(fine: FieldRealization, m: int) -> FieldRealization:
    """Moving-window average over m x m cells, renormalized at the boundary.

    The window of cell i spans indices [i - m // 2, i - m // 2 + m) per axis.
    """
    n1, n2 = fine.grid.shape
    if m < 1 or m > min(n1, n2):
        raise ConfigError(f"window of {m} cells does not fit a {n1} x {n2} grid")
    before = m // 2
    after = m - 1 - before
    padded = np.pad(
        fine.as_array(), ((before, after), (before, after)), mode="constant", constant_values=np.nan
    )
    windows = sliding_window_view(padded, (m, m))
    coarse = np.nanmean(windows, axis=(2, 3))
    return FieldRealization(fine.grid, coarse.ravel(), ScaleTag.COARSE, seed=fine.seed, index=fine.index)


def sample_observations(field: FieldRealization, n: int, noise_sigma: float, seed: int) -> ObservationSet:
    """n distinct centroids drawn uniformly, values perturbed by N(0, noise_sigma^2)."""
    total = field.grid.size
    if n < 0 or n > total:
        raise ConfigError(f"cannot draw {n} distinct observations from {total} centroids")
    if noise_sigma < 0.0:
        raise ConfigError("observation noise must be nonnegative")
    rng = generator(seed)
    indices = rng.choice(total, size=n, replace=False)
    noise = rng.standard_normal(n)
    values = field.values[indices]
    if noise_sigma > 0.0:
        values = values + noise_sigma * noise
    return ObservationSet(field.grid.centroids[indices], values, field.scale, indices)


@dataclass
class VariogramTable:
    lags: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    kind: str = "empirical"

    def rows(self) -> List[Tuple[float, float, int]]:
        return list(zip(self.lags.tolist(), self.values.tolist(), self.counts.tolist()))

    def plateau(self) -> float:
        """Median over the last third of the non-empty bins."""
        filled = self.values[self.counts > 0]
        if filled.size == 0:
            return float("nan")
        return float(np.median(filled[-max(1, filled.size // 3):]))


def empirical_variogram(
    obs: ObservationSet,
    other: Optional[ObservationSet] = None,
    n_bins: int = 15,
    max_lag: Optional[float] = None,
) -> VariogramTable:
    """Method-of-moments semivariogram, or pseudo cross-variogram with ``other``.

    The cross version averages ½(y_i - z_j)^2 over all pairs between the two
    sets binned by lag, so no collocation is needed.
    """
    if max_lag is not None and max_lag <= 0.0:
        raise ConfigError(f"max_lag must be positive, got {max_lag}")
    if n_bins < 1:
        raise ConfigError(f"n_bins must be positive, got {n_bins}")
    if len(obs.y) < 2 or (other is not None and len(other.y) < 2):
        raise ConfigError("an empirical variogram needs at least two observations per scale")
    if other is None:
        dist = pdist(obs.X)
        sq = pdist(np.asarray(obs.y, dtype=float)[:, None], "sqeuclidean")
    else:
        dist = cdist(obs.X, other.X).ravel()
        sq = ((np.asarray(obs.y)[:, None] - np.asarray(other.y)[None, :]) ** 2).ravel()
    if max_lag is None:
        max_lag = 0.5 * float(dist.max()) if dist.size else 1.0
        if max_lag <= 0.0:
            raise ConfigError("all observations share one location")
    keep = dist <= max_lag
    dist, sq = dist[keep], sq[keep]
    idx = np.minimum((dist / max_lag * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=sq, minlength=n_bins)
    lag_sums = np.bincount(idx, weights=dist, minlength=n_bins)
    centers = (np.arange(n_bins) + 0.5) * max_lag / n_bins
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / (2.0 * counts), np.nan)
        lags = np.where(counts > 0, lag_sums / np.maximum(counts, 1), centers)
    return VariogramTable(lags, values, counts, "empirical")


def mse(posterior: PosteriorSummary, reference: FieldRealization) -> float:
    """(1/L^2) * integral of (y_ref - mean)^2 + variance over the grid."""
    grid = reference.grid
    if len(posterior.mean) != grid.size:
        raise DomainError(f"posterior has {len(posterior.mean)} targets, grid has {grid.size} cells")
    if np.any(posterior.targets.tags != int(reference.scale)):
        raise DomainError("posterior and reference are not at the same scale")
    if not np.allclose(posterior.targets.X, grid.centroids, rtol=0.0, atol=1e-9 * grid.dx):
        raise DomainError("posterior targets are not the reference grid centroids")
    sq = (reference.values - posterior.mean) ** 2 + posterior.variance
    return float(np.sum(sq) * grid.cell_area / grid.length_scale**2)

