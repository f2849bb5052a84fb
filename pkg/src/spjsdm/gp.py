"""Exponential-kernel spatial covariances and Gaussian-process conditioning.

Coordinates are planar easting/northing in units of 100 km; all scaling
happens at ingestion, never here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


class DegenerateCovarianceError(ValueError):
    """Covariance matrix is not numerically SPD (e.g. duplicated sites)."""


@dataclass(frozen=True)
class SiteSet:
    """A fixed set of plot locations.

    coords : (n, 2) array of easting/northing pairs.
    ids    : unique site identifiers, one per row.
    """

    coords: np.ndarray
    ids: tuple = field(default=None)

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("site coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        ids = self.ids
        if ids is None:
            ids = tuple(f"site{i}" for i in range(len(coords)))
        else:
            ids = tuple(ids)
        if len(ids) != len(coords):
            raise ValueError("ids and coords length mismatch")
        if len(set(ids)) != len(ids):
            raise ValueError("site ids must be unique")
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.coords.shape[0]

    def subset(self, mask_or_index) -> "SiteSet":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SiteSet(self.coords[idx], tuple(self.ids[i] for i in idx))

    def pairwise_distances(self) -> np.ndarray:
        return cdist(self.coords, self.coords)


@dataclass(frozen=True)
class SpatialCovariance:
    """An n x n exponential-kernel correlation matrix with its factorization."""

    phi: float
    matrix: np.ndarray
    chol: np.ndarray
    log_det: float


def exp_cov_matrix(sites: SiteSet, phi: float) -> np.ndarray:
    """Entry (i, i') = exp(-phi * ||s_i - s_i'||), unit diagonal."""
    if not phi > 0:
        raise ValueError(f"phi must be positive, got {phi}")
    return np.exp(-phi * sites.pairwise_distances())


def build_exp_cov(sites: SiteSet, phi: float, jitter: float = 0.0) -> SpatialCovariance:
    """Build and Cholesky-factorize the exponential-kernel covariance.

    jitter (0 to ~1e-8) is added to the diagonal to survive near-duplicate
    sites; the model itself always has a unit diagonal.
    """
    if len(sites) < 2:
        raise ValueError("need at least 2 sites to build a covariance")
    if not 0.0 <= jitter <= 1e-6:
        raise ValueError(f"jitter out of range: {jitter}")
    mat = exp_cov_matrix(sites, phi)
    if jitter:
        mat = mat + jitter * np.eye(len(sites))
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(
            f"covariance not SPD at phi={phi} (duplicate sites? try jitter)"
        ) from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return SpatialCovariance(phi=float(phi), matrix=mat, chol=chol, log_det=log_det)


def phi_bounds(sites: SiteSet) -> tuple[float, float]:
    """Decay-parameter bounds from the pairwise-distance extremes.

    phi_min = -log(0.05)/d_max and phi_max = -log(0.01)/d_min, where d_min
    is taken over strictly positive pairwise distances (exactly coincident
    pairs carry no scale information).
    """
    if len(sites) < 2:
        raise ValueError("need at least 2 sites")
    d = sites.pairwise_distances()
    iu = np.triu_indices(len(sites), k=1)
    dists = d[iu]
    d_max = float(dists.max())
    positive = dists[dists > 0.0]
    if positive.size == 0:
        raise ValueError("all sites identical: minimum distance undefined")
    d_min = float(positive.min())
    phi_min = -np.log(0.05) / d_max
    phi_max = -np.log(0.01) / d_min
    return phi_min, phi_max


def effective_range(phi: float, threshold: float = 0.05) -> float:
    """Distance at which spatial correlation drops to `threshold`."""
    if not phi > 0:
        raise ValueError("phi must be positive")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return -np.log(threshold) / phi


def gp_conditional(
    train: SiteSet,
    test: SiteSet,
    phi: float,
    w_train: np.ndarray,
    jitter: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Kriging distribution of a unit-variance exponential GP at new sites.

    Returns (mean, cov) of N(C_pt C_tt^-1 w, C_pp - C_pt C_tt^-1 C_pt^T).
    `w_train` may be a vector or an (n_train, r) matrix of factor columns;
    the mean then has matching trailing shape. The conditional covariance is
    symmetrized and eigenvalue-floored at 0, so it is PSD but may be
    singular (exact interpolation at coincident sites).
    """
    cov_tt = build_exp_cov(train, phi, jitter=jitter)
    cross = np.exp(-phi * cdist(test.coords, train.coords))
    cov_pp = exp_cov_matrix(test, phi)
    w_train = np.asarray(w_train, dtype=float)
    if w_train.shape[0] != len(train):
        raise ValueError("w_train length does not match train sites")
    # Solve C_tt^-1 [w, C_pt^T] through the cached Cholesky factor.
    from scipy.linalg import cho_solve

    mean = cross @ cho_solve((cov_tt.chol, True), w_train)
    cond = cov_pp - cross @ cho_solve((cov_tt.chol, True), cross.T)
    cond = 0.5 * (cond + cond.T)
    vals, vecs = np.linalg.eigh(cond)
    vals = np.clip(vals, 0.0, None)
    cond = (vecs * vals) @ vecs.T
    cond = 0.5 * (cond + cond.T)
    return mean, cond


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """A matrix F with F F^T = cov, valid for singular PSD matrices."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)
