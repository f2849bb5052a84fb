"""Dataset, hyperparameter, and model-state containers.

The latent model for n sites and S species, with r factors and N candidate
loading atoms:

    U_i = B x_i + Lambda w_i + eps_i,   eps_i ~ N(0, sigma2 I_S)

where row l of Lambda is the atom row picked by label l, each factor column
of W follows a unit-variance exponential-kernel GP over the sites (or iid
normals in the independent variant), and binary responses are the sign of U.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .gp import SiteSet, phi_bounds


@dataclass
class Dataset:
    """Aligned sites, standardized covariates, and the response matrix."""

    sites: SiteSet
    X: np.ndarray  # (n, p) covariates
    Y: np.ndarray  # (n, S) responses
    response_kind: str  # "continuous" | "binary"
    species_ids: tuple
    holdout_mask: np.ndarray = None  # (n,) bool; True = held-out site
    covariate_transform: dict = None  # {"mean": [...], "sd": [...]} from ingestion
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        n = len(self.sites)
        if self.X.shape[0] != n or self.Y.shape[0] != n:
            raise ValueError("X and Y must have one row per site")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates contain non-finite values")
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("responses contain non-finite values")
        if self.response_kind not in ("continuous", "binary"):
            raise ValueError(f"bad response_kind {self.response_kind!r}")
        if self.response_kind == "binary" and not np.all(
            np.isin(self.Y, (0.0, 1.0))
        ):
            raise ValueError("binary responses must be 0/1")
        self.species_ids = tuple(self.species_ids)
        if len(self.species_ids) != self.Y.shape[1]:
            raise ValueError("species_ids length must match Y columns")
        if self.holdout_mask is None:
            self.holdout_mask = np.zeros(n, dtype=bool)
        else:
            self.holdout_mask = np.asarray(self.holdout_mask, dtype=bool)
            if self.holdout_mask.shape != (n,):
                raise ValueError("holdout_mask must be length n")

    @property
    def n_sites(self) -> int:
        return self.Y.shape[0]

    @property
    def n_species(self) -> int:
        return self.Y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    def check_standardized(self, tol: float = 1e-6):
        """Ingestion-time guard: each covariate column mean 0, sd 1."""
        mu = self.X.mean(axis=0)
        sd = self.X.std(axis=0)
        if np.any(np.abs(mu) > tol) or np.any(np.abs(sd - 1.0) > tol):
            raise ValueError(
                f"covariates not standardized: means {mu}, sds {sd}"
            )

    def _view(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            sites=self.sites.subset(mask),
            X=self.X[mask],
            Y=self.Y[mask],
            response_kind=self.response_kind,
            species_ids=self.species_ids,
            holdout_mask=np.zeros(int(mask.sum()), dtype=bool),
            covariate_transform=self.covariate_transform,
            meta=dict(self.meta),
        )

    def train_view(self) -> "Dataset":
        return self._view(~self.holdout_mask)

    def test_view(self) -> "Dataset":
        return self._view(self.holdout_mask)


def make_holdout_mask(n_sites: int, frac: float, seed: int) -> np.ndarray:
    """Deterministic held-out-site mask: round(frac*n) sites."""
    if not 0.0 < frac < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    from .rng import RngStream

    m = int(round(frac * n_sites))
    m = min(max(m, 1), n_sites - 1)
    order = RngStream(seed, stream_id=90).gen.permutation(n_sites)
    mask = np.zeros(n_sites, dtype=bool)
    mask[order[:m]] = True
    return mask


@dataclass
class McmcSchedule:
    n_iter: int = 8000
    burn_in: int = 4000
    thin: int = 1
    mh_step_phi: float = 0.1
    seed: int = 0
    adapt_phi: bool = True  # tune the MH step during burn-in only
    progress_every: int = 0  # 0 = silent
    track_log_joint: bool = False

    def __post_init__(self):
        if self.n_iter < self.burn_in:
            raise ValueError("n_iter must be >= burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class Hyperparams:
    """Fixed prior constants, truncation level, and run schedule."""

    r: int  # factor count
    N: int  # stick-breaking truncation
    phi_min: float = None
    phi_max: float = None
    alpha: float = 1.0  # DP precision (paper gives no value)
    a: float = 2.0  # sigma2 ~ IG(a/2, b/2)
    b: float = 0.1
    c: float = 100.0  # coefficient prior variance
    eta_shape: float = 0.5
    eta_rate: float = 1e-4
    iw_df_offset: int = 2  # atom-covariance prior df = offset + r - 1
    spatial: bool = True  # GP factors vs independent factors
    sigma2_fixed: float = None  # binary default resolves to 1.0
    stick_variant: str = "printed"  # "printed" | "standard" second beta shape
    orthant_sweeps: int = 10
    jitter: float = 0.0
    mcmc: McmcSchedule = field(default_factory=McmcSchedule)

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.N <= self.r:
            raise ValueError("truncation N must exceed r")
        for name in ("alpha", "a", "b", "c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.phi_min is not None and self.phi_max is not None:
            if not self.phi_min < self.phi_max:
                raise ValueError("phi_min must be below phi_max")
        if self.stick_variant not in ("printed", "standard"):
            raise ValueError(f"bad stick_variant {self.stick_variant!r}")

    def resolve(self, data: Dataset, phi_max_cap: float = None) -> "Hyperparams":
        """Fill in data-dependent defaults (decay bounds, fixed nugget)."""
        lo, hi = self.phi_min, self.phi_max
        if lo is None or hi is None:
            rule_lo, rule_hi = phi_bounds(data.sites)
            lo = rule_lo if lo is None else lo
            hi = rule_hi if hi is None else hi
        if phi_max_cap is not None:
            hi = min(hi, phi_max_cap)
        sigma2_fixed = self.sigma2_fixed
        if data.response_kind == "binary" and sigma2_fixed is None:
            sigma2_fixed = 1.0
        if self.N > data.n_species:
            warnings.warn(
                f"truncation N={self.N} exceeds species count "
                f"S={data.n_species}", stacklevel=2,
            )
        return replace(
            self, phi_min=float(lo), phi_max=float(hi), sigma2_fixed=sigma2_fixed
        )


def loadings(atoms: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Loading matrix: row l is atom row labels[l] (labels are 1-based).

    Implemented as a row gather, never an S x N selection product.
    """
    atoms = np.asarray(atoms)
    labels = np.asarray(labels)
    if np.any(labels < 1) or np.any(labels > atoms.shape[0]):
        raise ValueError("labels out of range 1..N")
    return atoms[labels - 1]


def sigma_star(lam: np.ndarray, sigma2: float) -> np.ndarray:
    """Dimension-reduced species covariance Lambda Lambda^T + sigma2 I."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    lam = np.asarray(lam, dtype=float)
    return lam @ lam.T + sigma2 * np.eye(lam.shape[0])


def scaled_coefficients(coeffs: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Rescale each coefficient row by the species' marginal sd."""
    d = np.diag(np.asarray(cov, dtype=float))
    if np.any(d <= 0):
        raise ValueError("covariance diagonal must be positive")
    return np.asarray(coeffs, dtype=float) / np.sqrt(d)[:, None]


def correlation_of(cov: np.ndarray) -> np.ndarray:
    """Correlation matrix D^-1/2 cov D^-1/2."""
    cov = np.asarray(cov, dtype=float)
    d = np.diag(cov)
    if np.any(d <= 0):
        raise ValueError("covariance diagonal must be positive")
    s = 1.0 / np.sqrt(d)
    out = cov * np.outer(s, s)
    np.fill_diagonal(out, 1.0)
    return out


@dataclass
class ModelState:
    """One full realization of the sampler's mutable state."""

    coeffs: np.ndarray  # (S, p) regression coefficients
    atoms: np.ndarray  # (N, r) candidate loading rows
    labels: np.ndarray  # (S,) 1-based atom indices; labels[0] == 1
    weights: np.ndarray  # (N,) stick weights
    factors: np.ndarray  # (n, r) spatial factor columns
    sigma2: float
    phi: float
    atom_cov: np.ndarray  # (r, r) atom prior covariance
    atom_scales: np.ndarray  # (r,) hierarchical IG scales
    latent: np.ndarray  # (n, S); equals Y for continuous responses

    def loadings(self) -> np.ndarray:
        return loadings(self.atoms, self.labels)

    def copy(self) -> "ModelState":
        return ModelState(
            coeffs=self.coeffs.copy(),
            atoms=self.atoms.copy(),
            labels=self.labels.copy(),
            weights=self.weights.copy(),
            factors=self.factors.copy(),
            sigma2=float(self.sigma2),
            phi=float(self.phi),
            atom_cov=self.atom_cov.copy(),
            atom_scales=self.atom_scales.copy(),
            latent=self.latent.copy(),
        )

    def validate(self, data: Dataset, hyper: Hyperparams, tol: float = 1e-9):
        """Assert every state invariant; raises AssertionError on violation."""
        assert self.labels[0] == 1, "first species must carry atom 1"
        assert np.all(self.atoms[0] > 0), "atom-1 row must be strictly positive"
        assert np.all(self.weights >= 0) and abs(self.weights.sum() - 1.0) < tol
        assert self.sigma2 > 0
        assert hyper.phi_min <= self.phi <= hyper.phi_max
        np.linalg.cholesky(self.atom_cov)  # SPD
        assert np.all(self.atom_scales > 0)
        if data.response_kind == "binary":
            pos = self.latent > 0
            assert np.array_equal(pos, data.Y.astype(bool)), (
                "latent sign inconsistent with binary response"
            )


def initial_state(data: Dataset, hyper: Hyperparams, rng) -> ModelState:
    """A feasible starting state satisfying every invariant.

    Coefficients start at a per-species ridge fit (zeros for binary),
    all species in cluster 1, atoms from the prior with row 1 made
    positive, factors at zero, decay at a mid-range value.
    """
    n, S, p = data.n_sites, data.n_species, data.n_covariates
    r, N = hyper.r, hyper.N
    if data.response_kind == "binary":
        coeffs = np.zeros((S, p))
        latent = np.where(data.Y > 0, 0.5, -0.5)
        sigma2 = hyper.sigma2_fixed if hyper.sigma2_fixed else 1.0
    else:
        xtx = data.X.T @ data.X + 1e-6 * np.eye(p)
        coeffs = np.linalg.solve(xtx, data.X.T @ data.Y).T
        latent = data.Y.copy()
        sigma2 = hyper.sigma2_fixed if hyper.sigma2_fixed else 1.0
    atoms = rng.gen.standard_normal((N, r))
    atoms[0] = np.abs(atoms[0]) + 1e-3
    d = data.sites.pairwise_distances()
    med = float(np.median(d[np.triu_indices(n, k=1)])) if n > 1 else 1.0
    med = max(med, 1e-12)
    anchor = min(hyper.phi_max, -np.log(0.05) / med)
    phi = float(np.sqrt(hyper.phi_min * max(anchor, hyper.phi_min)))
    phi = min(max(phi, np.nextafter(hyper.phi_min, np.inf)),
              np.nextafter(hyper.phi_max, -np.inf))
    return ModelState(
        coeffs=coeffs,
        atoms=atoms,
        labels=np.ones(S, dtype=np.int64),
        weights=np.full(N, 1.0 / N),
        factors=np.zeros((n, r)),
        sigma2=float(sigma2),
        phi=phi,
        atom_cov=np.eye(r),
        atom_scales=np.ones(r),
        latent=latent,
    )


_ARRAY_FIELDS = (
    "coeffs", "atoms", "labels", "weights", "factors",
    "sigma2", "phi", "atom_cov", "atom_scales",
)


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in snapshots (latent matrices excluded) plus traces."""

    coeffs: np.ndarray  # (T, S, p)
    atoms: np.ndarray  # (T, N, r)
    labels: np.ndarray  # (T, S)
    weights: np.ndarray  # (T, N)
    factors: np.ndarray  # (T, n, r)
    sigma2: np.ndarray  # (T,)
    phi: np.ndarray  # (T,)
    atom_cov: np.ndarray  # (T, r, r)
    atom_scales: np.ndarray  # (T, r)
    mh_accept: np.ndarray  # (n_iter,) full acceptance trace
    log_joint: np.ndarray = None  # (T,) when tracked
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.phi.shape[0]

    def loadings_at(self, t: int) -> np.ndarray:
        return loadings(self.atoms[t], self.labels[t])

    def posterior_mean(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name)).mean(axis=0)

    def credible_interval(self, name: str, level: float = 0.95):
        """Empirical equal-tail interval, (lo, hi) arrays."""
        arr = np.asarray(getattr(self, name))
        tail = 100.0 * (1.0 - level) / 2.0
        return (
            np.percentile(arr, tail, axis=0),
            np.percentile(arr, 100.0 - tail, axis=0),
        )

    def posterior_mean_loadings(self) -> np.ndarray:
        out = np.zeros_like(self.loadings_at(0))
        for t in range(self.n_draws):
            out += self.loadings_at(t)
        return out / self.n_draws

    def occupied_counts(self) -> np.ndarray:
        return np.array([len(np.unique(row)) for row in self.labels])

    def occupied_mode(self) -> tuple[int, float]:
        """Most frequent occupied-cluster count and its posterior probability."""
        counts = self.occupied_counts()
        vals, freq = np.unique(counts, return_counts=True)
        i = int(np.argmax(freq))
        return int(vals[i]), float(freq[i] / counts.size)

    def map_labels(self) -> np.ndarray:
        """The complete label vector occurring most often across draws."""
        vecs, freq = np.unique(self.labels, axis=0, return_counts=True)
        return vecs[int(np.argmax(freq))]

    def label_cooccurrence(self) -> np.ndarray:
        """(S, S) posterior probability that two species share a cluster."""
        lab = self.labels
        out = np.zeros((lab.shape[1], lab.shape[1]))
        for t in range(lab.shape[0]):
            out += lab[t][:, None] == lab[t][None, :]
        return out / lab.shape[0]

    def equals(self, other: "PosteriorDraws") -> bool:
        for name in _ARRAY_FIELDS + ("mh_accept",):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        return True
