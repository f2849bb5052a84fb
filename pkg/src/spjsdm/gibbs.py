"""Gibbs/Metropolis sampler: one update per full conditional, plus the driver.

Sweep order: latent probit responses (binary), coefficients, atoms, labels,
stick weights, factor columns, decay (Metropolis on log scale), nugget
(continuous), then the atom-prior covariance and its scales. Any fixed scan
order is a valid Gibbs scheme; this one groups the cheap conjugate blocks
after the O(n^3) factor/decay blocks.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp import DegenerateCovarianceError, SpatialCovariance, build_exp_cov
from .model import (
    Dataset,
    Hyperparams,
    ModelState,
    PosteriorDraws,
    initial_state,
    loadings,
)
from .rng import (
    RngStream,
    sample_gd_stick,
    sample_inv_gamma,
    sample_inv_wishart,
    sample_truncnorm_orthant,
    sample_truncnorm_uni,
)


@dataclass
class SweepReport:
    """Per-sweep diagnostics."""

    mh_phi_accepted: bool = False
    log_joint: float = None
    timings: dict = field(default_factory=dict)


class DecayCache:
    """Factorizations of the spatial covariance for the chain's current decay.

    The Cholesky factor serves the Metropolis density evaluations; the
    eigendecomposition (computed lazily, once per accepted decay value)
    turns each factor-column draw into an O(n^2) operation.
    """

    def __init__(self, sites, jitter: float = 0.0):
        self.sites = sites
        self.jitter = jitter
        self._cov: SpatialCovariance = None
        self._eig = None

    def covariance(self, phi: float) -> SpatialCovariance:
        if self._cov is None or self._cov.phi != phi:
            self._cov = build_exp_cov(self.sites, phi, jitter=self.jitter)
            self._eig = None
        return self._cov

    def set_covariance(self, cov: SpatialCovariance):
        self._cov = cov
        self._eig = None

    def eig(self, phi: float):
        self.covariance(phi)
        if self._eig is None:
            vals, vecs = np.linalg.eigh(self._cov.matrix)
            self._eig = (np.clip(vals, 0.0, None), vecs)
        return self._eig


def update_latent(state: ModelState, data: Dataset, rng: RngStream) -> None:
    """Probit augmentation: redraw each latent response from its truncated
    normal, sign-matched to the observed 0/1 response."""
    mean = data.X @ state.coeffs.T + state.factors @ state.loadings().T
    sd = float(np.sqrt(state.sigma2))
    present = data.Y > 0
    out = np.empty_like(mean)
    out[present] = sample_truncnorm_uni(mean[present], sd, "above0", rng)
    absent = ~present
    out[absent] = sample_truncnorm_uni(mean[absent], sd, "below0", rng)
    state.latent = out


def update_coeffs(
    state: ModelState, data: Dataset, hyper: Hyperparams, rng: RngStream
) -> None:
    """Conjugate normal draw of every coefficient row.

    All rows share the same posterior covariance (X^T X / sigma2 + I/c)^-1,
    factorized once and reused.
    """
    x = data.X
    p = x.shape[1]
    prec = x.T @ x / state.sigma2 + np.eye(p) / hyper.c
    chol_prec = np.linalg.cholesky(prec)
    resid = state.latent - state.factors @ state.loadings().T
    rhs = x.T @ resid / state.sigma2  # (p, S)
    mu = cho_solve((chol_prec, True), rhs)
    z = rng.gen.standard_normal(rhs.shape)
    dev = solve_triangular(chol_prec.T, z, lower=False)
    state.coeffs = (mu + dev).T


def update_atoms(
    state: ModelState, data: Dataset, hyper: Hyperparams, rng: RngStream
) -> None:
    """Redraw every candidate loading row.

    Atom 1 (always occupied: species 1 is pinned to it) is drawn from the
    positive-orthant truncated normal; other occupied atoms from their
    conjugate normals; unoccupied atoms are refreshed from the prior.
    """
    w = state.factors
    r = w.shape[1]
    wtw = w.T @ w
    resid = state.latent - data.X @ state.coeffs.T  # (n, S)
    chol_prior = np.linalg.cholesky(state.atom_cov)
    prior_prec = cho_solve((chol_prior, True), np.eye(r))
    for j in range(1, state.atoms.shape[0] + 1):
        members = np.flatnonzero(state.labels == j)
        if members.size == 0:
            state.atoms[j - 1] = chol_prior @ rng.gen.standard_normal(r)
            continue
        prec = members.size / state.sigma2 * wtw + prior_prec
        chol_prec = np.linalg.cholesky(prec)
        rhs = w.T @ resid[:, members].sum(axis=1) / state.sigma2
        mu = cho_solve((chol_prec, True), rhs)
        if j == 1:
            cov = cho_solve((chol_prec, True), np.eye(r))
            cov = 0.5 * (cov + cov.T)
            state.atoms[0] = sample_truncnorm_orthant(
                mu, cov, rng, sweeps=hyper.orthant_sweeps, init=state.atoms[0]
            )
        else:
            z = rng.gen.standard_normal(r)
            state.atoms[j - 1] = mu + solve_triangular(
                chol_prec.T, z, lower=False
            )


def update_labels(
    state: ModelState, data: Dataset, hyper: Hyperparams, rng: RngStream
) -> None:
    """Categorical label draw per species (species 1 stays pinned to atom 1).

    Log weights are normalized by their per-species maximum before
    exponentiation so no species can underflow to an all-zero row.
    """
    atom_means = state.factors @ state.atoms.T  # (n, N)
    resid = state.latent - data.X @ state.coeffs.T  # (n, S)
    cross = resid.T @ atom_means  # (S, N)
    # per-species ||resid||^2 is constant across atoms and cancels below
    sq = -2.0 * cross + np.einsum("ij,ij->j", atom_means, atom_means)[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)[None, :] - sq / (2.0 * state.sigma2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    u = rng.gen.random(w.shape[0])
    idx = (np.cumsum(w, axis=1) < u[:, None]).sum(axis=1)
    labels = np.minimum(idx, state.atoms.shape[0] - 1).astype(np.int64) + 1
    labels[0] = 1
    state.labels = labels


def update_weights(state: ModelState, hyper: Hyperparams, rng: RngStream) -> None:
    counts = np.bincount(state.labels - 1, minlength=state.atoms.shape[0])
    state.weights = sample_gd_stick(
        hyper.alpha, counts, rng, variant=hyper.stick_variant
    )


def update_factors(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparams,
    rng: RngStream,
    cache: DecayCache = None,
) -> None:
    """Sequential conjugate draw of each factor column.

    The residual matrix is maintained by rank-1 column swaps rather than
    rebuilt per column. Spatial variant: posterior covariance
    (C_phi^-1 + gamma I)^-1 realized through the cached eigendecomposition;
    independent variant: the prior precision is the identity.
    """
    lam = state.loadings()  # (S, r)
    w = state.factors
    n, r = w.shape
    resid = state.latent - data.X @ state.coeffs.T - w @ lam.T
    if hyper.spatial:
        if cache is None:
            cache = DecayCache(data.sites, hyper.jitter)
        vals, vecs = cache.eig(state.phi)
    for h in range(r):
        col = lam[:, h]
        resid += np.outer(w[:, h], col)
        gamma = float(col @ col) / state.sigma2
        b = resid @ col / state.sigma2
        z = rng.gen.standard_normal(n)
        if hyper.spatial:
            a = vals / (1.0 + gamma * vals)
            new = vecs @ (a * (vecs.T @ b) + np.sqrt(a) * z)
        else:
            var = 1.0 / (1.0 + gamma)
            new = var * b + np.sqrt(var) * z
        w[:, h] = new
        resid -= np.outer(new, col)


def decay_log_target(
    log_phi: float, cov: SpatialCovariance, factors: np.ndarray
) -> float:
    """Log full conditional of the decay on the log scale.

    Product of the r zero-mean GP densities plus the log-scale Jacobian;
    the uniform prior enters only through the caller's bounds check.
    """
    r = factors.shape[1]
    half = solve_triangular(cov.chol, factors, lower=True)
    quad = float(np.sum(half * half))
    return -0.5 * r * cov.log_det - 0.5 * quad + log_phi


def update_decay(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparams,
    rng: RngStream,
    cache: DecayCache,
    mh_step: float = None,
) -> bool:
    """Random-walk Metropolis on log(decay); returns the accept flag.

    Proposals outside (phi_min, phi_max), or whose covariance is not
    numerically SPD, are rejected outright (zero density).
    """
    if mh_step is None:
        mh_step = hyper.mcmc.mh_step_phi
    cur_cov = cache.covariance(state.phi)
    log_phi = float(np.log(state.phi))
    prop_log_phi = log_phi + mh_step * float(rng.gen.standard_normal())
    prop_phi = float(np.exp(prop_log_phi))
    if not (hyper.phi_min < prop_phi < hyper.phi_max):
        return False
    try:
        prop_cov = build_exp_cov(data.sites, prop_phi, jitter=hyper.jitter)
    except DegenerateCovarianceError:
        return False
    log_accept = decay_log_target(
        prop_log_phi, prop_cov, state.factors
    ) - decay_log_target(log_phi, cur_cov, state.factors)
    if np.log(1.0 - rng.gen.random()) < log_accept:
        state.phi = prop_phi
        cache.set_covariance(prop_cov)
        return True
    return False


def update_nugget(
    state: ModelState, data: Dataset, hyper: Hyperparams, rng: RngStream
) -> None:
    resid = state.latent - data.X @ state.coeffs.T - state.factors @ state.loadings().T
    n, s = resid.shape
    shape = (n * s + hyper.a) / 2.0
    rate = (float(np.sum(resid * resid)) + hyper.b) / 2.0
    state.sigma2 = float(sample_inv_gamma(shape, rate, rng))


def update_atom_prior(
    state: ModelState, hyper: Hyperparams, rng: RngStream
) -> None:
    """Inverse-Wishart draw of the atom covariance, then the conjugate
    inverse-gamma draw of each hierarchical scale."""
    n_atoms, r = state.atoms.shape
    prior_df = hyper.iw_df_offset + r - 1
    scale = state.atoms.T @ state.atoms + 4.0 * np.diag(1.0 / state.atom_scales)
    state.atom_cov = sample_inv_wishart(prior_df + n_atoms, scale, rng)
    chol = np.linalg.cholesky(state.atom_cov)
    inv_diag = np.diag(cho_solve((chol, True), np.eye(r)))
    eta_shape = prior_df / 2.0 + hyper.eta_shape
    eta_rate = 2.0 * inv_diag + hyper.eta_rate
    state.atom_scales = np.asarray(
        sample_inv_gamma(eta_shape, eta_rate, rng), dtype=float
    ).reshape(r)


def log_joint(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparams,
    cache: DecayCache = None,
) -> float:
    """Joint log density of data and state, up to additive constants.

    Diagnostics only: omits the stick-weight prior density (unbounded at
    the simplex boundary) and, for r > 1, the atom-1 orthant
    normalization (it depends on the atom covariance).
    """
    x, u = data.X, state.latent
    lam = state.loadings()
    n, s = u.shape
    r = lam.shape[1]
    resid = u - x @ state.coeffs.T - state.factors @ lam.T
    out = -0.5 * n * s * np.log(state.sigma2)
    out -= 0.5 * float(np.sum(resid * resid)) / state.sigma2
    if hyper.spatial:
        if cache is None:
            cache = DecayCache(data.sites, hyper.jitter)
        cov = cache.covariance(state.phi)
        half = solve_triangular(cov.chol, state.factors, lower=True)
        out += -0.5 * r * cov.log_det - 0.5 * float(np.sum(half * half))
        if not hyper.phi_min <= state.phi <= hyper.phi_max:
            return -np.inf
    if hyper.sigma2_fixed is None:
        out += (-(hyper.a / 2.0 + 1.0) * np.log(state.sigma2)
                - hyper.b / 2.0 / state.sigma2)
    out -= 0.5 * float(np.sum(state.coeffs * state.coeffs)) / hyper.c
    chol_d = np.linalg.cholesky(state.atom_cov)
    half_z = solve_triangular(chol_d, state.atoms.T, lower=True)
    log_det_d = 2.0 * float(np.sum(np.log(np.diag(chol_d))))
    n_atoms = state.atoms.shape[0]
    out += -0.5 * n_atoms * log_det_d - 0.5 * float(np.sum(half_z * half_z))
    with np.errstate(divide="ignore"):
        out += float(np.sum(np.log(state.weights[state.labels - 1])))
    prior_df = hyper.iw_df_offset + r - 1
    scale = 4.0 * np.diag(1.0 / state.atom_scales)
    inv_d = cho_solve((chol_d, True), np.eye(r))
    out += (0.5 * prior_df * float(np.linalg.slogdet(scale)[1])
            - 0.5 * (prior_df + r + 1) * log_det_d
            - 0.5 * float(np.trace(scale @ inv_d)))
    out += float(
        np.sum(-(hyper.eta_shape + 1.0) * np.log(state.atom_scales)
               - hyper.eta_rate / state.atom_scales)
    )
    return float(out)


def run_sweep(
    state: ModelState,
    data: Dataset,
    hyper: Hyperparams,
    rng: RngStream,
    cache: DecayCache = None,
    mh_step: float = None,
    track_log_joint: bool = False,
    timeit: bool = False,
) -> SweepReport:
    """One full scan over every block, in the fixed sweep order."""
    report = SweepReport()
    clock = time.perf_counter if timeit else None

    def run(name, fn):
        if clock is None:
            return fn()
        t0 = clock()
        out = fn()
        report.timings[name] = report.timings.get(name, 0.0) + clock() - t0
        return out

    if data.response_kind == "binary":
        run("latent", lambda: update_latent(state, data, rng))
    run("coeffs", lambda: update_coeffs(state, data, hyper, rng))
    run("atoms", lambda: update_atoms(state, data, hyper, rng))
    run("labels", lambda: update_labels(state, data, hyper, rng))
    run("weights", lambda: update_weights(state, hyper, rng))
    run("factors", lambda: update_factors(state, data, hyper, rng, cache))
    if hyper.spatial:
        report.mh_phi_accepted = run(
            "decay",
            lambda: update_decay(state, data, hyper, rng, cache, mh_step),
        )
    if hyper.sigma2_fixed is None:
        run("nugget", lambda: update_nugget(state, data, hyper, rng))
    run("atom_prior", lambda: update_atom_prior(state, hyper, rng))
    if track_log_joint:
        report.log_joint = log_joint(state, data, hyper, cache)
    return report


def run_chain(
    data: Dataset,
    hyper: Hyperparams,
    rng: RngStream,
    validate_each_sweep: bool = False,
) -> PosteriorDraws:
    """Run the full chain and return the thinned post-burn-in draws.

    Deterministic given the stream: two runs with the same (seed,
    stream_id) produce bit-identical draws. The Metropolis step size is
    tuned toward 25-45% acceptance during burn-in only, then frozen.
    """
    hyper = hyper.resolve(data)
    sched = hyper.mcmc
    state = initial_state(data, hyper, rng)
    cache = DecayCache(data.sites, hyper.jitter) if hyper.spatial else None
    n_keep = sched.n_retained
    n, s, p = data.n_sites, data.n_species, data.n_covariates
    r, n_atoms = hyper.r, hyper.N
    out = PosteriorDraws(
        coeffs=np.empty((n_keep, s, p)),
        atoms=np.empty((n_keep, n_atoms, r)),
        labels=np.empty((n_keep, s), dtype=np.int64),
        weights=np.empty((n_keep, n_atoms)),
        factors=np.empty((n_keep, n, r)),
        sigma2=np.empty(n_keep),
        phi=np.empty(n_keep),
        atom_cov=np.empty((n_keep, r, r)),
        atom_scales=np.empty((n_keep, r)),
        mh_accept=np.zeros(sched.n_iter, dtype=bool),
        log_joint=np.empty(n_keep) if sched.track_log_joint else None,
        meta={},
    )
    mh_step = sched.mh_step_phi
    window_accepts = 0
    block_times: dict = {}
    t_start = time.perf_counter()
    kept = 0
    for it in range(1, sched.n_iter + 1):
        report = run_sweep(
            state, data, hyper, rng, cache,
            mh_step=mh_step,
            track_log_joint=sched.track_log_joint,
            timeit=True,
        )
        for k, v in report.timings.items():
            block_times[k] = block_times.get(k, 0.0) + v
        out.mh_accept[it - 1] = report.mh_phi_accepted
        if hyper.spatial and sched.adapt_phi and it <= sched.burn_in:
            window_accepts += int(report.mh_phi_accepted)
            if it % 50 == 0:
                rate = window_accepts / 50.0
                if rate < 0.25:
                    mh_step *= 0.7
                elif rate > 0.45:
                    mh_step *= 1.4
                mh_step = float(np.clip(mh_step, 1e-3, 10.0))
                window_accepts = 0
        if validate_each_sweep:
            state.validate(data, hyper)
        if it > sched.burn_in and (it - sched.burn_in) % sched.thin == 0:
            if kept < n_keep:
                out.coeffs[kept] = state.coeffs
                out.atoms[kept] = state.atoms
                out.labels[kept] = state.labels
                out.weights[kept] = state.weights
                out.factors[kept] = state.factors
                out.sigma2[kept] = state.sigma2
                out.phi[kept] = state.phi
                out.atom_cov[kept] = state.atom_cov
                out.atom_scales[kept] = state.atom_scales
                if sched.track_log_joint:
                    out.log_joint[kept] = report.log_joint
                kept += 1
        if sched.progress_every and it % sched.progress_every == 0:
            acc = float(out.mh_accept[:it].mean()) if hyper.spatial else 0.0
            print(
                f"iter={it} phi={state.phi:.4f} sigma2={state.sigma2:.4f} "
                f"clusters={len(np.unique(state.labels))} mh_acc={acc:.3f}",
                file=sys.stderr,
            )
    out.meta = {
        "n_iter": sched.n_iter,
        "burn_in": sched.burn_in,
        "thin": sched.thin,
        "seed": sched.seed,
        "stream_id": rng.stream_id,
        "spatial": hyper.spatial,
        "response_kind": data.response_kind,
        "mh_step_final": mh_step,
        "mh_accept_rate": (
            float(out.mh_accept[sched.burn_in:].mean())
            if hyper.spatial and sched.n_iter > sched.burn_in
            else 0.0
        ),
        "block_seconds": {k: round(v, 4) for k, v in sorted(block_times.items())},
        "wall_seconds": round(time.perf_counter() - t_start, 4),
    }
    return out
