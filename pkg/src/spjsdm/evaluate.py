"""Held-out prediction, paper metrics, orthogonalization, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtr
from scipy.spatial.distance import cdist

from .gp import psd_factor
from .model import Dataset, PosteriorDraws
from .rng import RngStream

# ---------------------------------------------------------------------------
# Bivariate normal CDF (Drezner-Wesolowsky / Genz hybrid quadrature)
# ---------------------------------------------------------------------------

_GL6_W = np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904])
_GL6_X = np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])
_GL12_W = np.array([
    0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
    0.2031674267230659, 0.2334925365383547, 0.2491470458134029,
])
_GL12_X = np.array([
    0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
    0.5873179542866171, 0.3678314989981802, 0.1252334085114692,
])
_GL20_W = np.array([
    0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
    0.1527533871307259,
])
_GL20_X = np.array([
    0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
    0.07652652113349733,
])


def bvn_upper(dh, dk, rho: float) -> np.ndarray:
    """P(X > dh, Y > dk) for standard bivariate normal, |error| < 1e-7.

    Gauss-Legendre quadrature on the correlation-integral form; for
    |rho| > 0.925 the singularity-extracted tail expansion. Vectorized
    over dh/dk with scalar rho.
    """
    dh_in, dk_in = np.broadcast_arrays(
        np.asarray(dh, dtype=float), np.asarray(dk, dtype=float)
    )
    shape = dh_in.shape
    h = np.atleast_1d(dh_in).ravel().copy()
    k = np.atleast_1d(dk_in).ravel().copy()
    rho = float(np.clip(rho, -1.0, 1.0))
    if abs(rho) < 0.3:
        w, x = _GL6_W, _GL6_X
    elif abs(rho) < 0.75:
        w, x = _GL12_W, _GL12_X
    else:
        w, x = _GL20_W, _GL20_X

    if abs(rho) < 0.925:
        hk = h * k
        bvn = np.zeros_like(hk)
        if rho != 0.0:
            hs = (h * h + k * k) / 2.0
            asr = float(np.arcsin(rho))
            for sign in (-1.0, 1.0):
                sn = np.sin(asr * (1.0 + sign * x) / 2.0)  # (nodes,)
                expo = (sn[:, None] * hk[None, :] - hs[None, :]) / (
                    1.0 - sn[:, None] ** 2
                )
                bvn += w @ np.exp(expo)
            bvn *= asr / (4.0 * np.pi)
        bvn += ndtr(-h) * ndtr(-k)
        return np.clip(bvn, 0.0, 1.0).reshape(shape)

    if rho < 0:
        k = -k
    hk = h * k
    bvn = np.zeros_like(hk)
    if abs(rho) < 1.0:
        a_sq = (1.0 - rho) * (1.0 + rho)
        a = float(np.sqrt(a_sq))
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -(bs / a_sq + hk) / 2.0
        m = asr > -100.0
        bvn[m] = (
            a
            * np.exp(asr[m])
            * (
                1.0
                - c[m] * (bs[m] - a_sq) * (1.0 - d[m] * bs[m] / 5.0) / 3.0
                + c[m] * d[m] * a_sq * a_sq / 5.0
            )
        )
        m = -hk < 100.0
        b = np.sqrt(bs)
        sp = np.sqrt(2.0 * np.pi) * ndtr(-b / a)
        bvn[m] -= (
            np.exp(-hk[m] / 2.0)
            * sp[m]
            * b[m]
            * (1.0 - c[m] * bs[m] * (1.0 - d[m] * bs[m] / 5.0) / 3.0)
        )
        a_half = a / 2.0
        for sign in (-1.0, 1.0):
            for wi, xi in zip(w, x):
                xs = (a_half * (sign * xi + 1.0)) ** 2
                rs = float(np.sqrt(1.0 - xs))
                asr1 = -(bs / xs + hk) / 2.0
                mm = asr1 > -100.0
                sp1 = 1.0 + c[mm] * xs * (1.0 + d[mm] * xs)
                ep = np.exp(-hk[mm] * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                bvn[mm] += a_half * wi * np.exp(asr1[mm]) * (ep - sp1)
        bvn = -bvn / (2.0 * np.pi)
    if rho > 0:
        bvn += ndtr(-np.maximum(h, k))
    else:
        bvn = -bvn + np.maximum(0.0, ndtr(-h) - ndtr(-k))
    return np.clip(bvn, 0.0, 1.0).reshape(shape)


def bvn_cdf(a, b, rho: float) -> np.ndarray:
    """P(X <= a, Y <= b) for standard bivariate normal with correlation rho."""
    return bvn_upper(-np.asarray(a, dtype=float), -np.asarray(b, dtype=float), rho)


# ---------------------------------------------------------------------------
# Held-out-site prediction
# ---------------------------------------------------------------------------


@dataclass
class PredictionResult:
    values: np.ndarray  # (m, S): posterior-mean latents or probabilities
    kind: str  # "continuous" | "binary"
    n_draws: int
    site_ids: tuple
    species_ids: tuple
    draws: np.ndarray = None  # (T, m, S) when retained


class _KrigCache:
    """Per-decay kriging operators for a fixed train/test split."""

    def __init__(self, train_coords, test_coords, jitter=0.0):
        self.train_coords = train_coords
        self.test_coords = test_coords
        self.jitter = jitter
        self.dist_tt = cdist(train_coords, train_coords)
        self.dist_pt = cdist(test_coords, train_coords)
        self.dist_pp = cdist(test_coords, test_coords)
        self.phi = None
        self.solve = None  # x -> C_tt^-1 x
        self.cross = None
        self.factor = None  # F with F F^T = conditional covariance

    def refresh(self, phi: float):
        if self.phi == phi:
            return
        mat = np.exp(-phi * self.dist_tt)
        if self.jitter:
            mat = mat + self.jitter * np.eye(mat.shape[0])
        chol = np.linalg.cholesky(mat)
        self.cross = np.exp(-phi * self.dist_pt)
        self.solve = lambda v: cho_solve((chol, True), v)
        cond = np.exp(-phi * self.dist_pp) - self.cross @ self.solve(self.cross.T)
        self.factor = psd_factor(cond)
        self.phi = phi

    def mean(self, w_train: np.ndarray) -> np.ndarray:
        return self.cross @ self.solve(w_train)


def predict_heldout(
    draws: PosteriorDraws,
    data: Dataset,
    rng: RngStream = None,
    sample_factors: bool = True,
    store_draws: bool = False,
    jitter: float = 0.0,
) -> PredictionResult:
    """Composition prediction at held-out sites, one pass per retained draw.

    Spatial fits krige each factor column to the test sites and (by
    default) sample from the conditional; independent-factor fits draw
    test-site factors from their N(0, I) prior. Continuous fits
    accumulate the latent mean, binary fits the presence probability.
    """
    if draws.n_draws == 0:
        raise ValueError("no retained draws to predict from")
    if not data.holdout_mask.any():
        raise ValueError("holdout_mask is empty: nothing to predict")
    spatial = bool(draws.meta.get("spatial", True))
    if sample_factors and rng is None:
        rng = RngStream(0, stream_id=91)
    train = data.train_view()
    test = data.test_view()
    x_test = test.X
    m = x_test.shape[0]
    n_species = data.n_species
    total = np.zeros((m, n_species))
    kept = (
        np.empty((draws.n_draws, m, n_species)) if store_draws else None
    )
    krig = (
        _KrigCache(train.sites.coords, test.sites.coords, jitter=jitter)
        if spatial
        else None
    )
    r = draws.factors.shape[2]
    for t in range(draws.n_draws):
        lam = draws.loadings_at(t)
        if spatial:
            krig.refresh(float(draws.phi[t]))
            w_pred = krig.mean(draws.factors[t])
            if sample_factors:
                w_pred = w_pred + krig.factor @ rng.gen.standard_normal((m, r))
        else:
            w_pred = (
                rng.gen.standard_normal((m, r))
                if sample_factors
                else np.zeros((m, r))
            )
        latent_mean = x_test @ draws.coeffs[t].T + w_pred @ lam.T
        if data.response_kind == "binary":
            contrib = ndtr(latent_mean / np.sqrt(draws.sigma2[t]))
        else:
            contrib = latent_mean
        total += contrib
        if store_draws:
            kept[t] = contrib
    return PredictionResult(
        values=total / draws.n_draws,
        kind=data.response_kind,
        n_draws=draws.n_draws,
        site_ids=test.sites.ids,
        species_ids=data.species_ids,
        draws=kept,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def pmse(truth: np.ndarray, pred: np.ndarray) -> float:
    """Mean squared prediction error over held-out sites and species."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    return float(np.mean((truth - pred) ** 2))


@dataclass
class TjurResult:
    per_species: np.ndarray  # (S,), NaN where undefined
    mean: float
    n_excluded: int


def tjur_r(y_test: np.ndarray, pi_hat: np.ndarray) -> TjurResult:
    """Tjur discrimination: mean probability at observed ones minus zeros.

    Species with no ones or no zeros in the test set are excluded from the
    mean and reported as NaN.
    """
    y = np.asarray(y_test, dtype=float)
    pi = np.asarray(pi_hat, dtype=float)
    if y.shape != pi.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {pi.shape}")
    ones = y > 0
    n1 = ones.sum(axis=0)
    n0 = (~ones).sum(axis=0)
    out = np.full(y.shape[1], np.nan)
    defined = (n1 > 0) & (n0 > 0)
    with np.errstate(invalid="ignore"):
        mean1 = np.where(ones, pi, 0.0).sum(axis=0) / np.maximum(n1, 1)
        mean0 = np.where(~ones, pi, 0.0).sum(axis=0) / np.maximum(n0, 1)
    out[defined] = mean1[defined] - mean0[defined]
    if not defined.any():
        raise ValueError("Tjur R undefined for every species")
    return TjurResult(
        per_species=out,
        mean=float(out[defined].mean()),
        n_excluded=int((~defined).sum()),
    )


def frobenius_gap(sigma_true: np.ndarray, sigma_hat: np.ndarray) -> float:
    a = np.asarray(sigma_true, dtype=float)
    b = np.asarray(sigma_hat, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, "fro"))


def inefficiency_factor(trace: np.ndarray) -> float:
    """1 + 2 * sum of autocorrelations, truncated at the first lag below
    0.01 or at length/10, whichever comes first."""
    x = np.asarray(trace, dtype=float)
    n = x.size
    if n < 100:
        raise ValueError("trace too short (need >= 100)")
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        raise ValueError("constant trace: autocorrelation undefined")
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: n // 10 + 1].real
    rho = acov / denom  # biased autocorrelation estimator
    total = 0.0
    for s in range(1, min(n // 10, rho.size - 1) + 1):
        if rho[s] < 0.01:
            break
        total += rho[s]
    return float(1.0 + 2.0 * total)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have equal length")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    n = a.size

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Conditional Tjur for a species pair
# ---------------------------------------------------------------------------


@dataclass
class ConditionalTjurResult:
    tr_given_present: float  # NaN when the stratum is degenerate
    tr_given_absent: float
    table: np.ndarray  # 2x2 counts, rows = conditioner state, cols = target
    prob_given_present: np.ndarray  # (m,) averaged conditional probabilities
    prob_given_absent: np.ndarray


def _species_index(data: Dataset, species) -> int:
    if isinstance(species, str):
        return data.species_ids.index(species)
    return int(species)


def conditional_tjur(
    draws: PosteriorDraws,
    data: Dataset,
    target_species,
    condition_species,
    jitter: float = 0.0,
) -> ConditionalTjurResult:
    """Tjur contrast for the target species within each observed state of
    the conditioning species at the held-out sites.

    Per draw, the latent pair at a test site is bivariate normal with the
    kriged factor mean and the species-covariance correlation; conditional
    presence probabilities come from the bivariate normal CDF.
    """
    it = _species_index(data, target_species)
    ic = _species_index(data, condition_species)
    if not data.holdout_mask.any():
        raise ValueError("no held-out sites")
    spatial = bool(draws.meta.get("spatial", True))
    train = data.train_view()
    test = data.test_view()
    m = test.X.shape[0]
    krig = (
        _KrigCache(train.sites.coords, test.sites.coords, jitter=jitter)
        if spatial
        else None
    )
    p_joint_acc = np.zeros(m)
    p_t_acc = np.zeros(m)
    p_c_acc = np.zeros(m)
    p_t1_acc = np.zeros(m)
    p_t0_acc = np.zeros(m)
    for t in range(draws.n_draws):
        lam = draws.loadings_at(t)
        if spatial:
            krig.refresh(float(draws.phi[t]))
            w_pred = krig.mean(draws.factors[t])
        else:
            w_pred = np.zeros((m, draws.factors.shape[2]))
        mu = test.X @ draws.coeffs[t][[it, ic]].T + w_pred @ lam[[it, ic]].T
        s2 = float(draws.sigma2[t])
        var_t = float(lam[it] @ lam[it]) + s2
        var_c = float(lam[ic] @ lam[ic]) + s2
        rho = float(lam[it] @ lam[ic]) / np.sqrt(var_t * var_c)
        a_t = mu[:, 0] / np.sqrt(var_t)
        a_c = mu[:, 1] / np.sqrt(var_c)
        p_joint = bvn_upper(-a_t, -a_c, rho)
        p_t = ndtr(a_t)
        p_c = ndtr(a_c)
        tiny = 1e-300
        p_t1_acc += p_joint / np.maximum(p_c, tiny)
        p_t0_acc += np.maximum(p_t - p_joint, 0.0) / np.maximum(1.0 - p_c, tiny)
        p_joint_acc += p_joint
        p_t_acc += p_t
        p_c_acc += p_c
    nd = draws.n_draws
    prob1 = np.clip(p_t1_acc / nd, 0.0, 1.0)
    prob0 = np.clip(p_t0_acc / nd, 0.0, 1.0)
    y_t = test.Y[:, it] > 0
    y_c = test.Y[:, ic] > 0
    table = np.array(
        [
            [int((~y_c & ~y_t).sum()), int((~y_c & y_t).sum())],
            [int((y_c & ~y_t).sum()), int((y_c & y_t).sum())],
        ]
    )

    def stratum_tr(probs, mask):
        pos = mask & y_t
        neg = mask & ~y_t
        if not pos.any() or not neg.any():
            return float("nan")
        return float(probs[pos].mean() - probs[neg].mean())

    return ConditionalTjurResult(
        tr_given_present=stratum_tr(prob1, y_c),
        tr_given_absent=stratum_tr(prob0, ~y_c),
        table=table,
        prob_given_present=prob1,
        prob_given_absent=prob0,
    )


# ---------------------------------------------------------------------------
# Spatial-confounding orthogonalization
# ---------------------------------------------------------------------------


@dataclass
class OrthogonalizedSummaries:
    coeffs_mean: np.ndarray  # (S, p) posterior mean of the adjusted coefficients
    coeffs_ci: tuple  # (lo, hi) arrays
    fixed_surface_mean: np.ndarray  # (n, S) posterior mean of X B*^T
    random_surface_mean: np.ndarray  # (n, S) posterior mean of W* Lambda^T
    max_identity_violation: float
    max_orthogonality_violation: float


def orthogonalize(
    draws: PosteriorDraws, data: Dataset, tol: float = 1e-10
) -> OrthogonalizedSummaries:
    """Project the factors off the covariate column space, per draw.

    Adjusted coefficients absorb the projected component; the total
    conditional mean surface is verified unchanged (and the residual
    factors verified orthogonal to the covariates) at `tol` per draw.
    """
    x = data.X
    xtx = x.T @ x
    try:
        proj = np.linalg.solve(xtx, x.T)  # (p, n)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariate matrix is rank deficient") from exc
    t_draws = draws.n_draws
    b_star = np.empty_like(draws.coeffs)
    fixed_acc = 0.0
    random_acc = 0.0
    max_identity = 0.0
    max_orth = 0.0
    for t in range(t_draws):
        lam = draws.loadings_at(t)
        w = draws.factors[t]
        pw = proj @ w  # (p, r)
        b_star[t] = draws.coeffs[t] + lam @ pw.T
        w_star = w - x @ pw
        fixed = x @ b_star[t].T
        rand = w_star @ lam.T
        total_orig = x @ draws.coeffs[t].T + w @ lam.T
        max_identity = max(
            max_identity, float(np.max(np.abs(fixed + rand - total_orig)))
        )
        max_orth = max(max_orth, float(np.max(np.abs(x.T @ w_star))))
        fixed_acc = fixed_acc + fixed
        random_acc = random_acc + rand
    if max_identity > tol * 10 or max_orth > tol * 10:
        raise AssertionError(
            f"orthogonalization identity violated: {max_identity:.3e}, "
            f"orthogonality {max_orth:.3e}"
        )
    lo = np.percentile(b_star, 2.5, axis=0)
    hi = np.percentile(b_star, 97.5, axis=0)
    return OrthogonalizedSummaries(
        coeffs_mean=b_star.mean(axis=0),
        coeffs_ci=(lo, hi),
        fixed_surface_mean=fixed_acc / t_draws,
        random_surface_mean=random_acc / t_draws,
        max_identity_violation=max_identity,
        max_orthogonality_violation=max_orth,
    )


def posterior_sigma_star(draws: PosteriorDraws) -> np.ndarray:
    """Species covariance at the posterior means of the loadings and nugget."""
    lam_bar = draws.posterior_mean_loadings()
    return lam_bar @ lam_bar.T + float(draws.sigma2.mean()) * np.eye(
        lam_bar.shape[0]
    )
