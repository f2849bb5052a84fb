"""Seeded random-variate generation for the sampler.

Every draw goes through an RngStream so that a (seed, stream_id) pair
reproduces the chain bit-for-bit. Distribution routines are stateless
apart from advancing the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

_TINY = np.finfo(float).tiny


@dataclass
class RngStream:
    """A reproducible PCG64 stream; distinct stream_ids are independent."""

    seed: int
    stream_id: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, tag: int) -> "RngStream":
        """An independent stream derived from this one's identity."""
        out = object.__new__(RngStream)
        out.seed = self.seed
        out.stream_id = self.stream_id
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, tag)
        )
        out.gen = np.random.Generator(np.random.PCG64(seq))
        return out


def sample_mvn_chol(mean, chol_cov, rng: RngStream) -> np.ndarray:
    """mean + L z with z standard normal; L lower-triangular."""
    mean = np.asarray(mean, dtype=float)
    chol_cov = np.asarray(chol_cov, dtype=float)
    if chol_cov.shape != (mean.size, mean.size):
        raise ValueError(
            f"dimension mismatch: mean {mean.shape}, chol {chol_cov.shape}"
        )
    z = rng.gen.standard_normal(mean.size)
    return mean + chol_cov @ z


def _std_truncnorm_lower(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of N(0,1) conditioned on exceeding `a`.

    Works in log-probability space (log_ndtr / ndtri_exp), so it stays
    accurate arbitrarily far into the tail.
    """
    with np.errstate(divide="ignore"):
        log_u = np.log(u)
    return -ndtri_exp(log_u + log_ndtr(-a))


def sample_truncnorm_uni(mean, sd, side: str, rng: RngStream, size=None):
    """One-sided zero-truncated normal draw(s).

    side="above0" -> support (0, inf); side="below0" -> support (-inf, 0].
    Broadcasts over array mean/sd; `size` requests extra iid draws for
    scalar parameters. Robust for |mean|/sd well beyond 8.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    if side not in ("above0", "below0"):
        raise ValueError(f"side must be 'above0' or 'below0', got {side!r}")
    if side == "below0":
        # reflect: -X | X > 0 with mean negated
        return -sample_truncnorm_uni(-mean, sd, "above0", rng, size=size)
    shape = np.broadcast_shapes(mean.shape, sd.shape) if size is None else size
    a = np.broadcast_to(-mean / sd, shape)
    u = 1.0 - rng.gen.random(shape)  # in (0, 1]
    t = _std_truncnorm_lower(a, u)
    x = mean + sd * t
    # strict positivity even if rounding landed exactly on the boundary
    x = np.maximum(x, _TINY)
    if x.shape == ():
        return float(x)
    return x


def sample_truncnorm_orthant(
    mean,
    cov,
    rng: RngStream,
    sweeps: int = 10,
    init=None,
    size=None,
) -> np.ndarray:
    """N(mean, cov) restricted to the positive orthant.

    Coordinate-wise Gibbs sub-sweeps over the univariate truncated
    conditionals; rejection collapses for correlated dimensions around
    r = 5, this does not. With `init` given, the sub-sweeps are a valid
    MCMC transition from that state (used inside the main sampler); with
    init=None a feasible start is drawn from |N(mean, cov)|.

    `size` draws a batch of independent samples, shape (size, r).
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    r = mean.size
    if cov.shape != (r, r):
        raise ValueError("cov shape does not match mean")
    chol = np.linalg.cholesky(cov)  # raises on non-SPD
    if r == 1:
        out = sample_truncnorm_uni(
            float(mean[0]), float(np.sqrt(cov[0, 0])), "above0", rng,
            size=None if size is None else (size, 1),
        )
        return np.atleast_1d(out) if size is None else out

    prec = np.linalg.inv(cov)
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    batch = 1 if size is None else int(size)
    if init is None:
        z = rng.gen.standard_normal((batch, r))
        x = np.abs(mean + z @ chol.T)
        x = np.maximum(x, _TINY)
    else:
        x = np.broadcast_to(np.asarray(init, dtype=float), (batch, r)).copy()
        if np.any(x <= 0):
            raise ValueError("init must be strictly positive")
    centered = x - mean
    for _ in range(sweeps):
        for i in range(r):
            # conditional mean of coord i given the rest
            dot = centered @ prec[:, i] - centered[:, i] * prec[i, i]
            m_i = mean[i] - dot / prec[i, i]
            x[:, i] = sample_truncnorm_uni(m_i, cond_sd[i], "above0", rng)
            centered[:, i] = x[:, i] - mean[i]
    return x[0] if size is None else x


def sample_inv_gamma(shape, rate, rng: RngStream, size=None):
    """Inverse gamma with density proportional to x^(-shape-1) e^(-rate/x)."""
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
        raise ValueError("shape and rate must be positive")
    if size is None:
        bshape = np.broadcast_shapes(np.shape(shape), np.shape(rate))
        size = bshape if bshape != () else None
    g = rng.gen.gamma(shape, 1.0, size=size)
    return rate / g


def sample_inv_wishart(df: float, scale: np.ndarray, rng: RngStream) -> np.ndarray:
    """Inverse Wishart draw via the Bartlett decomposition.

    Mean is scale / (df - dim - 1) for df > dim + 1; dim-1 reduces to
    IG(df/2, scale/2).
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if not df > d - 1:
        raise ValueError(f"df must exceed dim-1 ({d - 1}), got {df}")
    chol_scale = np.linalg.cholesky(scale)  # raises on non-SPD
    a = np.zeros((d, d))
    chi_df = df - np.arange(d)
    a[np.diag_indices(d)] = np.sqrt(rng.gen.chisquare(chi_df))
    if d > 1:
        il = np.tril_indices(d, k=-1)
        a[il] = rng.gen.standard_normal(len(il[0]))
    # X = (L A^-T)(L A^-T)^T is IW(df, L L^T)
    from scipy.linalg import solve_triangular

    m = solve_triangular(a, chol_scale.T, lower=True, trans="T").T
    out = m @ m.T
    return 0.5 * (out + out.T)


def sample_gd_stick(
    alpha: float,
    counts,
    rng: RngStream,
    variant: str = "printed",
) -> np.ndarray:
    """Stick-breaking weights conjugate to multinomial label counts.

    Beta shapes follow the truncated generalized-Dirichlet update:
    first shape alpha/N + counts[j]; second shape alpha*(N-1)/N (printed
    form) or alpha*(N-j)/N (variant="standard") plus the tail counts.
    The last weight closes the simplex exactly.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    counts = np.asarray(counts, dtype=float)
    n_atoms = counts.size
    if n_atoms < 2:
        raise ValueError("need at least 2 atoms")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    j = np.arange(1, n_atoms)  # sticks for atoms 1..N-1
    shape1 = alpha / n_atoms + counts[:-1]
    if variant == "printed":
        shape2 = alpha * (n_atoms - 1) / n_atoms + tail[:-1]
    elif variant == "standard":
        shape2 = alpha * (n_atoms - j) / n_atoms + tail[:-1]
    else:
        raise ValueError(f"unknown stick variant {variant!r}")
    xi = rng.gen.beta(shape1, shape2)
    p = np.empty(n_atoms)
    remaining = 1.0
    for idx in range(n_atoms - 1):
        p[idx] = xi[idx] * remaining
        remaining *= 1.0 - xi[idx]
    p[-1] = max(0.0, 1.0 - float(np.sum(p[:-1])))
    return p
