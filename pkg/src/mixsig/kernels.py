"""Shared ARD squared-exponential kernel and the weighted kernel expectations.

The kernel over (latent, location) inputs is

    k((h, l), (h', l')) = sf2 * exp(-0.5 (h - h')^T diag(beta)^-1 (h - h'))
                              * exp(-0.5 (l - l')^2 / gamma)

so ``beta`` and ``gamma`` are squared lengthscales. Every component shares
the kernel and the inducing inputs, which makes the inducing covariance
block diagonal with C identical blocks. For the correlated variant the
inducing inputs are the product grid ``latent_points x location_points``
flattened latent-major; for the independent variant they are the latent
points alone.

Inducing vectors of length L*C are ordered component-major: entry
``c * L + l`` belongs to component ``c`` and inducing input ``l``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .errors import DimensionMismatch, NonFiniteStatistic
from .numerics import RngStream
from .variational import VariationalState, WeightMoments

VARIANTS = ("correlated", "independent")


@dataclass
class KernelParams:
    sigma_f2: float
    beta: np.ndarray
    gamma: float | None
    sigma2: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        values = [self.sigma2, *self.beta]
        if self.gamma is not None:
            values.append(self.gamma)
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError("kernel parameters must be finite and strictly positive")
        # sf2 = 0 is allowed as the null-kernel limit
        if not (np.isfinite(self.sigma_f2) and self.sigma_f2 >= 0):
            raise ValueError("kernel variance must be finite and non-negative")

    @property
    def latent_dim(self) -> int:
        return self.beta.shape[0]

    def to_log(self) -> dict:
        out = {
            "log_sigma_f2": np.log(self.sigma_f2),
            "log_beta": np.log(self.beta),
            "log_sigma2": np.log(self.sigma2),
        }
        if self.gamma is not None:
            out["log_gamma"] = np.log(self.gamma)
        return out

    @classmethod
    def from_log(cls, p: dict) -> "KernelParams":
        gamma = float(np.exp(p["log_gamma"])) if "log_gamma" in p else None
        return cls(
            float(np.exp(p["log_sigma_f2"])),
            np.exp(np.asarray(p["log_beta"], dtype=float)),
            gamma,
            float(np.exp(p["log_sigma2"])),
        )


@dataclass
class InducingGrid:
    latent_points: np.ndarray
    wavelength_points: np.ndarray | None = None
    shared_across_components: bool = field(default=True, init=False)

    def __post_init__(self):
        self.latent_points = np.asarray(self.latent_points, dtype=float)
        if self.latent_points.ndim == 1:
            self.latent_points = self.latent_points[:, None]
        if self.wavelength_points is not None:
            self.wavelength_points = np.atleast_1d(np.asarray(self.wavelength_points, dtype=float))

    @property
    def variant(self) -> str:
        return "independent" if self.wavelength_points is None else "correlated"

    @property
    def size(self) -> int:
        n = self.latent_points.shape[0]
        if self.wavelength_points is not None:
            n *= self.wavelength_points.shape[0]
        return n

    def points(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Expanded (L, A) latent coordinates and (L,) locations, latent-major."""
        vh = self.latent_points
        if self.wavelength_points is None:
            return vh, None
        n_l = self.wavelength_points.shape[0]
        return np.repeat(vh, n_l, axis=0), np.tile(self.wavelength_points, vh.shape[0])


@dataclass
class XiStats:
    """Sufficient statistics of the collapsed bound.

    For the independent variant ``xi0`` and ``xi2`` are the per-location
    values (no sum over locations) and ``xi1_per_location`` is (M, L*C).
    """

    xi0: float
    xi1: np.ndarray | None
    xi2: np.ndarray
    xi1_per_location: np.ndarray | None = None


# ---------------------------------------------------------------------------
# kernel evaluations
# ---------------------------------------------------------------------------


def kernel_eval(h1, l1, h2, l2, p: KernelParams) -> float:
    h1 = np.atleast_1d(np.asarray(h1, dtype=float))
    h2 = np.atleast_1d(np.asarray(h2, dtype=float))
    quad = np.sum((h1 - h2) ** 2 / p.beta)
    if p.gamma is not None and l1 is not None:
        quad += (float(l1) - float(l2)) ** 2 / p.gamma
    return float(p.sigma_f2 * np.exp(-0.5 * quad))


def _sq_dist(x, y, scale):
    return jnp.sum((x[:, None, :] - y[None, :, :]) ** 2 / scale, axis=-1)


def latent_gram(vh, beta):
    """exp(-0.5 * scaled squared distance) between latent point sets."""
    vh = jnp.asarray(vh)
    return jnp.exp(-0.5 * _sq_dist(vh, vh, beta))


def location_gram(x, y, gamma):
    x = jnp.asarray(x)
    y = jnp.asarray(y)
    return jnp.exp(-0.5 * (x[:, None] - y[None, :]) ** 2 / gamma)


def inducing_block(sigma_f2, beta, gamma, vh, vl):
    """The L x L Gram block shared by every component."""
    k = latent_gram(vh, beta)
    if vl is not None:
        k = jnp.kron(k, location_gram(vl, vl, gamma))
    return sigma_f2 * k


def kernel_matrix_vv(g: InducingGrid, p: KernelParams, n_components: int) -> np.ndarray:
    block = np.asarray(inducing_block(p.sigma_f2, p.beta, p.gamma, g.latent_points, g.wavelength_points))
    return np.kron(np.eye(n_components), block)


# ---------------------------------------------------------------------------
# closed-form expectations
# ---------------------------------------------------------------------------


def psi1_latent(mu, s, vh, beta):
    """E_q(h)[exp(-0.5 (h-v)^T B^-1 (h-v))] for every row and latent point.

    mu, s: (n, A) means and variances; vh: (Lh, A). Returns (n, Lh).
    """
    denom = beta + s[:, None, :]
    diff = mu[:, None, :] - vh[None, :, :]
    log = -0.5 * jnp.sum(jnp.log(denom / beta) + diff**2 / denom, axis=-1)
    return jnp.exp(log)


def psi2_latent(mu, s, vh, beta):
    """E_q(h)[k(h, v) k(h, v')] / sf2^2 for every row and latent pair. (n, Lh, Lh)."""
    dv = vh[:, None, :] - vh[None, :, :]
    vbar = 0.5 * (vh[:, None, :] + vh[None, :, :])
    base = -0.25 * jnp.sum(dv**2 / beta, axis=-1)
    denom = beta + 2.0 * s[:, None, None, :]
    diff = mu[:, None, None, :] - vbar[None]
    log = base[None] - jnp.sum(0.5 * jnp.log(denom / beta) + diff**2 / denom, axis=-1)
    return jnp.exp(log)


def xi_arrays(sigma_f2, beta, gamma, vh, vl, mu, s, m, second, y, lam):
    """Closed-form statistics from stacked per-row arrays.

    mu, s: (n, A) latent means/variances over all rows (training then test);
    m: (n, C) weight means; second: (n, C, C) weight second moments;
    y: (n, M) observations; vl is None for the independent variant.

    Returns ``(xi0, xi1, xi2)``; for the independent variant ``xi1`` is the
    (M, L*C) stack of per-location vectors and ``xi0`` is per location.
    """
    n_c = m.shape[1]
    n_m = y.shape[1]
    p1 = psi1_latent(mu, s, vh, beta)
    p2 = psi2_latent(mu, s, vh, beta)
    trace_s = jnp.sum(jnp.trace(second, axis1=1, axis2=2))
    weighted = jnp.einsum("icd,iae->cade", second, p2)
    n_h = vh.shape[0]
    if vl is None:
        xi0 = sigma_f2 * trace_s
        xi1 = sigma_f2 * jnp.einsum("ic,ia,ij->jca", m, p1, y).reshape(n_m, n_c * n_h)
        xi2 = sigma_f2**2 * weighted.reshape(n_c * n_h, n_c * n_h)
        return xi0, xi1, xi2
    kl = location_gram(lam, vl, gamma)  # (M, Ll)
    n_l = vl.shape[0]
    yk = y @ kl  # (n, Ll)
    w = kl.T @ kl
    xi0 = n_m * sigma_f2 * trace_s
    xi1 = sigma_f2 * jnp.einsum("ic,ia,ib->cab", m, p1, yk).reshape(n_c * n_h * n_l)
    xi2 = sigma_f2**2 * jnp.einsum("cade,bf->cabdef", weighted, w)
    size = n_c * n_h * n_l
    return xi0, xi1, xi2.reshape(size, size)


def _stack_rows(data, vs: VariationalState):
    r = np.asarray(data.R_train, dtype=float)
    train = WeightMoments.exact(r)
    y_test = np.asarray(data.Y_test, dtype=float).reshape(-1, np.shape(data.Y_train)[1])
    n_star = y_test.shape[0]
    if np.size(vs.mu_star) and np.shape(vs.mu_star)[0] != n_star:
        raise DimensionMismatch(f"{n_star} test rows but {np.shape(vs.mu_star)[0]} test latents")
    if n_star:
        test = vs.test_weight_moments()
        m = np.concatenate([train.mean, test.mean])
        second = np.concatenate([train.second_moment, test.second_moment])
    else:
        m, second = train.mean, train.second_moment
    n_a = np.shape(vs.mu)[1]
    mu = np.concatenate([vs.mu, np.asarray(vs.mu_star, dtype=float).reshape(n_star, n_a)])
    s = np.exp(np.concatenate([vs.log_var, np.asarray(vs.log_var_star, dtype=float).reshape(n_star, n_a)]))
    y = np.concatenate([np.asarray(data.Y_train, dtype=float), y_test])
    if not (mu.shape[0] == m.shape[0] == y.shape[0]):
        raise DimensionMismatch("row counts of data, latents and weights disagree")
    return mu, s, m, second, y


def _check_variant(variant, g: InducingGrid):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if (variant == "correlated") != (g.wavelength_points is not None):
        raise DimensionMismatch(f"inducing grid does not match the {variant} variant")


def xi_closed_form(data, vs: VariationalState, g: InducingGrid, p: KernelParams, variant="correlated") -> XiStats:
    _check_variant(variant, g)
    mu, s, m, second, y = _stack_rows(data, vs)
    if mu.shape[1] != g.latent_points.shape[1] or mu.shape[1] != p.latent_dim:
        raise DimensionMismatch("latent dimension of grid, params and posteriors disagree")
    xi0, xi1, xi2 = xi_arrays(
        p.sigma_f2, p.beta, p.gamma, g.latent_points, g.wavelength_points,
        mu, s, m, second, y, np.asarray(data.lam, dtype=float),
    )
    xi0, xi1, xi2 = float(xi0), np.asarray(xi1), np.asarray(xi2)
    if not (np.isfinite(xi0) and np.all(np.isfinite(xi1)) and np.all(np.isfinite(xi2))):
        raise NonFiniteStatistic("non-finite entry in xi statistics")
    if variant == "independent":
        return XiStats(xi0, None, xi2, xi1)
    return XiStats(xi0, xi1, xi2)


# ---------------------------------------------------------------------------
# Monte Carlo estimates
# ---------------------------------------------------------------------------


@dataclass
class XiMonteCarlo:
    estimate: XiStats
    stderr: XiStats
    samples: int


def xi_monte_carlo(
    data,
    vs: VariationalState,
    g: InducingGrid,
    p: KernelParams,
    variant="correlated",
    samples: int = 10_000,
    rng: RngStream | None = None,
    batch: int = 2_000,
) -> XiMonteCarlo:
    """Plain Monte Carlo over q(H) of the same statistics.

    Each draw samples every row's latent from its diagonal Gaussian and
    evaluates the full cross-covariance to the expanded inducing inputs by
    direct kernel evaluation (no factorisation over latent and location
    parts). Weight moments enter exactly. Standard errors are the sample
    standard deviation of the per-draw totals over sqrt(samples).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    _check_variant(variant, g)
    rng = rng if rng is not None else RngStream(0)
    mu, s, m, second, y = _stack_rows(data, vs)
    n, n_a = mu.shape
    n_c = m.shape[1]
    lam = np.asarray(data.lam, dtype=float)
    n_m = lam.shape[0]
    vh, vl = g.points()
    n_ind = vh.shape[0]
    size = n_ind * n_c

    sums = {"xi1": np.zeros((n_m, size)) if variant == "independent" else np.zeros(size), "xi2": np.zeros((size, size))}
    sq = {k: np.zeros_like(v) for k, v in sums.items()}
    done = 0
    sd = np.sqrt(s)
    while done < samples:
        b = min(batch, samples - done)
        h = mu[None] + sd[None] * rng.normal(size=(b, n, n_a))
        lat = np.exp(-0.5 * np.sum((h[:, :, None, :] - vh[None, None]) ** 2 / p.beta, axis=-1))  # (b, n, L)
        if variant == "correlated":
            loc = np.exp(-0.5 * (lam[:, None] - vl[None, :]) ** 2 / p.gamma)  # (M, L)
            k = p.sigma_f2 * lat[:, :, None, :] * loc[None, None]  # (b, n, M, L)
            xi1 = np.einsum("ic,ij,bijl->bcl", m, y, k).reshape(b, size)
            kk = np.einsum("bijl,bijk->bilk", k, k)
            xi2 = np.einsum("icd,bilk->bcldk", second, kk).reshape(b, size, size)
        else:
            k = p.sigma_f2 * lat  # (b, n, L)
            xi1 = np.einsum("ic,ij,bil->bjcl", m, y, k).reshape(b, n_m, size)
            kk = np.einsum("bil,bik->bilk", k, k)
            xi2 = np.einsum("icd,bilk->bcldk", second, kk).reshape(b, size, size)
        for key, val in (("xi1", xi1), ("xi2", xi2)):
            sums[key] += val.sum(axis=0)
            sq[key] += (val**2).sum(axis=0)
        done += b

    means = {k: v / samples for k, v in sums.items()}
    if samples > 1:
        var = {k: np.maximum(sq[k] / samples - means[k] ** 2, 0.0) * samples / (samples - 1) for k in sums}
    else:
        var = {k: np.zeros_like(v) for k, v in sums.items()}
    se = {k: np.sqrt(v / samples) for k, v in var.items()}
    # the diagonal kernel value is sf2 whatever h is, so xi0 has no sampling error
    xi0 = p.sigma_f2 * float(np.sum(np.trace(second, axis1=1, axis2=2)))
    if variant == "correlated":
        xi0 *= n_m
        est = XiStats(xi0, means["xi1"], means["xi2"])
        err = XiStats(0.0, se["xi1"], se["xi2"])
    else:
        est = XiStats(xi0, None, means["xi2"], means["xi1"])
        err = XiStats(0.0, None, se["xi2"], se["xi1"])
    for arr in (est.xi1, est.xi2, est.xi1_per_location):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteStatistic("non-finite entry in Monte Carlo xi statistics")
    return XiMonteCarlo(est, err, samples)
