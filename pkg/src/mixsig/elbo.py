"""Collapsed evidence lower bound, optimal inducing posterior and predictions.

Free parameters live in a flat dict of unconstrained arrays:

    log_sigma_f2, log_beta (A,), log_gamma, log_sigma2     kernel and noise
    Vh (Lh, A), Vl (Ll,)                                   inducing inputs
    mu, log_s (N, A)                                       training latents
    mu_star, log_s_star (N*, A)                            test latents
    w_star (N*, C)                                         log-alpha or logits

``log_gamma`` and ``Vl`` are absent for the independent variant; the test
entries are absent when there are no test rows.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular
from jax.scipy.special import gammaln

from .errors import DimensionMismatch, NonFiniteElbo
from .kernels import (
    InducingGrid,
    KernelParams,
    inducing_block,
    kernel_matrix_vv,
    latent_gram,
    location_gram,
    xi_arrays,
    xi_closed_form,
    XiStats,
)
from .numerics import cholesky_psd, solve_psd
from .variational import (
    VariationalState,
    categorical_moment_arrays,
    dirichlet_moment_arrays,
    kl_categorical_rows,
    kl_dirichlet_rows,
    kl_gaussian_diag_rows,
)

log = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
MODES = ("regression", "classification")


@dataclass
class ModelState:
    params: KernelParams
    grid: InducingGrid
    vs: VariationalState
    R: np.ndarray
    lam: np.ndarray
    variant: str = "correlated"
    mode: str = "regression"
    prior_alpha: np.ndarray | None = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.prior_alpha is None:
            self.prior_alpha = np.ones(self.R.shape[1])
        self.prior_alpha = np.asarray(self.prior_alpha, dtype=float)

    @property
    def n_components(self) -> int:
        return self.R.shape[1]

    @property
    def family(self) -> str:
        return "dirichlet" if self.mode == "regression" else "categorical"

    @property
    def weights_train(self) -> np.ndarray:
        return self.R

    def free_params(self) -> dict:
        p = {k: np.asarray(v, dtype=float) for k, v in self.params.to_log().items()}
        p["Vh"] = self.grid.latent_points.copy()
        if self.variant == "correlated":
            p["Vl"] = self.grid.wavelength_points.copy()
        p["mu"] = np.asarray(self.vs.mu, dtype=float).copy()
        p["log_s"] = np.asarray(self.vs.log_var, dtype=float).copy()
        if np.shape(self.vs.mu_star)[0]:
            p["mu_star"] = np.asarray(self.vs.mu_star, dtype=float).copy()
            p["log_s_star"] = np.asarray(self.vs.log_var_star, dtype=float).copy()
            p["w_star"] = np.asarray(self.vs.weight_params, dtype=float).copy()
        return p

    def with_free_params(self, p: dict) -> "ModelState":
        p = {k: np.asarray(v, dtype=float) for k, v in p.items()}
        a = p["mu"].shape[1]
        c = self.n_components
        params = KernelParams.from_log(p)
        grid = InducingGrid(p["Vh"], p.get("Vl"))
        vs = VariationalState(
            p["mu"],
            p["log_s"],
            p.get("mu_star", np.zeros((0, a))),
            p.get("log_s_star", np.zeros((0, a))),
            p.get("w_star", np.zeros((0, c))),
            self.family,
        )
        return replace(self, params=params, grid=grid, vs=vs)


def data_arrays(data, prior_alpha=None, include_test=True) -> dict:
    """Observation arrays consumed by the traced bound."""
    y = np.asarray(data.Y_train, dtype=float)
    r = np.asarray(data.R_train, dtype=float)
    y_star = np.asarray(data.Y_test, dtype=float).reshape(-1, y.shape[1])
    if not include_test:
        y_star = y_star[:0]
    if prior_alpha is None:
        prior_alpha = np.ones(r.shape[1])
    return {
        "Y": y,
        "R": r,
        "Y_star": y_star,
        "lam": np.asarray(data.lam, dtype=float),
        "prior_alpha": np.asarray(prior_alpha, dtype=float),
    }


# ---------------------------------------------------------------------------
# traced bound
# ---------------------------------------------------------------------------


def _block_left_solve(chol, x, n_c):
    """Apply blockdiag(chol, ..., chol)^-1 to the rows of x (L*C, K)."""
    n_l = chol.shape[0]
    k = x.shape[1]
    xr = x.reshape(n_c, n_l, k).transpose(1, 0, 2).reshape(n_l, n_c * k)
    z = solve_triangular(chol, xr, lower=True)
    return z.reshape(n_l, n_c, k).transpose(1, 0, 2).reshape(n_c * n_l, k)


def collapsed_terms(xi0, xi1, xi2, kblock, sigma2, n_c, n_m, variant):
    """The q(U)-dependent part of the bound after optimising q(U).

    Uses A = Kvv + xi2/sigma2 = Lk (I + Lk^-1 xi2 Lk^-T / sigma2) Lk^T with
    Lk the Cholesky factor of Kvv, which is far better conditioned than
    factorising A directly when sigma2 is small.
    """
    chol_k = jnp.linalg.cholesky(kblock)
    t = _block_left_solve(chol_k, xi2, n_c)
    t = _block_left_solve(chol_k, t.T, n_c).T
    t = 0.5 * (t + t.T)
    b = jnp.eye(t.shape[0]) + t / sigma2
    chol_b = jnp.linalg.cholesky(b)
    logdet_b = 2.0 * jnp.sum(jnp.log(jnp.diag(chol_b)))
    rhs = xi1[:, None] if variant == "correlated" else xi1.T
    c = solve_triangular(chol_b, _block_left_solve(chol_k, rhs, n_c), lower=True)
    per_loc = -0.5 * logdet_b - xi0 / (2.0 * sigma2) + jnp.trace(t) / (2.0 * sigma2)
    mult = 1.0 if variant == "correlated" else float(n_m)
    return jnp.sum(c**2) / (2.0 * sigma2**2) + mult * per_loc


def weight_moment_rows(w, family):
    if family == "dirichlet":
        return dirichlet_moment_arrays(jnp.exp(w))
    return categorical_moment_arrays(jax.nn.softmax(w, axis=-1))


def log_prior_train_weights(r, prior_alpha, family):
    n, n_c = r.shape
    if family == "categorical":
        return -n * jnp.log(n_c)
    norm = gammaln(jnp.sum(prior_alpha)) - jnp.sum(gammaln(prior_alpha))
    am1 = prior_alpha - 1.0
    safe = jnp.where(am1 == 0.0, 1.0, r)
    return n * norm + jnp.sum(jnp.where(am1 == 0.0, 0.0, am1 * jnp.log(safe)))


def bound_parts(p, d, variant, family, jitter):
    """Dictionary of every term of the collapsed bound."""
    sigma_f2 = jnp.exp(p["log_sigma_f2"])
    beta = jnp.exp(p["log_beta"])
    sigma2 = jnp.exp(p["log_sigma2"])
    gamma = jnp.exp(p["log_gamma"]) if variant == "correlated" else None
    vl = p["Vl"] if variant == "correlated" else None
    y, r, y_star = d["Y"], d["R"], d["Y_star"]
    n_c = r.shape[1]
    n_m = y.shape[1]
    has_test = y_star.shape[0] > 0

    mu, s = p["mu"], jnp.exp(p["log_s"])
    m, second = r, r[:, :, None] * r[:, None, :]
    yy = jnp.sum(y**2)
    kl_h = jnp.sum(kl_gaussian_diag_rows(p["mu"], p["log_s"]))
    kl_r = 0.0
    if has_test:
        m_star, second_star = weight_moment_rows(p["w_star"], family)
        mu = jnp.concatenate([mu, p["mu_star"]])
        s = jnp.concatenate([s, jnp.exp(p["log_s_star"])])
        m = jnp.concatenate([m, m_star])
        second = jnp.concatenate([second, second_star])
        y = jnp.concatenate([y, y_star])
        yy = yy + jnp.sum(y_star**2)
        kl_h = kl_h + jnp.sum(kl_gaussian_diag_rows(p["mu_star"], p["log_s_star"]))
        if family == "dirichlet":
            kl_r = jnp.sum(kl_dirichlet_rows(jnp.exp(p["w_star"]), d["prior_alpha"]))
        else:
            kl_r = jnp.sum(kl_categorical_rows(p["w_star"]))

    xi0, xi1, xi2 = xi_arrays(sigma_f2, beta, gamma, p["Vh"], vl, mu, s, m, second, y, d["lam"])
    kblock = inducing_block(sigma_f2, beta, gamma, p["Vh"], vl)
    kblock = kblock + jitter * sigma_f2 * jnp.eye(kblock.shape[0])
    g = collapsed_terms(xi0, xi1, xi2, kblock, sigma2, n_c, n_m, variant)
    n_rows = y.shape[0]
    return {
        "collapsed": g,
        "gaussian_const": -0.5 * n_rows * n_m * jnp.log(2.0 * jnp.pi * sigma2),
        "data_energy": -yy / (2.0 * sigma2),
        "kl_latent": kl_h,
        "kl_weights": kl_r,
        "log_prior_train": log_prior_train_weights(d["R"], d["prior_alpha"], family),
    }


def bound_from_parts(parts):
    return (
        parts["collapsed"]
        + parts["gaussian_const"]
        + parts["data_energy"]
        - parts["kl_latent"]
        - parts["kl_weights"]
        + parts["log_prior_train"]
    )


def collapsed_bound(p, d, variant="correlated", family="dirichlet", jitter=DEFAULT_JITTER):
    """Traceable ELBO of a free-parameter dict ``p`` on data dict ``d``."""
    return bound_from_parts(bound_parts(p, d, variant, family, jitter))


@partial(jax.jit, static_argnames=("variant", "family", "jitter"))
def _bound_jit(p, d, variant, family, jitter):
    return collapsed_bound(p, d, variant, family, jitter)


@partial(jax.jit, static_argnames=("variant", "family", "jitter"))
def _bound_and_grad_jit(p, d, variant, family, jitter):
    return jax.value_and_grad(collapsed_bound)(p, d, variant, family, jitter)


def elbo(state: ModelState, data) -> float:
    """Collapsed ELBO of a model state on a dataset.

    The Gaussian normalising constant counts training and test rows, and the
    constant log prior of the known training weights is included.
    """
    d = data_arrays(data, state.prior_alpha)
    if d["Y_star"].shape[0] != np.shape(state.vs.mu_star)[0]:
        raise DimensionMismatch("test rows in data and state disagree")
    value = float(_bound_jit(state.free_params(), d, state.variant, state.family, state.jitter))
    if not np.isfinite(value):
        raise NonFiniteElbo(f"bound evaluated to {value}")
    return value


def elbo_and_grad(state: ModelState, data) -> tuple[float, dict]:
    d = data_arrays(data, state.prior_alpha)
    value, grad = _bound_and_grad_jit(state.free_params(), d, state.variant, state.family, state.jitter)
    return float(value), {k: np.asarray(v) for k, v in grad.items()}


# ---------------------------------------------------------------------------
# optimal q(U) and predictions
# ---------------------------------------------------------------------------


@dataclass
class CollapsedQU:
    """Gaussian q(u). ``mean`` is (L*C,) or, for independent locations, (M, L*C)."""

    mean: np.ndarray
    cov: np.ndarray
    jitter_events: list = field(default_factory=list)


def optimal_qu(xi: XiStats, kvv, sigma2: float) -> CollapsedQU:
    """Optimal Gaussian inducing posterior for given statistics.

    cov = Kvv (xi2/sigma2 + Kvv)^-1 Kvv and mean = cov Kvv^-1 xi1 / sigma2,
    evaluated as Lk B^-1 Lk^T and Lk B^-1 Lk^-1 xi1 / sigma2 with
    B = I + Lk^-1 xi2 Lk^-T / sigma2, so no inverse is formed.
    """
    kvv = np.asarray(kvv, dtype=float)
    fk = cholesky_psd(kvv)
    events = [("kvv", fk.jitter_used)] if fk.jitter_used else []
    lk = fk.lower
    import scipy.linalg as sla

    t = sla.solve_triangular(lk, np.asarray(xi.xi2, dtype=float), lower=True)
    t = sla.solve_triangular(lk, t.T, lower=True).T
    b = np.eye(kvv.shape[0]) + 0.5 * (t + t.T) / sigma2
    fb = cholesky_psd(b)
    if fb.jitter_used:
        events.append(("b", fb.jitter_used))
    cov = lk @ solve_psd(fb, lk.T)
    cov = 0.5 * (cov + cov.T)
    xi1 = xi.xi1 if xi.xi1 is not None else xi.xi1_per_location.T
    w = sla.solve_triangular(lk, np.asarray(xi1, dtype=float), lower=True)
    mean = lk @ solve_psd(fb, w) / sigma2
    if xi.xi1 is None:
        mean = mean.T
    return CollapsedQU(mean, cov, events)


def inducing_covariance(state: ModelState) -> np.ndarray:
    """Kvv with the same relative jitter the bound uses."""
    kvv = kernel_matrix_vv(state.grid, state.params, state.n_components)
    return kvv + state.jitter * state.params.sigma_f2 * np.eye(kvv.shape[0])


def fit_qu(state: ModelState, data) -> CollapsedQU:
    xi = xi_closed_form(data, state.vs, state.grid, state.params, state.variant)
    return optimal_qu(xi, inducing_covariance(state), state.params.sigma2)


@dataclass
class PurePosterior:
    mean: np.ndarray
    variance: np.ndarray


def _cross_cov(state: ModelState, h, lam):
    p = state.params
    kh = np.exp(-0.5 * np.sum((h[:, None, :] - state.grid.latent_points[None]) ** 2 / p.beta, axis=-1))
    if state.variant == "independent":
        return p.sigma_f2 * kh
    kl = np.asarray(location_gram(lam, state.grid.wavelength_points, p.gamma))
    return p.sigma_f2 * (kh[:, :, None] * kl[:, None, :]).reshape(h.shape[0], -1)


def predict_pure(state: ModelState, qu: CollapsedQU, queries, component: int) -> PurePosterior:
    """Posterior of one pure component signal at (latent, location) queries.

    For the independent variant each query location must be one of the
    measurement locations, since every location has its own inducing outputs.
    """
    h = np.asarray([np.atleast_1d(q[0]) for q in queries], dtype=float)
    lam = np.asarray([float(q[1]) for q in queries])
    n_a = state.params.latent_dim
    if h.ndim != 2 or h.shape[1] != n_a:
        raise DimensionMismatch(f"query latents must have {n_a} coordinates")
    c = int(component)
    if not 0 <= c < state.n_components:
        raise DimensionMismatch(f"component {c} out of range")
    n_l = state.grid.size
    kvv_block = inducing_covariance(state)[:n_l, :n_l]
    fk = cholesky_psd(kvv_block)
    ks = _cross_cov(state, h, lam)  # (Q, L)
    proj = solve_psd(fk, ks.T).T  # Ks Kvv^-1
    sl = slice(c * n_l, (c + 1) * n_l)
    if state.variant == "correlated":
        mean = proj @ qu.mean[sl]
    else:
        idx = []
        for l in lam:
            hit = np.flatnonzero(state.lam == l)
            if hit.size == 0:
                raise DimensionMismatch(f"location {l} is not a measurement location")
            idx.append(hit[0])
        mean = np.einsum("ql,ql->q", proj, qu.mean[np.asarray(idx)][:, sl])
    cov_c = qu.cov[sl, sl]
    var = (
        state.params.sigma_f2
        - np.einsum("ql,ql->q", proj, ks)
        + np.einsum("ql,lk,qk->q", proj, cov_c, proj)
    )
    neg = var < 0
    if np.any(neg):
        worst = float(-var[neg].min())
        level = logging.WARNING if worst > 1e-6 * max(state.params.sigma_f2, 1e-300) else logging.DEBUG
        log.log(level, "clamped %d negative predictive variances (largest %.3g)", int(neg.sum()), worst)
        var = np.maximum(var, 0.0)
    return PurePosterior(mean, var)


def predict_weights(state: ModelState):
    """Mean and covariance of every test row's weight posterior."""
    mom = state.vs.test_weight_moments()
    return mom.mean, mom.covariance
