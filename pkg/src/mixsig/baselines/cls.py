"""Bayesian classical least squares: the mixture model without latent inputs.

Each location ``j`` has a Gaussian posterior over its C pure-signal values,
q(f_j) = N(mean_j, L_j L_j^T) with ``L_j`` lower triangular. Plain CLS puts
an independent N(0, 1) prior on every f_jc; CLS-GP instead places a GP over
locations on each component, which couples the locations through the prior
only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from ..elbo import DEFAULT_JITTER, data_arrays, log_prior_train_weights, weight_moment_rows
from ..errors import NonFiniteElbo, NoSuccessfulRestart, NotPositiveDefinite
from ..numerics import RngStream
from ..optim import lbfgs
from ..training import default_gamma, static_signal_estimate
from ..variational import VariationalState, kl_categorical_rows, kl_dirichlet_rows

CLS_VARIANTS = ("cls", "cls_gp")


@dataclass
class ClsConfig:
    variant: str = "cls"
    mode: str = "regression"
    restarts: int = 5
    seed: int = 0
    max_iter: int = 2000
    tol: float = 1e-7
    sigma2_init: float = 1.0
    sigma_f2_range: tuple = (0.5, 1.0)
    gamma_init: float | None = None
    init_scale: float = 0.1
    prior_alpha: tuple | None = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.variant not in CLS_VARIANTS:
            raise ValueError(f"variant must be one of {CLS_VARIANTS}")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class ClsState:
    mean: np.ndarray  # (M, C)
    cov: np.ndarray  # (M, C, C)
    weight_params: np.ndarray  # (N*, C) log-alpha or logits
    family: str
    sigma2: float
    variant: str = "cls"
    sigma_f2: float | None = None
    gamma: float | None = None
    trace: list = field(default_factory=list)

    def test_weights(self) -> VariationalState:
        n_c = self.mean.shape[1]
        z = np.zeros((0, 0))
        return VariationalState(z, z, z, z, self.weight_params.reshape(-1, n_c), self.family)


def _chol_factors(log_diag, offdiag, n_c):
    rows, cols = np.tril_indices(n_c, -1)
    lower = jnp.zeros(log_diag.shape + (n_c,))
    lower = lower.at[..., rows, cols].set(offdiag)
    return lower + jnp.exp(log_diag)[..., :, None] * jnp.eye(n_c)


def cls_bound(p, d, variant="cls", family="dirichlet", jitter=DEFAULT_JITTER):
    """Traceable bound of the latent-free model."""
    y, r, y_star = d["Y"], d["R"], d["Y_star"]
    n_c = r.shape[1]
    n_m = y.shape[1]
    sigma2 = jnp.exp(p["log_sigma2"])
    mean = p["f_mean"]
    lower = _chol_factors(p["f_log_diag"], p["f_offdiag"], n_c)
    cov = lower @ jnp.swapaxes(lower, -1, -2)

    m, second = r, r[:, :, None] * r[:, None, :]
    kl_r = 0.0
    if y_star.shape[0]:
        m_star, s_star = weight_moment_rows(p["w_star"], family)
        m = jnp.concatenate([m, m_star])
        second = jnp.concatenate([second, s_star])
        y = jnp.concatenate([y, y_star])
        if family == "dirichlet":
            kl_r = jnp.sum(kl_dirichlet_rows(jnp.exp(p["w_star"]), d["prior_alpha"]))
        else:
            kl_r = jnp.sum(kl_categorical_rows(p["w_star"]))
    s_tot = jnp.sum(second, axis=0)
    energy = (
        jnp.sum(y**2)
        - 2.0 * jnp.sum((y.T @ m) * mean)
        + jnp.sum(s_tot[None] * cov)
        + jnp.einsum("jc,cd,jd->", mean, s_tot, mean)
    )
    n_rows = y.shape[0]
    loglik = -0.5 * n_rows * n_m * jnp.log(2.0 * jnp.pi * sigma2) - energy / (2.0 * sigma2)

    logdet_q = 2.0 * jnp.sum(p["f_log_diag"])
    if variant == "cls":
        kl_f = 0.5 * (jnp.sum(cov[:, jnp.arange(n_c), jnp.arange(n_c)]) + jnp.sum(mean**2) - n_m * n_c - logdet_q)
    else:
        sigma_f2 = jnp.exp(p["log_sigma_f2"])
        gamma = jnp.exp(p["log_gamma"])
        lam = d["lam"]
        k = sigma_f2 * jnp.exp(-0.5 * (lam[:, None] - lam[None, :]) ** 2 / gamma)
        k = k + jitter * sigma_f2 * jnp.eye(n_m)
        chol = jnp.linalg.cholesky(k)
        kinv_diag = jnp.sum(jax.scipy.linalg.solve_triangular(chol, jnp.eye(n_m), lower=True) ** 2, axis=0)
        alpha = jax.scipy.linalg.cho_solve((chol, True), mean)
        logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diag(chol)))
        trace_term = jnp.sum(kinv_diag[:, None] * cov[:, jnp.arange(n_c), jnp.arange(n_c)])
        kl_f = 0.5 * (trace_term + jnp.sum(mean * alpha) - n_m * n_c + n_c * logdet_p - logdet_q)
    return loglik - kl_f - kl_r + log_prior_train_weights(d["R"], d["prior_alpha"], family)


@partial(jax.jit, static_argnames=("layout", "variant", "family", "jitter"))
def _neg_value_and_grad(x, d, layout, variant, family, jitter):
    def f(v):
        return -cls_bound(_split(v, layout), d, variant, family, jitter)

    return jax.value_and_grad(f)(x)


def _split(x, layout):
    out = {}
    offset = 0
    for key, shape in layout:
        size = int(np.prod(shape))
        out[key] = x[offset:offset + size].reshape(shape)
        offset += size
    return out


def _initial_params(data, cfg: ClsConfig, rng: RngStream) -> dict:
    n_c = data.n_components
    n_m = data.n_locations
    f_hat = static_signal_estimate(data.Y_train, data.R_train)
    scale = cfg.init_scale * max(float(np.std(f_hat)), 1e-12)
    p = {
        "log_sigma2": np.log(cfg.sigma2_init),
        "f_mean": f_hat + scale * rng.normal(size=f_hat.shape),
        "f_log_diag": np.full((n_m, n_c), np.log(cfg.init_scale)),
        "f_offdiag": np.zeros((n_m, n_c * (n_c - 1) // 2)),
    }
    if cfg.variant == "cls_gp":
        p["log_sigma_f2"] = np.log(rng.uniform(*cfg.sigma_f2_range))
        p["log_gamma"] = np.log(cfg.gamma_init or default_gamma(data.lam))
    if data.n_test:
        p["w_star"] = np.zeros((data.n_test, n_c))
    return p


def _state_from_params(p, cfg, family, trace) -> ClsState:
    n_c = p["f_mean"].shape[1]
    lower = np.asarray(_chol_factors(jnp.asarray(p["f_log_diag"]), jnp.asarray(p["f_offdiag"]), n_c))
    return ClsState(
        np.asarray(p["f_mean"]),
        lower @ np.swapaxes(lower, -1, -2),
        np.asarray(p.get("w_star", np.zeros((0, n_c)))),
        family,
        float(np.exp(p["log_sigma2"])),
        cfg.variant,
        float(np.exp(p["log_sigma_f2"])) if "log_sigma_f2" in p else None,
        float(np.exp(p["log_gamma"])) if "log_gamma" in p else None,
        trace,
    )


def cls_params(state: ClsState) -> dict:
    """Free-parameter dict of a state (inverse of the fitted-state mapping)."""
    n_c = state.mean.shape[1]
    lower = np.linalg.cholesky(state.cov)
    rows, cols = np.tril_indices(n_c, -1)
    p = {
        "log_sigma2": np.log(state.sigma2),
        "f_mean": state.mean,
        "f_log_diag": np.log(np.diagonal(lower, axis1=-2, axis2=-1)),
        "f_offdiag": lower[..., rows, cols],
    }
    if state.variant == "cls_gp":
        p["log_sigma_f2"] = np.log(state.sigma_f2)
        p["log_gamma"] = np.log(state.gamma)
    if state.weight_params.shape[0]:
        p["w_star"] = state.weight_params
    return p


def cls_elbo(state: ClsState, data, prior_alpha=None, jitter=DEFAULT_JITTER) -> float:
    d = data_arrays(data, prior_alpha)
    return float(cls_bound(cls_params(state), d, state.variant, state.family, jitter))


def _fit_once(data, cfg: ClsConfig, rng: RngStream):
    family = "dirichlet" if cfg.mode == "regression" else "categorical"
    p = _initial_params(data, cfg, rng)
    layout = tuple((k, np.shape(p[k])) for k in sorted(p))
    x0 = np.concatenate([np.ravel(p[k]) for k, _ in layout])
    d = {k: jnp.asarray(v) for k, v in data_arrays(data, cfg.prior_alpha).items()}

    def fun(x):
        value, grad = _neg_value_and_grad(jnp.asarray(x), d, layout, cfg.variant, family, cfg.jitter)
        return float(value), np.asarray(grad)

    if not np.isfinite(fun(x0)[0]):
        raise NonFiniteElbo("CLS bound is not finite at initialisation")
    trace = []
    s2_at = [k for k, _ in layout].index("log_sigma2")
    offset = sum(int(np.prod(shape)) for _, shape in layout[:s2_at])

    def record(x, value):
        trace.append((len(trace), 3, float(np.exp(x[offset])), -float(value)))

    res = lbfgs(fun, x0, max_iter=cfg.max_iter, rel_tol=cfg.tol, callback=record)
    p = _split(res.x, layout)
    state = _state_from_params(p, cfg, family, trace)
    final = -float(fun(res.x)[0])
    if not np.isfinite(final):
        raise NonFiniteElbo("CLS bound is not finite after optimisation")
    return state, final


def cls_fit(data, cfg: ClsConfig, rng: RngStream | None = None):
    """Best of ``cfg.restarts`` L-BFGS runs; returns ``(state, final_elbo)``.

    Restarts differ in a small random perturbation of the least-squares
    initial signal means and, for CLS-GP, in the initial kernel variance.
    """
    if rng is None:
        rng = RngStream(cfg.seed)
    best = None
    errors = []
    for k, stream in enumerate(rng.spawn(cfg.restarts)):
        try:
            state, value = _fit_once(data, cfg, stream)
        except (NonFiniteElbo, NotPositiveDefinite, FloatingPointError) as exc:
            errors.append((k, str(exc)))
            continue
        if best is None or value > best[1]:
            best = (state, value)
    if best is None:
        raise NoSuccessfulRestart(f"all CLS restarts failed: {errors}")
    return best
