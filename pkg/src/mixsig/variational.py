"""Variational families over latents and mixture weights.

Array-level functions (suffix ``_arrays``/``_rows``) are written with
``jax.numpy`` so they can sit inside the differentiated bound; they accept
numpy input and broadcast over leading row dimensions. The dataclass
wrappers return plain numpy values.
"""
from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import digamma, gammaln


@dataclass(frozen=True)
class LatentPosterior:
    """Diagonal Gaussian q(h); ``mean`` and ``log_var`` are (A,) or (n, A)."""

    mean: np.ndarray
    log_var: np.ndarray

    @property
    def var(self):
        return np.exp(self.log_var)


@dataclass(frozen=True)
class DirichletPosterior:
    log_alpha: np.ndarray

    @property
    def alpha(self):
        return np.exp(self.log_alpha)


@dataclass(frozen=True)
class CategoricalPosterior:
    logits: np.ndarray

    @property
    def probabilities(self):
        return np.asarray(jax.nn.softmax(jnp.asarray(self.logits), axis=-1))


@dataclass(frozen=True)
class WeightMoments:
    """First and second moments of a weight vector (or a stack of them)."""

    mean: np.ndarray
    second_moment: np.ndarray

    @property
    def covariance(self):
        return self.second_moment - self.mean[..., :, None] * self.mean[..., None, :]

    @classmethod
    def exact(cls, r) -> "WeightMoments":
        """Point-mass moments for known weights."""
        r = np.asarray(r, dtype=float)
        return cls(r, r[..., :, None] * r[..., None, :])


def dirichlet_moment_arrays(alpha):
    alpha = jnp.asarray(alpha)
    a0 = jnp.sum(alpha, axis=-1, keepdims=True)
    mean = alpha / a0
    outer = mean[..., :, None] * mean[..., None, :]
    diag = jnp.eye(alpha.shape[-1]) * mean[..., None, :]
    cov = (diag - outer) / (1.0 + a0[..., None])
    return mean, outer + cov


def categorical_moment_arrays(probs):
    probs = jnp.asarray(probs)
    return probs, jnp.eye(probs.shape[-1]) * probs[..., None, :]


def kl_gaussian_diag_rows(mean, log_var):
    """KL(N(mean, diag(exp(log_var))) || N(0, I)) summed over the last axis."""
    mean = jnp.asarray(mean)
    log_var = jnp.asarray(log_var)
    # expm1 keeps the variance term non-negative when log_var is near zero
    return 0.5 * jnp.sum(jnp.expm1(log_var) - log_var + mean**2, axis=-1)


# Above this argument the Stirling remainders use their asymptotic series.
STIRLING_SWITCH = 20.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lgamma_remainder(x):
    """log Gamma(x) - [(x - 1/2) log x - x + log(2 pi)/2]."""
    small = jnp.minimum(x, STIRLING_SWITCH)
    direct = gammaln(small) - ((small - 0.5) * jnp.log(small) - small + HALF_LOG_2PI)
    inv = 1.0 / jnp.maximum(x, STIRLING_SWITCH)
    inv2 = inv * inv
    series = inv * (1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 / 1680)))
    return jnp.where(x < STIRLING_SWITCH, direct, series)


def _digamma_remainder(x):
    """digamma(x) - log x + 1/(2x)."""
    small = jnp.minimum(x, STIRLING_SWITCH)
    direct = digamma(small) - jnp.log(small) + 0.5 / small
    inv = 1.0 / jnp.maximum(x, STIRLING_SWITCH)
    inv2 = inv * inv
    series = -inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 / 240)))
    return jnp.where(x < STIRLING_SWITCH, direct, series)


def kl_dirichlet_rows(alpha, prior_alpha):
    """KL(Dir(alpha) || Dir(prior_alpha)) over the last axis.

    The x log x parts of log Gamma and digamma cancel between the two
    halves of the KL; they are removed analytically so that only Stirling
    remainders are evaluated. The direct form loses every digit once alpha
    is large (around 1e17 and beyond) and can even go negative.
    """
    alpha = jnp.asarray(alpha)
    prior_alpha = jnp.broadcast_to(jnp.asarray(prior_alpha, dtype=alpha.dtype), alpha.shape)
    a0 = jnp.sum(alpha, axis=-1)
    p0 = jnp.sum(prior_alpha, axis=-1)
    n_c = alpha.shape[-1]
    posterior_part = (
        0.5 * (jnp.sum(jnp.log(alpha), axis=-1) - jnp.log(a0))
        - 0.5 * (n_c - 1) * (2.0 * HALF_LOG_2PI + 1.0)
        + _lgamma_remainder(a0)
        - jnp.sum(_lgamma_remainder(alpha), axis=-1)
        + jnp.sum(alpha * _digamma_remainder(alpha), axis=-1)
        - a0 * _digamma_remainder(a0)
    )
    prior_part = (
        jnp.sum(gammaln(prior_alpha), axis=-1)
        - gammaln(p0)
        - jnp.sum(prior_alpha * (digamma(alpha) - digamma(a0)[..., None]), axis=-1)
    )
    return posterior_part + prior_part


def kl_categorical_rows(logits):
    """KL against the uniform distribution over the last axis."""
    logits = jnp.asarray(logits)
    logp = jax.nn.log_softmax(logits, axis=-1)
    n_classes = logits.shape[-1]
    return jnp.sum(jnp.exp(logp) * (logp + jnp.log(n_classes)), axis=-1)


def dirichlet_moments(d: DirichletPosterior) -> WeightMoments:
    mean, second = dirichlet_moment_arrays(np.exp(np.asarray(d.log_alpha, dtype=float)))
    return WeightMoments(np.asarray(mean), np.asarray(second))


def categorical_moments(c: CategoricalPosterior) -> WeightMoments:
    mean, second = categorical_moment_arrays(c.probabilities)
    return WeightMoments(np.asarray(mean), np.asarray(second))


def kl_gaussian_diag(lp: LatentPosterior) -> float:
    return float(jnp.sum(kl_gaussian_diag_rows(lp.mean, lp.log_var)))


def kl_dirichlet(d: DirichletPosterior, prior_alpha=None) -> float:
    alpha = np.exp(np.asarray(d.log_alpha, dtype=float))
    if prior_alpha is None:
        prior_alpha = np.ones(alpha.shape[-1])
    return float(jnp.sum(kl_dirichlet_rows(alpha, prior_alpha)))


def kl_categorical(c: CategoricalPosterior) -> float:
    return float(jnp.sum(kl_categorical_rows(c.logits)))


@dataclass
class VariationalState:
    """Per-row variational parameters for latents and unknown test weights.

    ``weight_params`` holds log-concentrations for the Dirichlet family and
    logits for the categorical family, one row per test observation.
    """

    mu: np.ndarray
    log_var: np.ndarray
    mu_star: np.ndarray
    log_var_star: np.ndarray
    weight_params: np.ndarray
    family: str = "dirichlet"

    def test_weight_moments(self) -> WeightMoments:
        if self.family == "dirichlet":
            mean, second = dirichlet_moment_arrays(np.exp(self.weight_params))
        elif self.family == "categorical":
            mean, second = categorical_moment_arrays(jax.nn.softmax(jnp.asarray(self.weight_params), axis=-1))
        else:
            raise ValueError(f"unknown weight family {self.family!r}")
        return WeightMoments(np.asarray(mean), np.asarray(second))

    def posterior(self, i: int, test: bool = False) -> LatentPosterior:
        if test:
            return LatentPosterior(self.mu_star[i], self.log_var_star[i])
        return LatentPosterior(self.mu[i], self.log_var[i])
