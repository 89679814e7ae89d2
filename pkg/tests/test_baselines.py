from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from mixsig.baselines import (
    ClsConfig,
    ClsState,
    cls_elbo,
    cls_fit,
    pls_classify,
    pls_fit,
    pls_predict,
    pls_select_components,
)
from mixsig.datasets import MixtureDataset
from mixsig.elbo import ModelState, elbo, fit_qu
from mixsig.errors import DegenerateDeflation, DimensionMismatch
from mixsig.kernels import InducingGrid, KernelParams
from mixsig.numerics import RngStream
from mixsig.variational import VariationalState

from oracles import kl_categorical_ref, kl_dirichlet_ref


# ---------------------------------------------------------------------------
# CLS / CLS-GP
# ---------------------------------------------------------------------------


def _random_cls(seed, variant, family="dirichlet", n=4, n_star=3, m=5, c=3):
    g = np.random.default_rng(seed)
    r = g.dirichlet(np.ones(c), n) if family == "dirichlet" else np.eye(c)[g.integers(0, c, n)]
    data = SimpleNamespace(
        Y_train=g.normal(size=(n, m)), R_train=r, Y_test=g.normal(size=(n_star, m)), lam=np.sort(g.uniform(0, 1, m))
    )
    lower = np.tril(g.normal(size=(m, c, c)) * 0.3, -1) + np.eye(c) * g.uniform(0.2, 1.0, (m, 1, c))
    state = ClsState(
        g.normal(size=(m, c)),
        lower @ np.swapaxes(lower, -1, -2),
        g.normal(size=(n_star, c)),
        family,
        g.uniform(0.1, 1.0),
        variant,
        g.uniform(0.5, 1.5) if variant == "cls_gp" else None,
        g.uniform(0.05, 0.5) if variant == "cls_gp" else None,
    )
    return state, data


def cls_bound_reference(state, data, jitter):
    """Latent-free bound from dense numpy algebra."""
    mean, cov, s2 = state.mean, state.cov, state.sigma2
    m_loc, c = mean.shape
    y = np.vstack([data.Y_train, data.Y_test])
    first = [r for r in data.R_train]
    second = [np.outer(r, r) for r in data.R_train]
    kl_r = 0.0
    for w in state.weight_params:
        if state.family == "dirichlet":
            a = np.exp(w)
            mu = a / a.sum()
            first.append(mu)
            second.append(np.outer(mu, mu) + (np.diag(mu) - np.outer(mu, mu)) / (1 + a.sum()))
            kl_r += kl_dirichlet_ref(a, np.ones(c))
        else:
            p = np.exp(w - w.max())
            p /= p.sum()
            first.append(p)
            second.append(np.diag(p))
            kl_r += kl_categorical_ref(w)
    energy = 0.0
    for i in range(y.shape[0]):
        for j in range(m_loc):
            energy += y[i, j] ** 2 - 2 * y[i, j] * first[i] @ mean[j] + np.trace(second[i] @ (cov[j] + np.outer(mean[j], mean[j])))
    loglik = -0.5 * y.size * np.log(2 * np.pi * s2) - energy / (2 * s2)
    entropy = sum(0.5 * np.linalg.slogdet(2 * np.pi * np.e * cov[j])[1] for j in range(m_loc))
    if state.variant == "cls":
        cross = sum(-0.5 * c * np.log(2 * np.pi) - 0.5 * (np.trace(cov[j]) + mean[j] @ mean[j]) for j in range(m_loc))
    else:
        lam = data.lam
        k = state.sigma_f2 * np.exp(-0.5 * (lam[:, None] - lam[None, :]) ** 2 / state.gamma)
        k += jitter * state.sigma_f2 * np.eye(m_loc)
        kinv = np.linalg.inv(k)
        cross = 0.0
        for cc in range(c):
            cov_c = np.diag(cov[:, cc, cc])
            cross += -0.5 * m_loc * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(k)[1]
            cross += -0.5 * (np.trace(kinv @ cov_c) + mean[:, cc] @ kinv @ mean[:, cc])
    kl_f = -entropy - cross
    n = data.R_train.shape[0]
    log_prior = n * gammaln(c) if state.family == "dirichlet" else -n * np.log(c)
    return loglik - kl_f - kl_r + log_prior


@pytest.mark.parametrize("variant", ["cls", "cls_gp"])
@pytest.mark.parametrize("family", ["dirichlet", "categorical"])
def test_cls_bound_matches_dense_reference(variant, family):
    for seed in range(3):
        state, data = _random_cls(seed, variant, family)
        ref = cls_bound_reference(state, data, 1e-6)
        assert cls_elbo(state, data) == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_cls_equals_independent_model_without_latents(seed):
    g = np.random.default_rng(seed)
    n, n_star, m, c = 4, 3, 5, 3
    r = g.dirichlet(np.ones(c), n)
    data = SimpleNamespace(Y_train=g.normal(size=(n, m)), R_train=r, Y_test=g.normal(size=(n_star, m)), lam=np.linspace(0, 1, m))
    w = g.normal(size=(n_star, c))
    s2 = g.uniform(0.1, 1.0)
    empty = np.zeros((n, 0))
    vs = VariationalState(empty, empty, np.zeros((n_star, 0)), np.zeros((n_star, 0)), w)
    # a constant unit kernel and one inducing input per location
    state = ModelState(KernelParams(1.0, np.zeros(0), None, s2), InducingGrid(np.zeros((1, 0))), vs, r, data.lam,
                       "independent", jitter=0.0)
    qu = fit_qu(state, data)
    cls_state = ClsState(qu.mean, np.repeat(qu.cov[None], m, axis=0), w, "dirichlet", s2, "cls")
    assert cls_elbo(cls_state, data) == pytest.approx(elbo(state, data), rel=1e-10)


def test_cls_recovers_static_signals():
    g = np.random.default_rng(0)
    n, m, c = 60, 8, 2
    r = g.dirichlet(np.ones(c), n)
    f = g.uniform(0.2, 1.0, size=(m, c))
    data = MixtureDataset(r @ f.T, r, np.zeros((0, m)), np.linspace(0, 1, m))
    state, _ = cls_fit(data, ClsConfig(restarts=1, max_iter=3000, tol=1e-12))
    assert state.sigma2 <= 1e-4
    np.testing.assert_allclose(state.mean, f, atol=1e-3)


def test_cls_single_component_conjugate_mean():
    g = np.random.default_rng(1)
    n, m = 7, 4
    y = g.normal(1.0, 0.5, size=(n, m))
    data = MixtureDataset(y, np.ones((n, 1)), np.zeros((0, m)), np.linspace(0, 1, m))
    state, _ = cls_fit(data, ClsConfig(restarts=1, max_iter=3000, tol=1e-14))
    s2 = state.sigma2
    # posterior of f_j under N(0, 1) prior and n unit-weight observations
    precision = n / s2 + 1.0
    np.testing.assert_allclose(state.mean[:, 0], y.sum(axis=0) / s2 / precision, rtol=1e-5)
    np.testing.assert_allclose(state.cov[:, 0, 0], 1.0 / precision, rtol=1e-5)


def test_cls_gp_fit_runs_and_is_deterministic():
    g = np.random.default_rng(2)
    n, n_star, m, c = 10, 4, 12, 2
    lam = np.linspace(0, 1, m)
    f = np.stack([np.sin(3 * lam), np.cos(2 * lam)], axis=1)
    r = g.dirichlet(np.ones(c), n + n_star)
    y = r @ f.T + 0.01 * g.normal(size=(n + n_star, m))
    data = MixtureDataset(y[:n], r[:n], y[n:], lam, r[n:])
    cfg = ClsConfig(variant="cls_gp", restarts=2, max_iter=300)
    a, va = cls_fit(data, cfg)
    b, vb = cls_fit(data, cfg)
    assert va == vb
    np.testing.assert_array_equal(a.mean, b.mean)
    assert a.sigma_f2 > 0 and a.gamma > 0
    assert np.isfinite(va)
    mu = np.exp(a.weight_params) / np.exp(a.weight_params).sum(axis=1, keepdims=True)
    assert np.mean((mu - r[n:]) ** 2) < 0.01
    assert all(np.isfinite(t[3]) for t in a.trace)


def test_cls_config_validation():
    with pytest.raises(ValueError):
        ClsConfig(variant="pls")
    with pytest.raises(ValueError):
        ClsConfig(restarts=0)


# ---------------------------------------------------------------------------
# PLS
# ---------------------------------------------------------------------------


def _low_rank(seed, n=30, m=12, rank=3, c=2, noise=0.0):
    g = np.random.default_rng(seed)
    t = g.normal(size=(n, rank))
    x = t @ g.normal(size=(rank, m)) + g.normal(size=m)
    y = t @ g.normal(size=(rank, c)) + g.normal(size=c) + noise * g.normal(size=(n, c))
    return x, y


def test_pls_exact_for_linear_relation():
    x, y = _low_rank(0)
    model = pls_fit(x, y, 3)
    np.testing.assert_allclose(pls_predict(model, x), y, atol=1e-8)


def test_pls_single_direction_deflates_to_zero():
    g = np.random.default_rng(1)
    t, v = g.normal(size=20), g.normal(size=6)
    x = np.outer(t, v) + 3.0
    y = (2.0 * t + 1.0)[:, None]
    model = pls_fit(x, y, 1)
    resid = (x - model.x_mean) - model.x_scores @ model.x_loadings.T
    assert np.linalg.norm(resid) <= 1e-10 * np.linalg.norm(x)
    np.testing.assert_allclose(pls_predict(model, x), y, atol=1e-10)


def test_pls_first_weight_matches_svd():
    g = np.random.default_rng(2)
    x, y = g.normal(size=(25, 8)), g.normal(size=(25, 3))
    model = pls_fit(x, y, 2)
    xc, yc = x - x.mean(0), y - y.mean(0)
    w = np.linalg.svd(xc.T @ yc)[0][:, 0]
    assert abs(model.x_weights[:, 0] @ w) == pytest.approx(1.0, abs=1e-10)


def test_pls_matches_sklearn_on_separated_spectrum():
    from sklearn.cross_decomposition import PLSRegression

    x, y = _low_rank(3, n=40, m=10, rank=4, c=2, noise=0.05)
    ours = pls_predict(pls_fit(x, y, 3), x)
    ref = PLSRegression(n_components=3, scale=False, tol=1e-14, max_iter=10_000).fit(x, y).predict(x)
    np.testing.assert_allclose(ours, ref, atol=1e-8)


def test_pls_scores_orthogonal():
    x, y = _low_rank(4, rank=5, noise=0.1)
    model = pls_fit(x, y, 4)
    gram = model.x_scores.T @ model.x_scores
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() <= 1e-8 * np.abs(np.diag(gram)).max()


def test_pls_permutation_and_column_shift_invariance():
    x, y = _low_rank(5, rank=4, noise=0.2)
    model = pls_fit(x, y, 3)
    perm = np.random.default_rng(0).permutation(x.shape[0])
    np.testing.assert_allclose(pls_predict(pls_fit(x[perm], y[perm], 3), x), pls_predict(model, x), atol=1e-9)
    shifted = x.copy()
    shifted[:, 2] += 7.5
    np.testing.assert_allclose(pls_predict(pls_fit(shifted, y, 3), shifted), pls_predict(model, x), atol=1e-9)


def test_pls_da_argmax_invariant_to_affine_targets():
    g = np.random.default_rng(6)
    labels = g.integers(0, 3, 30)
    x = g.normal(size=(30, 6)) + labels[:, None]
    onehot = np.eye(3)[labels]
    a = pls_classify(pls_fit(x, onehot, 3), x)
    b = pls_classify(pls_fit(x, 4.0 * onehot - 1.5, 3), x)
    np.testing.assert_array_equal(a, b)


def test_pls_errors():
    with pytest.raises(DegenerateDeflation):
        pls_fit(np.ones((5, 3)), np.arange(5.0), 1)
    with pytest.raises(DimensionMismatch):
        pls_fit(np.ones((5, 3)), np.ones(4), 1)
    with pytest.raises(DimensionMismatch):
        pls_fit(np.random.default_rng(0).normal(size=(5, 3)), np.ones(5), 4)


def test_pls_select_rank_two():
    x, y = _low_rank(7, n=40, m=10, rank=2)
    assert pls_select_components(x, y, folds=10, kmax=5, rng=RngStream(0)) == 2


def test_pls_select_noise_and_determinism():
    g = np.random.default_rng(8)
    x, y = g.normal(size=(30, 6)), g.normal(size=(30, 1))
    k = pls_select_components(x, y, folds=5, kmax=4, rng=RngStream(3))
    assert 1 <= k <= 4
    assert pls_select_components(x, y, folds=5, kmax=4, rng=RngStream(3)) == k
    with pytest.raises(ValueError):
        pls_select_components(x, y, folds=1, kmax=4)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 4))
def test_pls_training_error_decreases_with_components(seed, k):
    x, y = _low_rank(seed, rank=6, noise=0.3)
    err = [np.sum((pls_predict(pls_fit(x, y, j), x) - y) ** 2) for j in (k, k + 1)]
    assert err[1] <= err[0] + 1e-9
