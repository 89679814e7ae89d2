"""Initialisation, the three-stage annealed schedule and random restarts.

Stage 1 fits kernel hyperparameters, inducing inputs, the noise variance
and the training latents on the training rows alone (Adam). Stage 2 sets
the noise variance to 1 and anneals it geometrically back to its stage-1
value, taking a few L-BFGS steps on the test-row parameters at each level.
Stage 3 runs L-BFGS on everything.
"""
from __future__ import annotations

import csv
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import elbo as elbo_mod
from .elbo import DEFAULT_JITTER, CollapsedQU, ModelState, collapsed_bound, data_arrays
from .errors import (
    ConstantRow,
    NonFiniteElbo,
    NonFiniteStatistic,
    NoSuccessfulRestart,
    NotPositiveDefinite,
    RankDeficientWeights,
)
from .kernels import InducingGrid, KernelParams
from .numerics import RngStream, cholesky_psd, solve_psd, top_eigvecs
from .optim import adam, lbfgs
from .variational import VariationalState

log = logging.getLogger(__name__)

KERNEL_KEYS = ("log_sigma_f2", "log_beta", "log_gamma", "log_sigma2", "Vh", "Vl")
TRAIN_LATENT_KEYS = ("mu", "log_s")
TEST_KEYS = ("mu_star", "log_s_star", "w_star")


@dataclass
class FitConfig:
    latent_dim: int = 2
    n_latent_inducing: int = 4
    n_location_inducing: int = 16
    stage1_steps: int = 500
    stage1_learning_rate: float = 0.05
    anneal_steps: int = 20
    quasi_newton_steps_per_anneal: int = 2
    stage3_tol: float = 1e-7
    stage3_max_iter: int = 2000
    restarts: int = 5
    seed: int = 0
    variant: str = "correlated"
    mode: str = "regression"
    sigma_f2_range: tuple = (0.5, 1.0)
    beta_range: tuple = (0.5, 5.5)
    gamma_init: float | None = None
    sigma2_init: float = 1.0
    skip_stage1: bool | None = None
    freeze_latents_stage1: bool = False
    prior_alpha: tuple | None = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        counts = ("latent_dim", "n_latent_inducing", "n_location_inducing", "anneal_steps", "restarts")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("stage1_steps", "quasi_newton_steps_per_anneal", "stage3_max_iter"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.stage1_learning_rate > 0:
            raise ValueError("stage1_learning_rate must be positive")
        if not self.stage3_tol > 0:
            raise ValueError("stage3_tol must be positive")
        if self.variant not in ("correlated", "independent"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in ("regression", "classification"):
            raise ValueError(f"unknown mode {self.mode!r}")
        lo, hi = self.sigma_f2_range
        if not 0 < lo <= hi:
            raise ValueError("sigma_f2_range must be positive and ordered")
        lo, hi = self.beta_range
        if not 0 < lo <= hi:
            raise ValueError("beta_range must be positive and ordered")
        if self.gamma_init is not None and not self.gamma_init > 0:
            raise ValueError("gamma_init must be positive")
        if not self.sigma2_init > 0:
            raise ValueError("sigma2_init must be positive")
        if not self.jitter >= 0:
            raise ValueError("jitter must be non-negative")

    @property
    def stage1_skipped(self) -> bool:
        if self.skip_stage1 is None:
            return self.mode == "classification"
        return bool(self.skip_stage1)


@dataclass
class FitResult:
    state: ModelState
    final_elbo: float
    elbo_trace: list
    restart_index: int = 0
    jitter_events: list = field(default_factory=list)
    wall_time: float = 0.0
    qu: CollapsedQU | None = None
    failed_restarts: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# preprocessing and initialisation
# ---------------------------------------------------------------------------


def snv(rows) -> np.ndarray:
    """Centre each row and scale it to unit sample variance (divisor M - 1)."""
    x = np.atleast_2d(np.asarray(rows, dtype=float))
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, ddof=1, keepdims=True) if x.shape[1] > 1 else np.zeros((x.shape[0], 1))
    bad = np.flatnonzero(var[:, 0] < 1e-15)
    if bad.size:
        raise ConstantRow(f"rows {bad.tolist()} are constant")
    return (x - mean) / np.sqrt(var)


def static_signal_estimate(y, r) -> np.ndarray:
    """Least-squares pure signals (M, C) assuming they do not vary by row."""
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    gram = r.T @ r
    rhs = r.T @ y
    try:
        f = cholesky_psd(gram)
    except NotPositiveDefinite as exc:
        raise RankDeficientWeights(str(exc)) from exc
    coef = solve_psd(f, rhs)
    resid = np.linalg.norm(gram @ coef - rhs)
    if resid > 1e-6 * max(np.linalg.norm(rhs), 1.0):
        raise RankDeficientWeights(f"normal-equation residual {resid:.3g}")
    return coef.T


def init_latents(y, r, latent_dim: int) -> np.ndarray:
    """PCA scores of the static least-squares residual, one column per latent.

    Each score column is scaled to unit sample variance. Directions whose
    eigenvalue is negligible next to the total variance of ``y`` get zero
    scores, so data that a static model explains exactly maps to zero.
    """
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    n, m = y.shape
    scores = np.zeros((n, latent_dim))
    if n < 2:
        return scores
    resid = y - r @ static_signal_estimate(y, r).T
    centred = resid - resid.mean(axis=0)
    cov = centred.T @ centred / (n - 1)
    k = min(latent_dim, m)
    vals, vecs = top_eigvecs(0.5 * (cov + cov.T), k)
    total = np.trace(np.atleast_2d(np.cov(y, rowvar=False))) if m > 1 else float(np.var(y, ddof=1))
    floor = 1e-12 * max(total, np.finfo(float).tiny)
    for a in range(k):
        if vals[a] <= floor:
            continue
        s = centred @ vecs[:, a]
        sd = s.std(ddof=1)
        if sd > 0:
            scores[:, a] = s / sd
    return scores


def default_gamma(lam) -> float:
    """Initial squared location lengthscale: (15% of the location range)^2."""
    lam = np.asarray(lam, dtype=float)
    span = float(lam.max() - lam.min()) if lam.size > 1 else 1.0
    return (0.15 * span) ** 2 if span > 0 else 1.0


def initial_state(data, cfg: FitConfig, rng: RngStream) -> ModelState:
    n_a = cfg.latent_dim
    n_c = data.n_components
    sigma_f2 = float(rng.uniform(*cfg.sigma_f2_range))
    beta = rng.uniform(*cfg.beta_range, size=n_a)
    vh = rng.normal(size=(cfg.n_latent_inducing, n_a))
    correlated = cfg.variant == "correlated"
    gamma = (cfg.gamma_init or default_gamma(data.lam)) if correlated else None
    vl = np.linspace(data.lam.min(), data.lam.max(), cfg.n_location_inducing) if correlated else None
    params = KernelParams(sigma_f2, beta, gamma, cfg.sigma2_init)
    mu = init_latents(data.Y_train, data.R_train, n_a) if data.n_train else np.zeros((0, n_a))
    n_star = data.n_test
    vs = VariationalState(
        mu,
        np.zeros_like(mu),
        np.zeros((n_star, n_a)),
        np.zeros((n_star, n_a)),
        np.zeros((n_star, n_c)),
        "dirichlet" if cfg.mode == "regression" else "categorical",
    )
    return ModelState(
        params, InducingGrid(vh, vl), vs, data.R_train, data.lam, cfg.variant, cfg.mode,
        cfg.prior_alpha, cfg.jitter,
    )


# ---------------------------------------------------------------------------
# staged optimisation
# ---------------------------------------------------------------------------


def _split(x, layout):
    out = {}
    offset = 0
    for key, shape in layout:
        size = int(np.prod(shape))
        out[key] = x[offset:offset + size].reshape(shape)
        offset += size
    return out


@partial(jax.jit, static_argnames=("layout", "objective", "variant", "family", "jitter"))
def _neg_value_and_grad(x, rest, d, layout, objective, variant, family, jitter):
    def f(v):
        return -objective({**rest, **_split(v, layout)}, d, variant, family, jitter)

    return jax.value_and_grad(f)(x)


class _Stage:
    """Negated bound over a subset of parameters, as a flat-vector function."""

    def __init__(self, p, keys, d, objective, variant, family, jitter):
        self.layout = tuple((k, np.shape(p[k])) for k in sorted(keys) if k in p)
        sub = {k for k, _ in self.layout}
        self.rest = {k: v for k, v in p.items() if k not in sub}
        self.x0 = np.concatenate([np.ravel(p[k]) for k, _ in self.layout]) if self.layout else np.zeros(0)
        # one device transfer per stage instead of per evaluation
        self._rest_dev = {k: jnp.asarray(v) for k, v in self.rest.items()}
        d = {k: jnp.asarray(v) for k, v in d.items()}
        self.args = (d, self.layout, objective, variant, family, jitter)

    def __call__(self, x):
        value, grad = _neg_value_and_grad(jnp.asarray(x), self._rest_dev, *self.args)
        return float(value), np.asarray(grad)

    def merge_key(self, x, key):
        if key in self.rest:
            return self.rest[key]
        return _split(np.asarray(x), self.layout)[key]

    def merge(self, x) -> dict:
        return {**self.rest, **_split(np.array(x, dtype=float), self.layout)}


def fit(data, cfg: FitConfig, rng: RngStream | None = None, objective=None) -> FitResult:
    """One run of the three-stage schedule from a random initialisation.

    ``objective`` replaces the bound (same signature as
    :func:`mixsig.elbo.collapsed_bound`); it exists so that reference models
    can be trained under exactly the same schedule.
    """
    t0 = time.perf_counter()
    if rng is None:
        rng = restart_streams(cfg.seed, 1)[0]
    if cfg.mode != data.mode and data.mode in ("regression", "classification"):
        log.debug("config mode %s overrides dataset mode %s", cfg.mode, data.mode)
    state = initial_state(data, cfg, rng)
    objective = collapsed_bound if objective is None else objective
    family = state.family
    p = {k: np.asarray(v) for k, v in state.free_params().items()}
    trace = []

    def recorder(stage, obj):
        def cb(x, value):
            s2 = float(np.exp(obj.merge_key(x, "log_sigma2")))
            trace.append((len(trace), stage, s2, -float(value)))

        return cb

    def check(stage, value):
        if not np.isfinite(value):
            raise NonFiniteElbo(f"bound is not finite at the start of stage {stage}")

    # stage 1: training rows only
    if not cfg.stage1_skipped and cfg.stage1_steps > 0 and data.n_train:
        d1 = data_arrays(data, state.prior_alpha, include_test=False)
        keys = KERNEL_KEYS if cfg.freeze_latents_stage1 else KERNEL_KEYS + TRAIN_LATENT_KEYS
        stage = _Stage(p, keys, d1, objective, cfg.variant, family, cfg.jitter)
        check(1, stage(stage.x0)[0])
        # the stage-1 trace reports the training-only bound
        res = adam(stage, stage.x0, cfg.stage1_steps, cfg.stage1_learning_rate, callback=recorder(1, stage))
        p = stage.merge(res.x)

    d = data_arrays(data, state.prior_alpha)

    # stage 2: anneal the noise variance while fitting the test rows
    if data.n_test:
        log_target = float(p["log_sigma2"])
        levels = np.linspace(np.log(1.0), log_target, cfg.anneal_steps)
        for level in levels:
            p["log_sigma2"] = np.asarray(level)
            stage = _Stage(p, TEST_KEYS, d, objective, cfg.variant, family, cfg.jitter)
            value = stage(stage.x0)[0]
            check(2, value)
            res = lbfgs(
                stage, stage.x0, max_iter=cfg.quasi_newton_steps_per_anneal, rel_tol=0.0,
                callback=recorder(2, stage),
            )
            p = stage.merge(res.x)
        p["log_sigma2"] = np.asarray(log_target)

    # stage 3: everything
    if cfg.stage3_max_iter > 0:
        stage = _Stage(p, tuple(p), d, objective, cfg.variant, family, cfg.jitter)
        check(3, stage(stage.x0)[0])
        res = lbfgs(
            stage, stage.x0, max_iter=cfg.stage3_max_iter, rel_tol=cfg.stage3_tol,
            callback=recorder(3, stage),
        )
        p = stage.merge(res.x)

    state = state.with_free_params(p)
    if objective is collapsed_bound:
        final = elbo_mod.elbo(state, data)
    else:
        final = float(objective(p, d, cfg.variant, family, cfg.jitter))
        if not np.isfinite(final):
            raise NonFiniteElbo("final bound is not finite")
    qu = None
    events = []
    if objective is collapsed_bound:
        qu = elbo_mod.fit_qu(state, data)
        events = list(qu.jitter_events)
    return FitResult(state, final, trace, 0, events, time.perf_counter() - t0, qu)


def restart_streams(seed: int, n: int) -> list[RngStream]:
    return [RngStream(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


_RESTART_ERRORS = (NonFiniteElbo, NonFiniteStatistic, NotPositiveDefinite, FloatingPointError)


def _run_restart(args):
    data, cfg, seq, index, objective = args
    try:
        res = fit(data, cfg, RngStream(seq), objective)
    except _RESTART_ERRORS as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    res.restart_index = index
    return index, res, None


def fit_with_restarts(data, cfg: FitConfig, rng: RngStream | None = None, jobs: int = 1, objective=None) -> FitResult:
    """Best of ``cfg.restarts`` fits by final bound; ties go to the lowest index.

    Restart ``k`` always uses the ``k``-th child of ``SeedSequence(cfg.seed)``
    (or of ``rng`` when given), whatever the number of worker processes.
    """
    if rng is None:
        seqs = np.random.SeedSequence(int(cfg.seed)).spawn(cfg.restarts)
    else:
        seqs = [child._seq for child in rng.spawn(cfg.restarts)]
    tasks = [(data, cfg, seqs[k], k, objective) for k in range(cfg.restarts)]
    if jobs > 1 and cfg.restarts > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.restarts), mp_context=ctx) as pool:
            outcomes = list(pool.map(_run_restart, tasks))
    else:
        outcomes = [_run_restart(t) for t in tasks]
    best = None
    failures = []
    for index, res, err in sorted(outcomes, key=lambda o: o[0]):
        if res is None:
            log.warning("restart %d failed: %s", index, err)
            failures.append((index, err))
            continue
        if best is None or res.final_elbo > best.final_elbo:
            best = res
    if best is None:
        raise NoSuccessfulRestart(f"all {cfg.restarts} restarts failed: {failures}")
    best.failed_restarts = failures
    return best


def write_trace(result: FitResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "stage", "sigma2", "elbo"])
        for it, stage, s2, value in result.elbo_trace:
            w.writerow([it, stage, "%.17g" % s2, "%.17g" % value])
