"""NIPALS partial least squares (PLS2) with cross-validated component count."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateDeflation, DimensionMismatch
from ..numerics import RngStream

NIPALS_TOL = 1e-12
NIPALS_MAX_ITER = 10000
SCORE_FLOOR = 1e-12


@dataclass
class PlsModel:
    n_components: int
    x_weights: np.ndarray  # W (M, k)
    x_loadings: np.ndarray  # P (M, k)
    y_loadings: np.ndarray  # Q (C, k)
    x_scores: np.ndarray  # T (N, k)
    coef: np.ndarray  # (M, C)
    x_mean: np.ndarray
    y_mean: np.ndarray
    x_scale: np.ndarray
    y_scale: np.ndarray


def pls_fit(x, y, k: int) -> PlsModel:
    """Fit ``k`` PLS2 components by NIPALS on column-centred blocks.

    Only the X block is deflated; deflating Y as well changes no score or
    coefficient because later scores are orthogonal to earlier ones.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, m = x.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"{n} X rows but {y.shape[0]} Y rows")
    if not 1 <= k <= min(n - 1, m):
        raise DimensionMismatch(f"k must lie in [1, {min(n - 1, m)}], got {k}")
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xr = x - x_mean
    yc = y - y_mean
    w_all = np.zeros((m, k))
    p_all = np.zeros((m, k))
    q_all = np.zeros((y.shape[1], k))
    t_all = np.zeros((n, k))
    for a in range(k):
        u = yc[:, np.argmax(np.sum(yc**2, axis=0))].copy()
        t_old = None
        for _ in range(NIPALS_MAX_ITER):
            w = xr.T @ u
            w_norm = np.linalg.norm(w)
            if w_norm < SCORE_FLOOR:
                raise DegenerateDeflation(f"component {a + 1}: X weight vector vanished")
            w /= w_norm
            t = xr @ w
            tt = t @ t
            if np.sqrt(tt) < SCORE_FLOOR:
                raise DegenerateDeflation(f"component {a + 1}: score norm underflow")
            q = yc.T @ t / tt
            qq = q @ q
            if qq < SCORE_FLOOR**2:
                raise DegenerateDeflation(f"component {a + 1}: Y loading vanished")
            u = yc @ q / qq
            if t_old is not None and np.linalg.norm(t - t_old) <= NIPALS_TOL * np.sqrt(tt):
                break
            t_old = t
        p_vec = xr.T @ t / tt
        xr = xr - np.outer(t, p_vec)
        w_all[:, a], p_all[:, a], q_all[:, a], t_all[:, a] = w, p_vec, q, t
    rotation = w_all @ np.linalg.inv(p_all.T @ w_all)
    coef = rotation @ q_all.T
    return PlsModel(k, w_all, p_all, q_all, t_all, coef, x_mean, y_mean, np.ones(m), np.ones(y.shape[1]))


def pls_predict(model: PlsModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.x_mean.shape[0]:
        raise DimensionMismatch(f"expected {model.x_mean.shape[0]} columns")
    return (x - model.x_mean) @ model.coef + model.y_mean


def pls_classify(model: PlsModel, x) -> np.ndarray:
    """PLS-DA class labels: the argmax of predicted one-hot targets."""
    return np.argmax(pls_predict(model, x), axis=1)


def fold_assignment(n: int, folds: int, rng: RngStream) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def pls_select_components(x, y, folds: int, kmax: int, rng: RngStream | None = None) -> int:
    """Component count with the lowest pooled cross-validated squared error.

    Counts that no fold can support, or whose fit degenerates, score
    infinity. Ties go to the smaller count.
    """
    if folds < 2:
        raise ValueError("folds must be at least 2")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, m = x.shape
    if folds > n:
        raise ValueError(f"cannot split {n} rows into {folds} folds")
    rng = RngStream(0) if rng is None else rng
    parts = fold_assignment(n, folds, rng)
    errors = np.zeros(kmax)
    for held in parts:
        train = np.setdiff1d(np.arange(n), held)
        for k in range(1, kmax + 1):
            if not np.isfinite(errors[k - 1]):
                continue
            if k > min(train.size - 1, m):
                errors[k - 1] = np.inf
                continue
            try:
                model = pls_fit(x[train], y[train], k)
            except DegenerateDeflation:
                errors[k - 1] = np.inf
                continue
            errors[k - 1] += np.sum((pls_predict(model, x[held]) - y[held]) ** 2)
    best = 1
    for k in range(2, kmax + 1):
        if errors[k - 1] < errors[best - 1]:
            best = k
    return best
