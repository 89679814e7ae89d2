"""First-order and quasi-Newton minimisers over flat parameter vectors.

Both take ``fun(x) -> (value, gradient)`` and minimise. Callers maximising
a bound pass its negation. ``callback(x, value)`` runs after every accepted
step.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""


def adam(fun, x0, steps, learning_rate=0.05, beta1=0.9, beta2=0.999, eps=1e-8, callback=None):
    """Plain Adam with bias correction.

    Steps whose objective or gradient is not finite are rejected: the
    previous iterate is kept and the run stops, since retrying the same
    deterministic step cannot help.
    """
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    value, grad = fun(x)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return OptimizeResult(x, value, [], 0, "non-finite start")
    trace = []
    reason = "max steps"
    best_x, best_value = x.copy(), value
    for t in range(1, steps + 1):
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x_new = x - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        value_new, grad_new = fun(x_new)
        if not (np.isfinite(value_new) and np.all(np.isfinite(grad_new))):
            reason = "non-finite step"
            break
        x, value, grad = x_new, value_new, grad_new
        trace.append(value)
        if callback is not None:
            callback(x, value)
        if value < best_value:
            best_x, best_value = x.copy(), value
    # Adam is not monotone; hand back the best point it visited
    return OptimizeResult(best_x, best_value, trace, len(trace), reason)


def lbfgs(
    fun,
    x0,
    max_iter=2000,
    rel_tol=1e-7,
    memory=10,
    armijo=1e-4,
    shrink=0.5,
    max_backtracks=30,
    callback=None,
):
    """Limited-memory BFGS with a backtracking Armijo line search.

    Stops after ``max_iter`` accepted steps, when the relative change of the
    objective falls below ``rel_tol`` (``rel_tol = 0`` disables this), or
    when the line search fails. Every accepted step satisfies the Armijo
    condition, so the objective never increases.
    """
    x = np.array(x0, dtype=float)
    value, grad = fun(x)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        return OptimizeResult(x, value, [], 0, "non-finite start")
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    trace = []
    reason = "max iterations"
    it = 0
    while it < max_iter:
        gnorm = np.max(np.abs(grad)) if grad.size else 0.0
        if gnorm == 0.0:
            reason = "zero gradient"
            break
        direction = -_two_loop(grad, s_hist, y_hist)
        slope = float(direction @ grad)
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            direction = -grad
            slope = float(direction @ grad)
        step = 1.0 if s_hist else min(1.0, 1.0 / np.sum(np.abs(grad)))
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * direction
            value_new, grad_new = fun(x_new)
            if (
                np.isfinite(value_new)
                and np.all(np.isfinite(grad_new))
                and value_new <= value + armijo * step * slope
            ):
                accepted = True
                break
            step *= shrink
        if not accepted:
            reason = "line search failed"
            break
        s = x_new - x
        y = grad_new - grad
        sy = float(s @ y)
        if sy > 1e-12 * np.sqrt(float(s @ s) * float(y @ y)):
            s_hist.append(s)
            y_hist.append(y)
        change = abs(value - value_new) / max(abs(value), 1.0)
        x, value, grad = x_new, value_new, grad_new
        trace.append(value)
        if callback is not None:
            callback(x, value)
        it += 1
        if rel_tol > 0 and change < rel_tol:
            reason = "converged"
            break
    return OptimizeResult(x, value, trace, it, reason)


def _two_loop(grad, s_hist, y_hist):
    """Product of the inverse Hessian approximation with ``grad``."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
