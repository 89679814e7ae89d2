"""Compare closed-form xi statistics with their Monte Carlo estimates.

    python3 demos/xi_monte_carlo.py

Prints, for each variant and weight family, the largest deviation of the
closed-form values from a 10^5-sample estimate in units of its standard
error. Values mostly below 3 are what a correct closed form produces.
"""
from types import SimpleNamespace

import numpy as np

from mixsig.kernels import InducingGrid, KernelParams, xi_closed_form, xi_monte_carlo
from mixsig.numerics import RngStream
from mixsig.variational import VariationalState

g = np.random.default_rng(0)
n, n_star, m, c, a = 4, 2, 5, 3, 2
data = SimpleNamespace(
    Y_train=g.normal(size=(n, m)),
    R_train=g.dirichlet(np.ones(c), n),
    Y_test=g.normal(size=(n_star, m)),
    lam=np.linspace(0, 1, m),
)

for variant in ("correlated", "independent"):
    for family in ("dirichlet", "categorical"):
        params = KernelParams(1.0, np.array([1.0, 2.0]), 0.1 if variant == "correlated" else None, 0.5)
        grid = InducingGrid(g.normal(size=(3, a)), np.linspace(0, 1, 3) if variant == "correlated" else None)
        vs = VariationalState(
            g.normal(size=(n, a)), np.full((n, a), -1.0),
            g.normal(size=(n_star, a)), np.full((n_star, a), -1.0),
            g.normal(size=(n_star, c)), family,
        )
        closed = xi_closed_form(data, vs, grid, params, variant)
        mc = xi_monte_carlo(data, vs, grid, params, variant, samples=100_000, rng=RngStream(1))
        key = "xi1" if variant == "correlated" else "xi1_per_location"
        z1 = np.max(np.abs(getattr(mc.estimate, key) - getattr(closed, key)) / getattr(mc.stderr, key))
        z2 = np.max(np.abs(mc.estimate.xi2 - closed.xi2) / np.maximum(mc.stderr.xi2, 1e-300))
        print(f"{variant:11s} {family:11s} worst |z|: xi1 {z1:.2f}, xi2 {z2:.2f}")
