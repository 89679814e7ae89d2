"""Dense linear algebra helpers and the seeded random stream.

Everything here is double precision numpy. The traced objective used for
optimisation lives in :mod:`mixsig.elbo` and uses a fixed jitter instead of
the adaptive schedule below, because retry loops cannot be differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
)

JITTER_START = 1e-6
JITTER_STOP = 1e-2
SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky_psd(m) -> CholeskyFactor:
    """Lower Cholesky factor with an escalating diagonal jitter fallback.

    The first attempt is unjittered. On failure the jitter starts at
    ``1e-6 * mean(diag)`` and grows by a factor of ten up to
    ``1e-2 * mean(diag)``. A zero matrix falls back to an absolute scale of 1.
    """
    m = _as_matrix(m)
    scale = max(np.abs(m).max(), np.finfo(float).tiny)
    if np.abs(m - m.T).max() > SYMMETRY_RTOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative tolerance")
    m = 0.5 * (m + m.T)
    try:
        return CholeskyFactor(np.linalg.cholesky(m), 0.0)
    except np.linalg.LinAlgError:
        pass
    base = float(np.mean(np.diag(m)))
    if not base > 0:
        base = 1.0
    jitter = JITTER_START * base
    eye = np.eye(m.shape[0])
    while jitter <= JITTER_STOP * base * (1 + 1e-12):
        try:
            lower = np.linalg.cholesky(m + jitter * eye)
            return CholeskyFactor(lower, jitter)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed even with jitter {JITTER_STOP:g} x mean diagonal"
    )


def solve_psd(f: CholeskyFactor, b) -> np.ndarray:
    """Solve ``(m + jitter I) x = b`` from a factor; ``b`` may be a vector."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.n:
        raise DimensionMismatch(f"factor is {f.n}x{f.n} but rhs has {b.shape[0]} rows")
    return sla.cho_solve((f.lower, True), b)


def logdet_psd(f: CholeskyFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))


def top_eigvecs(m, k: int):
    """The ``k`` largest eigenpairs of a symmetric matrix, eigenvalues descending.

    Uses LAPACK ``syevd`` through numpy, which either converges or raises.
    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    """
    m = _as_matrix(m)
    n = m.shape[0]
    if not 1 <= k <= n:
        raise DimensionMismatch(f"k must lie in [1, {n}], got {k}")
    scale = max(np.abs(m).max(), np.finfo(float).tiny)
    if np.abs(m - m.T).max() > SYMMETRY_RTOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative tolerance")
    try:
        vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    order = np.argsort(vals)[::-1][:k]
    vals = vals[order]
    vecs = vecs[:, order]
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


class RngStream:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 is a permuted congruential generator with a 128-bit LCG state;
    numpy guarantees its integer output stream is stable across platforms
    for a given seed. Child streams come from ``SeedSequence.spawn`` so they
    are reproducible and statistically independent.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else None
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.algorithm = "PCG64"
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def gamma(self, shape, size=None):
        return self.generator.standard_gamma(shape, size)

    def dirichlet(self, alpha, size=None):
        """Normalised Gamma draws, one simplex vector per row."""
        alpha = np.asarray(alpha, dtype=float)
        shape = alpha.shape if size is None else tuple(np.atleast_1d(size)) + alpha.shape
        g = self.generator.standard_gamma(np.broadcast_to(alpha, shape))
        return g / g.sum(axis=-1, keepdims=True)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def raw(self, n: int) -> np.ndarray:
        """Raw 64-bit integer outputs of the bit generator."""
        return self.generator.bit_generator.random_raw(n)
