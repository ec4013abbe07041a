"""Smallest eigenpairs of graph Laplacians and per-perturbation spectral data.

Backends: dense symmetric solver (LAPACK syevr) up to ``DENSE_CUTOFF``
vertices, shift-inverted implicitly-restarted Lanczos (ARPACK) above it.
Eigenvectors follow a fixed sign convention (largest-magnitude entry
positive) and the iterative solver uses a constant start vector, so repeated
calls are bit-reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graphs import PatternMatrix, WeightMatrix, laplacian

DENSE_CUTOFF = 512

_V0_SEED = 818231


class EigensolveError(RuntimeError):
    """Eigensolver failed to converge; carries the best residual reached."""

    def __init__(self, message: str, best_residual: float = np.nan):
        self.best_residual = best_residual
        super().__init__(message)


def _as_square_operator(L):
    if sp.issparse(L):
        return L.tocsr()
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("operator must be square")
    return L


def _gershgorin_bounds(L) -> tuple[float, float]:
    """Interval certainly containing the spectrum of symmetric L."""
    if sp.issparse(L):
        radii = np.asarray(abs(L).sum(axis=1)).ravel()
        d = L.diagonal()
    else:
        radii = np.abs(L).sum(axis=1)
        d = np.diag(L)
    off = radii - np.abs(d)
    if d.size == 0:
        return 0.0, 0.0
    return float((d - off).min()), float((d + off).max())


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    for col in range(vecs.shape[1]):
        v = vecs[:, col]
        if v[np.argmax(np.abs(v))] < 0:
            vecs[:, col] = -v
    return vecs


def smallest_eigenpairs(L, j: int, tol: float = 1e-8):
    """Ascending j smallest eigenvalues and orthonormal eigenvectors of
    symmetric L.

    Residuals are verified against ``tol * ||L||`` (Gershgorin bound); a
    solver that cannot reach that raises EigensolveError with the best
    residual achieved.
    """
    L = _as_square_operator(L)
    n = L.shape[0]
    if not 1 <= j <= n:
        raise ValueError(f"j must be in [1, {n}]")
    lo, hi = _gershgorin_bounds(L)
    norm_bound = max(abs(lo), abs(hi), 1e-300)

    if n <= DENSE_CUTOFF or j > n - 2:
        dense = L.toarray() if sp.issparse(L) else L
        dense = 0.5 * (dense + dense.T)
        vals, vecs = sla.eigh(dense, subset_by_index=(0, j - 1))
    else:
        span = max(hi - lo, 1e-6 * norm_bound)
        sigma = lo - 1e-2 * span
        v0 = np.random.default_rng(_V0_SEED).standard_normal(n)
        ncv = int(min(n, max(2 * j + 1, j + 8)))
        try:
            vals, vecs = spla.eigsh(L, k=j, sigma=sigma, which="LM", v0=v0,
                                    ncv=ncv, maxiter=40 * n)
        except spla.ArpackNoConvergence as exc:
            try:
                vals, vecs = spla.eigsh(L, k=j, sigma=sigma, which="LM", v0=v0,
                                        ncv=min(n, 2 * ncv), maxiter=80 * n)
            except spla.ArpackNoConvergence as exc2:
                got = exc2.eigenvalues
                best = np.nan
                if got is not None and len(got):
                    best = float(np.min(np.abs(got)))
                raise EigensolveError(
                    f"Lanczos did not converge for {j} pairs (n={n})",
                    best_residual=best) from exc2
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]

    res = L @ vecs - vecs * vals[None, :]
    worst = float(np.linalg.norm(res, axis=0).max())
    if worst > tol * norm_bound:
        raise EigensolveError(
            f"eigenpair residual {worst:.3e} exceeds {tol:.1e} * ||L||",
            best_residual=worst)
    gram = vecs.T @ vecs - np.eye(j)
    if np.abs(gram).max() > 1e-10:
        raise EigensolveError(
            f"eigenvectors lost orthonormality ({np.abs(gram).max():.3e})")
    return vals, _fix_signs(vecs)


def spectral_gap(W: WeightMatrix, k: int) -> float:
    """Gap between the (k+1)-st and k-th smallest Laplacian eigenvalues."""
    if not 1 <= k <= W.n - 1:
        raise ValueError(f"k must be in [1, {W.n - 1}]")
    vals, _ = smallest_eigenpairs(laplacian(W), k + 1)
    return float(vals[k] - vals[k - 1])


@dataclass(frozen=True)
class SpectralData:
    """Eigendata of the perturbed Laplacian around the target index k.

    ``upper``/``lower`` are the (k+1)-st and k-th smallest eigenvalues with
    unit eigenvectors ``vec_upper``/``vec_lower``; ``sq_diff`` is the
    componentwise difference of squared eigenvector entries, which is always
    orthogonal to the all-ones vector.  ``simple`` is False whenever either
    target eigenvalue sits within tolerance of any neighbor; ``coalesced``
    singles out the target pair itself touching.
    """

    k: int
    upper: float
    lower: float
    vec_upper: np.ndarray
    vec_lower: np.ndarray
    sq_diff: np.ndarray
    simple: bool
    coalesced: bool
    neighbor_degenerate: bool

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def spectral_data(W: WeightMatrix, eps: float, direction: PatternMatrix | None,
                  k: int, check_norm: bool = True) -> SpectralData:
    """Assemble SpectralData for the Laplacian of W + eps * direction.

    ``direction`` is expected to have unit Frobenius norm (warned otherwise);
    ``None`` means the unperturbed matrix.  Coalesced target eigenvalues are
    not an error: the data is flagged and consumed by the outer iteration.
    """
    n = W.n
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}]")
    if direction is None or eps == 0.0:
        pm = W.as_pattern_matrix()
    else:
        if check_norm:
            nrm = direction.norm()
            if abs(nrm - 1.0) > 1e-8:
                warnings.warn(f"direction norm {nrm:.3e} != 1", stacklevel=2)
        pm = PatternMatrix(W.pattern, W.perturbed_values(eps, direction))
    L = laplacian(pm)
    j = min(n, k + 2)
    vals, vecs = smallest_eigenpairs(L, j)
    lower, upper = float(vals[k - 1]), float(vals[k])
    _, hi = _gershgorin_bounds(L)
    tau = max(1e-10, 1e-8 * abs(hi))
    coalesced = (upper - lower) <= tau
    neighbor = False
    if k >= 2 and lower - float(vals[k - 2]) <= tau:
        neighbor = True
    if j > k + 1 and float(vals[k + 1]) - upper <= tau:
        neighbor = True
    x = vecs[:, k].copy()
    y = vecs[:, k - 1].copy()
    return SpectralData(k=k, upper=upper, lower=lower, vec_upper=x, vec_lower=y,
                        sq_diff=x * x - y * y, simple=not (coalesced or neighbor),
                        coalesced=coalesced, neighbor_degenerate=neighbor)
