"""Rank-4 inner iteration: factored flow on the fixed-rank manifold.

The full-space gradient of the gap objective is a rank-4 symmetric matrix
assembled from the two straddling eigenvectors; the flow therefore lives on
the rank-4 manifold, represented by factors Y = U S U^T with U orthonormal
n-by-4 and S symmetric invertible 4-by-4.  A two-stage splitting step (basis
update by QR, then coefficient update) integrates the projected system
without ever forming an n-by-n matrix or inverting S; every product with the
gradient is contracted through its factors in O(m + n) work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .flow_full import FlowConfig, StationaryPoint, _stalled
from .graphs import Pattern, PatternMatrix, WeightMatrix
from .objective import evaluate, gradient_values
from .spectra import SpectralData, spectral_data

RANK = 4

#: diagonal core of the factored full-space gradient
_CORE = np.array([0.25, -0.25, -1.0, 1.0])

COND_LIMIT = 1e8
_COND_STRIKES = 3


class LowRankBreakdown(RuntimeError):
    """Low-rank representation is unusable; fall back to the full-rank flow."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class StepRejected(RuntimeError):
    """Single splitting step cannot be completed at this stepsize."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True, eq=False)
class SvsdFactors:
    """Symmetric rank-4 matrix Y = U S U^T in orthonormal-times-core form.

    U has orthonormal columns (n-by-4), S is symmetric 4-by-4; invertibility
    of S is monitored through its condition number rather than asserted.
    """

    U: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        n, r = self.U.shape
        if r != RANK or self.S.shape != (RANK, RANK):
            raise ValueError(f"expected n-by-{RANK} and {RANK}-by-{RANK} factors")

    def edge_values(self, pattern: Pattern) -> np.ndarray:
        """Entries of Y on the pattern edges (the projection onto the pattern)."""
        Ur, Uc = self.U[pattern.rows], self.U[pattern.cols]
        return np.einsum("ep,pq,eq->e", Ur, self.S, Uc, optimize=True)

    def pattern_matrix(self, pattern: Pattern) -> PatternMatrix:
        return PatternMatrix(pattern, self.edge_values(pattern))

    def pattern_norm(self, pattern: Pattern) -> float:
        return float(np.sqrt(2.0) * np.linalg.norm(self.edge_values(pattern)))

    def cond(self) -> float:
        svals = np.abs(np.linalg.eigvalsh(0.5 * (self.S + self.S.T)))
        if svals.min() == 0.0:
            return np.inf
        return float(svals.max() / svals.min())

    def orthonormality_defect(self) -> float:
        return float(np.abs(self.U.T @ self.U - np.eye(RANK)).max())

    def dense(self) -> np.ndarray:
        """Materialize Y (diagnostic use only)."""
        return self.U @ self.S @ self.U.T


@dataclass(frozen=True, eq=False)
class GradientFactors:
    """Factored form of the full-space gradient direction.

    cols = [sq_diff + 1, sq_diff - 1, vec_upper, vec_lower] with the fixed
    diagonal core (1/4, -1/4, -1, 1) reproduce the symmetric rank-4 matrix
    whose pattern projection is the objective gradient.
    """

    cols: np.ndarray
    rank_deficient: bool

    @property
    def core(self) -> np.ndarray:
        return _CORE

    def matmul(self, V: np.ndarray) -> np.ndarray:
        """Product (factored gradient) @ V without materializing it."""
        return self.cols @ (_CORE[:, None] * (self.cols.T @ V))

    def edge_values(self, pattern: Pattern) -> np.ndarray:
        Cr, Cc = self.cols[pattern.rows], self.cols[pattern.cols]
        return np.einsum("ep,p,ep->e", Cr, _CORE, Cc, optimize=True)

    def orthonormalized(self):
        """SVSD form (B, core) of the same matrix via QR of the columns."""
        B, T = np.linalg.qr(self.cols)
        return B, T @ np.diag(_CORE) @ T.T

    def dense(self) -> np.ndarray:
        """Materialize the rank-4 matrix (diagnostic use only)."""
        return (self.cols * _CORE[None, :]) @ self.cols.T


def gradient_factors(sd: SpectralData) -> GradientFactors:
    """Assemble the factored full-space gradient from spectral data.

    Flags (instead of failing) the exceptional case of numerically dependent
    eigenvector data, where the matrix drops below rank 4 and the caller
    should fall back to the full-rank flow.
    """
    n = sd.vec_upper.size
    ones = np.ones(n)
    cols = np.column_stack([sd.sq_diff + ones, sd.sq_diff - ones,
                            sd.vec_upper, sd.vec_lower])
    svals = np.linalg.svd(cols, compute_uv=False)
    deficient = bool(svals[-1] <= 1e-10 * svals[0])
    return GradientFactors(cols=cols, rank_deficient=deficient)


def tangent_project(factors: SvsdFactors, A) -> np.ndarray:
    """Orthogonal projection of A onto the tangent space at Y = U S U^T.

    P_Y A = A U U^T + U U^T A - U U^T A U U^T.  Verification helper: the
    result (and UU^T) are dense, so use only at diagnostic scale; the flow
    itself contracts these products edgewise.
    """
    U = factors.U
    if isinstance(A, GradientFactors):
        AU = A.matmul(U)
    else:
        A = np.asarray(A, dtype=np.float64)
        AU = A @ U
    UtAU = U.T @ AU
    return AU @ U.T + U @ AU.T - U @ UtAU @ U.T


class _StepInfo(NamedTuple):
    sd_mid: SpectralData
    eta: float
    cond_s: float


def _projected_gradient_edges(gf: GradientFactors, U: np.ndarray,
                              pattern: Pattern) -> np.ndarray:
    """Edge values of P_Y R for R in factored form, O((m + n) r^2)."""
    C = gf.cols.T @ U                                   # 4x4
    core_C = _CORE[:, None] * C
    M2 = C.T * _CORE[None, :]
    M3 = C.T @ core_C
    r, c = pattern.rows, pattern.cols
    t1 = np.einsum("ep,pq,eq->e", gf.cols[r], core_C, U[c], optimize=True)
    t2 = np.einsum("ep,pq,eq->e", U[r], M2, gf.cols[c], optimize=True)
    t3 = np.einsum("ep,pq,eq->e", U[r], M3, U[c], optimize=True)
    return t1 + t2 - t3


def _eta(gf: GradientFactors, U: np.ndarray, e_vals: np.ndarray,
         pattern: Pattern) -> tuple[float, np.ndarray]:
    """<P_Y R, E> together with the edge values of P_Y R."""
    pg = _projected_gradient_edges(gf, U, pattern)
    return float(2.0 * np.dot(pg, e_vals)), pg


def init_factors(W: WeightMatrix, k: int) -> SvsdFactors:
    """Starting factors: SVSD of the negated gradient at the unperturbed
    matrix, scaled so the pattern projection has unit Frobenius norm."""
    sd = spectral_data(W, 0.0, None, k)
    if sd.coalesced:
        raise LowRankBreakdown("target eigenvalues already coalesced at start")
    gf = gradient_factors(sd)
    if gf.rank_deficient:
        raise LowRankBreakdown("eigenvector data numerically dependent; "
                               "use the full-rank flow")
    U0, D0 = np.linalg.qr(gf.cols)
    S0 = -D0 @ np.diag(_CORE) @ D0.T
    factors = SvsdFactors(U0, 0.5 * (S0 + S0.T))
    nrm = factors.pattern_norm(W.pattern)
    if nrm <= 1e-300:
        raise LowRankBreakdown("gradient vanishes on the pattern")
    return SvsdFactors(U0, factors.S / nrm)


def splitting_step(factors: SvsdFactors, W: WeightMatrix, eps: float, k: int,
                   h: float, sd0: SpectralData | None = None
                   ) -> tuple[SvsdFactors, _StepInfo]:
    """One two-stage splitting step of the projected flow.

    Basis update: Euler step on U S, re-orthonormalized by QR.  Coefficient
    update: Euler step on S in the new basis, evaluated at the renormalized
    midpoint.  Both normalizations rescale S only, keeping the pattern
    projection at unit norm.  Raises StepRejected on QR breakdown or a
    vanishing pattern projection.
    """
    pattern = W.pattern
    U0, S0 = factors.U, factors.S
    e0 = factors.edge_values(pattern)
    if sd0 is None:
        sd0 = spectral_data(W, eps, PatternMatrix(pattern, e0), k, check_norm=False)
    gf0 = gradient_factors(sd0)
    if gf0.rank_deficient:
        raise StepRejected("rank_deficient_gradient")
    eta0, _ = _eta(gf0, U0, e0, pattern)

    K1 = U0 @ S0 + h * (-gf0.matmul(U0) + eta0 * (U0 @ S0))
    U1, T1 = np.linalg.qr(K1)
    tdiag = np.abs(np.diag(T1))
    if tdiag.min() <= 1e-13 * max(tdiag.max(), 1e-300):
        raise StepRejected("qr_breakdown")
    M = U1.T @ U0
    S_hat = M @ S0 @ M.T

    mid = SvsdFactors(U1, 0.5 * (S_hat + S_hat.T))
    nrm = mid.pattern_norm(pattern)
    if nrm <= 1e-300:
        raise StepRejected("projection_vanished")
    S_tilde = mid.S / nrm
    e_mid = mid.edge_values(pattern) / nrm

    sd_mid = spectral_data(W, eps, PatternMatrix(pattern, e_mid), k, check_norm=False)
    gf_mid = gradient_factors(sd_mid)
    if gf_mid.rank_deficient:
        raise StepRejected("rank_deficient_gradient")
    eta, _ = _eta(gf_mid, U1, e_mid, pattern)

    Cm = gf_mid.cols.T @ U1
    S1 = S_tilde + h * (-(Cm.T @ (_CORE[:, None] * Cm)) + eta * S_tilde)
    out = SvsdFactors(U1, 0.5 * (S1 + S1.T))
    nrm1 = out.pattern_norm(pattern)
    if nrm1 <= 1e-300:
        raise StepRejected("projection_vanished")
    out = SvsdFactors(U1, out.S / nrm1)
    return out, _StepInfo(sd_mid=sd_mid, eta=eta, cond_s=out.cond())


def us_step(factors: SvsdFactors, W: WeightMatrix, eps: float, k: int,
            h: float, sd0: SpectralData | None = None) -> SvsdFactors:
    """Secondary integrator (cross-validation only): direct Euler step on the
    coupled basis/coefficient system, which involves S^{-1}."""
    pattern = W.pattern
    U0, S0 = factors.U, factors.S
    e0 = factors.edge_values(pattern)
    if sd0 is None:
        sd0 = spectral_data(W, eps, PatternMatrix(pattern, e0), k, check_norm=False)
    gf = gradient_factors(sd0)
    if gf.rank_deficient:
        raise StepRejected("rank_deficient_gradient")
    eta, _ = _eta(gf, U0, e0, pattern)
    RU = gf.matmul(U0)
    UtRU = U0.T @ RU
    Udot = -np.linalg.solve(S0.T, (RU - U0 @ UtRU).T).T
    Sdot = -UtRU + eta * S0
    U1raw = U0 + h * Udot
    S1raw = S0 + h * Sdot
    U1, T = np.linalg.qr(U1raw)
    S1 = T @ S1raw @ T.T
    out = SvsdFactors(U1, 0.5 * (S1 + S1.T))
    nrm = out.pattern_norm(pattern)
    if nrm <= 1e-300:
        raise StepRejected("projection_vanished")
    return SvsdFactors(U1, out.S / nrm)


def inner_iteration_lowrank(W: WeightMatrix, eps: float, k: int,
                            factors: SvsdFactors, config: FlowConfig,
                            on_step: Callable | None = None,
                            integrator: str = "splitting") -> StationaryPoint:
    """Drive the factored flow to a stationary point of the gap objective.

    Armijo-controlled stepsizes on the splitting step; stops when the
    objective change drops below ``config.tol`` (or on gradient alignment
    when selected).  A persistently ill-conditioned S or numerically
    dependent eigenvector data aborts with a fallback signal for the
    full-rank flow.
    """
    if integrator not in ("splitting", "direct"):
        raise ValueError(f"unknown integrator {integrator!r}")
    pattern = W.pattern
    nrm = factors.pattern_norm(pattern)
    if nrm <= 1e-300:
        raise LowRankBreakdown("starting factors project to zero on the pattern")
    factors = SvsdFactors(factors.U, factors.S / nrm)

    e_vals = factors.edge_values(pattern)
    sd = spectral_data(W, eps, PatternMatrix(pattern, e_vals), k, check_norm=False)
    f_cur = sd.gap
    h = config.h0
    gamma, back, grow = config.armijo
    iterations = 0
    violations = 0
    cond_strikes = 0
    converged = False
    fallback = None
    last_change = np.inf

    while iterations < config.maxit:
        gf = gradient_factors(sd)
        if gf.rank_deficient:
            fallback = "rank_deficient_gradient"
            break
        g_vals = gradient_values(sd, pattern)
        eta0, pg = _eta(gf, factors.U, e_vals, pattern)
        flow_vals = -pg + eta0 * e_vals          # pattern projection of Ydot
        slope = eps * 2.0 * np.dot(g_vals, flow_vals)
        res = np.sqrt(2.0) * np.linalg.norm(
            -g_vals + 2.0 * np.dot(g_vals, e_vals) * e_vals)

        # As in the full-rank flow, transient crossings outside the target
        # pair are ridden out by the sufficient-decrease test.
        accepted = False
        h_try = h
        trial = info = sd_next = None
        for _ in range(config.max_backtracks):
            try:
                if integrator == "splitting":
                    trial, info = splitting_step(factors, W, eps, k, h_try, sd0=sd)
                else:
                    trial = us_step(factors, W, eps, k, h_try, sd0=sd)
                    info = _StepInfo(sd_mid=sd, eta=np.nan, cond_s=trial.cond())
            except StepRejected:
                h_try *= 0.5
                continue
            e_next = trial.edge_values(pattern)
            sd_next = spectral_data(W, eps, PatternMatrix(pattern, e_next), k,
                                    check_norm=False)
            if sd_next.gap <= f_cur + gamma * h_try * min(slope, 0.0):
                accepted = True
                break
            h_try *= back
        if not accepted:
            converged = last_change <= config.tol
            break

        if sd_next.gap > f_cur:
            violations += 1
        last_change = abs(sd_next.gap - f_cur)
        factors, sd, f_cur = trial, sd_next, sd_next.gap
        e_vals = factors.edge_values(pattern)
        iterations += 1
        h = min(grow * h_try, config.h_max)

        if info.cond_s > COND_LIMIT:
            cond_strikes += 1
            if cond_strikes >= _COND_STRIKES:
                fallback = "ill_conditioned_core"
                break
        else:
            cond_strikes = 0

        if on_step is not None:
            on_step(iteration=iterations, h=h_try, value=f_cur,
                    grad_norm=np.sqrt(2.0) * np.linalg.norm(g_vals),
                    penalty=0.0, cond_s=info.cond_s)

        if f_cur <= config.f_target:
            converged = True
            break

        def alignment():
            g_new = gradient_values(sd, pattern)
            res_new = np.sqrt(2.0) * np.linalg.norm(
                -g_new + 2.0 * np.dot(g_new, e_vals) * e_vals)
            return res_new / max(np.sqrt(2.0) * np.linalg.norm(g_new), 1e-300)

        if _stalled(config, last_change, alignment):
            converged = True
            break

    g_vals = gradient_values(sd, pattern)
    stationarity = float(np.sqrt(2.0) * np.linalg.norm(
        -g_vals + 2.0 * np.dot(g_vals, e_vals) * e_vals))
    direction = PatternMatrix(pattern, e_vals)
    bundle = evaluate(W, eps, direction, k, sd=sd, check_norm=False)
    return StationaryPoint(direction, bundle, iterations,
                           converged and fallback is None, violations,
                           stationarity, fallback=fallback, factors=factors)
