"""Outer iteration: smallest perturbation size closing the target gap.

For fixed k, the inner iteration returns the minimized gap as a function of
the perturbation size; this module root-finds that function by safeguarded
Newton-bisection (the derivative at a stationary point is minus the gradient
norm), certifies the resulting coalescence by an independent eigensolve, and
assembles per-k stability reports.  The reported distance is the Frobenius
norm of the final admissible perturbation.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .flow_full import FlowConfig, StationaryPoint, integrate_full
from .flow_lowrank import LowRankBreakdown, init_factors, inner_iteration_lowrank
from .graphs import GENERATOR_ID, PatternMatrix, WeightMatrix, laplacian
from .objective import gradient_values
from .spectra import smallest_eigenpairs, spectral_data, spectral_gap

CSV_HEADER = "k,g_k,d_k,method,eps_star,phi,admissible,neg_norm,inner_iters,outer_iters,seconds"


@dataclass
class OuterConfig:
    """Bracketing, tolerances and method dispatch for one distance run."""

    eps_lb: float = 0.0
    eps_ub: float | None = None          # default: Frobenius norm of the weights
    eps0: float | None = None            # default: Newton step from zero
    toler: float = 1e-2
    niter: int = 60
    method: str = "auto"                 # auto | lowrank | full
    inner: FlowConfig = field(default_factory=FlowConfig)
    clip_tol: float = 1e-8
    neg_residual_tol: float = 1e-5
    newton_growth_cap: float = 1.5
    log_trajectory_dir: str | None = None

    def __post_init__(self):
        if self.method not in ("auto", "lowrank", "full"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.eps_ub is not None and not self.eps_lb < self.eps_ub:
            raise ValueError("need eps_lb < eps_ub")
        if self.toler <= 0:
            raise ValueError("toler must be positive")


@dataclass
class ReportRow:
    """One line of a stability report."""

    k: int
    g_k: float
    d_k: float
    method: str
    eps_star: float
    phi: float
    admissible: bool
    neg_norm: float
    inner_iters: int
    outer_iters: int
    seconds: float
    cert_gap: float = np.nan
    failed: bool = False
    note: str = ""

    def as_csv_fields(self):
        return [self.k, f"{self.g_k:.10g}", f"{self.d_k:.10g}", self.method,
                f"{self.eps_star:.10g}", f"{self.phi:.6g}", str(self.admissible).lower(),
                f"{self.neg_norm:.6g}", self.inner_iters, self.outer_iters,
                f"{self.seconds:.3f}"]


@dataclass
class StabilityReport:
    rows: list[ReportRow]
    k_opt: int | None
    meta: dict

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(CSV_HEADER.split(","))
        for row in self.rows:
            w.writerow(row.as_csv_fields())
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        rows = []
        for r in self.rows:
            rows.append({
                "k": r.k, "g_k": r.g_k, "d_k": r.d_k, "method": r.method,
                "eps_star": r.eps_star, "phi": r.phi, "admissible": r.admissible,
                "neg_norm": r.neg_norm, "inner_iters": r.inner_iters,
                "outer_iters": r.outer_iters, "seconds": r.seconds,
                "cert_gap": None if np.isnan(r.cert_gap) else r.cert_gap,
                "failed": r.failed, "note": r.note,
            })
        return {"rows": rows, "k_opt": self.k_opt,
                "generator": GENERATOR_ID, "meta": self.meta}

    def to_json_text(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def config_echo(config: OuterConfig) -> dict:
    """JSON-safe snapshot of an OuterConfig (for run sidecars)."""
    inner = config.inner
    return {
        "eps_lb": config.eps_lb, "eps_ub": config.eps_ub, "eps0": config.eps0,
        "toler": config.toler, "niter": config.niter, "method": config.method,
        "clip_tol": config.clip_tol, "neg_residual_tol": config.neg_residual_tol,
        "inner": {
            "h0": inner.h0, "tol": inner.tol, "maxit": inner.maxit,
            "armijo": list(inner.armijo), "h_max": inner.h_max,
            "stop_on": inner.stop_on, "alignment_tol": inner.alignment_tol,
            "penalty_schedule": getattr(inner.penalty_schedule, "__name__",
                                        repr(inner.penalty_schedule)),
        },
    }


def min_gap(W: WeightMatrix, eps: float, k: int, warm_start=None,
            method: str = "lowrank", config: FlowConfig | None = None,
            c: float = 0.0, on_step=None) -> StationaryPoint:
    """Minimized (penalized) gap at perturbation size eps.

    Runs the selected inner iteration from ``warm_start`` (factors for the
    low-rank flow, a PatternMatrix for the full flow; None builds the default
    start from the unperturbed gradient).  The returned stationary point
    carries the value (``bundle.total``), the optimizer and warm-start data.
    """
    config = config or FlowConfig()
    if method == "lowrank":
        factors = warm_start if warm_start is not None else init_factors(W, k)
        return inner_iteration_lowrank(W, eps, k, factors, config, on_step=on_step)
    if method == "full":
        if warm_start is not None:
            E0 = warm_start
        else:
            sd0 = spectral_data(W, 0.0, None, k)
            g0 = gradient_values(sd0, W.pattern)
            nrm = np.sqrt(2.0) * np.linalg.norm(g0)
            if nrm <= 1e-300:
                raise LowRankBreakdown("gradient vanishes at the unperturbed matrix")
            E0 = PatternMatrix(W.pattern, -g0 / nrm)
        return integrate_full(W, eps, k, E0, config, c=c, on_step=on_step)
    raise ValueError(f"unknown method {method!r}")


def min_gap_derivative(point: StationaryPoint) -> float:
    """Derivative of the minimized gap with respect to the perturbation size.

    At a converged stationary point this is minus the Frobenius norm of the
    (penalized) gradient; requires convergence.
    """
    if not point.converged:
        raise ValueError("derivative formula requires a converged inner iteration")
    return -point.bundle.penalized_grad.norm()


@dataclass
class OuterOutcome:
    eps_star: float
    point: StationaryPoint | None
    certified: bool
    lb: float
    ub: float
    outer_iters: int
    inner_iters: int
    note: str = ""


def outer_iteration(W: WeightMatrix, k: int, config: OuterConfig,
                    method: str | None = None, penalized: bool = False) -> OuterOutcome:
    """Safeguarded Newton-bisection on the minimized gap.

    Bisection shrinks the upper bound whenever the inner value drops below
    ``toler``; otherwise the lower bound rises and a Newton step is taken,
    with a midpoint fallback whenever the iterate leaves the bracket.  Inner
    runs are warm-started along the way.  In penalized mode the penalty
    weight follows ``inner.penalty_schedule`` over outer steps.  The reported
    size is the smallest certified one (value below ``toler``).
    """
    method = method or config.method
    if method == "auto":
        method = "lowrank"
    g_k = spectral_gap(W, k)
    if g_k <= config.toler:
        return OuterOutcome(0.0, None, True, 0.0, 0.0, 0, 0,
                            note="already coalesced at the unperturbed matrix")
    # Inner runs may stop as soon as the value certifies coalescence.
    inner_cfg = config.inner
    if inner_cfg.f_target < 0.5 * config.toler:
        inner_cfg = dataclasses.replace(inner_cfg, f_target=0.5 * config.toler)

    lb = config.eps_lb
    ub = config.eps_ub if config.eps_ub is not None else W.norm()
    sd0 = spectral_data(W, 0.0, None, k)
    g0_norm = np.sqrt(2.0) * np.linalg.norm(gradient_values(sd0, W.pattern))
    if config.eps0 is not None:
        eps = config.eps0
    elif g0_norm > 0 and lb < 0.25 * g_k / g0_norm < ub:
        # A quarter of the Newton step from zero: small enough that the
        # landscape is still near-linear, so the warm-start chain enters on
        # the steep branch connected to the unperturbed gradient.
        eps = 0.25 * g_k / g0_norm
    else:
        eps = 0.5 * (lb + ub)

    traj = None
    if config.log_trajectory_dir is not None:
        import os
        os.makedirs(config.log_trajectory_dir, exist_ok=True)
        traj = open(os.path.join(config.log_trajectory_dir,
                                 f"trajectory_k{k}_{method}.csv"), "w")
        traj.write("eps,c,iteration,h,value,grad_norm,penalty,cond_s\n")

    warm = None
    best: tuple[float, StationaryPoint] | None = None
    last_point = None
    inner_total = 0
    l = 0
    try:
        while l < config.niter and ub - lb > config.toler:
            c = inner_cfg.penalty_schedule(l) if penalized else 0.0
            on_step = None
            if traj is not None:
                def on_step(iteration, h, value, grad_norm, penalty, cond_s=np.nan,
                            _eps=eps, _c=c):
                    traj.write(f"{_eps:.10g},{_c:.3g},{iteration},{h:.6g},"
                               f"{value:.10g},{grad_norm:.10g},{penalty:.6g},{cond_s:.6g}\n")
            point = min_gap(W, eps, k, warm_start=warm, method=method,
                            config=inner_cfg, c=c, on_step=on_step)
            inner_total += point.iterations
            last_point = point
            if point.fallback:
                if best is not None:
                    return OuterOutcome(best[0], best[1], True, lb, ub, l, inner_total,
                                        note=f"inner fallback after certification: {point.fallback}")
                return OuterOutcome(ub, point, False, lb, ub, l, inner_total,
                                    note=f"inner fallback: {point.fallback}")
            warm = point.factors if method == "lowrank" else point.direction
            value = point.bundle.total

            if value < config.toler:
                if best is None or eps < best[0]:
                    best = (eps, point)
                ub = min(ub, eps)
                eps_next = 0.5 * (lb + ub)
            else:
                lb = max(lb, eps)
                deriv = -point.bundle.penalized_grad.norm()
                if point.converged and deriv < 0:
                    # Cap the relative Newton increment: warm starts are only
                    # trustworthy near the previous size, and an uncapped step
                    # from a shallow local branch (tiny gradient norm) can
                    # catapult past the true root and poison the lower bound.
                    eps_next = min(eps - value / deriv,
                                   config.newton_growth_cap * eps)
                else:
                    eps_next = 0.5 * (lb + ub)
            if not lb <= eps_next <= ub:
                eps_next = 0.5 * (lb + ub)
            eps = eps_next
            l += 1
    finally:
        if traj is not None:
            traj.close()

    if best is not None:
        eps_star, point = best
        return OuterOutcome(eps_star, point, True, lb, ub, l, inner_total)
    return OuterOutcome(ub, last_point, False, lb, ub, l, inner_total,
                        note="no certified coalescence within iteration budget")


def _negativity(W: WeightMatrix, eps: float, direction: PatternMatrix):
    vals = W.perturbed_values(eps, direction)
    neg = np.minimum(vals, 0.0)
    return float(vals.min(initial=0.0)), float(np.sqrt(2.0) * np.linalg.norm(neg))


def clip_nonnegative(W: WeightMatrix, eps: float, direction: PatternMatrix) -> WeightMatrix:
    """Admissible perturbed matrix: negative entries of W + eps*E set to zero."""
    vals = np.maximum(W.perturbed_values(eps, direction), 0.0)
    return WeightMatrix(W.pattern, vals, W.diag)


def perturbation_norm(W: WeightMatrix, W_new: WeightMatrix) -> float:
    """Frobenius norm of the applied (pattern) perturbation."""
    return float(np.sqrt(2.0) * np.linalg.norm(W_new.weights - W.weights))


def coalescence_certificate(W_new: WeightMatrix, k: int) -> float:
    """Independent re-solve: gap of the k-th pair of the perturbed Laplacian."""
    vals, _ = smallest_eigenpairs(laplacian(W_new), min(W_new.n, k + 1))
    return float(vals[k] - vals[k - 1])


def structured_distance(W: WeightMatrix, k: int, config: OuterConfig) -> ReportRow:
    """Distance to the nearest admissible weight matrix with coalesced k-th pair.

    method='auto' integrates the low-rank flow first and falls back to the
    penalized full-rank flow when the optimizer violates nonnegativity beyond
    ``clip_tol`` (or the low-rank representation breaks down).  Residual
    negativity up to ``neg_residual_tol`` is clipped away and recorded.
    """
    if not 2 <= k <= W.n - 1:
        raise ValueError(f"k must be in [2, {W.n - 1}]")
    t0 = time.perf_counter()
    g_k = spectral_gap(W, k)
    notes: list[str] = []

    def run(meth: str, penalized: bool) -> OuterOutcome | None:
        try:
            return outer_iteration(W, k, config, method=meth, penalized=penalized)
        except LowRankBreakdown as exc:
            notes.append(f"low-rank start failed: {exc}")
            return None

    def escalate(outcome: OuterOutcome | None) -> bool:
        """Does this low-rank/plain-full result force the penalized rerun?"""
        if outcome is None or not outcome.certified:
            return True
        if outcome.point is None:
            return False
        negmin, _ = _negativity(W, outcome.eps_star, outcome.point.direction)
        if negmin < -config.clip_tol:
            notes.append(f"optimizer violates nonnegativity ({negmin:.2e})")
            return True
        if outcome.point.fallback:
            notes.append(f"inner fallback: {outcome.point.fallback}")
            return True
        return False

    if config.method == "lowrank":
        meth, outcome = "lowrank", run("lowrank", penalized=False)
    elif config.method == "full":
        meth, outcome = "full", run("full", penalized=False)
        if escalate(outcome):
            meth, outcome = "full-penalized", run("full", penalized=True)
    else:
        meth, outcome = "lowrank", run("lowrank", penalized=False)
        if escalate(outcome):
            meth, outcome = "full-penalized", run("full", penalized=True)

    note = "; ".join(notes)
    if outcome is None:
        return ReportRow(k, g_k, np.nan, "failed", np.nan, np.nan, False, np.nan,
                         0, 0, time.perf_counter() - t0, failed=True, note=note)
    if outcome.point is None:
        # coalesced at eps = 0
        return ReportRow(k, g_k, 0.0, meth, 0.0, g_k, True, 0.0, 0,
                         outcome.outer_iters, time.perf_counter() - t0,
                         cert_gap=g_k, note=outcome.note)

    point = outcome.point
    eps_star = outcome.eps_star
    negmin, neg_norm = _negativity(W, eps_star, point.direction)
    admissible = True
    failed = not outcome.certified
    if negmin >= -config.clip_tol:
        pass
    elif neg_norm <= config.neg_residual_tol:
        note = (note + "; " if note else "") + f"clipped residual negativity {neg_norm:.2e}"
    else:
        admissible = False
        failed = True
        note = (note + "; " if note else "") + f"inadmissible optimizer ({negmin:.2e})"

    if admissible:
        W_new = clip_nonnegative(W, eps_star, point.direction)
        d_k = perturbation_norm(W, W_new)
        cert = coalescence_certificate(W_new, k)
    else:
        d_k = eps_star
        cert = np.nan
    if outcome.note:
        note = (note + "; " if note else "") + outcome.note
    return ReportRow(k, g_k, d_k, meth, eps_star, point.bundle.total, admissible,
                     neg_norm, outcome.inner_iters, outcome.outer_iters,
                     time.perf_counter() - t0, cert_gap=cert, failed=failed,
                     note=note)


def select_k(W: WeightMatrix, kmin: int, kmax: int, config: OuterConfig,
             jobs: int | None = None, meta: dict | None = None):
    """Stability report over k in [kmin, kmax] and the most stable k.

    Rows are computed by a bounded worker pool; the winner is the largest
    distance, ties broken toward smaller k, failed rows excluded with a
    warning.
    """
    if not 2 <= kmin <= kmax <= W.n - 1:
        raise ValueError(f"need 2 <= kmin <= kmax <= {W.n - 1}")
    ks = list(range(kmin, kmax + 1))
    if jobs is None or jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda k: structured_distance(W, k, config), ks))
    else:
        rows = [structured_distance(W, k, config) for k in ks]
    valid = [r for r in rows if not r.failed and np.isfinite(r.d_k)]
    for r in rows:
        if r.failed:
            warnings.warn(f"k={r.k} failed: {r.note}", stacklevel=2)
    k_opt = None
    if valid:
        k_opt = max(valid, key=lambda r: (r.d_k, -r.k)).k
    report = StabilityReport(rows=rows, k_opt=k_opt,
                             meta={**(meta or {}), "config": config_echo(config)})
    return k_opt, report
