"""Full-rank inner iteration: normalized explicit Euler with Armijo control.

Integrates the norm-constrained gradient system for the (optionally
penalized) gap objective until the objective stalls.  Accepted steps never
increase the objective; eigenvalue crossings away from the target pair are
handled by step halving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graphs import PatternMatrix, WeightMatrix
from .objective import GradientBundle, evaluate


def default_penalty_schedule(j: int) -> float:
    """Penalty weight used at the j-th outer step of a penalized run."""
    return 0.5 * j


@dataclass
class FlowConfig:
    """Step-size and stopping control shared by both inner iterations.

    ``armijo`` holds (sufficient-decrease constant, backtrack factor, growth
    factor).  ``stop_on`` selects the stationarity guard: objective change
    below ``tol`` (default) or relative gradient alignment below
    ``alignment_tol``.
    """

    h0: float = 0.1
    tol: float = 1e-9
    maxit: int = 2000
    armijo: tuple[float, float, float] = (1e-4, 0.5, 1.25)
    h_max: float = 1.0
    stop_on: str = "both"                # "f_change" | "alignment" | "both"
    alignment_tol: float = 5e-3
    f_target: float = 0.0                # early exit once the value is this low
    max_backtracks: int = 60
    penalty_schedule: Callable[[int], float] = field(default=default_penalty_schedule)

    def __post_init__(self):
        gamma, back, grow = self.armijo
        if not (self.h0 > 0 and 0 < back < 1 and grow >= 1 and gamma > 0):
            raise ValueError("invalid Armijo parameters")
        if self.stop_on not in ("f_change", "alignment", "both"):
            raise ValueError(f"unknown stop_on {self.stop_on!r}")


@dataclass
class StationaryPoint:
    """Result of an inner iteration: unit-norm optimizer and diagnostics."""

    direction: PatternMatrix
    bundle: GradientBundle
    iterations: int
    converged: bool
    monotone_violations: int
    stationarity: float
    fallback: str | None = None
    factors: object | None = None


def _descent_direction(bundle: GradientBundle, direction: PatternMatrix):
    """Unnormalized right-hand side -G_c + <G_c, E> E and the objective slope."""
    g = bundle.penalized_grad
    coef = g.inner(direction)
    vals = -g.values + coef * direction.values
    gn2 = g.inner(g)
    return vals, -(gn2 - coef * coef)


def _alignment(bundle: GradientBundle, direction: PatternMatrix) -> float:
    """Relative gradient alignment (stationarity residual / gradient norm)."""
    vals, _ = _descent_direction(bundle, direction)
    return float(np.sqrt(2.0) * np.linalg.norm(vals)
                 / max(bundle.penalized_grad.norm(), 1e-300))


def _stalled(config: "FlowConfig", last_change: float, alignment) -> bool:
    """Evaluate the selected stationarity guard; ``alignment`` is lazy."""
    f_ok = last_change <= config.tol
    if config.stop_on == "f_change":
        return f_ok
    if config.stop_on == "alignment":
        return alignment() <= config.alignment_tol
    return f_ok and alignment() <= config.alignment_tol


def full_step(W: WeightMatrix, eps: float, direction: PatternMatrix, h: float,
              k: int, c: float = 0.0,
              bundle: GradientBundle | None = None):
    """One normalized Euler step of the constrained gradient system.

    Returns (next direction, bundle at the next direction).  A zero step or a
    stationary point reproduces the input direction.
    """
    if bundle is None:
        bundle = evaluate(W, eps, direction, k, c)
    vals, _ = _descent_direction(bundle, direction)
    new_vals = direction.values + h * vals
    nrm = np.sqrt(2.0) * np.linalg.norm(new_vals)
    if nrm == 0.0:
        new_vals = direction.values.copy()
    else:
        new_vals = new_vals / nrm
    nxt = PatternMatrix(direction.pattern, new_vals)
    return nxt, evaluate(W, eps, nxt, k, c, check_norm=False)


def integrate_full(W: WeightMatrix, eps: float, k: int, E0: PatternMatrix,
                   config: FlowConfig, c: float = 0.0,
                   on_step: Callable | None = None) -> StationaryPoint:
    """Run the full-rank flow from E0 until the objective stalls.

    E0 is normalized internally.  Termination: objective change below
    ``config.tol`` (or gradient alignment below ``config.alignment_tol`` when
    selected), iteration cap, or step-size collapse.
    """
    E = E0.normalized()
    bundle = evaluate(W, eps, E, k, c, check_norm=False)
    h = config.h0
    gamma, back, grow = config.armijo
    iterations = 0
    violations = 0
    converged = False
    last_change = np.inf

    while iterations < config.maxit:
        vals, slope = _descent_direction(bundle, E)
        dir_norm = np.sqrt(2.0) * np.linalg.norm(vals)
        if dir_norm <= 1e-15 * max(1.0, bundle.penalized_grad.norm()):
            converged = True
            break

        # Transient crossings with eigenvalues outside the target pair make
        # the local gradient unreliable, but the objective itself stays
        # continuous: the sufficient-decrease test below is what guarantees
        # monotone progress through them.
        accepted = False
        h_try = h
        for _ in range(config.max_backtracks):
            trial, trial_bundle = full_step(W, eps, E, h_try, k, c, bundle)
            if trial_bundle.total <= bundle.total + gamma * h_try * min(slope, 0.0):
                accepted = True
                break
            h_try *= back
        if not accepted:
            converged = last_change <= config.tol
            break

        if trial_bundle.total > bundle.total:
            violations += 1
        last_change = abs(trial_bundle.total - bundle.total)
        E, bundle = trial, trial_bundle
        iterations += 1
        h = min(grow * h_try, config.h_max)
        if on_step is not None:
            on_step(iteration=iterations, h=h_try, value=bundle.total,
                    grad_norm=bundle.penalized_grad.norm(), penalty=bundle.penalty)

        if bundle.total <= config.f_target:
            converged = True
            break
        if _stalled(config, last_change,
                    lambda: _alignment(bundle, E)):
            converged = True
            break

    final_vals, _ = _descent_direction(bundle, E)
    stationarity = float(np.sqrt(2.0) * np.linalg.norm(final_vals))
    return StationaryPoint(E, bundle, iterations, converged, violations, stationarity)
