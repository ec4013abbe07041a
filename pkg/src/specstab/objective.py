"""Objective functional for eigenvalue coalescence and its rescaled gradient.

The objective is the spectral gap of the perturbed Laplacian,
F(E) = lambda_{k+1}(L(W + eps E)) - lambda_k(L(W + eps E)), optionally
augmented by a soft nonnegativity penalty on the perturbed weights.  The
gradient with respect to E, rescaled by eps, is the pattern projection of a
rank-structured matrix assembled from the two straddling eigenvectors; it is
computed edgewise in O(m) without forming dense intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import PatternMatrix, WeightMatrix, _check_same_pattern
from .spectra import SpectralData, spectral_data


@dataclass(frozen=True)
class GradientBundle:
    """Objective value, gradients and penalty at one (eps, E) evaluation.

    ``grad`` is the rescaled gradient of the plain gap; ``penalized_grad``
    adds ``c`` times the negative part of the perturbed weights.  ``penalty``
    is half the squared Frobenius norm of that negative part (reported as 0.0
    for c = 0 runs).
    """

    value: float
    grad: PatternMatrix
    spectral: SpectralData
    penalty: float
    penalized_grad: PatternMatrix
    c: float

    @property
    def total(self) -> float:
        """Penalized objective value."""
        return self.value + self.c * self.penalty

    @property
    def simple(self) -> bool:
        return self.spectral.simple


def gradient_values(sd: SpectralData, pattern) -> np.ndarray:
    """Edge values of the rescaled gradient for given spectral data.

    Entry (i, j): (sq_diff_i + sq_diff_j)/2 - (x_i x_j - y_i y_j), which is
    the pattern projection of the rank-structured full-space gradient.
    """
    r, c = pattern.rows, pattern.cols
    z, x, y = sd.sq_diff, sd.vec_upper, sd.vec_lower
    return 0.5 * (z[r] + z[c]) - (x[r] * x[c] - y[r] * y[c])


def evaluate(W: WeightMatrix, eps: float, direction: PatternMatrix, k: int,
             c: float = 0.0, sd: SpectralData | None = None,
             check_norm: bool = True) -> GradientBundle:
    """Evaluate objective, gradient, penalty and penalized gradient at E.

    Non-simple target eigenvalues are not an error: the bundle carries the
    flag and one-sided gradient values.  ``sd`` may pass in precomputed
    spectral data for the same (W, eps, E, k).
    """
    _check_same_pattern(W.pattern, direction.pattern)
    if c < 0:
        raise ValueError("penalty weight c must be nonnegative")
    if sd is None:
        sd = spectral_data(W, eps, direction, k, check_norm=check_norm)
    grad = PatternMatrix(W.pattern, gradient_values(sd, W.pattern))
    if c > 0.0:
        neg = np.minimum(W.perturbed_values(eps, direction), 0.0)
        penalty = float(np.dot(neg, neg))          # = 0.5 * ||neg part||_F^2
        pgrad = PatternMatrix(W.pattern, grad.values + c * neg)
    else:
        penalty = 0.0
        pgrad = grad
    return GradientBundle(value=sd.gap, grad=grad, spectral=sd,
                          penalty=penalty, penalized_grad=pgrad, c=c)


def constrained_direction(grad: PatternMatrix, direction: PatternMatrix) -> PatternMatrix:
    """Unit steepest-descent direction tangent to the unit sphere at E.

    Normalization of -G + <G, E> E.  Returns the zero matrix when that
    combination vanishes (stationarity), which tells the flows to stop.
    """
    _check_same_pattern(grad.pattern, direction.pattern)
    coef = grad.inner(direction)
    vals = -grad.values + coef * direction.values
    nrm = np.sqrt(2.0) * np.linalg.norm(vals)
    if nrm <= 1e-14 * max(grad.norm(), 1e-300):
        return PatternMatrix(grad.pattern, np.zeros_like(vals))
    return PatternMatrix(grad.pattern, vals / nrm)
