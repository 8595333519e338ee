"""Wetting potential and the two substrate boundary treatments.

The dynamic treatment keeps ``phi_bc`` as an unknown anchored to its previous
value; the equilibrium treatment eliminates it by solving, per substrate
column, the scalar root problem

    f(X) = phi_{i,1} - X - alpha*cos(pi X / 2) = 0,
    alpha = -sqrt(2) pi cos(theta_s) dy / (12 cn),

which is exactly the stationarity of the discrete energy in ``phi_bc``.  Under
``dy < cn`` we have |alpha| < 2/pi, so f' < 0 everywhere and the root is
unique, bracketed by |X*| <= |phi_{i,1}| + |alpha|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid_fields import Grid, State
from .model_config import ConfigError, ModelParams, NumericalError

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class WallPotential:
    """Sinusoidal interpolation of the wall free energy density along the substrate."""

    theta_s: float
    gamma_sum: float = 0.0

    @classmethod
    def from_params(cls, params: ModelParams) -> "WallPotential":
        return cls(params.theta_s, params.gamma_sum)

    def value(self, phi):
        return (-(SQRT2 / 3.0) * math.cos(self.theta_s) * np.sin(0.5 * math.pi * phi)
                + 0.5 * self.gamma_sum)

    def prime(self, phi):
        return -(SQRT2 * math.pi / 6.0) * math.cos(self.theta_s) * np.cos(0.5 * math.pi * phi)


def gamma_wf(phi, params: ModelParams):
    return WallPotential.from_params(params).value(phi)


def gamma_wf_prime(phi, params: ModelParams):
    return WallPotential.from_params(params).prime(phi)


def bc_alpha(params: ModelParams, dy: float) -> float:
    return -SQRT2 * math.pi * math.cos(params.theta_s) * dy / (12.0 * params.cn)


def solve_equilibrium_bc(
    phi_row1: np.ndarray,
    grid: Grid,
    params: ModelParams,
    *,
    tol: float = 1e-13,
    max_iter: int = 100,
) -> np.ndarray:
    """Root X* of f per substrate column, by Newton with a bisection safeguard.

    Initial guesses follow the concavity-based case plan keyed on whether
    phi_{i,1} lies in [-1, 1] and on theta_s vs pi/2; Newton steps leaving the
    proved bracket fall back to bisection, so convergence is unconditional.
    """
    if grid.dy >= params.cn:
        raise ConfigError(
            f"equilibrium boundary condition requires dy < cn "
            f"(dy={grid.dy!r}, cn={params.cn!r}); refine the grid in y"
        )
    phi1 = np.asarray(phi_row1, dtype=float)
    alpha = bc_alpha(params, grid.dy)
    if alpha == 0.0:
        return phi1.copy()  # f is linear: X* = phi_{i,1}
    bound = np.abs(phi1) + abs(alpha)
    hydrophilic = params.theta_s < 0.5 * math.pi

    # Cases 1/2 for phi in [-1, 1], cases 3/4 below, cases 5/6 above.
    if hydrophilic:
        x = np.where(phi1 < -1.0, -bound, 1.0)
    else:
        x = np.where(phi1 > 1.0, bound, -1.0)

    # f is strictly decreasing, so the bracket keeps f(lo) >= 0 >= f(hi).
    lo = -bound
    hi = bound.copy()

    def f_of(x):
        return phi1 - x - alpha * np.cos(0.5 * math.pi * x)

    converged = False
    for _ in range(max_iter):
        fx = f_of(x)
        if np.max(np.abs(fx)) <= tol:
            converged = True
            break
        lo = np.where(fx > 0, np.maximum(lo, x), lo)
        hi = np.where(fx < 0, np.minimum(hi, x), hi)
        fpx = -1.0 + 0.5 * math.pi * alpha * np.sin(0.5 * math.pi * x)
        step = fx / fpx
        xn = x - step
        outside = (xn < lo) | (xn > hi) | ~np.isfinite(xn)
        x = np.where(outside, 0.5 * (lo + hi), xn)
    else:
        fx = f_of(x)
        converged = np.max(np.abs(fx)) <= tol
    if not converged:
        worst = int(np.argmax(np.abs(f_of(x))))
        raise NumericalError(
            f"equilibrium boundary Newton did not converge in {max_iter} iterations "
            f"(worst column i={worst}, phi={phi1[worst]!r}, |f|={abs(f_of(x)[worst])!r})"
        )
    return x


def dynamic_bc_anchor(state_prev: State) -> np.ndarray:
    """Previous-step boundary values, the center of the boundary penalty."""
    return state_prev.phi_bc.copy()
