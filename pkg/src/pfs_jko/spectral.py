"""Cosine-transform diagonalization of A A^T and the two dual proximal maps.

Each block of A A^T is B = I + D_x D_x^T + D_y D_y^T, which the orthonormal
DCT-II/III pair diagonalizes on the cell-centered grid with eigenvalues

    lam_mn = lam_x_m + lam_y_n + 1,
    lam_x_m = (1 / (2 dx^2)) (1 - cos(2 pi m / nx)),   m = 0..nx-1,

so every solve with shift*I + scale*B costs one forward and one inverse
transform per block.  The exact dual prox is the trust-region projection onto
the delta-ball in the C2^{-1} metric, solved through its secular equation in
spectral coordinates; the inexact variant is a plain Euclidean ball shrink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .grid_fields import DualState, Grid
from .model_config import NumericalError


@dataclass(frozen=True)
class SpectralPlan:
    grid: Grid
    lam_x: np.ndarray = field(init=False)
    lam_y: np.ndarray = field(init=False)
    lam_mn: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        grid = self.grid
        mx = np.arange(grid.nx)
        my = np.arange(grid.ny)
        lam_x = (1.0 - np.cos(2.0 * math.pi * mx / grid.nx)) / (2.0 * grid.dx ** 2)
        lam_y = (1.0 - np.cos(2.0 * math.pi * my / grid.ny)) / (2.0 * grid.dy ** 2)
        object.__setattr__(self, "lam_x", lam_x)
        object.__setattr__(self, "lam_y", lam_y)
        object.__setattr__(self, "lam_mn", lam_y[:, None] + lam_x[None, :] + 1.0)

    @property
    def lam_max(self) -> float:
        return float(self.lam_mn.max())

    def dct_forward(self, f: np.ndarray) -> np.ndarray:
        """Orthonormal 2-D DCT-II."""
        return dctn(f, type=2, norm="ortho")

    def dct_inverse(self, fhat: np.ndarray) -> np.ndarray:
        """Orthonormal 2-D DCT-III, the inverse of :meth:`dct_forward`."""
        return idctn(fhat, type=2, norm="ortho")

    def solve_block(self, b: np.ndarray, shift: float, scale: float) -> np.ndarray:
        """Solve (shift*I + scale*B) u = b for one grid-shaped block."""
        denom = shift + scale * self.lam_mn
        small = np.abs(denom) < 1e-14
        if np.any(small):
            j, i = np.unravel_index(int(np.argmax(small)), denom.shape)
            raise NumericalError(
                f"singular spectral mode (m={i + 1}, n={j + 1}): "
                f"shift + scale*lam = {denom[j, i]!r}"
            )
        return self.dct_inverse(self.dct_forward(b) / denom)

    def family_denominators(self, scale_phi: float, scale_psi: float) -> np.ndarray:
        """Stacked spectral denominators scale * lam_mn for :meth:`solve_pair`.

        Both scales must be positive; lam_mn >= 1 then keeps every mode
        regular, so the per-solve singularity check can be skipped.
        """
        if not (scale_phi > 0.0 and scale_psi > 0.0):
            raise NumericalError(
                f"family scales must be positive, got ({scale_phi!r}, {scale_psi!r})"
            )
        return np.stack((scale_phi * self.lam_mn, scale_psi * self.lam_mn))

    def solve_pair(self, b_phi: np.ndarray, b_psi: np.ndarray, denom: np.ndarray) -> np.ndarray:
        """Batched :meth:`solve_block` over the two constraint families.

        One transform pass over the stacked (2, ny, nx) input replaces two
        separate block solves on the solver's hot path; ``denom`` comes from
        :meth:`family_denominators`.
        """
        stacked = np.stack((b_phi, b_psi))
        coeffs = dctn(stacked, type=2, norm="ortho", axes=(1, 2))
        return idctn(coeffs / denom, type=2, norm="ortho", axes=(1, 2))


def _secular_root(coeffs_sq: np.ndarray, lam: np.ndarray, delta: float) -> float:
    """Solve sum_i c_i^2 / (1 + mu*lam_i)^2 = delta^2 for mu, given q(0) > delta^2.

    q is convex and decreasing on mu >= 0, so Newton from the analytic lower
    bound converges monotonically; a bisection guard covers floating-point
    stragglers.
    """
    norm = math.sqrt(float(np.sum(coeffs_sq)))
    lam_min = float(lam.min())
    lam_max = float(lam.max())
    mu_lo = (norm / delta - 1.0) / lam_max
    mu_hi = (norm / delta - 1.0) / lam_min
    mu = mu_lo

    def q(mu_val: float) -> float:
        return float(np.sum(coeffs_sq / (1.0 + mu_val * lam) ** 2))

    for _ in range(200):
        denom = 1.0 + mu * lam
        qv = float(np.sum(coeffs_sq / denom ** 2))
        if abs(math.sqrt(qv) - delta) <= 1e-9 * delta:
            return mu
        qp = -2.0 * float(np.sum(coeffs_sq * lam / denom ** 3))
        if qp >= 0.0:
            break
        nxt = mu - (qv - delta ** 2) / qp
        if not (mu_lo <= nxt <= mu_hi):
            nxt = 0.5 * (mu_lo + mu_hi)
        if qv > delta ** 2:
            mu_lo = mu
        else:
            mu_hi = mu
        if abs(nxt - mu) <= 1e-16 * max(1.0, abs(mu)):
            return nxt
        mu = nxt
    # Bisection fallback on the maintained bracket.
    for _ in range(200):
        mu = 0.5 * (mu_lo + mu_hi)
        if q(mu) > delta ** 2:
            mu_lo = mu
        else:
            mu_hi = mu
        if abs(math.sqrt(q(mu)) - delta) <= 1e-9 * delta or mu_hi - mu_lo <= 1e-16 * max(1.0, mu_hi):
            return mu
    raise NumericalError("secular equation solve for the dual prox did not converge")


def _spectral_ball_solve(
    coeffs: np.ndarray, lam: np.ndarray, delta: float
) -> tuple[np.ndarray, float]:
    """Spectral-coordinate core of the trust-region projection.

    ``coeffs`` and ``lam`` are the blockwise-stacked spectral coefficients
    and matching eigenvalues.  Returns scaled coefficients c / (1 + mu*lam)
    and the multiplier.  Handles the degenerate configuration (no energy in
    the top eigenspace and the remainder already inside the ball at the
    critical multiplier) by placing all slack on the lowest-index top mode.
    """
    coeffs_sq = coeffs ** 2
    norm = math.sqrt(float(np.sum(coeffs_sq)))
    if norm <= delta:
        return coeffs, 0.0

    lam_max = float(lam.max())
    top = lam >= lam_max * (1.0 - 1e-12)
    top_energy = float(np.sum(coeffs_sq[top]))
    if top_energy <= (1e-13 * norm) ** 2:
        mu_deg = -1.0 / lam_max
        denom = 1.0 + mu_deg * lam
        denom_safe = np.where(top, 1.0, denom)
        rest = np.where(top, 0.0, coeffs_sq / denom_safe ** 2)
        rest_sum = float(np.sum(rest))
        if rest_sum <= delta ** 2:
            out = np.where(top, 0.0, coeffs / denom_safe)
            slack = math.sqrt(delta ** 2 - rest_sum)
            first_top = np.unravel_index(int(np.argmax(top)), top.shape)
            out[first_top] = slack
            return out, mu_deg

    mu = _secular_root(coeffs_sq, lam, delta)
    return coeffs / (1.0 + mu * lam), mu


def dual_prox_exact(
    y: DualState,
    b: DualState,
    delta: float,
    plan: SpectralPlan,
    c2_scale: float | tuple[float, float],
) -> tuple[DualState, float]:
    """Projection of y onto the delta-ball around b in the C2^{-1} metric.

    C2 = c2_scale * A A^T per block (a scalar applies to both blocks), so in
    spectral coordinates the optimality system (I + mu C2)(y* - b) = y - b
    decouples mode by mode.  Returns (y*, mu); mu = 0 whenever y is already
    feasible.
    """
    if isinstance(c2_scale, tuple):
        scale_phi, scale_psi = c2_scale
    else:
        scale_phi = scale_psi = c2_scale
    d_phi = y.block_phi - b.block_phi
    d_psi = y.block_psi - b.block_psi
    norm = math.sqrt(float(np.sum(d_phi ** 2) + np.sum(d_psi ** 2)))
    if norm < delta:
        return y.copy(), 0.0
    coeffs = np.stack([plan.dct_forward(d_phi), plan.dct_forward(d_psi)])
    lam = np.stack([scale_phi * plan.lam_mn, scale_psi * plan.lam_mn])
    scaled, mu = _spectral_ball_solve(coeffs, lam, delta)
    y_star = DualState(
        y.grid,
        b.block_phi + plan.dct_inverse(scaled[0]),
        b.block_psi + plan.dct_inverse(scaled[1]),
    )
    return y_star, mu


def dual_prox_inexact(z: DualState, delta: float, plan: SpectralPlan) -> DualState:
    """Euclidean ball shrink of the combined bookkeeping variable z = C2 v + r."""
    del plan  # shapes already carried by z; kept for signature symmetry
    norm = z.norm()
    if norm < delta:
        return DualState.zeros(z.grid)
    factor = 1.0 - delta / norm
    return DualState(z.grid, factor * z.block_phi, factor * z.block_psi)
