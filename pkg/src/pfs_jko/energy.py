"""Discrete total energy and its exact gradient in (phi, psi, phi_bc).

The Dirichlet part sums squared differences over interior cell edges (the
one-sided closure at non-substrate boundaries carries no extra term) plus a
substrate closure ``cn^2 (dx/dy) (phi_{i,1} - phi_bc_i)^2`` per column; the
bulk potentials use the midpoint rule.  This concretization is chosen so that
:func:`grad_energy` is the exact gradient of :func:`total_energy`, which the
variational time stepping relies on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .grid_fields import State
from .model_config import ModelParams
from .wall_boundary import WallPotential

try:  # pragma: no cover - absence is exercised on minimal installs only
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

logger = logging.getLogger(__name__)

# psi enters the gradient through log(psi/(1-psi)); endpoints are clamped to
# keep the gradient step finite while the prox maintains psi in [0, 1].
LOG_CLAMP_KAPPA = 1e-12

ENERGY_CSV_HEADER = "t,f_gl,f_sur,f_ad,f_wf,total"


@dataclass(frozen=True)
class EnergyBreakdown:
    f_gl: float
    f_sur: float
    f_ad: float
    f_wf: float

    @property
    def total(self) -> float:
        return self.f_gl + self.f_sur + self.f_ad + self.f_wf

    def csv_row(self, t: float) -> str:
        return f"{t!r},{self.f_gl!r},{self.f_sur!r},{self.f_ad!r},{self.f_wf!r},{self.total!r}"


def total_energy(state: State, params: ModelParams) -> EnergyBreakdown:
    """Energy decomposition (interface, surfactant entropy, adsorption, wall).

    psi outside [0, 1] makes the mixing entropy undefined; that is reported as
    an infinite f_sur rather than an exception.  At the endpoints the limit
    0*log(0) = 0 is used, so the energy is finite on the closed box the prox
    guarantees.
    """
    grid = state.grid
    phi, psi, phi_bc = state.phi, state.psi, state.phi_bc
    dx, dy, area = grid.dx, grid.dy, grid.cell_area
    cn = params.cn

    phi_sq = phi * phi
    phi_sq_m1 = phi_sq - 1.0
    phi_sq_m1_sq = phi_sq_m1 * phi_sq_m1
    row_jump = phi[0, :] - phi_bc
    dpx = (phi[:, 1:] - phi[:, :-1]).ravel()
    dpy = (phi[1:, :] - phi[:-1, :]).ravel()
    gx2 = float(np.dot(dpx, dpx)) / (dx * dx)
    gy2 = float(np.dot(dpy, dpy)) / (dy * dy)
    dirichlet = 0.5 * cn ** 2 * (gx2 + gy2) * area
    dirichlet += cn ** 2 * (dx / dy) * float(np.dot(row_jump, row_jump))
    f_gl = float(dirichlet + 0.25 * np.sum(phi_sq_m1_sq) * area)

    if np.any(psi < 0.0) or np.any(psi > 1.0):
        f_sur = math.inf
    else:
        f_sur = params.pi_coeff * float(np.sum(xlogy(psi, psi) + xlogy(1.0 - psi, 1.0 - psi))) * area

    ad_density = phi_sq * (0.5 / params.ex) - 0.25 * phi_sq_m1_sq
    f_ad = float(np.dot(psi.ravel(), ad_density.ravel())) * area

    wall = WallPotential.from_params(params)
    f_wf = cn * float(np.sum(wall.value(phi_bc))) * dx

    return EnergyBreakdown(f_gl, f_sur, f_ad, f_wf)


def energy_and_grad(
    state: State, params: ModelParams
) -> tuple[EnergyBreakdown, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Fused :func:`total_energy` and :func:`grad_energy`.

    The inner solver evaluates both at every iterate; sharing the polynomial
    intermediates roughly halves that cost.  Results are bit-identical to the
    separate calls.
    """
    grid = state.grid
    phi, psi, phi_bc = state.phi, state.psi, state.phi_bc
    dx, dy, area = grid.dx, grid.dy, grid.cell_area
    cn = params.cn

    phi_sq = phi * phi
    phi_sq_m1 = phi_sq - 1.0
    phi_sq_m1_sq = phi_sq_m1 * phi_sq_m1
    row_jump = phi[0, :] - phi_bc
    wall = WallPotential.from_params(params)

    dpx = (phi[:, 1:] - phi[:, :-1]).ravel()
    dpy = (phi[1:, :] - phi[:-1, :]).ravel()
    gx2 = float(np.dot(dpx, dpx)) / (dx * dx)
    gy2 = float(np.dot(dpy, dpy)) / (dy * dy)
    dirichlet = 0.5 * cn ** 2 * (gx2 + gy2) * area
    dirichlet += cn ** 2 * (dx / dy) * float(np.dot(row_jump, row_jump))
    f_gl = float(dirichlet + 0.25 * np.sum(phi_sq_m1_sq) * area)

    if np.any(psi < 0.0) or np.any(psi > 1.0):
        f_sur = math.inf
    else:
        f_sur = params.pi_coeff * float(np.sum(xlogy(psi, psi) + xlogy(1.0 - psi, 1.0 - psi))) * area

    ad_density = phi_sq * (0.5 / params.ex) - 0.25 * phi_sq_m1_sq
    f_ad = float(np.dot(psi.ravel(), ad_density.ravel())) * area
    f_wf = cn * float(np.sum(wall.value(phi_bc))) * dx

    g_phi = (phi * (phi_sq_m1 * (1.0 - psi) + psi * (1.0 / params.ex))
             - cn ** 2 * _laplacian(phi, dx, dy)) * area
    g_phi[0, :] += 2.0 * cn ** 2 * row_jump / dy * dx

    psi_c = np.clip(psi, LOG_CLAMP_KAPPA, 1.0 - LOG_CLAMP_KAPPA)
    g_psi = (params.pi_coeff * np.log(psi_c / (1.0 - psi_c)) + ad_density) * area

    g_bc = (-2.0 * cn ** 2 * row_jump / dy + cn * wall.prime(phi_bc)) * dx
    return EnergyBreakdown(f_gl, f_sur, f_ad, f_wf), (g_phi, g_psi, g_bc)


def _laplacian_arrays(phi: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Three-point Laplacian with one-sided stencils at all boundaries."""
    dx2, dy2 = dx * dx, dy * dy
    lap = np.empty_like(phi)
    lap[:, 1:-1] = (phi[:, 2:] - 2.0 * phi[:, 1:-1] + phi[:, :-2]) / dx2
    lap[:, 0] = (phi[:, 1] - phi[:, 0]) / dx2
    lap[:, -1] = (phi[:, -2] - phi[:, -1]) / dx2
    lap[1:-1, :] += (phi[2:, :] - 2.0 * phi[1:-1, :] + phi[:-2, :]) / dy2
    lap[0, :] += (phi[1, :] - phi[0, :]) / dy2
    lap[-1, :] += (phi[-2, :] - phi[-1, :]) / dy2
    return lap


if njit is not None:
    # Loop form of the same stencil (cell for cell identical arithmetic,
    # checked by test), avoiding the slice temporaries on the hot path.

    @njit(cache=True)
    def _laplacian(phi, dx, dy):  # pragma: no cover
        ny, nx = phi.shape
        dx2 = dx * dx
        dy2 = dy * dy
        lap = np.empty_like(phi)
        for j in range(ny):
            for i in range(nx):
                if i == 0:
                    vx = (phi[j, 1] - phi[j, 0]) / dx2
                elif i == nx - 1:
                    vx = (phi[j, nx - 2] - phi[j, nx - 1]) / dx2
                else:
                    vx = (phi[j, i + 1] - 2.0 * phi[j, i] + phi[j, i - 1]) / dx2
                if j == 0:
                    vy = (phi[1, i] - phi[0, i]) / dy2
                elif j == ny - 1:
                    vy = (phi[ny - 2, i] - phi[ny - 1, i]) / dy2
                else:
                    vy = (phi[j + 1, i] - 2.0 * phi[j, i] + phi[j - 1, i]) / dy2
                lap[j, i] = vx + vy
        return lap

else:
    _laplacian = _laplacian_arrays


def grad_energy(state: State, params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the discrete energy with respect to (phi, psi, phi_bc).

    The interior components carry the cell measure dx*dy and the boundary
    component carries dx, matching the flat-vector layout of the state.  The
    substrate coupling enters the phi gradient only through the first row.
    """
    grid = state.grid
    phi, psi, phi_bc = state.phi, state.psi, state.phi_bc
    dx, dy, area = grid.dx, grid.dy, grid.cell_area
    cn = params.cn

    phi_sq = phi * phi
    phi_sq_m1 = phi_sq - 1.0
    phi_sq_m1_sq = phi_sq_m1 * phi_sq_m1
    row_jump = phi[0, :] - phi_bc
    g_phi = (phi * (phi_sq_m1 * (1.0 - psi) + psi * (1.0 / params.ex))
             - cn ** 2 * _laplacian(phi, dx, dy)) * area
    g_phi[0, :] += 2.0 * cn ** 2 * row_jump / dy * dx

    if np.any(psi <= 0.0) or np.any(psi >= 1.0):
        logger.debug("grad_energy: psi touched an endpoint; log term clamped")
    psi_c = np.clip(psi, LOG_CLAMP_KAPPA, 1.0 - LOG_CLAMP_KAPPA)
    ad_density = phi_sq * (0.5 / params.ex) - 0.25 * phi_sq_m1_sq
    g_psi = (params.pi_coeff * np.log(psi_c / (1.0 - psi_c)) + ad_density) * area

    wall = WallPotential.from_params(params)
    g_bc = (-2.0 * cn ** 2 * row_jump / dy + cn * wall.prime(phi_bc)) * dx
    return g_phi, g_psi, g_bc


def hessian_norm_estimate(
    state: State,
    params: ModelParams,
    *,
    n_iter: int = 40,
    seed: int = 0,
    rel_tol: float = 1e-3,
) -> float:
    """Largest Hessian eigenvalue of the energy at ``state``, by power iteration.

    Hessian-vector products are taken by central differences of
    :func:`grad_energy` along (phi, psi, phi_bc) directions; momenta do not
    enter the energy.  Used as the default Lipschitz bound for the gradient
    step condition.
    """
    grid = state.grid
    rng = np.random.default_rng(seed)
    d_phi = rng.standard_normal((grid.ny, grid.nx))
    d_psi = rng.standard_normal((grid.ny, grid.nx))
    d_bc = rng.standard_normal(grid.nx)

    def normalize(a, b, c):
        s = math.sqrt(np.sum(a ** 2) + np.sum(b ** 2) + np.sum(c ** 2))
        return a / s, b / s, c / s

    def perturbed(sign: float, h: float):
        shifted = state.copy()
        shifted.phi = state.phi + sign * h * d_phi
        shifted.psi = state.psi + sign * h * d_psi
        shifted.phi_bc = state.phi_bc + sign * h * d_bc
        return shifted

    h = 1e-6
    estimate = 0.0
    d_phi, d_psi, d_bc = normalize(d_phi, d_psi, d_bc)
    for _ in range(n_iter):
        gp_p, gs_p, gb_p = grad_energy(perturbed(+1.0, h), params)
        gp_m, gs_m, gb_m = grad_energy(perturbed(-1.0, h), params)
        hd_phi = (gp_p - gp_m) / (2.0 * h)
        hd_psi = (gs_p - gs_m) / (2.0 * h)
        hd_bc = (gb_p - gb_m) / (2.0 * h)
        new_estimate = math.sqrt(np.sum(hd_phi ** 2) + np.sum(hd_psi ** 2) + np.sum(hd_bc ** 2))
        if new_estimate == 0.0:
            return 0.0
        d_phi, d_psi, d_bc = normalize(hd_phi, hd_psi, hd_bc)
        if abs(new_estimate - estimate) <= rel_tol * new_estimate:
            estimate = new_estimate
            break
        estimate = new_estimate
    return estimate
