"""Matrix-free discrete continuity constraints A u = b and their adjoint.

Each block applies ``rho + div(m)`` with central differences and ghost
momenta reflected across the boundary, ``m_0 = -m_1``; summed over the grid
the momentum contributions telescope to zero, which is what conserves mass.
The boundary unknowns ``phi_bc`` correspond to zero columns of A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_fields import DualState, Grid, State

try:  # pragma: no cover - absence is exercised on minimal installs only
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _divergence_arrays(mx: np.ndarray, my: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Central-difference divergence with reflected (sign-flipped) ghosts."""
    out = np.empty_like(mx)
    out[:, 1:-1] = (mx[:, 2:] - mx[:, :-2]) / (2.0 * dx)
    out[:, 0] = (mx[:, 1] + mx[:, 0]) / (2.0 * dx)
    out[:, -1] = -(mx[:, -1] + mx[:, -2]) / (2.0 * dx)
    out[1:-1, :] += (my[2:, :] - my[:-2, :]) / (2.0 * dy)
    out[0, :] += (my[1, :] + my[0, :]) / (2.0 * dy)
    out[-1, :] += -(my[-1, :] + my[-2, :]) / (2.0 * dy)
    return out


def _divergence_adjoint_arrays(v: np.ndarray, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the divergence: a central difference of v with repeated
    (same-sign) edge ghosts, v_0 = v_1."""
    gx = np.empty_like(v)
    gx[:, 1:-1] = (v[:, :-2] - v[:, 2:]) / (2.0 * dx)
    gx[:, 0] = (v[:, 0] - v[:, 1]) / (2.0 * dx)
    gx[:, -1] = (v[:, -2] - v[:, -1]) / (2.0 * dx)
    gy = np.empty_like(v)
    gy[1:-1, :] = (v[:-2, :] - v[2:, :]) / (2.0 * dy)
    gy[0, :] = (v[0, :] - v[1, :]) / (2.0 * dy)
    gy[-1, :] = (v[-2, :] - v[-1, :]) / (2.0 * dy)
    return gx, gy


if njit is not None:
    # Loop forms of the same stencils, cell for cell the same arithmetic as
    # the slice versions (checked by test); they avoid the slice temporaries
    # on the solver's hot path.

    @njit(cache=True)
    def _divergence(mx, my, dx, dy):  # pragma: no cover
        ny, nx = mx.shape
        out = np.empty_like(mx)
        tdx = 2.0 * dx
        tdy = 2.0 * dy
        for j in range(ny):
            for i in range(nx):
                if i == 0:
                    vx = (mx[j, 1] + mx[j, 0]) / tdx
                elif i == nx - 1:
                    vx = -(mx[j, nx - 1] + mx[j, nx - 2]) / tdx
                else:
                    vx = (mx[j, i + 1] - mx[j, i - 1]) / tdx
                if j == 0:
                    vy = (my[1, i] + my[0, i]) / tdy
                elif j == ny - 1:
                    vy = -(my[ny - 1, i] + my[ny - 2, i]) / tdy
                else:
                    vy = (my[j + 1, i] - my[j - 1, i]) / tdy
                out[j, i] = vx + vy
        return out

    @njit(cache=True)
    def _divergence_adjoint(v, dx, dy):  # pragma: no cover
        ny, nx = v.shape
        gx = np.empty_like(v)
        gy = np.empty_like(v)
        tdx = 2.0 * dx
        tdy = 2.0 * dy
        for j in range(ny):
            for i in range(nx):
                if i == 0:
                    gx[j, i] = (v[j, 0] - v[j, 1]) / tdx
                elif i == nx - 1:
                    gx[j, i] = (v[j, nx - 2] - v[j, nx - 1]) / tdx
                else:
                    gx[j, i] = (v[j, i - 1] - v[j, i + 1]) / tdx
                if j == 0:
                    gy[j, i] = (v[0, i] - v[1, i]) / tdy
                elif j == ny - 1:
                    gy[j, i] = (v[ny - 2, i] - v[ny - 1, i]) / tdy
                else:
                    gy[j, i] = (v[j - 1, i] - v[j + 1, i]) / tdy
        return gx, gy

else:
    _divergence = _divergence_arrays
    _divergence_adjoint = _divergence_adjoint_arrays


@dataclass(frozen=True)
class ConstraintOperator:
    grid: Grid

    def apply(self, u: State) -> DualState:
        dx, dy = self.grid.dx, self.grid.dy
        return DualState(
            self.grid,
            u.phi + _divergence(u.m_phi_x, u.m_phi_y, dx, dy),
            u.psi + _divergence(u.m_psi_x, u.m_psi_y, dx, dy),
        )

    def apply_transpose(self, v: DualState) -> State:
        dx, dy = self.grid.dx, self.grid.dy
        gx_phi, gy_phi = _divergence_adjoint(v.block_phi, dx, dy)
        gx_psi, gy_psi = _divergence_adjoint(v.block_psi, dx, dy)
        return State(
            self.grid,
            v.block_phi.copy(), gx_phi, gy_phi,
            v.block_psi.copy(), gx_psi, gy_psi,
            np.zeros(self.grid.nx),
        )

    def build_b(self, prev: State) -> DualState:
        """Right-hand side: the previous-step fields."""
        return DualState(self.grid, prev.phi.copy(), prev.psi.copy())

    def residual(self, u: State, b: DualState) -> tuple[DualState, float]:
        au = self.apply(u)
        r = DualState(self.grid, au.block_phi - b.block_phi, au.block_psi - b.block_psi)
        return r, r.norm()
