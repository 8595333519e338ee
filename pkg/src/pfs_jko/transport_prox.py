"""Transport distance integrand and the componentwise primal proximal maps.

The nonsmooth objective part carries its quadrature measures: cell area on
the two transport sums, dx on the substrate penalty.  Folding those measures
into the proximal parameter gives per-cell subproblems with effective
parameters ``lambda * dx * dy`` (fields) and ``lambda * dx`` (boundary);
:class:`ProxWeights` records them.

The (psi, m_psi) prox is the bound-preservation mechanism: its psi component
is always in [0, 1], with the endpoints decided by the sign of the root
polynomial

    f(t) = (t - psi)(lambda + M(t))^2 - (lambda/2) M'(t) |m|^2,
    M(t) = t(1 - t)/pe_psi,

at t = 0 and t = 1, and the interior case solved by a bracketed Newton
iteration on the unique root in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid_fields import Grid, State
from .model_config import ModelParams, NumericalError, SolverParams, mobility_phi

try:  # pragma: no cover - absence is exercised on minimal installs only
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

NEWTON_EPS = 1e-9  # endpoint offset for interior Newton starting points


@dataclass(frozen=True)
class ProxWeights:
    lambda_eff_phi: float
    lambda_eff_psi: float
    lambda_eff_bc: float

    @classmethod
    def from_solver(cls, solver: SolverParams, grid: Grid) -> "ProxWeights":
        lam = solver.lam
        return cls(lam * grid.cell_area, solver.lam_psi_eff * grid.cell_area,
                   lam * grid.dx)


def distance_integrand(rho: float, m, mobility: float) -> float:
    """|m|^2 / M for M > 0; zero for (M, m) = (0, 0); +inf otherwise.

    ``rho`` is carried for signature symmetry; the mobility argument already
    encodes its value.
    """
    del rho
    msq = float(m[0]) ** 2 + float(m[1]) ** 2
    if mobility > 0.0:
        return msq / mobility
    if mobility == 0.0 and msq == 0.0:
        return 0.0
    return math.inf


def prox_phi(phi, m, weights: ProxWeights, params: ModelParams):
    """(phi, M_phi m / (M_phi + lambda)): the field passes through, momenta shrink."""
    m_phi = mobility_phi(params)
    factor = m_phi / (m_phi + weights.lambda_eff_phi)
    return phi, (m[0] * factor, m[1] * factor)


def _root_polynomial(t, psi, msq, lam, pe):
    mob = t * (1.0 - t) / pe
    mob_p = (1.0 - 2.0 * t) / pe
    return (t - psi) * (lam + mob) ** 2 - 0.5 * lam * mob_p * msq


def _root_polynomial_prime(t, psi, msq, lam, pe):
    mob = t * (1.0 - t) / pe
    mob_p = (1.0 - 2.0 * t) / pe
    # M'' = -2/pe, so the momentum term contributes +lam*msq/pe.
    return (lam + mob) ** 2 + 2.0 * (t - psi) * (lam + mob) * mob_p + lam * msq / pe


def _interior_root(psi, msq, lam, pe, max_iter=60):
    """Unique root of f in (0, 1), by Newton with a bisection safeguard.

    The caller guarantees f(0) < 0 < f(1), so the bracket (lo, hi) always
    contains the root and the fallback midpoint steps converge on their own.
    The clipped input is an excellent start: the root is psi plus a momentum
    correction of order lam * |m|^2.
    """
    x = np.clip(psi, NEWTON_EPS, 1.0 - NEWTON_EPS)
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    half_lam_msq = 0.5 * lam * msq
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(max_iter):
            mob = x * (1.0 - x) / pe
            mob_p = (1.0 - 2.0 * x) / pe
            shift = lam + mob
            diff = x - psi
            fx = diff * shift * shift - half_lam_msq * mob_p
            lo = np.where(fx < 0.0, x, lo)
            hi = np.where(fx > 0.0, x, hi)
            fpx = shift * (shift + 2.0 * diff * mob_p) + lam * msq / pe
            xn = x - fx / fpx
            # A lane whose Newton increment is below rounding has converged;
            # freeze it, or the bracket fallback would bisect it forever.
            stalled = xn == x
            bad = ~stalled & (~np.isfinite(xn) | (xn <= lo) | (xn >= hi) | (fpx <= 0.0))
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            if np.max(np.abs(xn - x)) <= 1e-13:
                return xn
            x = xn
    # Residual scale follows f': (lam + max M)^2 plus the momentum forcing.
    scale = (lam + 0.25 / pe) ** 2 + lam * float(np.max(msq)) / pe
    if np.max(np.abs(_root_polynomial(x, psi, msq, lam, pe))) > 1e-9 * scale:
        raise NumericalError(f"psi prox Newton did not converge in {max_iter} iterations")
    return x


if njit is not None:

    @njit(cache=True)
    def _prox_psi_kernel(psi, mx, my, lam, pe, out_psi, out_mx, out_my):  # pragma: no cover
        """Per-cell fusion of the endpoint tests, the bracketed Newton iteration
        and the momentum shrink; returns the count of lanes whose root did not
        meet the residual tolerance.  Compiled lazily and cached on disk."""
        eps = 1e-9
        failed = 0
        for i in range(psi.size):
            p = psi[i]
            a = mx[i]
            c = my[i]
            msq = a * a + c * c
            thr = msq / (2.0 * lam * pe)
            if p <= -thr:
                out_psi[i] = 0.0
                out_mx[i] = 0.0
                out_my[i] = 0.0
                continue
            if p >= 1.0 + thr:
                out_psi[i] = 1.0
                out_mx[i] = 0.0
                out_my[i] = 0.0
                continue
            x = p
            if x < eps:
                x = eps
            elif x > 1.0 - eps:
                x = 1.0 - eps
            lo = 0.0
            hi = 1.0
            half = 0.5 * lam * msq
            done = False
            for _ in range(60):
                mob = x * (1.0 - x) / pe
                mob_p = (1.0 - 2.0 * x) / pe
                shift = lam + mob
                diff = x - p
                fx = diff * shift * shift - half * mob_p
                if fx < 0.0:
                    lo = x
                elif fx > 0.0:
                    hi = x
                fpx = shift * (shift + 2.0 * diff * mob_p) + lam * msq / pe
                xn = x - fx / fpx
                if xn != x and (not math.isfinite(xn) or xn <= lo or xn >= hi or fpx <= 0.0):
                    xn = 0.5 * (lo + hi)
                if abs(xn - x) <= 1e-13:
                    x = xn
                    done = True
                    break
                x = xn
            if not done:
                scale = (lam + 0.25 / pe) ** 2 + lam * msq / pe
                mob = x * (1.0 - x) / pe
                fres = (x - p) * (lam + mob) ** 2 - half * ((1.0 - 2.0 * x) / pe)
                if abs(fres) > 1e-9 * scale:
                    failed += 1
            mob = x * (1.0 - x) / pe
            fac = mob / (mob + lam)
            out_psi[i] = x
            out_mx[i] = a * fac
            out_my[i] = c * fac
        return failed

else:
    _prox_psi_kernel = None


def _prox_psi_arrays(psi, mx, my, lam, pe):
    """Vectorized reference path; also the fallback when numba is absent."""
    msq = mx ** 2 + my ** 2
    at_zero = psi <= -msq / (2.0 * lam * pe)
    at_one = psi >= 1.0 + msq / (2.0 * lam * pe)
    interior = ~(at_zero | at_one)

    root = np.where(interior, np.clip(psi, 0.0, 1.0), np.where(at_one, 1.0, 0.0))
    if np.any(interior):
        if root.ndim == 0:
            root = np.asarray(_interior_root(psi, msq, lam, pe))
        else:
            root[interior] = _interior_root(psi[interior], msq[interior], lam, pe)

    mob = root * (1.0 - root) / pe
    factor = np.where(interior, mob / (mob + lam), 0.0)
    return root, (mx * factor, my * factor)


def prox_psi(psi, m, weights: ProxWeights, params: ModelParams):
    """Bound-preserving prox of the degenerate-mobility transport term.

    Endpoint decisions use the exact sign conditions f(0) >= 0 -> (0, 0) and
    f(1) <= 0 -> (1, 0); these reduce to thresholds -+|m|^2/(2 lambda pe_psi)
    on psi, carrying the slope 1/pe_psi of the mobility at its zeros.  The
    output psi lies in [0, 1] for any input.

    The compiled kernel stops each cell's Newton iteration individually while
    the vectorized path sweeps until the slowest cell converges, so the two
    can differ by the 1e-13 step tolerance; both meet the prox accuracy the
    scheme needs.
    """
    lam = weights.lambda_eff_psi
    pe = params.pe_psi
    psi = np.asarray(psi, dtype=float)
    mx = np.asarray(m[0], dtype=float)
    my = np.asarray(m[1], dtype=float)
    if _prox_psi_kernel is None:
        return _prox_psi_arrays(psi, mx, my, lam, pe)

    psi_b, mx_b, my_b = np.broadcast_arrays(psi, mx, my)
    shape = psi_b.shape
    out_psi = np.empty(psi_b.size)
    out_mx = np.empty(psi_b.size)
    out_my = np.empty(psi_b.size)
    failed = _prox_psi_kernel(
        np.ascontiguousarray(psi_b, dtype=float).ravel(),
        np.ascontiguousarray(mx_b, dtype=float).ravel(),
        np.ascontiguousarray(my_b, dtype=float).ravel(),
        lam, pe, out_psi, out_mx, out_my,
    )
    if failed:
        raise NumericalError(f"psi prox Newton did not converge on {failed} cells")
    return out_psi.reshape(shape), (out_mx.reshape(shape), out_my.reshape(shape))


def prox_boundary(phi_bc, anchor, weights: ProxWeights, params: ModelParams):
    """Exact prox of the anchored quadratic substrate penalty (componentwise)."""
    a = weights.lambda_eff_bc * params.pe_s
    return (phi_bc + a * anchor) / (1.0 + a)


def transport_cost(state: State, anchor, weights: ProxWeights, params: ModelParams) -> float:
    """The nonsmooth objective part at ``state``, with quadrature measures.

    (dx dy / 2) sum_cells [D(phi, m_phi) + D(psi, m_psi)] plus the substrate
    penalty (pe_s dx / 2) sum_i (phi_bc - anchor)^2; infinite when some
    momentum rides a vanished mobility.
    """
    grid = state.grid
    m_phi = mobility_phi(params)
    cost = float(np.sum(state.m_phi_x ** 2 + state.m_phi_y ** 2)) / m_phi

    msq = state.m_psi_x ** 2 + state.m_psi_y ** 2
    mob = state.psi * (1.0 - state.psi) / params.pe_psi
    live = mob > 0.0
    if np.any(~live & (msq > 0.0)) or np.any(mob < 0.0):
        return math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(live, msq / np.where(live, mob, 1.0), 0.0)
    cost += float(np.sum(ratio))

    penalty = params.pe_s * grid.dx * float(np.sum((state.phi_bc - anchor) ** 2))
    return 0.5 * (grid.cell_area * cost + penalty)
