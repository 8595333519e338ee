"""Energy decomposition and the exactness of its discrete gradient."""

from __future__ import annotations

import math

import numpy as np
import pytest

from pfs_jko import energy
from pfs_jko.energy import (
    LOG_CLAMP_KAPPA,
    EnergyBreakdown,
    energy_and_grad,
    grad_energy,
    hessian_norm_estimate,
    total_energy,
)
from pfs_jko.grid_fields import Grid, State
from pfs_jko.model_config import ModelParams
from pfs_jko.wall_boundary import WallPotential

from conftest import random_state


def loop_energy(state: State, params: ModelParams) -> EnergyBreakdown:
    """Scalar-loop re-evaluation of the energy, written against the formulas
    rather than the vectorized code."""
    g = state.grid
    phi, psi, bc = state.phi, state.psi, state.phi_bc
    dx, dy, area = g.dx, g.dy, g.cell_area
    cn = params.cn

    f_gl = 0.0
    for j in range(g.ny):
        for i in range(g.nx - 1):
            f_gl += 0.5 * cn ** 2 * ((phi[j, i + 1] - phi[j, i]) / dx) ** 2 * area
    for j in range(g.ny - 1):
        for i in range(g.nx):
            f_gl += 0.5 * cn ** 2 * ((phi[j + 1, i] - phi[j, i]) / dy) ** 2 * area
    for i in range(g.nx):
        f_gl += cn ** 2 * (dx / dy) * (phi[0, i] - bc[i]) ** 2
    for j in range(g.ny):
        for i in range(g.nx):
            f_gl += 0.25 * (phi[j, i] ** 2 - 1.0) ** 2 * area

    f_sur = 0.0
    for j in range(g.ny):
        for i in range(g.nx):
            p = psi[j, i]
            ent = 0.0
            if p > 0.0:
                ent += p * math.log(p)
            if p < 1.0:
                ent += (1.0 - p) * math.log(1.0 - p)
            f_sur += params.pi_coeff * ent * area

    f_ad = 0.0
    for j in range(g.ny):
        for i in range(g.nx):
            f_ad += (psi[j, i] * phi[j, i] ** 2 / (2.0 * params.ex)
                     - 0.25 * psi[j, i] * (phi[j, i] ** 2 - 1.0) ** 2) * area

    wall = WallPotential.from_params(params)
    f_wf = 0.0
    for i in range(g.nx):
        f_wf += cn * float(wall.value(bc[i])) * g.dx

    return EnergyBreakdown(f_gl, f_sur, f_ad, f_wf)


class TestTotalEnergy:
    def test_matches_loop_oracle(self, grid_medium, params, rng):
        u = random_state(grid_medium, rng)
        got = total_energy(u, params)
        want = loop_energy(u, params)
        assert got.f_gl == pytest.approx(want.f_gl, rel=1e-13)
        assert got.f_sur == pytest.approx(want.f_sur, rel=1e-13)
        assert got.f_ad == pytest.approx(want.f_ad, rel=1e-13)
        assert got.f_wf == pytest.approx(want.f_wf, rel=1e-13)
        assert got.total == pytest.approx(want.total, rel=1e-13)

    def test_uniform_bulk_state_has_only_entropy(self):
        # phi = 1 everywhere (including the wall trace) at the neutral angle:
        # no gradients, no double well, no adsorption mismatch term.
        g = Grid(6, 4, 0.0, 1.0, 0.0, 0.5)
        params = ModelParams(cn=0.1, ex=1.0, theta_s=math.pi / 2.0)
        shape = (g.ny, g.nx)
        u = State.from_fields(g, np.ones(shape), np.full(shape, 0.5), np.ones(g.nx))
        e = total_energy(u, params)
        assert e.f_gl == pytest.approx(0.0, abs=1e-15)
        assert e.f_wf == pytest.approx(0.0, abs=1e-15)  # cos(pi/2) kills the wall term
        assert e.f_ad == pytest.approx(0.5 / 2.0 * 0.5, rel=1e-13)  # psi phi^2 / (2 ex)
        entropy = 0.5 * math.log(0.5) + 0.5 * math.log(0.5)
        assert e.f_sur == pytest.approx(params.pi_coeff * entropy * g.cell_area * g.n,
                                        rel=1e-13)

    def test_psi_outside_box_reports_infinite_entropy(self, grid_small, params):
        shape = (grid_small.ny, grid_small.nx)
        u = State.from_fields(grid_small, np.zeros(shape), np.full(shape, 0.5),
                              np.zeros(grid_small.nx))
        u.psi[0, 0] = -1e-9
        assert total_energy(u, params).f_sur == math.inf
        u.psi[0, 0] = 1.0 + 1e-9
        assert total_energy(u, params).f_sur == math.inf

    def test_psi_endpoints_are_finite(self, grid_small, params):
        shape = (grid_small.ny, grid_small.nx)
        u = State.from_fields(grid_small, np.zeros(shape), np.zeros(shape),
                              np.zeros(grid_small.nx))
        u.psi[1, 1] = 1.0
        e = total_energy(u, params)
        assert math.isfinite(e.f_sur)
        assert e.f_sur == pytest.approx(0.0, abs=1e-15)  # 0 log 0 = 0 at both ends


class TestGradEnergy:
    def test_matches_central_differences(self, grid_medium, params, rng):
        u = random_state(grid_medium, rng)
        g_phi, g_psi, g_bc = grad_energy(u, params)
        h = 1e-5

        def energy_of(phi, psi, bc):
            shifted = u.copy()
            shifted.phi, shifted.psi, shifted.phi_bc = phi, psi, bc
            return total_energy(shifted, params).total

        for j in range(grid_medium.ny):
            for i in range(grid_medium.nx):
                for block, grad in ((u.phi, g_phi), (u.psi, g_psi)):
                    saved = block[j, i]
                    block[j, i] = saved + h
                    e_plus = energy_of(u.phi, u.psi, u.phi_bc)
                    block[j, i] = saved - h
                    e_minus = energy_of(u.phi, u.psi, u.phi_bc)
                    block[j, i] = saved
                    fd = (e_plus - e_minus) / (2.0 * h)
                    assert grad[j, i] == pytest.approx(fd, rel=1e-6, abs=1e-10)
        for i in range(grid_medium.nx):
            saved = u.phi_bc[i]
            u.phi_bc[i] = saved + h
            e_plus = energy_of(u.phi, u.psi, u.phi_bc)
            u.phi_bc[i] = saved - h
            e_minus = energy_of(u.phi, u.psi, u.phi_bc)
            u.phi_bc[i] = saved
            fd = (e_plus - e_minus) / (2.0 * h)
            assert g_bc[i] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_directional_fd_error_is_second_order(self, grid_medium, params, rng):
        u = random_state(grid_medium, rng)
        g_phi, g_psi, g_bc = grad_energy(u, params)
        d_phi = rng.standard_normal(u.phi.shape)
        d_psi = 0.1 * rng.standard_normal(u.psi.shape)  # keep psi inside (0, 1)
        d_bc = rng.standard_normal(u.phi_bc.shape)
        exact = float(np.sum(g_phi * d_phi) + np.sum(g_psi * d_psi) + np.sum(g_bc * d_bc))

        def fd(h: float) -> float:
            plus, minus = u.copy(), u.copy()
            plus.phi = u.phi + h * d_phi
            plus.psi = u.psi + h * d_psi
            plus.phi_bc = u.phi_bc + h * d_bc
            minus.phi = u.phi - h * d_phi
            minus.psi = u.psi - h * d_psi
            minus.phi_bc = u.phi_bc - h * d_bc
            e_p = total_energy(plus, params).total
            e_m = total_energy(minus, params).total
            return (e_p - e_m) / (2.0 * h)

        h = 1e-3
        err_h = abs(fd(h) - exact)
        err_half = abs(fd(h / 2.0) - exact)
        order = math.log2(err_h / err_half)
        assert order >= 1.9

    def test_clamp_keeps_gradient_finite_at_endpoints(self, grid_small, params):
        shape = (grid_small.ny, grid_small.nx)
        u = State.from_fields(grid_small, np.zeros(shape), np.zeros(shape),
                              np.zeros(grid_small.nx))
        u.psi[0, 0] = 1.0
        _, g_psi, _ = grad_energy(u, params)
        assert np.all(np.isfinite(g_psi))
        # Clamped log magnitude: log(kappa / (1 - kappa)) ~ log(kappa).
        expect = params.pi_coeff * math.log(LOG_CLAMP_KAPPA) * grid_small.cell_area
        assert g_psi[1, 1] == pytest.approx(expect + (0.0 - 0.25) * grid_small.cell_area,
                                            rel=1e-12)

    def test_substrate_coupling_only_in_first_row(self, grid_small, params, rng):
        u = random_state(grid_small, rng)
        g_phi, _, _ = grad_energy(u, params)
        shifted = u.copy()
        shifted.phi_bc = u.phi_bc + 0.3
        g_phi2, _, _ = grad_energy(shifted, params)
        np.testing.assert_array_equal(g_phi[1:, :], g_phi2[1:, :])
        assert np.all(g_phi[0, :] != g_phi2[0, :])


class TestFusedEval:
    def test_bit_identical_to_separate_calls(self, grid_medium, rng):
        params = ModelParams(cn=0.05, theta_s=math.radians(60.0))
        u = random_state(grid_medium, rng)
        fused_e, (fp, fs, fb) = energy_and_grad(u, params)
        sep_e = total_energy(u, params)
        gp, gs, gb = grad_energy(u, params)
        assert fused_e == sep_e
        np.testing.assert_array_equal(fp, gp)
        np.testing.assert_array_equal(fs, gs)
        np.testing.assert_array_equal(fb, gb)

    def test_infinite_entropy_propagates(self, grid_small, params):
        shape = (grid_small.ny, grid_small.nx)
        u = State.from_fields(grid_small, np.zeros(shape), np.full(shape, 2.0),
                              np.zeros(grid_small.nx))
        e, grads = energy_and_grad(u, params)
        assert e.f_sur == math.inf
        assert all(np.all(np.isfinite(g)) for g in grads)


class TestHessianEstimate:
    def test_matches_dense_hessian_eigenvalue(self, params, rng):
        grid = Grid(4, 3, 0.0, 1.0, 0.0, 0.6)
        u = random_state(grid, rng, momenta=False)
        estimate = hessian_norm_estimate(u, params, n_iter=80, rel_tol=1e-6)

        n = grid.n
        dim = 2 * n + grid.nx

        def grad_flat(vec: np.ndarray) -> np.ndarray:
            s = u.copy()
            s.phi = vec[:n].reshape(grid.ny, grid.nx)
            s.psi = vec[n:2 * n].reshape(grid.ny, grid.nx)
            s.phi_bc = vec[2 * n:]
            gp, gs, gb = grad_energy(s, params)
            return np.concatenate([gp.ravel(), gs.ravel(), gb])

        base = np.concatenate([u.phi.ravel(), u.psi.ravel(), u.phi_bc])
        h = 1e-6
        hess = np.empty((dim, dim))
        for k in range(dim):
            e_k = np.zeros(dim)
            e_k[k] = h
            hess[:, k] = (grad_flat(base + e_k) - grad_flat(base - e_k)) / (2.0 * h)
        hess = 0.5 * (hess + hess.T)
        top = float(np.max(np.abs(np.linalg.eigvalsh(hess))))
        assert estimate == pytest.approx(top, rel=1e-3)


class TestLoopLaplacian:
    def test_paths_agree_exactly(self, grid_medium, rng):
        if energy.njit is None:
            pytest.skip("compiled stencil unavailable")
        phi = rng.standard_normal((grid_medium.ny, grid_medium.nx))
        got = energy._laplacian(phi, grid_medium.dx, grid_medium.dy)
        want = energy._laplacian_arrays(phi, grid_medium.dx, grid_medium.dy)
        np.testing.assert_array_equal(got, want)
