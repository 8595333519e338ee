"""Proximal maps of the transport cost: closed forms, root solve, bounds."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfs_jko import transport_prox
from pfs_jko.grid_fields import Grid
from pfs_jko.model_config import ModelParams, SolverParams, mobility_phi, mobility_psi
from pfs_jko.transport_prox import (
    ProxWeights,
    distance_integrand,
    prox_boundary,
    prox_phi,
    prox_psi,
    transport_cost,
)

from conftest import random_state


@pytest.fixture
def weights() -> ProxWeights:
    return ProxWeights(lambda_eff_phi=0.02, lambda_eff_psi=0.005, lambda_eff_bc=0.4)


class TestProxWeights:
    def test_from_solver_scalar(self):
        grid = Grid(10, 5, 0.0, 1.0, 0.0, 0.25)
        w = ProxWeights.from_solver(SolverParams(lam=200.0), grid)
        assert w.lambda_eff_phi == pytest.approx(200.0 * grid.cell_area)
        assert w.lambda_eff_psi == pytest.approx(200.0 * grid.cell_area)
        assert w.lambda_eff_bc == pytest.approx(200.0 * grid.dx)

    def test_from_solver_split(self):
        grid = Grid(10, 5, 0.0, 1.0, 0.0, 0.25)
        w = ProxWeights.from_solver(SolverParams(lam=4000.0, lam_psi=100.0), grid)
        assert w.lambda_eff_phi == pytest.approx(4000.0 * grid.cell_area)
        assert w.lambda_eff_psi == pytest.approx(100.0 * grid.cell_area)
        assert w.lambda_eff_bc == pytest.approx(4000.0 * grid.dx)


class TestDistanceIntegrand:
    def test_cases(self):
        assert distance_integrand(1.0, (3.0, 4.0), 2.0) == pytest.approx(12.5)
        assert distance_integrand(0.0, (0.0, 0.0), 0.0) == 0.0
        assert distance_integrand(0.0, (1e-12, 0.0), 0.0) == math.inf
        assert distance_integrand(1.0, (0.0, 0.0), -1e-9) == math.inf


class TestProxPhi:
    def test_shrink_factor(self, weights):
        params = ModelParams(pe_phi=20.0)
        phi = np.array([[0.3, -0.7]])
        m = (np.array([[1.0, 2.0]]), np.array([[0.5, -1.0]]))
        out_phi, out_m = prox_phi(phi, m, weights, params)
        np.testing.assert_array_equal(out_phi, phi)
        factor = 0.05 / (0.05 + weights.lambda_eff_phi)
        np.testing.assert_allclose(out_m[0], m[0] * factor, rtol=1e-15)
        np.testing.assert_allclose(out_m[1], m[1] * factor, rtol=1e-15)

    def test_minimizes_per_cell_objective(self, weights):
        params = ModelParams(pe_phi=20.0)
        mob = mobility_phi(params)
        y = 0.37
        _, out_m = prox_phi(0.0, (np.array(y), np.array(0.0)), weights, params)
        q = float(out_m[0])

        def objective(val: float) -> float:
            return val ** 2 / (2.0 * mob) + (val - y) ** 2 / (2.0 * weights.lambda_eff_phi)

        assert objective(q) <= min(objective(q - 1e-7), objective(q + 1e-7))


def psi_prox_objective(t: float, psi: float, msq: float, lam: float, pe: float) -> float:
    """Partially minimized per-cell objective F(t); the momentum argument is
    eliminated through q = m M/(M + lam)."""
    mob = t * (1.0 - t) / pe
    return (t - psi) ** 2 / (2.0 * lam) + msq / (2.0 * (lam + mob))


def brute_force_psi(psi: float, msq: float, lam: float, pe: float) -> float:
    ts = np.linspace(0.0, 1.0, 40001)
    vals = psi_prox_objective(ts, psi, msq, lam, pe)
    return float(ts[np.argmin(vals)])


class TestProxPsi:
    @pytest.mark.parametrize(
        "psi, m",
        [
            (0.5, (0.0, 0.0)),
            (0.3, (0.2, -0.1)),
            (0.02, (0.05, 0.0)),
            (0.97, (-0.3, 0.4)),
            (-0.2, (0.1, 0.1)),
            (1.3, (0.2, 0.0)),
            (0.0, (0.5, 0.0)),
            (1.0, (0.0, 0.5)),
        ],
    )
    def test_against_brute_force(self, psi, m, weights):
        params = ModelParams(pe_psi=100.0)
        lam = weights.lambda_eff_psi
        out_psi, _ = prox_psi(np.array(psi), (np.array(m[0]), np.array(m[1])),
                              weights, params)
        msq = m[0] ** 2 + m[1] ** 2
        want = brute_force_psi(psi, msq, lam, params.pe_psi)
        assert float(out_psi) == pytest.approx(want, abs=1e-4)

    def test_momenta_follow_the_root(self, weights):
        params = ModelParams(pe_psi=100.0)
        psi = np.array([[0.4, 0.6]])
        m = (np.array([[0.3, -0.2]]), np.array([[0.1, 0.25]]))
        out_psi, out_m = prox_psi(psi, m, weights, params)
        mob = mobility_psi(params, out_psi)
        factor = mob / (mob + weights.lambda_eff_psi)
        np.testing.assert_allclose(out_m[0], m[0] * factor, rtol=1e-10)
        np.testing.assert_allclose(out_m[1], m[1] * factor, rtol=1e-10)

    def test_endpoint_momenta_vanish(self, weights):
        params = ModelParams(pe_psi=100.0)
        psi = np.array([-0.5, 1.5])
        m = (np.array([0.2, 0.2]), np.array([0.0, 0.0]))
        out_psi, out_m = prox_psi(psi, m, weights, params)
        np.testing.assert_array_equal(out_psi, [0.0, 1.0])
        np.testing.assert_array_equal(out_m[0], [0.0, 0.0])

    def test_endpoint_thresholds(self, weights):
        # f(0) >= 0 exactly when psi <= -|m|^2 / (2 lam pe).
        params = ModelParams(pe_psi=100.0)
        lam = weights.lambda_eff_psi
        msq = 0.04
        threshold = -msq / (2.0 * lam * params.pe_psi)
        below, _ = prox_psi(np.array(threshold - 1e-9), (np.array(0.2), np.array(0.0)),
                            weights, params)
        above, _ = prox_psi(np.array(threshold + 1e-9), (np.array(0.2), np.array(0.0)),
                            weights, params)
        assert float(below) == 0.0
        assert 0.0 < float(above) < 1.0

    def test_no_momentum_is_identity_on_the_box(self, weights):
        params = ModelParams(pe_psi=100.0)
        psi = np.array([0.0, 0.25, 1.0])
        zero = np.zeros(3)
        out_psi, _ = prox_psi(psi, (zero, zero), weights, params)
        np.testing.assert_allclose(out_psi, psi, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        psi=st.floats(-3.0, 4.0),
        mx=st.floats(-5.0, 5.0),
        my=st.floats(-5.0, 5.0),
        lam=st.floats(1e-5, 10.0),
    )
    def test_output_always_in_unit_box(self, psi, mx, my, lam):
        params = ModelParams(pe_psi=100.0)
        w = ProxWeights(lambda_eff_phi=lam, lambda_eff_psi=lam, lambda_eff_bc=lam)
        out_psi, out_m = prox_psi(np.array(psi), (np.array(mx), np.array(my)), w, params)
        assert 0.0 <= float(out_psi) <= 1.0
        assert np.all(np.isfinite(out_m[0])) and np.all(np.isfinite(out_m[1]))

    @settings(max_examples=60, deadline=None)
    @given(
        psi=st.floats(0.05, 0.95),
        mx=st.floats(-1.0, 1.0),
        lam=st.floats(1e-4, 1.0),
    )
    def test_interior_root_is_stationary(self, psi, mx, lam):
        params = ModelParams(pe_psi=100.0)
        w = ProxWeights(lambda_eff_phi=lam, lambda_eff_psi=lam, lambda_eff_bc=lam)
        out_psi, _ = prox_psi(np.array(psi), (np.array(mx), np.array(0.0)), w, params)
        t = float(out_psi)
        if 0.0 < t < 1.0:
            f0 = psi_prox_objective(t, psi, mx ** 2, lam, params.pe_psi)
            assert f0 <= psi_prox_objective(min(t + 1e-6, 1.0), psi, mx ** 2, lam,
                                            params.pe_psi) + 1e-14
            assert f0 <= psi_prox_objective(max(t - 1e-6, 0.0), psi, mx ** 2, lam,
                                            params.pe_psi) + 1e-14

    def test_compiled_kernel_matches_vectorized_path(self, rng):
        if transport_prox._prox_psi_kernel is None:
            pytest.skip("compiled kernel unavailable")
        params = ModelParams(pe_psi=100.0)
        w = ProxWeights(lambda_eff_phi=0.01, lambda_eff_psi=0.004, lambda_eff_bc=1.0)
        psi = rng.uniform(-0.5, 1.5, size=(17, 13))
        mx = rng.uniform(-0.3, 0.3, size=(17, 13))
        my = rng.uniform(-0.3, 0.3, size=(17, 13))
        got_psi, got_m = prox_psi(psi, (mx, my), w, params)
        want_psi, want_m = transport_prox._prox_psi_arrays(
            psi, mx, my, w.lambda_eff_psi, params.pe_psi
        )
        # Per-lane vs worst-lane Newton stopping leaves room at the 1e-13 step
        # tolerance; both meet it.
        np.testing.assert_allclose(got_psi, want_psi, atol=1e-12)
        np.testing.assert_allclose(got_m[0], want_m[0], atol=1e-12)
        np.testing.assert_allclose(got_m[1], want_m[1], atol=1e-12)


class TestProxBoundary:
    def test_closed_form_and_stationarity(self, weights):
        params = ModelParams(pe_s=1.0 / 500.0)
        y = np.array([0.2, -0.8])
        anchor = np.array([0.5, -0.5])
        out = prox_boundary(y, anchor, weights, params)
        a = weights.lambda_eff_bc * params.pe_s
        np.testing.assert_allclose(out, (y + a * anchor) / (1.0 + a), rtol=1e-15)

        def objective(x: float, yi: float, ai: float) -> float:
            return (0.5 * params.pe_s * (x - ai) ** 2
                    + (x - yi) ** 2 / (2.0 * weights.lambda_eff_bc))

        for xi, yi, ai in zip(out, y, anchor):
            base = objective(xi, yi, ai)
            assert base <= objective(xi + 1e-7, yi, ai)
            assert base <= objective(xi - 1e-7, yi, ai)


class TestTransportCost:
    def test_matches_hand_formula(self, grid_small, rng):
        params = ModelParams(pe_phi=20.0, pe_psi=100.0, pe_s=1e-3)
        w = ProxWeights(1.0, 1.0, 1.0)
        u = random_state(grid_small, rng)
        anchor = rng.standard_normal(grid_small.nx)
        got = transport_cost(u, anchor, w, params)

        m_phi = mobility_phi(params)
        mob = mobility_psi(params, u.psi)
        want = 0.5 * grid_small.cell_area * (
            float(np.sum((u.m_phi_x ** 2 + u.m_phi_y ** 2) / m_phi))
            + float(np.sum((u.m_psi_x ** 2 + u.m_psi_y ** 2) / mob))
        ) + 0.5 * params.pe_s * grid_small.dx * float(np.sum((u.phi_bc - anchor) ** 2))
        assert got == pytest.approx(want, rel=1e-12)

    def test_momentum_on_dead_mobility_is_infinite(self, grid_small, rng):
        params = ModelParams()
        w = ProxWeights(1.0, 1.0, 1.0)
        u = random_state(grid_small, rng)
        u.psi[0, 0] = 0.0
        u.m_psi_x[0, 0] = 0.1
        assert transport_cost(u, u.phi_bc, w, params) == math.inf

    def test_resting_state_costs_nothing(self, grid_small, rng):
        params = ModelParams()
        w = ProxWeights(1.0, 1.0, 1.0)
        u = random_state(grid_small, rng, momenta=False)
        u.psi[0, 0] = 0.0  # dead mobility without momentum is fine
        assert transport_cost(u, u.phi_bc, w, params) == pytest.approx(0.0, abs=1e-15)
