"""Constraint operator versus a dense Kronecker-product construction."""

from __future__ import annotations

import numpy as np
import pytest

from pfs_jko import constraint_system
from pfs_jko.constraint_system import ConstraintOperator
from pfs_jko.grid_fields import DualState, Grid, State

from conftest import random_state


def dense_divergence_1d(n: int, h: float) -> np.ndarray:
    """Central difference with sign-flipped ghosts m_0 = -m_1, as a matrix."""
    d = np.zeros((n, n))
    for i in range(n):
        if 0 < i < n - 1:
            d[i, i + 1] = 1.0 / (2.0 * h)
            d[i, i - 1] = -1.0 / (2.0 * h)
        elif i == 0:
            d[i, 1] += 1.0 / (2.0 * h)
            d[i, 0] += 1.0 / (2.0 * h)
        else:
            d[i, n - 1] += -1.0 / (2.0 * h)
            d[i, n - 2] += -1.0 / (2.0 * h)
    return d


def dense_constraint_matrix(grid: Grid) -> np.ndarray:
    """A as a dense (2N, 6N + nx) matrix on the x-fastest flat layout."""
    n = grid.n
    eye_n = np.eye(n)
    div_x = np.kron(np.eye(grid.ny), dense_divergence_1d(grid.nx, grid.dx))
    div_y = np.kron(dense_divergence_1d(grid.ny, grid.dy), np.eye(grid.nx))
    zeros_bc = np.zeros((n, grid.nx))
    zeros_n = np.zeros((n, n))
    row_phi = np.hstack([eye_n, div_x, div_y, zeros_n, zeros_n, zeros_n, zeros_bc])
    row_psi = np.hstack([zeros_n, zeros_n, zeros_n, eye_n, div_x, div_y, zeros_bc])
    return np.vstack([row_phi, row_psi])


@pytest.fixture(params=[(4, 3), (5, 4), (8, 8)], ids=lambda s: f"{s[0]}x{s[1]}")
def dense_setup(request, rng):
    nx, ny = request.param
    grid = Grid(nx, ny, 0.0, 1.0, 0.0, 0.7)
    return grid, ConstraintOperator(grid), dense_constraint_matrix(grid)


class TestAgainstDense:
    def test_apply(self, dense_setup, rng):
        grid, op, a_dense = dense_setup
        u = random_state(grid, rng)
        got = op.apply(u).pack()
        want = a_dense @ u.pack()
        np.testing.assert_allclose(got, want, rtol=0.0, atol=1e-12)

    def test_apply_transpose(self, dense_setup, rng):
        grid, op, a_dense = dense_setup
        v = DualState(grid, rng.standard_normal((grid.ny, grid.nx)),
                      rng.standard_normal((grid.ny, grid.nx)))
        got = op.apply_transpose(v).pack()
        want = a_dense.T @ v.pack()
        np.testing.assert_allclose(got, want, rtol=0.0, atol=1e-12)

    def test_adjoint_identity(self, dense_setup, rng):
        grid, op, _ = dense_setup
        u = random_state(grid, rng)
        v = DualState(grid, rng.standard_normal((grid.ny, grid.nx)),
                      rng.standard_normal((grid.ny, grid.nx)))
        lhs = float(op.apply(u).pack() @ v.pack())
        rhs = float(u.pack() @ op.apply_transpose(v).pack())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_boundary_columns_are_zero(self, dense_setup):
        grid, _, a_dense = dense_setup
        assert a_dense.shape == (2 * grid.n, 6 * grid.n + grid.nx)
        assert not a_dense[:, -grid.nx:].any()


class TestMassTelescoping:
    def test_divergence_sums_to_zero(self, grid_medium, rng):
        # Column sums of the momentum blocks vanish: transport moves mass
        # around but never creates it.
        op = ConstraintOperator(grid_medium)
        u = random_state(grid_medium, rng)
        out = op.apply(u)
        moved_phi = float(np.sum(out.block_phi - u.phi))
        moved_psi = float(np.sum(out.block_psi - u.psi))
        assert moved_phi == pytest.approx(0.0, abs=1e-12)
        assert moved_psi == pytest.approx(0.0, abs=1e-12)


class TestRhsAndResidual:
    def test_build_b_copies_previous_fields(self, grid_small, rng):
        op = ConstraintOperator(grid_small)
        prev = random_state(grid_small, rng)
        b = op.build_b(prev)
        np.testing.assert_array_equal(b.block_phi, prev.phi)
        np.testing.assert_array_equal(b.block_psi, prev.psi)
        b.block_phi[0, 0] += 1.0
        assert prev.phi[0, 0] != b.block_phi[0, 0]

    def test_residual_norm(self, grid_small, rng):
        op = ConstraintOperator(grid_small)
        u = random_state(grid_small, rng)
        b = DualState(grid_small, rng.standard_normal((grid_small.ny, grid_small.nx)),
                      rng.standard_normal((grid_small.ny, grid_small.nx)))
        r, norm = op.residual(u, b)
        au = op.apply(u)
        np.testing.assert_allclose(r.block_phi, au.block_phi - b.block_phi, atol=1e-15)
        assert norm == pytest.approx(np.linalg.norm(r.pack()), rel=1e-13)

    def test_zero_momenta_residual_is_field_difference(self, grid_small, rng):
        op = ConstraintOperator(grid_small)
        prev = random_state(grid_small, rng, momenta=False)
        b = op.build_b(prev)
        _, norm = op.residual(prev, b)
        assert norm == pytest.approx(0.0, abs=1e-15)


class TestLoopStencils:
    """The compiled loop stencils must reproduce the slice stencils exactly."""

    def test_divergence_paths_agree(self, grid_small, rng):
        if constraint_system.njit is None:
            pytest.skip("compiled stencils unavailable")
        mx = rng.standard_normal((grid_small.ny, grid_small.nx))
        my = rng.standard_normal((grid_small.ny, grid_small.nx))
        got = constraint_system._divergence(mx, my, grid_small.dx, grid_small.dy)
        want = constraint_system._divergence_arrays(mx, my, grid_small.dx, grid_small.dy)
        np.testing.assert_array_equal(got, want)

    def test_adjoint_paths_agree(self, grid_small, rng):
        if constraint_system.njit is None:
            pytest.skip("compiled stencils unavailable")
        v = rng.standard_normal((grid_small.ny, grid_small.nx))
        gx, gy = constraint_system._divergence_adjoint(v, grid_small.dx, grid_small.dy)
        gx_w, gy_w = constraint_system._divergence_adjoint_arrays(v, grid_small.dx, grid_small.dy)
        np.testing.assert_array_equal(gx, gx_w)
        np.testing.assert_array_equal(gy, gy_w)
