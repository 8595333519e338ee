"""Uniform cell-centered grid, fields, composite state vectors, and initial data.

Fields are numpy arrays of shape ``(ny, nx)`` indexed ``[j, i]`` with ``i``
along x; flattening in C order therefore gives the x-fastest layout assumed by
the flat-vector forms of the state and of the constraint operator.  Row
``[0, :]`` sits next to the substrate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_config import ConfigError

Field = np.ndarray  # shape (ny, nx), one value per cell center


@dataclass(frozen=True)
class Grid:
    """Uniform subdivision of [a, b] x [c, d] into nx*ny cells."""

    nx: int
    ny: int
    a: float = 0.0
    b: float = 1.0
    c: float = 0.0
    d: float = 1.0

    def __post_init__(self) -> None:
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"need at least 2 cells per direction, got {self.nx}x{self.ny}")
        if not (self.b > self.a and self.d > self.c):
            raise ConfigError(
                f"empty domain [{self.a}, {self.b}] x [{self.c}, {self.d}]"
            )

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.nx

    @property
    def dy(self) -> float:
        return (self.d - self.c) / self.ny

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def x_centers(self) -> np.ndarray:
        return self.a + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.c + (np.arange(self.ny) + 0.5) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinate arrays X, Y of shape (ny, nx)."""
        return np.meshgrid(self.x_centers(), self.y_centers())


def _check_field(grid: Grid, f: Field, name: str) -> None:
    if f.shape != (grid.ny, grid.nx):
        raise ValueError(f"{name} has shape {f.shape}, expected {(grid.ny, grid.nx)}")


@dataclass
class State:
    """Primal unknown u = (phi, m_phi; psi, m_psi; phi_bc), total length 6N + nx."""

    grid: Grid
    phi: Field
    m_phi_x: Field
    m_phi_y: Field
    psi: Field
    m_psi_x: Field
    m_psi_y: Field
    phi_bc: np.ndarray  # (nx,), substrate boundary values of phi

    def __post_init__(self) -> None:
        for name in ("phi", "m_phi_x", "m_phi_y", "psi", "m_psi_x", "m_psi_y"):
            _check_field(self.grid, getattr(self, name), name)
        if self.phi_bc.shape != (self.grid.nx,):
            raise ValueError(f"phi_bc has shape {self.phi_bc.shape}, expected ({self.grid.nx},)")

    @classmethod
    def from_fields(cls, grid: Grid, phi: Field, psi: Field, phi_bc: np.ndarray) -> "State":
        """State with the given fields and zero momenta (the fresh-step initial guess)."""
        zero = lambda: np.zeros((grid.ny, grid.nx))
        return cls(grid, np.array(phi, dtype=float), zero(), zero(),
                   np.array(psi, dtype=float), zero(), zero(),
                   np.array(phi_bc, dtype=float))

    def copy(self) -> "State":
        return State(self.grid, self.phi.copy(), self.m_phi_x.copy(), self.m_phi_y.copy(),
                     self.psi.copy(), self.m_psi_x.copy(), self.m_psi_y.copy(),
                     self.phi_bc.copy())

    def pack(self) -> np.ndarray:
        """Flatten to the x-fastest layout (phi, m_phi_x, m_phi_y, psi, m_psi_x, m_psi_y, phi_bc)."""
        return np.concatenate([
            self.phi.ravel(), self.m_phi_x.ravel(), self.m_phi_y.ravel(),
            self.psi.ravel(), self.m_psi_x.ravel(), self.m_psi_y.ravel(),
            self.phi_bc,
        ])

    @classmethod
    def unpack(cls, grid: Grid, vec: np.ndarray) -> "State":
        n = grid.n
        if vec.shape != (6 * n + grid.nx,):
            raise ValueError(f"flat state has length {vec.shape}, expected {6 * n + grid.nx}")
        shape = (grid.ny, grid.nx)
        blocks = [vec[k * n:(k + 1) * n].reshape(shape).copy() for k in range(6)]
        return cls(grid, *blocks, vec[6 * n:].copy())


@dataclass
class DualState:
    """Dual variable with one grid-shaped block per continuity equation."""

    grid: Grid
    block_phi: Field
    block_psi: Field

    def __post_init__(self) -> None:
        _check_field(self.grid, self.block_phi, "block_phi")
        _check_field(self.grid, self.block_psi, "block_psi")

    @classmethod
    def zeros(cls, grid: Grid) -> "DualState":
        return cls(grid, np.zeros((grid.ny, grid.nx)), np.zeros((grid.ny, grid.nx)))

    def copy(self) -> "DualState":
        return DualState(self.grid, self.block_phi.copy(), self.block_psi.copy())

    def pack(self) -> np.ndarray:
        return np.concatenate([self.block_phi.ravel(), self.block_psi.ravel()])

    @classmethod
    def unpack(cls, grid: Grid, vec: np.ndarray) -> "DualState":
        n = grid.n
        if vec.shape != (2 * n,):
            raise ValueError(f"flat dual has length {vec.shape}, expected {2 * n}")
        shape = (grid.ny, grid.nx)
        return cls(grid, vec[:n].reshape(shape).copy(), vec[n:].reshape(shape).copy())

    def norm(self) -> float:
        """Euclidean norm over both blocks."""
        return float(np.sqrt(np.sum(self.block_phi ** 2) + np.sum(self.block_psi ** 2)))


# --- reductions -----------------------------------------------------------

def mass(f: Field, grid: Grid) -> float:
    """Cell-measure weighted total, dx*dy * sum_ij f_ij."""
    return grid.cell_area * float(np.sum(f))


def linf_diff(f: Field, g: Field) -> float:
    return float(np.max(np.abs(f - g)))


def min_max(f: Field) -> tuple[float, float]:
    return float(np.min(f)), float(np.max(f))


# --- initial data ---------------------------------------------------------

def tanh_droplet_ic(
    grid: Grid,
    centers,
    *,
    cn: float,
    radius: float | None = None,
    offset: float | None = None,
    at_y0: bool = False,
) -> np.ndarray:
    """Smoothed droplet indicator built from tanh profiles around each center.

    Exactly one of ``radius``/``offset`` selects the profile argument:
    ``tanh((radius - d_k)/(sqrt(2) cn))`` or ``tanh(offset - d_k/(sqrt(2) cn))``
    where ``d_k`` is the distance to center k.  The profiles are combined as
    ``(k - 1) + sum_k``, which is +1 inside any droplet and -1 outside all of
    them.  With ``at_y0`` the profile is sampled on the substrate (y = 0)
    instead of at cell centers, giving the initial boundary values.
    """
    if (radius is None) == (offset is None):
        raise ConfigError("specify exactly one of radius= or offset=")
    if at_y0:
        x = grid.x_centers()
        y = np.zeros_like(x)
    else:
        x, y = grid.mesh()
    width = math.sqrt(2.0) * cn
    total = np.full_like(x, float(len(centers) - 1))
    for cx, cy in centers:
        d = np.hypot(x - cx, y - cy)
        if radius is not None:
            total += np.tanh((radius - d) / width)
        else:
            total += np.tanh(offset - d / width)
    return total


def film_ic(
    grid: Grid,
    *,
    half_length: float,
    height: float,
    cn: float,
    center_x: float = 0.0,
    at_y0: bool = False,
) -> np.ndarray:
    """Tanh-smoothed indicator of a flat film sitting on the substrate.

    The film is the slab |x - center_x| <= half_length, 0 <= y <= height.  The
    profile is tanh(-sd(x, y)/(sqrt(2) cn)) with sd the signed distance (negative
    inside) to the rectangle |x - center_x| <= half_length, |y| <= height; the
    mirroring across y = 0 keeps the substrate side from becoming an interface.
    """
    if at_y0:
        x = grid.x_centers()
        y = np.zeros_like(x)
    else:
        x, y = grid.mesh()
    qx = np.abs(x - center_x) - half_length
    qy = np.abs(y) - height
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    sd = outside + inside
    return np.tanh(-sd / (math.sqrt(2.0) * cn))


def random_uniform_ic(grid: Grid, mean: float, amplitude: float, seed: int) -> Field:
    """mean + amplitude * xi with xi ~ U[0, 1) per cell, from a seeded 64-bit PRNG."""
    rng = np.random.default_rng(seed)
    return mean + amplitude * rng.random((grid.ny, grid.nx))


# --- snapshot export ------------------------------------------------------

def write_csv_snapshot(path: str | Path, grid: Grid, f: Field) -> None:
    """Write one row per cell with header ``x,y,value``, x varying fastest."""
    _check_field(grid, f, "field")
    x, y = grid.mesh()
    data = np.column_stack([x.ravel(), y.ravel(), f.ravel()])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header="x,y,value", comments="")


def write_vtk_snapshot(path: str | Path, grid: Grid, f: Field, name: str = "value") -> None:
    """Legacy ASCII structured-points VTK file with the field as point data."""
    _check_field(grid, f, "field")
    lines = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {grid.nx} {grid.ny} 1",
        f"ORIGIN {grid.a + grid.dx / 2:.17g} {grid.c + grid.dy / 2:.17g} 0",
        f"SPACING {grid.dx:.17g} {grid.dy:.17g} 1",
        f"POINT_DATA {grid.n}",
        f"SCALARS {name} double",
        "LOOKUP_TABLE default",
    ]
    lines.extend(f"{v:.17g}" for v in f.ravel())
    Path(path).write_text("\n".join(lines) + "\n")
