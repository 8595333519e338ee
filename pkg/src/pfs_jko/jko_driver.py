"""Outer time loop: variational stepping, adaptivity, structure monitoring.

Each accepted step must satisfy the discrete structure-preservation
guarantees: free energy non-increasing (to solver tolerance), per-step mass
drift of phi and psi bounded by the constraint residual, and psi inside
[0, 1] exactly.  A violation halts the run with a :class:`StructureError`;
inner-solver non-convergence triggers up to ``max_retries`` step halvings
before the failure propagates.

Output files (all optional, controlled by ``RunConfig.out_dir``):

* diagnostics.csv — per-step scalar monitors, one row per accepted step;
* energy.csv — the energy breakdown subset of the same rows;
* solver_report.csv — inner-solver statistics per step;
* angles.csv — measured contact angle per step (when enabled);
* snap_t<time>.csv / _psi.csv (+ .vtk) — field snapshots at geometric times
  plus every configured time, plus the initial and final states.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .energy import ENERGY_CSV_HEADER, EnergyBreakdown, total_energy
from .grid_fields import (
    Field,
    Grid,
    State,
    mass,
    min_max,
    write_csv_snapshot,
    write_vtk_snapshot,
)
from .model_config import BcKind, ModelParams, SolverParams, TimeParams
from .pd_solver import (
    REPORT_CSV_HEADER,
    ConvergenceError,
    JkoProblem,
    SolveReport,
    solve_subproblem,
)
from .spectral import SpectralPlan
from .wall_boundary import solve_equilibrium_bc

logger = logging.getLogger(__name__)

DIAG_CSV_HEADER = ("t,dt,f_gl,f_sur,f_ad,f_wf,total,"
                   "mass_phi,mass_psi,psi_min,psi_max,iterations,residual")
ANGLE_CSV_HEADER = "t,angle_deg"


class StructureError(RuntimeError):
    """A structure-preservation monitor failed on an accepted step."""

    def __init__(self, kind: str, step: int, t: float, detail: str) -> None:
        super().__init__(f"structure violation ({kind}) at step {step}, t={t:.6g}: {detail}")
        self.kind = kind
        self.step = step
        self.t = t


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    solver: SolverParams
    time: TimeParams
    method: str = "prepd"
    out_dir: Path | None = None
    snapshot_times: tuple[float, ...] = ()
    write_vtk: bool = False
    measure_angles: bool = False
    keep_trace: bool = False
    max_retries: int = 5


@dataclass(frozen=True)
class DiagRow:
    t: float
    dt: float
    energy: EnergyBreakdown
    mass_phi: float
    mass_psi: float
    psi_min: float
    psi_max: float
    iterations: int
    residual: float

    def csv_row(self) -> str:
        e = self.energy
        return (f"{self.t!r},{self.dt!r},{e.f_gl!r},{e.f_sur!r},{e.f_ad!r},"
                f"{e.f_wf!r},{e.total!r},{self.mass_phi!r},{self.mass_psi!r},"
                f"{self.psi_min!r},{self.psi_max!r},{self.iterations},{self.residual!r}")


@dataclass
class RunState:
    """Mutable loop state plus the accumulated per-step records."""

    state: State
    t: float = 0.0
    dt: float = 0.0
    step_index: int = 0
    e_prev: float = math.nan  # energy at the step before the current one
    t_prev: float = math.nan
    energy: EnergyBreakdown | None = None
    rows: list[DiagRow] = field(default_factory=list)
    reports: list[SolveReport] = field(default_factory=list)
    angles: list[tuple[float, float]] = field(default_factory=list)


def adaptive_dt(e_prev: float, e_curr: float, t_prev: float, t_curr: float,
                time: TimeParams) -> float:
    """Energy-rate controlled step: dt = max(dt_min, dt_max/sqrt(1 + beta r^2))."""
    if abs(e_prev) < 1e-300 or not t_curr > t_prev:
        return time.dt_min  # degenerate monitor
    r = (e_curr - e_prev) / (e_prev * (t_curr - t_prev))
    return max(time.dt_min, time.dt_max / math.sqrt(1.0 + time.beta * r * r))


def count_components(phi: Field, threshold: float = 0.0) -> int:
    """Number of 4-connected components of the super-level set {phi > threshold}."""
    _, num = ndimage.label(phi > threshold)
    return int(num)


def interface_points(phi: Field, grid: Grid) -> np.ndarray:
    """phi = 0 crossings, linearly interpolated along cell-center edges; (n, 2)."""
    x = grid.x_centers()
    y = grid.y_centers()
    pts: list[tuple[float, float]] = []
    a, bb = phi[:, :-1], phi[:, 1:]
    jj, ii = np.nonzero(a * bb < 0.0)
    for j, i in zip(jj, ii):
        frac = phi[j, i] / (phi[j, i] - phi[j, i + 1])
        pts.append((x[i] + frac * grid.dx, y[j]))
    a, bb = phi[:-1, :], phi[1:, :]
    jj, ii = np.nonzero(a * bb < 0.0)
    for j, i in zip(jj, ii):
        frac = phi[j, i] / (phi[j, i] - phi[j + 1, i])
        pts.append((x[i], y[j] + frac * grid.dy))
    if not pts:
        return np.empty((0, 2))
    return np.asarray(pts)


def measure_contact_angle(phi: Field, grid: Grid, *, y_max: float = 0.2) -> float:
    """Contact angle in degrees from a circle fit of the interface near the wall.

    Interface points with y in [2*dy, y_max] are fit to a circle
    (least squares on x^2 + y^2 = 2 xc x + 2 yc y + c); the tangent angle at
    y = 0 is arccos(-yc/r).  Returns nan when the fit is underdetermined.
    """
    pts = interface_points(phi, grid)
    if pts.shape[0] == 0:
        return math.nan
    band = (pts[:, 1] >= 2.0 * grid.dy) & (pts[:, 1] <= y_max)
    pts = pts[band]
    if pts.shape[0] < 3:
        return math.nan
    px, py = pts[:, 0], pts[:, 1]
    a_mat = np.column_stack([2.0 * px, 2.0 * py, np.ones_like(px)])
    rhs = px ** 2 + py ** 2
    (xc, yc, c), *_ = np.linalg.lstsq(a_mat, rhs, rcond=None)
    r_sq = c + xc ** 2 + yc ** 2
    if not r_sq > 0.0:
        return math.nan
    r = math.sqrt(r_sq)
    return math.degrees(math.acos(max(-1.0, min(1.0, -yc / r))))


def _check_structure(run: RunState, new_state: State, new_energy: EnergyBreakdown,
                     solver: SolverParams) -> None:
    step, t = run.step_index + 1, run.t + run.dt
    e_old = run.energy.total
    slack = 10.0 * solver.eps2 * abs(e_old)
    if not new_energy.total <= e_old + slack:
        raise StructureError("energy_increase", step, t,
                             f"{e_old!r} -> {new_energy.total!r} (slack {slack:.3e})")
    grid = new_state.grid
    # One step moves mass only through the constraint residual: the field-block
    # residual sums to the mass change, so |drift| <= area * sqrt(N) * delta.
    bound = grid.cell_area * math.sqrt(grid.n) * solver.delta * 1.01
    for name, old_f, new_f in (("phi", run.state.phi, new_state.phi),
                               ("psi", run.state.psi, new_state.psi)):
        drift = abs(mass(new_f, grid) - mass(old_f, grid))
        if not drift <= bound + 1e-12 * max(1.0, abs(mass(old_f, grid))):
            raise StructureError(f"mass_{name}", step, t,
                                 f"drift {drift:.3e} exceeds bound {bound:.3e}")
    lo, hi = min_max(new_state.psi)
    if lo < 0.0 or hi > 1.0:
        raise StructureError("psi_bounds", step, t, f"psi range [{lo!r}, {hi!r}]")


def step(run: RunState, cfg: RunConfig, plan: SpectralPlan) -> RunState:
    """Advance one accepted step (with step-halving retries), updating run in place."""
    dt = run.dt
    for attempt in range(cfg.max_retries + 1):
        problem = JkoProblem.build(run.state, cfg.model, cfg.solver, dt, plan=plan)
        try:
            new_state, report = solve_subproblem(
                problem, method=cfg.method, step_index=run.step_index + 1,
                keep_trace=cfg.keep_trace)
            break
        except ConvergenceError:
            if attempt == cfg.max_retries:
                raise
            dt *= 0.5
            logger.warning("step %d: solver did not converge, retrying with dt=%g",
                           run.step_index + 1, dt)
    run.dt = dt

    new_energy = total_energy(new_state, cfg.model)
    _check_structure(run, new_state, new_energy, cfg.solver)

    run.e_prev = run.energy.total
    run.t_prev = run.t
    run.state = new_state
    run.t += dt
    run.step_index += 1
    run.energy = new_energy
    run.reports.append(report)
    lo, hi = min_max(new_state.psi)
    run.rows.append(DiagRow(run.t, dt, new_energy,
                            mass(new_state.phi, new_state.grid),
                            mass(new_state.psi, new_state.grid),
                            lo, hi, report.iterations, report.residual))
    return run


class _Snapshots:
    """Geometric-in-t cadence plus configured times, with de-duplication."""

    def __init__(self, cfg: RunConfig, grid: Grid) -> None:
        self.cfg = cfg
        self.grid = grid
        self.pending = sorted(cfg.snapshot_times)
        self.next_geo: float | None = None
        self.last_t: float | None = None
        self.written: list[float] = []

    def take(self, t: float, state: State) -> None:
        if self.cfg.out_dir is None:
            return
        if self.last_t is not None and abs(t - self.last_t) <= 1e-12:
            return
        self.last_t = t
        self.written.append(t)
        tag = f"{t:.6g}"
        out = Path(self.cfg.out_dir)
        write_csv_snapshot(out / f"snap_t{tag}.csv", self.grid, state.phi)
        write_csv_snapshot(out / f"snap_t{tag}_psi.csv", self.grid, state.psi)
        if self.cfg.write_vtk:
            write_vtk_snapshot(out / f"snap_t{tag}.vtk", self.grid, state.phi, "phi")
            write_vtk_snapshot(out / f"snap_t{tag}_psi.vtk", self.grid, state.psi, "psi")

    def after_step(self, t: float, state: State) -> None:
        due = False
        if self.next_geo is None:
            self.next_geo = 2.0 * t
            due = True
        elif t + 1e-12 >= self.next_geo:
            due = True
            while self.next_geo <= t + 1e-12:
                self.next_geo *= 2.0
        while self.pending and t + 1e-12 >= self.pending[0]:
            self.pending.pop(0)
            due = True
        if due:
            self.take(t, state)


def _flush_outputs(run: RunState, cfg: RunConfig) -> None:
    if cfg.out_dir is None:
        return
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    diag = [DIAG_CSV_HEADER] + [row.csv_row() for row in run.rows]
    (out / "diagnostics.csv").write_text("\n".join(diag) + "\n")
    energy_rows = [ENERGY_CSV_HEADER] + [row.energy.csv_row(row.t) for row in run.rows]
    (out / "energy.csv").write_text("\n".join(energy_rows) + "\n")
    rep = [REPORT_CSV_HEADER] + [r.csv_row() for r in run.reports]
    (out / "solver_report.csv").write_text("\n".join(rep) + "\n")
    if cfg.measure_angles:
        ang = [ANGLE_CSV_HEADER] + [f"{t!r},{a!r}" for t, a in run.angles]
        (out / "angles.csv").write_text("\n".join(ang) + "\n")


def run(cfg: RunConfig, initial: State) -> RunState:
    """Integrate from the initial state to t_end, emitting records and files.

    Diagnostics files are flushed on success and on a structure violation;
    a propagated solver failure leaves none (snapshots may already exist).
    """
    grid = initial.grid
    plan = SpectralPlan(grid)
    state = initial.copy()
    if cfg.model.bc_kind is BcKind.EQUILIBRIUM:
        state.phi_bc = solve_equilibrium_bc(state.phi[0, :], grid, cfg.model)
    lo, hi = min_max(state.psi)
    if lo < 0.0 or hi > 1.0:
        raise StructureError("psi_bounds", 0, 0.0, f"initial psi range [{lo!r}, {hi!r}]")

    run_state = RunState(state=state)
    run_state.energy = total_energy(state, cfg.model)
    run_state.dt = cfg.time.dt_min
    run_state.rows.append(DiagRow(0.0, 0.0, run_state.energy,
                                  mass(state.phi, grid), mass(state.psi, grid),
                                  lo, hi, 0, 0.0))
    if cfg.out_dir is not None:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    snaps = _Snapshots(cfg, grid)
    snaps.take(0.0, state)
    if cfg.measure_angles:
        run_state.angles.append((0.0, measure_contact_angle(state.phi, grid)))

    try:
        while run_state.t < cfg.time.t_end - 1e-12:
            remaining = cfg.time.t_end - run_state.t
            run_state.dt = min(run_state.dt, remaining)
            step(run_state, cfg, plan)
            snaps.after_step(run_state.t, run_state.state)
            if cfg.measure_angles:
                run_state.angles.append(
                    (run_state.t, measure_contact_angle(run_state.state.phi, grid)))
            if cfg.time.adaptive:
                run_state.dt = adaptive_dt(run_state.e_prev, run_state.energy.total,
                                           run_state.t_prev, run_state.t, cfg.time)
            else:
                run_state.dt = cfg.time.dt_min
    except StructureError:
        _flush_outputs(run_state, cfg)
        snaps.take(run_state.t, run_state.state)
        raise

    snaps.take(run_state.t, run_state.state)
    _flush_outputs(run_state, cfg)
    logger.info("run complete: %d steps to t=%.6g, energy %.8g",
                run_state.step_index, run_state.t, run_state.energy.total)
    return run_state
