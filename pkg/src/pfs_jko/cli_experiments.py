"""Command-line entry point and the bundled experiment presets.

Each preset fixes the domain, grid shapes (desk and full resolution), physics
constants, time stepping, and initial data for one experiment family.  The
effective configuration is preset defaults, overlaid by an optional
``key=value`` config file, overlaid by command-line flags (flags win).  Every
run writes a manifest echoing the full configuration; re-running with
``--config manifest.txt`` reproduces the run bit for bit.

Exit codes: 0 success, 2 configuration error, 3 structure-preservation
violation, 4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .energy import hessian_norm_estimate
from .grid_fields import Grid, State, film_ic, random_uniform_ic, tanh_droplet_ic
from .jko_driver import RunConfig, RunState, StructureError, run
from .model_config import (
    ConfigError,
    ModelParams,
    NumericalError,
    SolverParams,
    TimeParams,
    apply_mapping,
    params_to_mapping,
    read_key_value,
    validate,
)
from .model_config import _parse_bool, _parse_float, _parse_int  # shared parsers
from .spectral import SpectralPlan

logger = logging.getLogger(__name__)

VERSION = "pfs-jko 0.1.0"
THREADS_ENV = "PFS_JKO_THREADS"

ACCURACY_DTS = (1.0 / 50, 1.0 / 100, 1.0 / 200, 1.0 / 400)
ACCURACY_CSV_HEADER = "dt,phi_err,phi_order,psi_err,psi_order"

# Per-arm step lambdas for the accuracy study, keyed by round(1/dt).  The
# surfactant weight has a step-size-dependent sweet spot (finer steps want a
# lighter dual weight, saturating near 100), and the reference arm dominates
# the total cost, so each arm carries its own probed pair instead of one
# compromise value.  A solver override in the config file or flags disables
# the table and applies to every arm unchanged.
_ACCURACY_ARM_SOLVERS: dict[int, tuple[float, float]] = {
    50: (4000.0, 1000.0),
    100: (8000.0, 150.0),
    200: (8000.0, 150.0),
    400: (8000.0, 150.0),
    3200: (16000.0, 120.0),
    100000: (16000.0, 120.0),
}


@dataclass(frozen=True)
class ExperimentPreset:
    """Bundled defaults for one experiment family.

    ``solver`` carries step-length lambdas tuned to the preset's grid spacing,
    interface width, and surfactant loading: the slowest inner-iteration mode
    contracts at a rate roughly proportional to lambda, up to the point where
    the momentum prox factors M/(M + lambda dx dy) over-damp the transport
    channel, so one global default would be far off optimum for most presets.
    ``lambda_psi`` runs the surfactant constraint block at a gentler weight
    than the phase block, which its much smaller mobility prefers.  Config
    files and flags still override both.
    """

    name: str
    domain: tuple[float, float, float, float]
    desk_shape: tuple[int, int]
    paper_shape: tuple[int, int]
    model: ModelParams
    solver: SolverParams
    time: TimeParams
    psi0_mean: float
    psi0_amplitude: float
    ic_kind: str  # "droplet" | "film"
    centers: tuple[tuple[float, float], ...] = ()
    radius: float | None = None
    offset: float | None = None
    film_half_length: float | None = None
    film_height: float | None = None
    snapshot_times: tuple[float, ...] = ()
    measure_angles: bool = False
    seed: int = 1


def _deg(value: float) -> float:
    return math.radians(value)


PRESETS: dict[str, ExperimentPreset] = {
    # Single droplet of radius 0.3, accuracy-study configuration.
    "accuracy": ExperimentPreset(
        name="accuracy",
        domain=(0.0, 1.0, 0.0, 0.5),
        desk_shape=(100, 50),
        paper_shape=(200, 100),
        model=ModelParams(cn=0.025, theta_s=_deg(120.0)),
        solver=SolverParams(lam=4000.0, lam_psi=400.0),
        time=TimeParams(dt_min=0.01, dt_max=0.01, t_end=0.1),
        psi0_mean=0.02,
        psi0_amplitude=0.001,
        ic_kind="droplet",
        centers=((0.5, 0.0),),
        radius=0.3,
    ),
    # The same droplet at a thin interface, run to short-time relaxation.
    "single_droplet": ExperimentPreset(
        name="single_droplet",
        domain=(0.0, 1.0, 0.0, 0.5),
        desk_shape=(100, 50),
        paper_shape=(200, 100),
        model=ModelParams(cn=0.01, theta_s=_deg(120.0)),
        solver=SolverParams(lam=2000.0, lam_psi=200.0),
        time=TimeParams(dt_min=0.01, dt_max=0.01, t_end=2.0),
        psi0_mean=0.02,
        psi0_amplitude=0.001,
        ic_kind="droplet",
        centers=((0.5, 0.0),),
        radius=0.3,
        snapshot_times=(0.5, 1.0, 2.0),
        measure_angles=True,
    ),
    # Two neighboring droplets that coalesce: the adaptive-stepping benchmark.
    "two_droplet_bench": ExperimentPreset(
        name="two_droplet_bench",
        domain=(0.0, 1.0, 0.0, 0.4),
        desk_shape=(100, 40),
        paper_shape=(200, 80),
        model=ModelParams(cn=0.01, theta_s=_deg(60.0)),
        solver=SolverParams(lam=4000.0, lam_psi=400.0),
        time=TimeParams(dt_min=0.01, dt_max=0.1, beta=1e4, t_end=50.0, adaptive=True),
        psi0_mean=0.07,
        psi0_amplitude=0.001,
        ic_kind="droplet",
        centers=((0.25, 0.0), (0.75, 0.0)),
        offset=10.0,
        snapshot_times=(25.0, 50.0),
    ),
    # Two droplets on a wider substrate; merging depends on the mean loading.
    "two_droplet_diffusion": ExperimentPreset(
        name="two_droplet_diffusion",
        domain=(0.0, 2.0, 0.0, 0.4),
        desk_shape=(200, 40),
        paper_shape=(400, 80),
        model=ModelParams(cn=0.01, theta_s=_deg(60.0)),
        solver=SolverParams(lam=2500.0, lam_psi=250.0),
        time=TimeParams(dt_min=0.01, dt_max=0.1, beta=1e4, t_end=15.0, adaptive=True),
        psi0_mean=0.07,
        psi0_amplitude=0.001,
        ic_kind="droplet",
        centers=((0.75, 0.0), (1.25, 0.0)),
        offset=10.0,
        snapshot_times=(5.0, 10.0, 15.0),
    ),
    "three_droplet": ExperimentPreset(
        name="three_droplet",
        domain=(0.0, 1.5, 0.0, 0.75),
        desk_shape=(150, 75),
        paper_shape=(300, 150),
        model=ModelParams(cn=0.01, theta_s=_deg(60.0)),
        solver=SolverParams(lam=2500.0, lam_psi=250.0),
        time=TimeParams(dt_min=0.01, dt_max=0.1, beta=1e4, t_end=2.0, adaptive=True),
        psi0_mean=0.02,
        psi0_amplitude=0.001,
        ic_kind="droplet",
        centers=((0.25, 0.0), (0.75, 0.0), (1.25, 0.0)),
        offset=10.0,
        snapshot_times=(1.0, 2.0),
    ),
    # Plate-shaped film whose retraction may pinch off, depending on height.
    "thin_film": ExperimentPreset(
        name="thin_film",
        domain=(-1.5, 1.5, 0.0, 0.5),
        desk_shape=(300, 100),
        paper_shape=(300, 100),
        model=ModelParams(cn=0.006, theta_s=_deg(120.0)),
        solver=SolverParams(lam=6000.0, lam_psi=600.0),
        time=TimeParams(dt_min=0.01, dt_max=0.1, beta=1e4, t_end=20.0, adaptive=True),
        psi0_mean=0.07,
        psi0_amplitude=0.0,
        ic_kind="film",
        film_half_length=1.25,
        film_height=0.03,
        snapshot_times=(15.0, 20.0),
    ),
}

ALIASES = {"two_droplet": "two_droplet_diffusion"}


def resolve_preset(name: str) -> ExperimentPreset:
    canonical = ALIASES.get(name, name)
    try:
        return PRESETS[canonical]
    except KeyError:
        known = sorted(PRESETS) + sorted(ALIASES)
        raise ConfigError(f"unknown experiment {name!r}, expected one of {known}") from None


@dataclass
class RunSetup:
    """Fully merged configuration of one run."""

    preset: ExperimentPreset
    model: ModelParams
    solver: SolverParams
    time: TimeParams
    nx: int
    ny: int
    seed: int
    psi0_mean: float
    psi0_amplitude: float
    film_height: float | None
    method: str = "prepd"
    vtk: bool = False
    paper_scale: bool = False
    measure_angles: bool = False
    snapshot_times: tuple[float, ...] = ()
    out_dir: Path | None = None


def _parse_times(text: str) -> tuple[float, ...]:
    items = [piece for piece in text.replace(";", ",").split(",") if piece.strip()]
    return tuple(_parse_float(piece) for piece in items)


def _parse_method(text: str) -> str:
    low = text.strip().lower()
    if low not in ("prepd", "pd3o"):
        raise ConfigError(f"unknown solver method {text!r}, expected prepd or pd3o")
    return low


# Run-level (non-physics) configuration keys and their parsers.
RUN_KEY_TABLE = {
    "experiment": str,
    "seed": _parse_int,
    "nx": _parse_int,
    "ny": _parse_int,
    "psi0_mean": _parse_float,
    "psi0_amplitude": _parse_float,
    "film_height": _parse_float,
    "solver_method": _parse_method,
    "vtk": _parse_bool,
    "paper_scale": _parse_bool,
    "measure_angles": _parse_bool,
    "snapshot_times": _parse_times,
}
RUN_KEYS = frozenset(RUN_KEY_TABLE)


def build_setup(preset: ExperimentPreset, raw: dict[str, str] | None = None) -> RunSetup:
    """Overlay preset defaults with a parsed config mapping (file layer)."""
    model, solver, time = preset.model, preset.solver, preset.time
    run_vals: dict[str, object] = {}
    if raw:
        model, solver, time = apply_mapping(raw, model, solver, time, foreign_keys=RUN_KEYS)
        for key, value in raw.items():
            if key in RUN_KEYS:
                run_vals[key] = RUN_KEY_TABLE[key](value)

    paper_scale = bool(run_vals.get("paper_scale", False))
    shape = preset.paper_shape if paper_scale else preset.desk_shape
    nx = int(run_vals.get("nx", shape[0]))
    ny = int(run_vals.get("ny", shape[1]))
    times = run_vals.get("snapshot_times", preset.snapshot_times)
    return RunSetup(
        preset=preset,
        model=model,
        solver=solver,
        time=time,
        nx=nx,
        ny=ny,
        seed=int(run_vals.get("seed", preset.seed)),
        psi0_mean=float(run_vals.get("psi0_mean", preset.psi0_mean)),
        psi0_amplitude=float(run_vals.get("psi0_amplitude", preset.psi0_amplitude)),
        film_height=run_vals.get("film_height", preset.film_height),
        method=str(run_vals.get("solver_method", "prepd")),
        vtk=bool(run_vals.get("vtk", False)),
        paper_scale=paper_scale,
        measure_angles=bool(run_vals.get("measure_angles", preset.measure_angles)),
        snapshot_times=tuple(times),
    )


def build_grid(setup: RunSetup) -> Grid:
    a, b, c, d = setup.preset.domain
    return Grid(setup.nx, setup.ny, a, b, c, d)


def build_initial_state(setup: RunSetup) -> State:
    """Phase field from the preset geometry, surfactant from the seeded PRNG."""
    grid = build_grid(setup)
    preset = setup.preset
    cn = setup.model.cn
    if preset.ic_kind == "droplet":
        phi = tanh_droplet_ic(grid, preset.centers, cn=cn,
                              radius=preset.radius, offset=preset.offset)
        phi_bc = tanh_droplet_ic(grid, preset.centers, cn=cn, radius=preset.radius,
                                 offset=preset.offset, at_y0=True)
    elif preset.ic_kind == "film":
        height = setup.film_height if setup.film_height is not None else preset.film_height
        phi = film_ic(grid, half_length=preset.film_half_length, height=height, cn=cn)
        phi_bc = film_ic(grid, half_length=preset.film_half_length, height=height,
                         cn=cn, at_y0=True)
    else:
        raise ConfigError(f"unknown initial-condition kind {preset.ic_kind!r}")
    psi = random_uniform_ic(grid, setup.psi0_mean, setup.psi0_amplitude, setup.seed)
    psi = np.clip(psi, 0.0, 1.0)
    return State.from_fields(grid, phi, psi, phi_bc)


def setup_to_mapping(setup: RunSetup) -> dict[str, str]:
    """Full configuration echo; parseable back through build_setup."""
    mapping = {"experiment": setup.preset.name}
    mapping.update(params_to_mapping(setup.model, setup.solver, setup.time))
    mapping.update({
        "seed": str(setup.seed),
        "nx": str(setup.nx),
        "ny": str(setup.ny),
        "psi0_mean": repr(setup.psi0_mean),
        "psi0_amplitude": repr(setup.psi0_amplitude),
        "solver_method": setup.method,
        "vtk": "true" if setup.vtk else "false",
        "paper_scale": "true" if setup.paper_scale else "false",
        "measure_angles": "true" if setup.measure_angles else "false",
    })
    if setup.film_height is not None:
        mapping["film_height"] = repr(setup.film_height)
    if setup.snapshot_times:
        mapping["snapshot_times"] = ",".join(repr(t) for t in setup.snapshot_times)
    return mapping


def write_manifest(path: Path, setup: RunSetup) -> None:
    lines = [f"# {VERSION}"]
    lines += [f"{key}={value}" for key, value in setup_to_mapping(setup).items()]
    path.write_text("\n".join(lines) + "\n")


def _run_config(setup: RunSetup) -> RunConfig:
    return RunConfig(
        model=setup.model,
        solver=setup.solver,
        time=setup.time,
        method=setup.method,
        out_dir=setup.out_dir,
        snapshot_times=setup.snapshot_times,
        write_vtk=setup.vtk,
        measure_angles=setup.measure_angles,
    )


def run_preset(setup: RunSetup) -> RunState:
    """Integrate one preset to its end time, writing all artifacts."""
    if setup.out_dir is not None:
        setup.out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(setup.out_dir / "manifest.txt", setup)
    initial = build_initial_state(setup)
    return run(_run_config(setup), initial)


def _validate_setup(setup: RunSetup) -> list[str]:
    """Parameter validation, including the scalar step bounds for pd3o runs."""
    if setup.method != "pd3o":
        return validate(setup.model, setup.solver, setup.time)
    plan = SpectralPlan(build_grid(setup))
    solver = setup.solver
    if solver.lipschitz_estimate is None:
        # Worst case over the run is the largest step the controller may take.
        lip = setup.time.dt_max * hessian_norm_estimate(
            build_initial_state(setup), setup.model)
        if lip > 0.0:
            solver = replace(solver, lipschitz_estimate=lip)
    return validate(setup.model, solver, setup.time,
                    lambda_max_aat=plan.lam_max, use_pd3o=True)


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            return max(1, min(n_jobs, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from exc
    return max(1, min(n_jobs, os.cpu_count() or 1))


def _accuracy_case(setup: RunSetup, dt: float, with_output: bool) -> tuple[np.ndarray, np.ndarray]:
    time = replace(setup.time, dt_min=dt, dt_max=dt, adaptive=False)
    solver = setup.solver
    arm = _ACCURACY_ARM_SOLVERS.get(round(1.0 / dt))
    if arm is not None and solver == setup.preset.solver:
        solver = replace(solver, lam=arm[0], lam_psi=arm[1])
    case = replace(setup, time=time, solver=solver,
                   out_dir=setup.out_dir if with_output else None)
    # Error-vs-dt measurements need the nominal dt exactly; retries that halve
    # the step would silently corrupt them, so fail loudly instead.
    cfg = replace(_run_config(case), max_retries=0)
    state = run(cfg, build_initial_state(case)).state
    return state.phi, state.psi


def run_accuracy_study(setup: RunSetup) -> list[tuple[float, float, float]]:
    """Fixed-step runs against a fine-step reference; returns (dt, err_phi, err_psi).

    The reference uses dt = 1e-5 at paper scale and 1/3200 at desk scale (for
    first-order stepping the finite reference biases the observed orders by
    less than 0.1 there); the reference run also emits the preset's
    diagnostics files.
    """
    ref_dt = 1e-5 if setup.paper_scale else 1.0 / 3200
    if setup.out_dir is not None:
        setup.out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(setup.out_dir / "manifest.txt", setup)

    jobs = [(dt, False) for dt in ACCURACY_DTS] + [(ref_dt, True)]
    workers = _worker_count(len(jobs))
    if workers == 1:
        fields = [_accuracy_case(setup, dt, flag) for dt, flag in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_accuracy_case, setup, dt, flag) for dt, flag in jobs]
            fields = [f.result() for f in futures]

    phi_ref, psi_ref = fields[-1]
    table = []
    for (dt, _), (phi, psi) in zip(jobs[:-1], fields[:-1]):
        err_phi = float(np.max(np.abs(phi - phi_ref)))
        err_psi = float(np.max(np.abs(psi - psi_ref)))
        table.append((dt, err_phi, err_psi))

    if setup.out_dir is not None:
        rows = [ACCURACY_CSV_HEADER]
        prev: tuple[float, float, float] | None = None
        for dt, err_phi, err_psi in table:
            if prev is None:
                op = opsi = math.nan
            else:
                op = math.log2(prev[1] / err_phi) / math.log2(prev[0] / dt)
                opsi = math.log2(prev[2] / err_psi) / math.log2(prev[0] / dt)
            rows.append(f"{dt!r},{err_phi!r},{op!r},{err_psi!r},{opsi!r}")
            prev = (dt, err_phi, err_psi)
        (setup.out_dir / "accuracy.csv").write_text("\n".join(rows) + "\n")
    return table


def observed_orders(table: list[tuple[float, float, float]]) -> tuple[list[float], list[float]]:
    """Pairwise convergence orders for (phi, psi) from an error table."""
    phi_orders, psi_orders = [], []
    for (dt0, ep0, es0), (dt1, ep1, es1) in zip(table[:-1], table[1:]):
        denom = math.log2(dt0 / dt1)
        phi_orders.append(math.log2(ep0 / ep1) / denom)
        psi_orders.append(math.log2(es0 / es1) / denom)
    return phi_orders, psi_orders


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfs-jko",
        description="Structure-preserving variational solver for droplet/surfactant "
                    "wetting dynamics.",
    )
    parser.add_argument("--experiment", help="preset name (see --list)")
    parser.add_argument("--list", action="store_true", help="list presets and exit")
    parser.add_argument("--config", type=Path, help="key=value overrides (file layer)")
    parser.add_argument("--out-dir", type=Path, help="output directory (default out_<name>)")
    parser.add_argument("--dt", type=float, help="fixed time step (disables adaptivity)")
    parser.add_argument("--adaptive", action="store_true", help="enable adaptive stepping")
    parser.add_argument("--paper-scale", action="store_true",
                        help="full printed resolution instead of desk scale")
    parser.add_argument("--solver", choices=["prepd", "pd3o"], help="inner solver")
    parser.add_argument("--dual-prox", choices=["exact", "inexact"],
                        help="dual proximal mode for the preconditioned solver")
    parser.add_argument("--seed", type=int, help="PRNG seed for the initial data")
    parser.add_argument("--vtk", action="store_true", help="also write VTK snapshots")
    return parser


def _merge_flags(setup: RunSetup, args: argparse.Namespace) -> RunSetup:
    model, solver, time = setup.model, setup.solver, setup.time
    if args.paper_scale and not setup.paper_scale:
        setup.paper_scale = True
        setup.nx, setup.ny = setup.preset.paper_shape
    if args.dt is not None:
        if not args.dt > 0.0:
            raise ConfigError(f"--dt must be positive, got {args.dt!r}")
        time = replace(time, dt_min=args.dt, dt_max=args.dt, adaptive=False)
    if args.adaptive:
        time = replace(time, adaptive=True)
    if args.solver is not None:
        setup.method = args.solver
    if args.dual_prox is not None:
        from .model_config import DualProxMode

        solver = replace(solver, dual_prox_mode=DualProxMode(args.dual_prox))
    if args.seed is not None:
        setup.seed = args.seed
    if args.vtk:
        setup.vtk = True
    setup.model, setup.solver, setup.time = model, solver, time
    return setup


def _main(argv: list[str] | None) -> int:
    args = build_parser().parse_args(argv)
    if args.list:
        for name in sorted(PRESETS):
            print(name)
        for alias, target in sorted(ALIASES.items()):
            print(f"{alias} (alias of {target})")
        return 0

    raw = read_key_value(args.config) if args.config is not None else None
    name = args.experiment or (raw or {}).get("experiment")
    if name is None:
        raise ConfigError("no experiment selected: pass --experiment or a config "
                          "file with an experiment= line")
    preset = resolve_preset(name)
    setup = build_setup(preset, raw)
    setup = _merge_flags(setup, args)
    setup.out_dir = args.out_dir if args.out_dir is not None else Path(f"out_{preset.name}")

    problems = _validate_setup(setup)
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))

    if preset.name == "accuracy":
        table = run_accuracy_study(setup)
        phi_orders, psi_orders = observed_orders(table)
        for (dt, ep, es) in table:
            print(f"dt={dt:<10.6g} phi_err={ep:.3e} psi_err={es:.3e}")
        print(f"observed orders: phi {['%.3f' % o for o in phi_orders]}, "
              f"psi {['%.3f' % o for o in psi_orders]}")
    else:
        result = run_preset(setup)
        print(f"{preset.name}: {result.step_index} steps to t={result.t:.6g}, "
              f"energy {result.energy.total:.8g}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("PFS_JKO_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _main(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StructureError as exc:
        print(f"structure-preservation violation: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:  # includes solver non-convergence
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
