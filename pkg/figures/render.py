#!/usr/bin/env python3
"""Render paper-style figures from the solver's CSV outputs.

This script is deliberately standalone: it talks to the simulation package
only through the documented CSV schemas, so it can be copied next to a pile
of result directories and run there.

Figure kinds and the columns they require:

* energy_curve  — energy.csv: t,f_gl,f_sur,f_ad,f_wf,total
* mass_curve    — diagnostics.csv: t,mass_phi,mass_psi
* dt_trace      — diagnostics.csv: t,dt
* convergence   — accuracy.csv: dt,phi_err,psi_err
* snapshot      — snap_t*.csv: x,y,value (cell-centered grid, x fastest)
* angle_vs_pi   — summary table: psi0,angle_deg with an optional label column
                  grouping rows into one curve per substrate

Usage: either a spec file (key=value lines: kind, input, output, plus the
options below) or flags::

    python render.py --kind energy_curve --input out/energy.csv --output e.png
    python render.py --spec figure.cfg

Options: title, dpi (default 150), annotate_angle (snapshot only).  The
computed annotations (fitted slopes, measured angle) are printed as
``key=value`` lines on stdout so they can be checked without parsing images.
Exit codes: 0 success, 2 bad spec or CSV schema.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

KINDS = ("energy_curve", "mass_curve", "dt_trace", "convergence", "snapshot",
         "angle_vs_pi")

REQUIRED_COLUMNS = {
    "energy_curve": ("t", "f_gl", "f_sur", "f_ad", "f_wf", "total"),
    "mass_curve": ("t", "mass_phi", "mass_psi"),
    "dt_trace": ("t", "dt"),
    "convergence": ("dt", "phi_err", "psi_err"),
    "snapshot": ("x", "y", "value"),
    "angle_vs_pi": ("psi0", "angle_deg"),
}


class SpecError(Exception):
    """Bad figure spec or an input CSV that does not match its schema."""


@dataclass
class FigureSpec:
    kind: str
    input: Path
    output: Path
    title: str = ""
    dpi: int = 150
    annotate_angle: bool = False
    extra: dict[str, str] = field(default_factory=dict)


def read_table(path: Path, kind: str) -> pd.DataFrame:
    if not path.exists():
        raise SpecError(f"input file not found: {path}")
    frame = pd.read_csv(path)
    for column in REQUIRED_COLUMNS[kind]:
        if column not in frame.columns:
            raise SpecError(f"{path}: missing required column {column!r} "
                            f"for kind {kind!r}")
    return frame


def fitted_slope(dts: np.ndarray, errs: np.ndarray) -> float:
    """Least-squares slope of log(err) against log(dt)."""
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


# --- snapshot geometry (independent of the solver package) -----------------

def snapshot_grid(frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild the (ny, nx) field from the x-fastest cell list."""
    x = np.unique(frame["x"].to_numpy())
    y = np.unique(frame["y"].to_numpy())
    values = frame["value"].to_numpy()
    if values.size != x.size * y.size:
        raise SpecError(f"snapshot is not a full grid: {values.size} cells, "
                        f"expected {x.size}x{y.size}")
    return x, y, values.reshape(y.size, x.size)


def zero_crossings(x: np.ndarray, y: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Linearly interpolated f = 0 points along grid rows and columns."""
    pts = []
    for j in range(y.size):
        row = f[j]
        for i in np.nonzero(row[:-1] * row[1:] < 0.0)[0]:
            frac = row[i] / (row[i] - row[i + 1])
            pts.append((x[i] + frac * (x[i + 1] - x[i]), y[j]))
    for i in range(x.size):
        col = f[:, i]
        for j in np.nonzero(col[:-1] * col[1:] < 0.0)[0]:
            frac = col[j] / (col[j] - col[j + 1])
            pts.append((x[i], y[j] + frac * (y[j + 1] - y[j])))
    return np.asarray(pts) if pts else np.empty((0, 2))


def contact_angle_from_field(x: np.ndarray, y: np.ndarray, f: np.ndarray) -> float:
    """Circle fit of the near-wall interface; angle at y = 0 in degrees.

    Mirrors the solver's measurement convention (interface band above the
    first two cell rows, capped at y = 0.2) without importing it.
    """
    pts = zero_crossings(x, y, f)
    if pts.shape[0] == 0:
        return math.nan
    dy = y[1] - y[0] if y.size > 1 else 0.0
    band = (pts[:, 1] >= 2.0 * dy) & (pts[:, 1] <= 0.2)
    pts = pts[band]
    if pts.shape[0] < 3:
        return math.nan
    px, py = pts[:, 0], pts[:, 1]
    a_mat = np.column_stack([2.0 * px, 2.0 * py, np.ones_like(px)])
    sol, *_ = np.linalg.lstsq(a_mat, px ** 2 + py ** 2, rcond=None)
    xc, yc, c = sol
    r_sq = c + xc ** 2 + yc ** 2
    if not r_sq > 0.0:
        return math.nan
    return math.degrees(math.acos(max(-1.0, min(1.0, -yc / math.sqrt(r_sq)))))


# --- renderers -------------------------------------------------------------

def render_energy_curve(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    for column, label in (("f_gl", "interface"), ("f_sur", "entropy"),
                          ("f_ad", "adsorption"), ("f_wf", "wall")):
        ax.plot(frame["t"], frame[column], label=label, lw=1.0)
    ax.plot(frame["t"], frame["total"], "k-", label="total", lw=1.8)
    ax.set_xlabel("t")
    ax.set_ylabel("free energy")
    ax.legend(frameon=False, fontsize=8)
    return {"final_total": float(frame["total"].iloc[-1])}


def render_mass_curve(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    drift_phi = frame["mass_phi"] - frame["mass_phi"].iloc[0]
    drift_psi = frame["mass_psi"] - frame["mass_psi"].iloc[0]
    ax.plot(frame["t"], drift_phi, label="phase mass drift")
    ax.plot(frame["t"], drift_psi, label="surfactant mass drift")
    ax.set_xlabel("t")
    ax.set_ylabel("mass(t) - mass(0)")
    ax.ticklabel_format(axis="y", style="sci", scilimits=(-2, 2))
    ax.legend(frameon=False, fontsize=8)
    return {"max_drift": float(np.max(np.abs(np.concatenate(
        [drift_phi.to_numpy(), drift_psi.to_numpy()]))))}


def render_dt_trace(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    body = frame[frame["dt"] > 0.0]  # the t = 0 record carries no step
    ax.step(body["t"], body["dt"], where="post")
    ax.set_xlabel("t")
    ax.set_ylabel("accepted dt")
    ax.set_yscale("log")
    return {"steps": float(len(body))}


def render_convergence(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    dts = frame["dt"].to_numpy()
    out: dict[str, float] = {}
    for column, marker, label in (("phi_err", "o", "phase"),
                                  ("psi_err", "s", "surfactant")):
        errs = frame[column].to_numpy()
        slope = fitted_slope(dts, errs)
        out[f"slope_{column.split('_')[0]}"] = slope
        ax.loglog(dts, errs, marker + "-", label=f"{label} (slope {slope:.2f})")
    guide = errs[0] * (dts / dts[0])  # first-order reference through the last series
    ax.loglog(dts, guide, "k--", lw=0.8, label="order 1")
    ax.set_xlabel("dt")
    ax.set_ylabel("max error vs reference")
    ax.legend(frameon=False, fontsize=8)
    return out


def render_snapshot(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    x, y, f = snapshot_grid(frame)
    ax.contourf(x, y, f, levels=21, cmap="RdBu_r")
    ax.contour(x, y, f, levels=[0.0], colors="k", linewidths=1.2)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    out: dict[str, float] = {}
    if spec.annotate_angle:
        angle = contact_angle_from_field(x, y, f)
        out["angle_deg"] = angle
        if math.isfinite(angle):
            ax.annotate(f"{angle:.1f}\N{DEGREE SIGN}", xy=(0.02, 0.92),
                        xycoords="axes fraction", fontsize=10)
    return out


def render_angle_vs_pi(spec: FigureSpec, ax) -> dict[str, float]:
    frame = read_table(spec.input, spec.kind)
    groups = (frame.groupby("label") if "label" in frame.columns
              else [("", frame)])
    for label, part in groups:
        part = part.sort_values("psi0")
        ax.plot(part["psi0"], part["angle_deg"], "o-", label=str(label) or None)
    ax.set_xscale("symlog", linthresh=1e-4)
    ax.set_xlabel("mean surfactant loading")
    ax.set_ylabel("contact angle (deg)")
    if "label" in frame.columns:
        ax.legend(frameon=False, fontsize=8)
    return {"curves": float(frame["label"].nunique() if "label" in frame.columns else 1)}


RENDERERS = {
    "energy_curve": render_energy_curve,
    "mass_curve": render_mass_curve,
    "dt_trace": render_dt_trace,
    "convergence": render_convergence,
    "snapshot": render_snapshot,
    "angle_vs_pi": render_angle_vs_pi,
}


def render(spec: FigureSpec) -> dict[str, float]:
    """Render one figure; returns the computed annotations."""
    if spec.kind not in RENDERERS:
        raise SpecError(f"unknown figure kind {spec.kind!r}, expected one of {KINDS}")
    fig, ax = plt.subplots(figsize=(4.8, 3.2), dpi=spec.dpi)
    try:
        info = RENDERERS[spec.kind](spec, ax)
        if spec.title:
            ax.set_title(spec.title, fontsize=10)
        fig.tight_layout()
        spec.output.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(spec.output, metadata=_stable_metadata(spec.output))
    finally:
        plt.close(fig)
    return info


def _stable_metadata(output: Path) -> dict[str, str] | None:
    # SVG embeds a creation date by default; pin it for reproducible output.
    if output.suffix.lower() == ".svg":
        return {"Date": None}
    return None


def read_spec_file(path: Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise SpecError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = text.split("=", 1)
        key = key.strip()
        if key in mapping:
            raise SpecError(f"{path}:{line_no}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def spec_from_mapping(mapping: dict[str, str]) -> FigureSpec:
    try:
        kind = mapping.pop("kind")
        input_path = Path(mapping.pop("input"))
        output = Path(mapping.pop("output"))
    except KeyError as exc:
        raise SpecError(f"spec is missing required key {exc.args[0]!r}") from None
    title = mapping.pop("title", "")
    dpi = int(mapping.pop("dpi", "150"))
    annotate = mapping.pop("annotate_angle", "false").lower() in ("true", "1", "yes")
    return FigureSpec(kind=kind, input=input_path, output=output, title=title,
                      dpi=dpi, annotate_angle=annotate, extra=mapping)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--spec", type=Path, help="key=value spec file")
    parser.add_argument("--kind", choices=KINDS)
    parser.add_argument("--input", type=Path, help="input CSV")
    parser.add_argument("--output", type=Path, help="output image (png/svg/pdf)")
    parser.add_argument("--title", default="")
    parser.add_argument("--dpi", type=int, default=150)
    parser.add_argument("--annotate-angle", action="store_true",
                        help="circle-fit contact angle onto a snapshot")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.spec is not None:
            spec = spec_from_mapping(read_spec_file(args.spec))
        else:
            if args.kind is None or args.input is None or args.output is None:
                raise SpecError("need either --spec or all of --kind/--input/--output")
            spec = FigureSpec(kind=args.kind, input=args.input, output=args.output,
                              title=args.title, dpi=args.dpi,
                              annotate_angle=args.annotate_angle)
        info = render(spec)
    except SpecError as exc:
        print(f"figure error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {spec.output}")
    for key, value in info.items():
        print(f"{key}={value!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
