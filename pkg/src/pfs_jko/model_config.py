"""Physical and numerical parameters, validation, and the key=value config format.

Everything is dimensionless. The three parameter bundles (:class:`ModelParams`,
:class:`SolverParams`, :class:`TimeParams`) are frozen after construction and
checked report-style through :func:`validate`.  The plain-text ``key=value``
config format implemented here is shared by the CLI and the run manifest, so a
manifest can be fed back in as a config file.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

# cos(theta_s) = WETTING_COEFF * (gamma2 - gamma1): the equilibrium contact
# angle is tied to the fluid-solid tension difference by this constant.
WETTING_COEFF = 3.0 * math.sqrt(2.0) / 4.0


class ConfigError(ValueError):
    """Malformed or inconsistent configuration input."""


class NumericalError(RuntimeError):
    """An iterative numerical kernel failed to converge."""


class BcKind(Enum):
    DYNAMIC = "dynamic"
    EQUILIBRIUM = "equilibrium"


class DualProxMode(Enum):
    EXACT = "exact"
    INEXACT_PROJECTION = "inexact"


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the model.

    ``gamma1``/``gamma2`` may be omitted, in which case they are derived from
    ``theta_s`` with ``gamma1 + gamma2 = 0`` (the wall energy is defined up to
    an additive constant).  Supplying both is allowed only when they are
    consistent with ``theta_s`` to 1e-12.
    """

    cn: float = 0.01
    pi_coeff: float = 0.1481
    ex: float = 1.0
    pe_phi: float = 20.0
    pe_psi: float = 100.0
    pe_s: float = 1.0 / 500.0
    theta_s: float = math.pi / 2.0
    gamma1: float | None = None
    gamma2: float | None = None
    bc_kind: BcKind = BcKind.DYNAMIC

    def __post_init__(self) -> None:
        diff = math.cos(self.theta_s) / WETTING_COEFF  # gamma2 - gamma1
        g1, g2 = self.gamma1, self.gamma2
        if g1 is None and g2 is None:
            g1, g2 = -diff / 2.0, diff / 2.0
        elif g1 is None:
            g1 = g2 - diff
        elif g2 is None:
            g2 = g1 + diff
        elif abs((g2 - g1) - diff) > 1e-12:
            raise ConfigError(
                f"gamma1={g1!r}, gamma2={g2!r} inconsistent with theta_s={self.theta_s!r}: "
                f"require gamma2 - gamma1 = cos(theta_s)/{WETTING_COEFF!r}"
            )
        object.__setattr__(self, "gamma1", g1)
        object.__setattr__(self, "gamma2", g2)
        if self.pe_s == 0.0 and self.bc_kind is BcKind.DYNAMIC:
            logger.info("pe_s = 0: switching boundary treatment to the equilibrium condition")
            object.__setattr__(self, "bc_kind", BcKind.EQUILIBRIUM)

    @property
    def gamma_sum(self) -> float:
        return self.gamma1 + self.gamma2

    @property
    def cos_theta_s(self) -> float:
        return WETTING_COEFF * (self.gamma2 - self.gamma1)


@dataclass(frozen=True)
class SolverParams:
    """Inner primal-dual solver parameters.

    ``lam_psi`` optionally gives the surfactant family its own step length
    (block-diagonal C1); ``None`` keeps the single scalar ``lam`` for both
    families.  The two families want very different values: the phase field
    iterates fastest with lam*dt large, while the surfactant constraint loop
    is paced by M_psi/(M_psi + lam_psi*dx*dy), which a large lambda crushes.
    ``sigma`` is the dual step used by the unpreconditioned solver; when left
    ``None`` it is derived from the spectral bound at solve time.
    ``lipschitz_estimate`` plays the same role for the gradient-step condition;
    ``None`` means "estimate by power iteration at the initial state".
    """

    lam: float = 100.0
    lam_psi: float | None = None
    sigma: float | None = None
    delta: float = 1e-7
    eps1: float = 1e-5
    eps2: float = 1e-5
    iter_max: int = 20000
    dual_prox_mode: DualProxMode = DualProxMode.INEXACT_PROJECTION
    lipschitz_estimate: float | None = None

    @property
    def lam_psi_eff(self) -> float:
        return self.lam if self.lam_psi is None else self.lam_psi


@dataclass(frozen=True)
class TimeParams:
    dt_min: float = 0.01
    dt_max: float = 0.01
    beta: float = 1e4
    t_end: float = 1.0
    adaptive: bool = False


ValidationReport = list  # list[str]: one entry per violated constraint


def validate(
    params: ModelParams,
    solver: SolverParams,
    time: TimeParams,
    *,
    lambda_max_aat: float | None = None,
    use_pd3o: bool = False,
) -> ValidationReport:
    """Collect violated invariants; an empty list means the configuration is valid.

    The primal-dual step conditions (``sigma*lam < 1/lambda_max(A A^T)`` and
    ``lam < 2/L``) are checked only when the spectral bound or the Lipschitz
    estimate is available.
    """
    out: list[str] = []
    if not params.cn > 0:
        out.append(f"cn must be positive, got {params.cn!r}")
    if not params.pi_coeff > 0:
        out.append(f"pi_coeff must be positive, got {params.pi_coeff!r}")
    if not params.ex > 0:
        out.append(f"ex must be positive, got {params.ex!r}")
    if not params.pe_phi > 0:
        out.append(f"pe_phi must be positive, got {params.pe_phi!r}")
    if not params.pe_psi > 0:
        out.append(f"pe_psi must be positive, got {params.pe_psi!r}")
    if params.pe_s < 0:
        out.append(f"pe_s must be nonnegative, got {params.pe_s!r}")
    if params.pe_s == 0 and params.bc_kind is BcKind.DYNAMIC:
        out.append("pe_s = 0 requires the equilibrium boundary condition")
    if not 0.0 < params.theta_s < math.pi:
        out.append(f"theta_s must lie in (0, pi), got {params.theta_s!r}")
    if abs(math.cos(params.theta_s) - params.cos_theta_s) > 1e-12:
        out.append("gamma1/gamma2 inconsistent with theta_s")

    if not solver.lam > 0:
        out.append(f"lambda must be positive, got {solver.lam!r}")
    if solver.lam_psi is not None and not solver.lam_psi > 0:
        out.append(f"lambda_psi must be positive, got {solver.lam_psi!r}")
    if solver.sigma is not None and not solver.sigma > 0:
        out.append(f"sigma must be positive, got {solver.sigma!r}")
    if not solver.delta > 0:
        out.append(f"delta must be positive, got {solver.delta!r}")
    if not solver.eps1 > 0:
        out.append(f"eps1 must be positive, got {solver.eps1!r}")
    if not solver.eps2 > 0:
        out.append(f"eps2 must be positive, got {solver.eps2!r}")
    if solver.iter_max < 1:
        out.append(f"iter_max must be at least 1, got {solver.iter_max!r}")
    if solver.lipschitz_estimate is not None and not solver.lipschitz_estimate > 0:
        out.append(f"lipschitz_estimate must be positive, got {solver.lipschitz_estimate!r}")

    if not time.dt_min > 0:
        out.append(f"dt_min must be positive, got {time.dt_min!r}")
    if time.dt_min > time.dt_max:
        out.append(f"dt_min > dt_max ({time.dt_min!r} > {time.dt_max!r})")
    if not 0.0 <= time.beta <= 1e12:
        out.append(f"beta outside the sane range [0, 1e12], got {time.beta!r}")
    if time.t_end < 0:
        out.append(f"t_end must be nonnegative, got {time.t_end!r}")

    if use_pd3o and lambda_max_aat is not None and solver.sigma is not None:
        lam_big = max(solver.lam, solver.lam_psi_eff)
        if solver.sigma * lam_big >= 1.0 / lambda_max_aat:
            out.append(
                f"sigma*lambda = {solver.sigma * lam_big!r} violates the dual step "
                f"bound 1/lambda_max = {1.0 / lambda_max_aat!r}"
            )
    if use_pd3o and solver.lipschitz_estimate is not None:
        if solver.lam >= 2.0 / solver.lipschitz_estimate:
            out.append(
                f"lambda = {solver.lam!r} violates the gradient step bound "
                f"2/L = {2.0 / solver.lipschitz_estimate!r}"
            )
    return out


def mobility_phi(params: ModelParams) -> float:
    return 1.0 / params.pe_phi


def mobility_psi(params: ModelParams, psi):
    """Degenerate mobility psi*(1-psi)/pe_psi; negative outside [0, 1]."""
    return psi * (1.0 - psi) / params.pe_psi


# --- key=value config format ---------------------------------------------

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}") from exc


def _parse_optional_float(text: str) -> float | None:
    if text.strip().lower() == "none":
        return None
    return _parse_float(text)


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _parse_bc_kind(text: str) -> BcKind:
    try:
        return BcKind(text.strip().lower())
    except ValueError as exc:
        raise ConfigError(f"bc_kind must be one of {[k.value for k in BcKind]}, got {text!r}") from exc


def _parse_dual_prox(text: str) -> DualProxMode:
    try:
        return DualProxMode(text.strip().lower())
    except ValueError as exc:
        raise ConfigError(
            f"dual_prox_mode must be one of {[k.value for k in DualProxMode]}, got {text!r}"
        ) from exc


def _fmt(value) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return repr(value)


# key -> (bundle, attribute, parser); the key set doubles as the schema of the
# parameter section of config files and manifests.
_KEY_TABLE = {
    "cn": ("model", "cn", _parse_float),
    "pi_coeff": ("model", "pi_coeff", _parse_float),
    "ex": ("model", "ex", _parse_float),
    "pe_phi": ("model", "pe_phi", _parse_float),
    "pe_psi": ("model", "pe_psi", _parse_float),
    "pe_s": ("model", "pe_s", _parse_float),
    "theta_s": ("model", "theta_s", _parse_float),
    "gamma1": ("model", "gamma1", _parse_optional_float),
    "gamma2": ("model", "gamma2", _parse_optional_float),
    "bc_kind": ("model", "bc_kind", _parse_bc_kind),
    "lambda": ("solver", "lam", _parse_float),
    "lambda_psi": ("solver", "lam_psi", _parse_optional_float),
    "sigma": ("solver", "sigma", _parse_optional_float),
    "delta": ("solver", "delta", _parse_float),
    "eps1": ("solver", "eps1", _parse_float),
    "eps2": ("solver", "eps2", _parse_float),
    "iter_max": ("solver", "iter_max", _parse_int),
    "dual_prox_mode": ("solver", "dual_prox_mode", _parse_dual_prox),
    "lipschitz_estimate": ("solver", "lipschitz_estimate", _parse_optional_float),
    "dt_min": ("time", "dt_min", _parse_float),
    "dt_max": ("time", "dt_max", _parse_float),
    "beta": ("time", "beta", _parse_float),
    "t_end": ("time", "t_end", _parse_float),
    "adaptive": ("time", "adaptive", _parse_bool),
}

PARAM_KEYS = frozenset(_KEY_TABLE)

_KEY_FOR_ATTR = {(bundle, attr): key for key, (bundle, attr, _) in _KEY_TABLE.items()}


def read_key_value(path: str | Path) -> dict[str, str]:
    """Read a ``key=value`` file; ``#`` starts a comment, blank lines are skipped."""
    raw: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.rstrip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def apply_mapping(
    raw: dict[str, str],
    model: ModelParams,
    solver: SolverParams,
    time: TimeParams,
    *,
    foreign_keys: Iterable[str] = (),
) -> tuple[ModelParams, SolverParams, TimeParams]:
    """Overlay string-valued config entries onto existing parameter bundles.

    Keys listed in ``foreign_keys`` belong to the caller and are skipped here;
    anything else outside the schema is a hard error.
    """
    foreign = set(foreign_keys)
    updates: dict[str, dict] = {"model": {}, "solver": {}, "time": {}}
    for key, text in raw.items():
        if key in foreign:
            continue
        if key not in _KEY_TABLE:
            raise ConfigError(f"unknown config key {key!r}")
        bundle, attr, parser = _KEY_TABLE[key]
        updates[bundle][attr] = parser(text)
    if updates["model"]:
        base = {f.name: getattr(model, f.name) for f in fields(model)}
        # A theta_s override invalidates previously derived tensions unless the
        # caller pinned them in the same mapping.
        if "theta_s" in updates["model"]:
            base["gamma1"] = None
            base["gamma2"] = None
        base.update(updates["model"])
        model = ModelParams(**base)
    if updates["solver"]:
        solver = replace(solver, **updates["solver"])
    if updates["time"]:
        time = replace(time, **updates["time"])
    return model, solver, time


def params_to_mapping(
    model: ModelParams, solver: SolverParams, time: TimeParams
) -> dict[str, str]:
    """Serialize the bundles to config-file strings; round-trips bit-exactly."""
    out: dict[str, str] = {}
    for bundle_name, bundle in (("model", model), ("solver", solver), ("time", time)):
        for f in fields(bundle):
            key = _KEY_FOR_ATTR[(bundle_name, f.name)]
            out[key] = _fmt(getattr(bundle, f.name))
    return out
