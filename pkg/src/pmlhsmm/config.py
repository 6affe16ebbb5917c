"""Run configuration read from a TOML file with flat ``section.key`` paths."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .emission import FAMILIES
from .fit import DWELL_FAMILIES, FIT_INIT_POLICIES, FitOptions, ModelSpec
from .inference import CONVENTIONS
from .select import CvPlan


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


DEFAULTS_TOML = """\
# Every key is optional; the values below are the defaults.

[model]
n_states = 3
start_lengths = 10                 # one value for all states or one per state
channels = ["step", "angle"]       # CSV column names, in order
families = ["zigamma", "vonmises"] # zigamma | vonmises | normal | poisson
dwell_family = "free"              # free | nbinom | geometric
init = "stationary"                # stationary | uniform | fresh | estimated
convention = "printed"             # printed | standard

[penalty]
lambda = 0.0                       # one value, one per state, or "cv"
order = 4

[optimizer]
n_starts = 10
jitter = 0.2
seed = 0
gtol = 1e-4
ftol = 1e-8
maxiter = 2000
gradient = "analytic"              # analytic | fd

[cv]
n_folds = 10
min_exponent = 0                   # candidate values are 10^min .. 10^max
max_exponent = 6
start = []                         # grid indices per state; empty = middle
max_moves = 20
scoring = "isolated"               # isolated | conditional

[data]
time_column = "t"                  # used by --assume-regular
interval = 0.0                     # time step; 0 = smallest positive gap

[simulate]
params = ""                        # parameter file written by `fit`
T = 1000
seed = 1

[output]
dwell_horizon = 50
residual_seed = 0
"""

_SCHEMA: dict[str, type | tuple] = {
    "model.n_states": int,
    "model.start_lengths": (int, list),
    "model.channels": list,
    "model.families": list,
    "model.dwell_family": str,
    "model.init": str,
    "model.convention": str,
    "penalty.lambda": (int, float, list, str),
    "penalty.order": int,
    "optimizer.n_starts": int,
    "optimizer.jitter": (int, float),
    "optimizer.seed": int,
    "optimizer.gtol": (int, float),
    "optimizer.ftol": (int, float),
    "optimizer.maxiter": int,
    "optimizer.gradient": str,
    "cv.n_folds": int,
    "cv.min_exponent": int,
    "cv.max_exponent": int,
    "cv.start": list,
    "cv.max_moves": int,
    "cv.scoring": str,
    "data.time_column": str,
    "data.interval": (int, float),
    "simulate.params": str,
    "simulate.T": int,
    "simulate.seed": int,
    "output.dwell_horizon": int,
    "output.residual_seed": int,
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def default_values() -> dict:
    return _flatten(tomllib.loads(DEFAULTS_TOML))


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    channels: tuple[str, ...]
    lam: tuple[float, ...] | None  # None means "choose by cross-validation"
    order: int
    fit_options: FitOptions
    cv_plan: CvPlan
    time_column: str
    interval: float
    sim_params: str
    sim_T: int
    sim_seed: int
    dwell_horizon: int
    residual_seed: int
    values: dict

    @property
    def n_states(self) -> int:
        return self.spec.n_states


def _fail(key, msg):
    raise ConfigError(f"{key}: {msg}")


def _per_state(key, v, N, kind):
    vals = v if isinstance(v, list) else [v]
    if len(vals) == 1:
        vals = vals * N
    if len(vals) != N:
        _fail(key, f"expected 1 or {N} values, got {len(vals)}")
    out = []
    for x in vals:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or (kind is int and not isinstance(x, int)):
            _fail(key, f"invalid value {x!r}")
        out.append(kind(x))
    return tuple(out)


def build_config(overrides: dict | None = None) -> RunConfig:
    """Validate ``overrides`` (flat or nested keys) on top of the defaults."""
    vals = default_values()
    for key, v in _flatten(overrides or {}).items():
        if key not in _SCHEMA:
            _fail(key, "unknown key")
        types = _SCHEMA[key] if isinstance(_SCHEMA[key], tuple) else (_SCHEMA[key],)
        if isinstance(v, bool) or not isinstance(v, types):
            _fail(key, f"wrong type {type(v).__name__}")
        vals[key] = v

    N = vals["model.n_states"]
    if isinstance(vals["model.start_lengths"], list) and "model.n_states" not in _flatten(overrides or {}):
        N = len(vals["model.start_lengths"])
        vals["model.n_states"] = N
    if N < 2:
        _fail("model.n_states", "need at least two states")
    R = _per_state("model.start_lengths", vals["model.start_lengths"], N, int)
    if any(r < 2 for r in R):
        _fail("model.start_lengths", "every start length must be >= 2")
    channels = tuple(vals["model.channels"])
    families = tuple(vals["model.families"])
    if not channels or any(not isinstance(c, str) or not c for c in channels):
        _fail("model.channels", "need a non-empty list of column names")
    if len(set(channels)) != len(channels):
        _fail("model.channels", "duplicate channel names")
    if len(families) != len(channels):
        _fail("model.families", f"{len(families)} families for {len(channels)} channels")
    for f in families:
        if f not in FAMILIES:
            _fail("model.families", f"unknown family {f!r}")
    for key, allowed in (
        ("model.dwell_family", DWELL_FAMILIES),
        ("model.init", FIT_INIT_POLICIES),
        ("model.convention", CONVENTIONS),
        ("optimizer.gradient", ("analytic", "fd")),
        ("cv.scoring", ("isolated", "conditional")),
    ):
        if vals[key] not in allowed:
            _fail(key, f"must be one of {list(allowed)}, got {vals[key]!r}")
    try:
        spec = ModelSpec(R, families, vals["model.dwell_family"], vals["model.init"], vals["model.convention"])
    except ValueError as exc:
        _fail("model", str(exc))

    lam_v = vals["penalty.lambda"]
    if isinstance(lam_v, str):
        if lam_v != "cv":
            _fail("penalty.lambda", "the only string value allowed is 'cv'")
        lam = None
    else:
        lam = _per_state("penalty.lambda", lam_v, N, float)
        if any(not (x >= 0 and math.isfinite(x)) for x in lam):
            _fail("penalty.lambda", "values must be finite and >= 0")
    if vals["penalty.order"] < 1:
        _fail("penalty.order", "must be >= 1")

    for key in ("optimizer.n_starts", "optimizer.maxiter", "cv.max_moves", "simulate.T"):
        if vals[key] < (0 if key == "cv.max_moves" else 1):
            _fail(key, "out of range")
    for key in ("optimizer.gtol", "optimizer.ftol"):
        if not vals[key] > 0:
            _fail(key, "must be > 0")
    if vals["optimizer.jitter"] < 0:
        _fail("optimizer.jitter", "must be >= 0")
    options = FitOptions(
        n_starts=vals["optimizer.n_starts"],
        jitter=float(vals["optimizer.jitter"]),
        seed=vals["optimizer.seed"],
        gtol=float(vals["optimizer.gtol"]),
        ftol=float(vals["optimizer.ftol"]),
        maxiter=vals["optimizer.maxiter"],
        gradient=vals["optimizer.gradient"],
    )

    lo, hi = vals["cv.min_exponent"], vals["cv.max_exponent"]
    if hi < lo:
        _fail("cv.max_exponent", "must be >= cv.min_exponent")
    grid = tuple(tuple(10.0**k for k in range(lo, hi + 1)) for _ in range(N))
    start = vals["cv.start"]
    if start:
        start = _per_state("cv.start", start, N, int)
    try:
        plan = CvPlan(grid, vals["cv.n_folds"], tuple(start) if start else None, vals["cv.max_moves"], vals["cv.scoring"])
    except ValueError as exc:
        _fail("cv", str(exc))

    if vals["data.interval"] < 0:
        _fail("data.interval", "must be >= 0")
    if vals["output.dwell_horizon"] < 1:
        _fail("output.dwell_horizon", "must be >= 1")
    return RunConfig(
        spec=spec,
        channels=channels,
        lam=lam,
        order=vals["penalty.order"],
        fit_options=options,
        cv_plan=plan,
        time_column=vals["data.time_column"],
        interval=float(vals["data.interval"]),
        sim_params=vals["simulate.params"],
        sim_T=vals["simulate.T"],
        sim_seed=vals["simulate.seed"],
        dwell_horizon=vals["output.dwell_horizon"],
        residual_seed=vals["output.residual_seed"],
        values=vals,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return build_config(raw)
