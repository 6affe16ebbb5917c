"""State-dependent distributions and their working-scale transforms.

Every family exposes vectorised ``logpdf``, derivatives of ``logpdf`` with
respect to its working (unconstrained) parameters, a CDF where one exists,
and a sampler. Missing observations are encoded as NaN and contribute a
factor of one to the joint density.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import ClassVar

import numpy as np
from scipy.special import digamma, expit, gammainc, gammaln, logit, ndtr, pdtr

LOG_2PI = math.log(2.0 * math.pi)


def bessel_i0(x: float) -> float:
    """Modified Bessel function of the first kind, order zero (power series)."""
    return math.exp(log_bessel_i0(x))


def log_bessel_i0(x: float) -> float:
    """``log I0(x)`` from the power series, asymptotic expansion for x > 500."""
    x = abs(float(x))
    if x > 500.0:
        return _log_bessel_asymptotic(x, 0)
    y = 0.25 * x * x
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= y / (k * k)
        total += term
        if term < 1e-17 * total:
            break
    return math.log(total)


def bessel_ratio_i1_i0(x: float) -> float:
    """``I1(x) / I0(x)``, the mean resultant length of a von Mises law."""
    x = float(x)
    if x == 0.0:
        return 0.0
    if abs(x) > 500.0:
        return math.copysign(math.exp(_log_bessel_asymptotic(abs(x), 1) - _log_bessel_asymptotic(abs(x), 0)), x)
    y = 0.25 * x * x
    t0, s0 = 1.0, 1.0
    t1, s1 = 1.0, 1.0  # I1 series divided by x/2
    k = 0
    while True:
        k += 1
        t0 *= y / (k * k)
        t1 *= y / (k * (k + 1))
        s0 += t0
        s1 += t1
        if t0 < 1e-17 * s0 and t1 < 1e-17 * s1:
            break
    return 0.5 * x * s1 / s0


def _log_bessel_asymptotic(x: float, order: int) -> float:
    mu = 4.0 * order * order
    term = 1.0
    total = 1.0
    for k in range(1, 12):
        term *= -(mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total += term
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(total)


class EmissionParams:
    """Base class of the emission families."""

    family: ClassVar[str]
    n_params: ClassVar[int]
    discrete: ClassVar[bool] = False

    def working(self) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def from_working(cls, w):
        raise NotImplementedError

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def dlogpdf(self, y: np.ndarray) -> np.ndarray:
        """Derivatives of ``logpdf`` w.r.t. the working parameters, shape (len(y), n_params)."""
        raise NotImplementedError

    def cdf_bounds(self, y: np.ndarray):
        """``(F(y-), F(y))``; the two coincide unless ``y`` carries a point mass."""
        raise NotImplementedError(f"{self.family} has no CDF")

    def cdf(self, y):
        return self.cdf_bounds(np.asarray(y, dtype=float))[1]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def order_key(self) -> float:
        """Value used to put states in a canonical order after fitting."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family
        return d


@dataclass(frozen=True)
class ZeroInflatedGamma(EmissionParams):
    """Point mass ``zero_mass`` at 0 plus ``(1 - zero_mass)`` times a gamma density.

    The gamma part is parameterised by its mean and standard deviation.
    """

    zero_mass: float
    mean: float
    sd: float

    family: ClassVar[str] = "zigamma"
    n_params: ClassVar[int] = 3

    def __post_init__(self):
        if not 0.0 < self.zero_mass < 1.0:
            raise ValueError(f"zero_mass must lie in (0, 1), got {self.zero_mass}")
        if not (self.mean > 0 and self.sd > 0 and np.isfinite(self.mean) and np.isfinite(self.sd)):
            raise ValueError(f"gamma mean and sd must be positive and finite, got {self.mean}, {self.sd}")

    @property
    def shape(self) -> float:
        return self.mean**2 / self.sd**2

    @property
    def rate(self) -> float:
        return self.mean / self.sd**2

    def working(self):
        return np.array([logit(self.zero_mass), math.log(self.mean), math.log(self.sd)])

    @classmethod
    def from_working(cls, w):
        z = float(np.clip(expit(w[0]), 1e-12, 1 - 1e-12))
        return cls(z, math.exp(w[1]), math.exp(w[2]))

    def _gamma_logpdf(self, y):
        k, b = self.shape, self.rate
        with np.errstate(divide="ignore", invalid="ignore"):
            out = k * math.log(b) - gammaln(k) + (k - 1.0) * np.log(y) - b * y
        return np.where(y < 0, -np.inf, out)

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty_like(y)
        zero = y == 0
        out[zero] = math.log(self.zero_mass)
        pos = ~zero
        out[pos] = math.log1p(-self.zero_mass) + self._gamma_logpdf(y[pos])
        return out

    def dlogpdf(self, y):
        y = np.asarray(y, dtype=float)
        k, b = self.shape, self.rate
        z = self.zero_mass
        out = np.zeros((y.size, 3))
        zero = y == 0
        pos = ~zero
        out[zero, 0] = 1.0 - z
        out[pos, 0] = -z
        yp = y[pos]
        dk = math.log(b) - digamma(k) + np.log(yp)
        db = k / b - yp
        # k = mean^2/sd^2, b = mean/sd^2 on log-mean / log-sd scale
        out[pos, 1] = dk * 2.0 * k + db * b
        out[pos, 2] = dk * (-2.0 * k) + db * (-2.0 * b)
        return out

    def cdf_bounds(self, y):
        y = np.asarray(y, dtype=float)
        upper = np.where(y >= 0, self.zero_mass + (1.0 - self.zero_mass) * gammainc(self.shape, self.rate * np.maximum(y, 0.0)), 0.0)
        lower = np.where(y > 0, upper, 0.0)
        return lower, upper

    def sample(self, rng, size):
        x = rng.gamma(self.shape, 1.0 / self.rate, size)
        x[rng.random(size) < self.zero_mass] = 0.0
        return x

    def order_key(self):
        return self.mean


@dataclass(frozen=True)
class VonMises(EmissionParams):
    """Circular distribution on (-pi, pi] with ``location`` and ``concentration``."""

    location: float
    concentration: float

    family: ClassVar[str] = "vonmises"
    n_params: ClassVar[int] = 2

    def __post_init__(self):
        if not self.concentration >= 0:
            raise ValueError("concentration must be non-negative")
        object.__setattr__(self, "location", wrap_angle(self.location))

    def working(self):
        return np.array([self.location, math.log(max(self.concentration, 1e-300))])

    @classmethod
    def from_working(cls, w):
        return cls(wrap_angle(float(w[0])), math.exp(w[1]))

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        kappa = self.concentration
        return kappa * np.cos(y - self.location) - LOG_2PI - log_bessel_i0(kappa)

    def dlogpdf(self, y):
        y = np.asarray(y, dtype=float)
        kappa = self.concentration
        out = np.empty((y.size, 2))
        out[:, 0] = kappa * np.sin(y - self.location)
        out[:, 1] = kappa * (np.cos(y - self.location) - bessel_ratio_i1_i0(kappa))
        return out

    def cdf_bounds(self, y):
        raise NotImplementedError(
            "von Mises channels have no CDF here; pseudo-residuals are only defined for linear channels"
        )

    def sample(self, rng, size):
        if self.concentration == 0:
            return wrap_angle(rng.uniform(-math.pi, math.pi, size))
        return wrap_angle(rng.vonmises(self.location, self.concentration, size))

    def order_key(self):
        return -self.concentration


@dataclass(frozen=True)
class Normal(EmissionParams):
    mean: float
    sd: float

    family: ClassVar[str] = "normal"
    n_params: ClassVar[int] = 2

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("sd must be positive")

    def working(self):
        return np.array([self.mean, math.log(self.sd)])

    @classmethod
    def from_working(cls, w):
        return cls(float(w[0]), math.exp(w[1]))

    def logpdf(self, y):
        z = (np.asarray(y, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * LOG_2PI

    def dlogpdf(self, y):
        z = (np.asarray(y, dtype=float) - self.mean) / self.sd
        return np.column_stack([z / self.sd, z * z - 1.0])

    def cdf_bounds(self, y):
        u = ndtr((np.asarray(y, dtype=float) - self.mean) / self.sd)
        return u, u

    def sample(self, rng, size):
        return rng.normal(self.mean, self.sd, size)

    def order_key(self):
        return self.mean


@dataclass(frozen=True)
class Poisson(EmissionParams):
    rate: float

    family: ClassVar[str] = "poisson"
    n_params: ClassVar[int] = 1
    discrete: ClassVar[bool] = True

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def working(self):
        return np.array([math.log(self.rate)])

    @classmethod
    def from_working(cls, w):
        return cls(math.exp(w[0]))

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        return y * math.log(self.rate) - self.rate - gammaln(y + 1.0)

    def dlogpdf(self, y):
        return (np.asarray(y, dtype=float) - self.rate)[:, None]

    def cdf_bounds(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y >= 1, pdtr(y - 1, self.rate), 0.0), pdtr(y, self.rate)

    def sample(self, rng, size):
        return rng.poisson(self.rate, size).astype(float)

    def order_key(self):
        return self.rate


FAMILIES: dict[str, type[EmissionParams]] = {
    cls.family: cls for cls in (ZeroInflatedGamma, VonMises, Normal, Poisson)
}


def family_class(name: str) -> type[EmissionParams]:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown emission family {name!r}; choose from {sorted(FAMILIES)}") from None


def params_from_dict(d: dict) -> EmissionParams:
    d = dict(d)
    cls = family_class(d.pop("family"))
    return cls(**d)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


class ChannelValueError(ValueError):
    """An observation outside a family's support; ``index`` locates it."""

    def __init__(self, msg, index):
        super().__init__(msg)
        self.index = index


def validate_channel(family: str, y: np.ndarray) -> np.ndarray:
    """Check observed values of a channel; returns the cleaned array.

    Raises ``ValueError`` naming the first offending index.
    """
    y = np.asarray(y, dtype=float).copy()
    obs = ~np.isnan(y)
    if family == "zigamma":
        bad = obs & ~(y >= 0)
    elif family == "vonmises":
        bad = obs & ((y < -math.pi - 1e-12) | (y > math.pi + 1e-12))
        y[obs & (y <= -math.pi)] = math.pi
        y[obs & (y > math.pi)] = math.pi
    elif family == "poisson":
        bad = obs & ((y < 0) | (y != np.round(y)))
    else:
        bad = obs & ~np.isfinite(y)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ChannelValueError(f"value {y[i]!r} at index {i} is invalid for a {family} channel", i)
    return y


def emission_density(params: EmissionParams, y: float) -> float:
    """Density (or point mass / PMF) of a single observation."""
    return float(params.pdf(np.array([y], dtype=float))[0])


def emission_cdf(params: EmissionParams, y: float) -> float:
    return float(params.cdf(np.array([y], dtype=float))[0])


def joint_density(state_params, obs) -> float:
    """Product of the channel densities over the observed (non-NaN) channels."""
    out = 1.0
    for p, y in zip(state_params, obs):
        if y is None or (isinstance(y, float) and math.isnan(y)):
            continue
        out *= emission_density(p, y)
    return out


def log_density_matrix(emissions, values: np.ndarray) -> np.ndarray:
    """``log f_i(y_t)`` for all states, shape (T, N); missing channels add 0.

    ``emissions[i][c]`` are the parameters of state ``i`` in channel ``c``
    and ``values`` is the (T, C) observation array with NaN for missing.
    """
    T, C = values.shape
    out = np.zeros((T, len(emissions)))
    for c in range(C):
        col = values[:, c]
        obs = ~np.isnan(col)
        if not obs.any():
            continue
        yc = col[obs]
        for i, state in enumerate(emissions):
            out[obs, i] += state[c].logpdf(yc)
    return out
