"""Dwell-time distributions with an unstructured start and a geometric tail.

A dwell-time PMF on the positive integers is described by free probabilities
``pi[0..R-1]`` for durations ``1..R``; beyond ``R`` the probabilities decay
geometrically with the ratio implied by the start, so that the total mass is
one without truncating the support.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

logger = logging.getLogger(__name__)

#: Lower bound applied to probabilities coming out of the logit transform.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DwellTimeSpec:
    """Unstructured start ``pi_1..pi_R`` of a dwell-time PMF.

    Parameters
    ----------
    unstructured : sequence of float
        Probabilities of durations ``1..R``. Each must lie strictly inside
        (0, 1) and their sum must be strictly below one; the remainder is the
        mass carried by the geometric tail.
    """

    unstructured: tuple[float, ...]

    def __post_init__(self):
        pis = tuple(float(p) for p in np.asarray(self.unstructured, dtype=float).ravel())
        object.__setattr__(self, "unstructured", pis)
        if len(pis) < 1:
            raise ValueError("dwell spec needs at least one unstructured probability")
        if not all(0.0 < p < 1.0 for p in pis):
            raise ValueError(f"unstructured dwell probabilities must lie in (0, 1), got {pis}")
        if self.tail_mass <= 0.0:
            raise ValueError(f"unstructured dwell probabilities must sum to < 1, got {math.fsum(pis)}")

    @property
    def start_length(self) -> int:
        return len(self.unstructured)

    @property
    def pi(self) -> np.ndarray:
        return np.asarray(self.unstructured)

    @property
    def tail_mass(self) -> float:
        """Probability of a dwell longer than ``R``."""
        return 1.0 - math.fsum(self.unstructured)

    @property
    def tail_ratio(self) -> float:
        """Geometric ratio ``q`` governing ``d(r)`` for ``r > R``."""
        # (1 - F(R)) / (1 - F(R-1)), written to avoid cancellation
        tail = self.tail_mass
        return tail / (tail + self.unstructured[-1])

    def mean(self) -> float:
        r = np.arange(1, self.start_length + 1)
        q = self.tail_ratio
        R = self.start_length
        # sum_{r>R} r * pi_R * q^(r-R)
        tail = self.unstructured[-1] * (R * q / (1 - q) + q / (1 - q) ** 2)
        return float(np.dot(r, self.pi) + tail)


def dwell_pmf(spec: DwellTimeSpec, r) -> np.ndarray | float:
    """Probability of a dwell of exactly ``r`` steps (``r >= 1``)."""
    r_arr = np.asarray(r)
    if np.any(r_arr < 1):
        raise ValueError("dwell durations start at 1")
    R = spec.start_length
    pi = spec.pi
    q = spec.tail_ratio
    idx = np.minimum(r_arr, R) - 1
    out = pi[idx] * np.power(q, np.maximum(r_arr - R, 0))
    return float(out) if np.ndim(out) == 0 else out


def dwell_survival(spec: DwellTimeSpec, r) -> np.ndarray | float:
    """``Pr(D > r) = 1 - F(r)`` for ``r >= 0``, closed form in the tail."""
    r_arr = np.asarray(r)
    if np.any(r_arr < 0):
        raise ValueError("r must be non-negative")
    R = spec.start_length
    pi = spec.pi
    # survivor at 0..R: 1, 1-pi1, ..., tail_mass
    surv_start = np.empty(R + 1)
    surv_start[0] = 1.0
    surv_start[R] = spec.tail_mass
    for k in range(1, R):
        surv_start[k] = spec.tail_mass + math.fsum(pi[k:])
    q = spec.tail_ratio
    out = np.where(
        r_arr <= R,
        surv_start[np.minimum(r_arr, R)],
        spec.tail_mass * np.power(q, np.maximum(r_arr - R, 0)),
    )
    return float(out) if np.ndim(out) == 0 else out


def dwell_cdf(spec: DwellTimeSpec, r) -> np.ndarray | float:
    """``F(r) = sum_{k<=r} d(k)``; ``F(0) = 0``."""
    out = 1.0 - np.asarray(dwell_survival(spec, r))
    return float(out) if np.ndim(out) == 0 else out


def dwell_hazard(spec: DwellTimeSpec, r) -> np.ndarray | float:
    """Hazard ``c(r) = d(r) / (1 - F(r-1))`` for ``1 <= r <= R``.

    Beyond ``R`` the hazard is constant (``1 - q``) and is not exposed here.
    """
    r_arr = np.asarray(r)
    if np.any(r_arr < 1) or np.any(r_arr > spec.start_length):
        raise ValueError(f"hazard is defined for 1 <= r <= {spec.start_length}")
    out = np.asarray(dwell_pmf(spec, r_arr)) / np.asarray(dwell_survival(spec, r_arr - 1))
    return float(out) if np.ndim(out) == 0 else out


def hazards(spec: DwellTimeSpec) -> np.ndarray:
    """All hazards ``c(1..R)`` as an array."""
    return np.asarray(dwell_hazard(spec, np.arange(1, spec.start_length + 1)), dtype=float)


def dwell_from_working(eta) -> DwellTimeSpec:
    """Multinomial-logit map with the tail mass as reference category.

    ``pi_r = exp(eta_r) / (1 + sum_k exp(eta_k))``.
    """
    eta = np.asarray(eta, dtype=float).ravel()
    if not np.all(np.isfinite(eta)):
        raise ValueError("working dwell parameters must be finite")
    return DwellTimeSpec(tuple(_softmax_with_reference(eta)[:-1]))


def dwell_to_working(spec: DwellTimeSpec) -> np.ndarray:
    """Inverse of :func:`dwell_from_working`: ``eta_r = log(pi_r / tail)``."""
    return np.log(spec.pi) - math.log(spec.tail_mass)


def _softmax_with_reference(eta: np.ndarray) -> np.ndarray:
    """Probabilities for categories ``eta`` plus a reference with logit 0.

    The returned vector has the reference category last. Entries are floored
    at :data:`PROB_FLOOR` and renormalised.
    """
    z = np.append(eta, 0.0)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    if p.min() < PROB_FLOOR:
        logger.debug("clamping dwell probabilities below %g", PROB_FLOOR)
        p = np.maximum(p, PROB_FLOOR)
        p /= p.sum()
    return p


def working_jacobian(spec: DwellTimeSpec) -> np.ndarray:
    """``d pi / d eta`` of the logit map, an R x R symmetric matrix."""
    pi = spec.pi
    return np.diag(pi) - np.outer(pi, pi)


def working_second_derivatives(spec: DwellTimeSpec) -> np.ndarray:
    """``d^2 pi_r / d eta_s d eta_t`` as an (R, R, R) array indexed [r, s, t]."""
    pi = spec.pi
    eye = np.eye(len(pi))
    a = eye - pi[None, :]  # a[r, s] = delta_rs - pi_s
    first = a[:, :, None] * a[:, None, :]
    second = (pi[:, None] * a)[None, :, :]  # pi_s (delta_st - pi_t)
    return pi[:, None, None] * (first - second)


def hazard_pi_jacobian(spec: DwellTimeSpec) -> np.ndarray:
    """``d c_r / d pi_k`` for the start hazards, an R x R lower-triangular matrix."""
    pi = spec.pi
    R = len(pi)
    surv = np.asarray(dwell_survival(spec, np.arange(0, R)))  # S(r-1), r = 1..R
    jac = np.zeros((R, R))
    for r in range(R):
        jac[r, r] = 1.0 / surv[r]
        jac[r, :r] = pi[r] / surv[r] ** 2
    return jac


def geometric_dwell(gamma: float, R: int) -> DwellTimeSpec:
    """Start of the geometric PMF ``(1 - gamma) gamma^(r-1)`` truncated at ``R``.

    The implied tail ratio equals ``gamma``, so the returned ``DwellTimeSpec`` reproduces the
    geometric distribution exactly.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if R < 2:
        raise ValueError("R must be at least 2")
    r = np.arange(1, R + 1)
    return DwellTimeSpec(tuple((1.0 - gamma) * gamma ** (r - 1)))


def negative_binomial_dwell(size: float, mean: float, R: int = 30) -> DwellTimeSpec:
    """Shifted negative binomial ``1 + NB(size, p)`` with the given mean.

    The first ``R`` probabilities form the unstructured start and the
    remainder is carried by the implied geometric tail.
    """
    if size <= 0 or mean <= 1:
        raise ValueError("negative binomial dwell needs size > 0 and mean > 1")
    mu = mean - 1.0
    p = size / (size + mu)
    k = np.arange(R)
    logpmf = gammaln(k + size) - gammaln(size) - gammaln(k + 1) + size * np.log(p) + k * np.log1p(-p)
    pis = np.exp(logpmf)
    pis = np.maximum(pis, PROB_FLOOR)
    tail = 1.0 - math.fsum(pis)
    if tail < PROB_FLOOR:
        pis = pis * (1.0 - PROB_FLOOR) / math.fsum(pis)
    return DwellTimeSpec(tuple(pis))


def sample_dwell(spec: DwellTimeSpec, size, rng: np.random.Generator, at_least: int = 1) -> np.ndarray:
    """Inverse-CDF draws of dwell lengths, optionally conditioned on ``D >= at_least``.

    The tail beyond ``R`` is sampled analytically, so arbitrarily long dwells
    occur with their exact probabilities.
    """
    R = spec.start_length
    surv = np.asarray(dwell_survival(spec, np.arange(0, R + 1)))
    lo = dwell_survival(spec, at_least - 1)
    # draw the survivor level v = Pr(D >= d) uniformly on (0, S(at_least - 1)]
    v = lo * (1.0 - rng.random(size))
    # smallest r with S(r) < v  <=>  F(r) > 1 - v
    r = np.searchsorted(-surv, -v, side="right")
    out = np.asarray(r, dtype=np.int64)
    in_tail = out > R
    if np.any(in_tail):
        q = spec.tail_ratio
        tail = spec.tail_mass
        # S(r) = tail * q^(r - R) for r >= R; need smallest r with S(r) < v
        k = np.floor(np.log(v[in_tail] / tail) / math.log(q)) + 1
        out[in_tail] = R + np.maximum(k, 1).astype(np.int64)
    return np.maximum(out, at_least)
