"""Difference penalties on the unstructured dwell probabilities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb


class PenaltyOrderWarning(UserWarning):
    """The difference order leaves nothing to penalise for some state."""


def difference_matrix(R: int, m: int) -> np.ndarray:
    """``(R - m) x R`` matrix of m-th order difference stencils.

    Row ``k`` applies ``sum_j (-1)^(m-j) C(m, j) pi_{k+j}``.
    """
    if m < 1:
        raise ValueError("difference order must be >= 1")
    if m >= R:
        return np.zeros((0, R))
    stencil = np.array([(-1) ** (m - j) * comb(m, j, exact=True) for j in range(m + 1)], dtype=float)
    D = np.zeros((R - m, R))
    for k in range(R - m):
        D[k, k : k + m + 1] = stencil
    return D


def difference(pis, m: int) -> np.ndarray:
    """Apply the first-difference operator ``m`` times."""
    x = np.asarray(pis, dtype=float)
    if m >= len(x):
        raise ValueError(f"difference order {m} needs more than {len(x)} values")
    for _ in range(m):
        x = x[1:] - x[:-1]
    return x


@dataclass(frozen=True)
class PenaltyConfig:
    """Per-state smoothing parameters and a shared difference order."""

    lam: tuple[float, ...]
    order: int = 4
    _matrices: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(np.asarray(self.lam, dtype=float)))
        object.__setattr__(self, "lam", lam)
        if any(not np.isfinite(v) or v < 0 for v in lam):
            raise ValueError(f"smoothing parameters must be finite and >= 0, got {lam}")
        if int(self.order) != self.order or self.order < 1:
            raise ValueError("difference order must be a positive integer")

    def gram(self, R: int) -> np.ndarray:
        """``D^T D`` for a start of length ``R`` (cached)."""
        if R not in self._matrices:
            D = difference_matrix(R, self.order)
            self._matrices[R] = D.T @ D
        return self._matrices[R]

    def check(self, start_lengths) -> None:
        if len(self.lam) != len(start_lengths):
            raise ValueError(f"need {len(start_lengths)} smoothing parameters, got {len(self.lam)}")
        for i, R in enumerate(start_lengths):
            if self.order >= R and self.lam[i] > 0:
                warnings.warn(
                    f"difference order {self.order} >= start length {R} of state {i}; "
                    "its penalty is zero",
                    PenaltyOrderWarning,
                    stacklevel=3,
                )


def _starts(model_or_pis):
    if hasattr(model_or_pis, "dwell"):
        return [d.pi for d in model_or_pis.dwell]
    return [np.asarray(p, dtype=float) for p in model_or_pis]


def penalty_value(model, config: PenaltyConfig) -> float:
    """``sum_i lam_i * sum_r (Delta^m pi_{i,r})^2``.

    ``model`` is an :class:`~pmlhsmm.expand.HsmmModel` or a sequence of
    per-state probability vectors.
    """
    starts = _starts(model)
    config.check([len(p) for p in starts])
    total = 0.0
    for lam, pi in zip(config.lam, starts):
        if lam == 0.0 or config.order >= len(pi):
            continue
        d = difference(pi, config.order)
        total += lam * float(np.dot(d, d))
    return total


def penalty_gradient_hessian(model, config: PenaltyConfig):
    """Gradients ``2 lam_i K pi_i`` and constant Hessians ``2 lam_i K``.

    ``K = D_m^T D_m``. Returns two lists indexed by state.
    """
    starts = _starts(model)
    config.check([len(p) for p in starts])
    grads, hessians = [], []
    for lam, pi in zip(config.lam, starts):
        H = 2.0 * lam * config.gram(len(pi))
        hessians.append(H)
        grads.append(H @ pi)
    return grads, hessians
