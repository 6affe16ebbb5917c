"""Exact HMM representation of a hidden semi-Markov model.

Each HSMM state ``i`` becomes an aggregate of ``R_i`` sub-states. Inside an
aggregate the chain moves forward one sub-state per step (the last sub-state
may repeat), leaving with the dwell hazard; a departure always enters the
first sub-state of the destination aggregate.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .dwell import DwellTimeSpec, hazards
from .emission import EmissionParams

logger = logging.getLogger(__name__)

INIT_POLICIES = ("stationary", "uniform", "fresh", "user")


class StationarityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class HsmmModel:
    """An N-state HSMM.

    Parameters
    ----------
    dwell : sequence of DwellTimeSpec
        Dwell-time distribution of each state; every start length must be >= 2.
    omega : (N, N) array
        Conditional transition probabilities with a zero diagonal.
    emissions : sequence of sequences of EmissionParams
        ``emissions[i][c]`` is the distribution of channel ``c`` in state ``i``.
    init : str
        ``"stationary"`` (default), ``"uniform"`` over expanded states,
        ``"fresh"`` (mass on the first sub-state of each aggregate, weighted by
        ``init_weights`` over HSMM states), or ``"user"`` (``init_weights`` is a
        full expanded-state vector).
    """

    dwell: tuple[DwellTimeSpec, ...]
    omega: np.ndarray
    emissions: tuple[tuple[EmissionParams, ...], ...]
    init: str = "stationary"
    init_weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "dwell", tuple(self.dwell))
        object.__setattr__(self, "emissions", tuple(tuple(e) for e in self.emissions))
        omega = np.array(self.omega, dtype=float)
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        N = len(self.dwell)
        if N < 2:
            raise ValueError("an HSMM needs at least two states")
        if omega.shape != (N, N):
            raise ValueError(f"omega must be {N}x{N}, got {omega.shape}")
        if np.any(np.diag(omega) != 0):
            raise ValueError("omega must have a zero diagonal")
        if np.any(omega < 0) or np.any(omega > 1) or not np.allclose(omega.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("omega rows must be probability vectors")
        for i, d in enumerate(self.dwell):
            if d.start_length < 2:
                raise ValueError(
                    f"state {i}: unstructured start of length {d.start_length}; lengths below 2 are not supported"
                )
        if len(self.emissions) != N:
            raise ValueError(f"need emissions for {N} states, got {len(self.emissions)}")
        n_ch = {len(e) for e in self.emissions}
        if len(n_ch) != 1:
            raise ValueError("every state needs the same channels")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"init policy must be one of {INIT_POLICIES}, got {self.init!r}")
        if self.init in ("fresh", "user"):
            if self.init_weights is None and self.init == "user":
                raise ValueError("user init policy needs init_weights")
            if self.init_weights is not None:
                w = np.array(self.init_weights, dtype=float)
                expected = N if self.init == "fresh" else self.n_expanded
                if w.shape != (expected,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-10):
                    raise ValueError(f"init_weights must be a probability vector of length {expected}")
                w.setflags(write=False)
                object.__setattr__(self, "init_weights", w)

    @property
    def n_states(self) -> int:
        return len(self.dwell)

    @property
    def n_channels(self) -> int:
        return len(self.emissions[0])

    @property
    def start_lengths(self) -> tuple[int, ...]:
        return tuple(d.start_length for d in self.dwell)

    @property
    def n_expanded(self) -> int:
        return sum(self.start_lengths)

    def permute(self, order) -> "HsmmModel":
        """Relabel states so that new state ``k`` is old state ``order[k]``."""
        order = list(order)
        omega = self.omega[np.ix_(order, order)]
        w = self.init_weights
        if w is not None:
            if self.init == "fresh":
                w = w[order]
            else:
                offsets = np.concatenate([[0], np.cumsum(self.start_lengths)])
                w = np.concatenate([w[offsets[i] : offsets[i + 1]] for i in order])
        return replace(
            self,
            dwell=tuple(self.dwell[i] for i in order),
            omega=omega,
            emissions=tuple(self.emissions[i] for i in order),
            init_weights=w,
        )


@dataclass(frozen=True, eq=False)
class ExpandedHmm:
    """Block-structured Markov chain on ``sum R_i`` sub-states."""

    tpm: np.ndarray
    aggregate_of: np.ndarray
    position_of: np.ndarray
    delta: np.ndarray
    structure: np.ndarray
    n_states: int
    emissions: tuple = ()

    @property
    def n_expanded(self) -> int:
        return self.tpm.shape[0]

    @cached_property
    def first_substate(self) -> np.ndarray:
        return np.flatnonzero(self.position_of == 1)

    @cached_property
    def agg_index(self) -> np.ndarray:
        return np.ascontiguousarray(self.aggregate_of, dtype=np.int64)

    @cached_property
    def onehot(self) -> np.ndarray:
        """(Ñ, N) indicator of aggregate membership."""
        m = np.zeros((self.n_expanded, self.n_states))
        m[np.arange(self.n_expanded), self.aggregate_of] = 1.0
        return m

    @cached_property
    def csr(self):
        """``(indptr, indices, data)`` of the structural non-zeros of the TPM."""
        rows, cols = np.nonzero(self.structure)
        indptr = np.zeros(self.n_expanded + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        return indptr, cols.astype(np.int64), np.ascontiguousarray(self.tpm[rows, cols])


def structural_mask(start_lengths) -> np.ndarray:
    """Boolean mask of transitions allowed by the aggregate structure."""
    lengths = list(start_lengths)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(int)
    n = offsets[-1]
    mask = np.zeros((n, n), dtype=bool)
    for i, R in enumerate(lengths):
        o = offsets[i]
        for r in range(R - 1):
            mask[o + r, o + r + 1] = True
        mask[o + R - 1, o + R - 1] = True
        for j in range(len(lengths)):
            if j != i:
                mask[o : o + R, offsets[j]] = True
    return mask


def build_tpm(dwell, omega) -> np.ndarray:
    """Dense expanded transition matrix."""
    lengths = [d.start_length for d in dwell]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(int)
    n = offsets[-1]
    tpm = np.zeros((n, n))
    for i, d in enumerate(dwell):
        o, R = offsets[i], lengths[i]
        c = hazards(d)
        idx = np.arange(R - 1)
        tpm[o + idx, o + idx + 1] = 1.0 - c[:-1]
        tpm[o + R - 1, o + R - 1] = 1.0 - c[-1]
        for j in range(len(dwell)):
            if j != i:
                tpm[o : o + R, offsets[j]] = omega[i, j] * c
    return tpm


def expand(model: HsmmModel) -> ExpandedHmm:
    """Build the expanded HMM (TPM, aggregate maps and initial distribution)."""
    lengths = model.start_lengths
    tpm = build_tpm(model.dwell, model.omega)
    agg = np.repeat(np.arange(model.n_states), lengths)
    pos = np.concatenate([np.arange(1, R + 1) for R in lengths])
    mask = structural_mask(lengths)
    hmm = ExpandedHmm(tpm, agg, pos, np.empty(0), mask, model.n_states, model.emissions)
    if model.init == "stationary":
        delta = stationary_distribution(hmm)
    elif model.init == "uniform":
        delta = np.full(hmm.n_expanded, 1.0 / hmm.n_expanded)
    elif model.init == "fresh":
        w = model.init_weights
        if w is None:
            w = np.full(model.n_states, 1.0 / model.n_states)
        delta = np.zeros(hmm.n_expanded)
        delta[hmm.first_substate] = w
    else:
        delta = np.asarray(model.init_weights, dtype=float)
    return replace(hmm, delta=delta)


def stationary_distribution(hmm: ExpandedHmm) -> np.ndarray:
    """Solve ``delta (I - Gamma + U) = 1`` for the stationary distribution.

    Falls back to the uniform vector with a warning if the system is singular.
    """
    n = hmm.n_expanded
    A = np.eye(n) - hmm.tpm + 1.0
    try:
        delta = np.linalg.solve(A.T, np.ones(n))
    except np.linalg.LinAlgError:
        delta = None
    if delta is None or not np.all(np.isfinite(delta)) or np.any(delta < -1e-10):
        warnings.warn("transition matrix is not irreducible; using a uniform initial distribution", StationarityWarning, stacklevel=2)
        return np.full(n, 1.0 / n)
    delta = np.maximum(delta, 0.0)
    return delta / delta.sum()


def aggregate_marginals(hmm: ExpandedHmm, weights=None) -> np.ndarray:
    """Sum an expanded-state vector (default: ``delta``) over each aggregate."""
    w = hmm.delta if weights is None else np.asarray(weights)
    return np.bincount(hmm.aggregate_of, weights=w, minlength=hmm.n_states)
