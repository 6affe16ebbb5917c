"""Semi-Markov simulation and brute-force likelihood oracles.

The oracles are deliberately naive: one sums over every sub-state path of
the expanded chain, the other over every segmentation of the series into
sojourns of the semi-Markov chain. They are only usable for short series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dwell import dwell_pmf, dwell_survival, sample_dwell
from .emission import log_density_matrix
from .expand import ExpandedHmm, HsmmModel, expand
from .inference import Dataset, initial_vector


@dataclass(frozen=True, eq=False)
class SimOutput:
    """Simulated state path, its sojourns and the observations.

    The first sojourn may be left-truncated (the chain may start part way
    through a dwell) and the last is right-censored at ``T``.
    """

    states: np.ndarray
    sojourns: list = field(repr=False)
    observations: Dataset = field(repr=False)
    seed: int | None = None
    first_truncated: bool = False
    first_position: int = 1

    def substates(self, model: HsmmModel) -> np.ndarray:
        """Sub-state path of the expanded chain (0-based indices)."""
        offs = np.concatenate([[0], np.cumsum(model.start_lengths)])
        out = []
        for n, (s, d) in enumerate(self.sojourns):
            r0 = self.first_position if n == 0 else 1
            R = model.start_lengths[s]
            out.extend(offs[s] + min(r, R) - 1 for r in range(r0, r0 + d))
        return np.asarray(out, dtype=np.int64)


class _DwellPool:
    """Pre-drawn dwell lengths per state, refilled in batches."""

    def __init__(self, model, rng, batch=4096):
        self.model, self.rng, self.batch = model, rng, batch
        self.pools = [np.empty(0, dtype=np.int64) for _ in model.dwell]
        self.pos = [0] * model.n_states

    def draw(self, i):
        if self.pos[i] >= len(self.pools[i]):
            self.pools[i] = sample_dwell(self.model.dwell[i], self.batch, self.rng)
            self.pos[i] = 0
        v = self.pools[i][self.pos[i]]
        self.pos[i] += 1
        return int(v)


def simulate(model: HsmmModel, T: int, seed: int | None = None, channels=None, convention: str = "printed") -> SimOutput:
    """Draw a state path and observations of length ``T``.

    The sub-state at t=1 is drawn from the model's initial distribution
    (``delta Gamma`` under the printed convention); its position ``r``
    within the aggregate fixes the elapsed dwell, and the remaining dwell is
    drawn from the dwell distribution conditioned on ``D >= r``. Later
    sojourns use unconditional inverse-CDF draws and switches follow Omega.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    hmm = expand(model)
    init = initial_vector(hmm, convention)
    k0 = int(rng.choice(hmm.n_expanded, p=init / init.sum()))
    state = int(hmm.aggregate_of[k0])
    r0 = int(hmm.position_of[k0])
    total = int(sample_dwell(model.dwell[state], 1, rng, at_least=r0)[0])
    first = total - r0 + 1

    pool = _DwellPool(model, rng)
    N = model.n_states
    cum_omega = np.cumsum(model.omega, axis=1)
    sojourns = [(state, first)]
    t = first
    while t < T:
        u = rng.random()
        state = min(int(np.searchsorted(cum_omega[state], u, side="right")), N - 1)
        while model.omega[sojourns[-1][0], state] == 0:  # guard against round-off at the row end
            state = (state + 1) % N
        d = pool.draw(state)
        sojourns.append((state, d))
        t += d
    if t > T:
        s, d = sojourns[-1]
        sojourns[-1] = (s, d - (t - T))

    states = np.repeat([s for s, _ in sojourns], [d for _, d in sojourns]).astype(np.int64)
    n_ch = model.n_channels
    if channels is None:
        channels = tuple(f"y{c}" for c in range(n_ch))
    values = np.empty((T, n_ch))
    for i in range(N):
        idx = np.flatnonzero(states == i)
        for c in range(n_ch):
            values[idx, c] = model.emissions[i][c].sample(rng, idx.size)
    return SimOutput(states, sojourns, Dataset(channels, values), seed, first_truncated=r0 > 1, first_position=r0)


def brute_force_loglik_expanded(hmm: ExpandedHmm, data: Dataset, convention: str = "printed") -> float:
    """Log of the sum over all sub-state paths of their joint probability.

    Paths through structurally impossible transitions are pruned, which does
    not change the sum.
    """
    T = data.T
    dens = np.exp(log_density_matrix(hmm.emissions, data.values))[:, hmm.aggregate_of]
    init = initial_vector(hmm, convention)
    succ = [np.flatnonzero(hmm.tpm[k] > 0) for k in range(hmm.n_expanded)]
    terms = []

    def walk(t, k, p):
        if p == 0.0:
            return
        if t == T - 1:
            terms.append(p)
            return
        for l in succ[k]:
            walk(t + 1, l, p * hmm.tpm[k, l] * dens[t + 1, l])

    for k in range(hmm.n_expanded):
        walk(0, k, init[k] * dens[0, k])
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf


def brute_force_loglik_semimarkov(model: HsmmModel, data: Dataset, entry=None) -> float:
    """Log-likelihood by enumerating segmentations into sojourns.

    A fresh sojourn starts at t=1 in state ``i`` with probability
    ``entry[i]`` (default: ``model.init_weights`` for the fresh policy, else
    uniform). Completed sojourns contribute ``d_i(r) omega_ij`` and the final,
    right-censored one contributes ``Pr(D_i >= r) = 1 - F_i(r - 1)``.
    """
    T = data.T
    N = model.n_states
    if T > 12:
        raise ValueError("semi-Markov enumeration is limited to T <= 12")
    if entry is None:
        entry = model.init_weights if (model.init == "fresh" and model.init_weights is not None) else np.full(N, 1.0 / N)
    entry = np.asarray(entry, dtype=float)
    logf = log_density_matrix(model.emissions, data.values)
    # cumulative emission log-densities for fast run products
    cum = np.vstack([np.zeros(N), np.cumsum(logf, axis=0)])
    d = [np.asarray(dwell_pmf(spec, np.arange(1, T + 1))) for spec in model.dwell]
    surv = [np.asarray(dwell_survival(spec, np.arange(0, T))) for spec in model.dwell]
    terms = []

    def extend(start, state, p):
        for r in range(1, T - start + 1):
            emit = math.exp(cum[start + r, state] - cum[start, state])
            if start + r == T:
                terms.append(p * surv[state][r - 1] * emit)
            else:
                base = p * d[state][r - 1] * emit
                for j in range(N):
                    w = model.omega[state, j]
                    if w > 0:
                        extend(start + r, j, base * w)

    for i in range(N):
        if entry[i] > 0:
            extend(0, i, entry[i])
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf
