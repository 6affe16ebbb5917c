"""Random models and reference configurations shared by the tests."""

import numpy as np

from pmlhsmm import (
    Dataset,
    DwellTimeSpec,
    HsmmModel,
    Normal,
    Poisson,
    VonMises,
    ZeroInflatedGamma,
    geometric_dwell,
)


def random_dwell(rng, R, total=None):
    total = rng.uniform(0.5, 0.95) if total is None else total
    w = rng.uniform(0.2, 1.0, R)
    return DwellTimeSpec(tuple(total * w / w.sum()))


def random_omega(rng, N):
    om = np.zeros((N, N))
    for i in range(N):
        w = rng.uniform(0.2, 1.0, N - 1)
        om[i, [j for j in range(N) if j != i]] = w / w.sum()
    return om


def random_emission(rng, family):
    if family == "normal":
        return Normal(rng.normal(0, 2), rng.uniform(0.5, 2))
    if family == "zigamma":
        return ZeroInflatedGamma(rng.uniform(0.05, 0.3), rng.uniform(0.5, 5), rng.uniform(0.3, 3))
    if family == "vonmises":
        return VonMises(rng.uniform(-np.pi, np.pi), rng.uniform(0, 5))
    return Poisson(rng.uniform(0.5, 6))


def random_model(rng, N, R, families=("normal",), init="stationary", geometric=False):
    Rs = [R] * N if np.isscalar(R) else list(R)
    if geometric:
        dwell = [geometric_dwell(rng.uniform(0.2, 0.9), r) for r in Rs]
    else:
        dwell = [random_dwell(rng, r) for r in Rs]
    emissions = [tuple(random_emission(rng, f) for f in families) for _ in range(N)]
    weights = None
    if init == "fresh":
        w = rng.uniform(0.2, 1, N)
        weights = w / w.sum()
    return HsmmModel(dwell, random_omega(rng, N), emissions, init=init, init_weights=weights)


def random_data(rng, model, T, missing=0.15):
    """Observations drawn from each state's emissions at random, with some missing."""
    C = model.n_channels
    values = np.empty((T, C))
    for t in range(T):
        i = rng.integers(model.n_states)
        for c in range(C):
            values[t, c] = model.emissions[i][c].sample(rng, 1)[0]
    values[rng.random((T, C)) < missing] = np.nan
    return Dataset(tuple(f"y{c}" for c in range(C)), values)


# A three-state step/angle model whose third state has an almost bimodal dwell PMF.
TRUE_PI = (
    (0.30, 0.22, 0.15, 0.10, 0.07, 0.05, 0.03, 0.02, 0.015, 0.01),
    (0.05, 0.10, 0.16, 0.20, 0.17, 0.12, 0.08, 0.05, 0.03, 0.02),
    (0.04, 0.12, 0.20, 0.12, 0.06, 0.05, 0.09, 0.12, 0.09, 0.05),
)
TRUE_OMEGA = ((0, 0.6, 0.4), (0.5, 0, 0.5), (0.7, 0.3, 0))
TRUE_EMISSIONS = (
    (ZeroInflatedGamma(0.05, 10, 8), VonMises(0, 0.3)),
    (ZeroInflatedGamma(0.01, 80, 50), VonMises(0, 1.0)),
    (ZeroInflatedGamma(0.01, 400, 200), VonMises(0, 4.0)),
)


def bimodal_truth():
    return HsmmModel([DwellTimeSpec(p) for p in TRUE_PI], np.array(TRUE_OMEGA, dtype=float), list(TRUE_EMISSIONS))


def dwell_tv(a, b, horizon=2000):
    """Total-variation distance of two dwell PMFs over r = 1..horizon plus the remaining mass."""
    from pmlhsmm import dwell_pmf

    r = np.arange(1, horizon + 1)
    pa, pb = np.asarray(dwell_pmf(a, r)), np.asarray(dwell_pmf(b, r))
    rest = abs((1 - pa.sum()) - (1 - pb.sum()))
    return 0.5 * (np.abs(pa - pb).sum() + rest)
