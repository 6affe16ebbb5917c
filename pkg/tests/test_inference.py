import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import random_data, random_model
from pmlhsmm import (
    Dataset,
    DwellTimeSpec,
    HsmmModel,
    Normal,
    PenaltyConfig,
    VonMises,
    ZeroInflatedGamma,
    expand,
    forward_loglik,
    penalised_loglik,
    penalty_value,
    pseudo_residuals,
    state_probs,
    viterbi,
)
from pmlhsmm.emission import log_density_matrix
from pmlhsmm.inference import initial_vector, loglik_gradient, path_log_probability
from pmlhsmm.simulate import simulate


def unscaled_loglik(hmm, data, convention="printed"):
    """Plain matrix product ``delta [Gamma] P(y1) Gamma P(y2) ... 1`` without any rescaling."""
    P = np.exp(log_density_matrix(hmm.emissions, data.values))[:, hmm.aggregate_of]
    v = hmm.delta @ hmm.tpm if convention == "printed" else hmm.delta.copy()
    v = v * P[0]
    for t in range(1, data.T):
        v = (v @ hmm.tpm) * P[t]
    return math.log(math.fsum(v))


def path_posteriors(hmm, data, convention):
    """Joint path probabilities over every sub-state path (small T only)."""
    P = np.exp(log_density_matrix(hmm.emissions, data.values))[:, hmm.aggregate_of]
    init = initial_vector(hmm, convention)
    K = hmm.n_expanded
    probs = {}
    for path in itertools.product(range(K), repeat=data.T):
        p = init[path[0]] * P[0, path[0]]
        for t in range(1, data.T):
            p *= hmm.tpm[path[t - 1], path[t]] * P[t, path[t]]
        if p > 0:
            probs[path] = p
    return probs


def test_single_step_example():
    model = HsmmModel(
        [DwellTimeSpec((0.3, 0.2)), DwellTimeSpec((0.1, 0.5))],
        [[0, 1], [1, 0]],
        [(Normal(0, 1),), (Normal(0, 1),)],
        init="uniform",
    )
    data = Dataset(("y",), [[0.0]])
    for conv in ("printed", "standard"):
        assert forward_loglik(model, data, conv).value == pytest.approx(math.log(1 / math.sqrt(2 * math.pi)), rel=1e-14)


def test_all_missing_is_zero():
    rng = np.random.default_rng(0)
    model = random_model(rng, 3, 3, ("normal", "vonmises"))
    data = Dataset(("a", "b"), np.full((7, 2), np.nan))
    assert forward_loglik(model, data).value == pytest.approx(0.0, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 3), st.integers(2, 4), st.integers(1, 8), st.sampled_from(["printed", "standard"]), st.integers(0, 2**32 - 1))
def test_scaled_equals_unscaled(N, R, T, conv, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, N, R, ("normal", "zigamma"))
    data = random_data(rng, model, T)
    hmm = expand(model)
    ll = forward_loglik(hmm, data, conv).value
    assert ll == pytest.approx(unscaled_loglik(hmm, data, conv), rel=1e-10, abs=1e-12)


def test_conventions_agree_under_stationarity():
    rng = np.random.default_rng(2)
    model = random_model(rng, 3, 4, ("normal",))
    data = random_data(rng, model, 30)
    assert forward_loglik(model, data, "printed").value == pytest.approx(forward_loglik(model, data, "standard").value, rel=1e-12)
    m2 = HsmmModel(model.dwell, model.omega, model.emissions, init="uniform")
    assert forward_loglik(m2, data, "printed").value != pytest.approx(forward_loglik(m2, data, "standard").value, rel=1e-6)


def test_zero_density_gives_minus_inf():
    model = HsmmModel(
        [DwellTimeSpec((0.3, 0.3))] * 2, [[0, 1], [1, 0]], [(ZeroInflatedGamma(0.1, 1, 1),)] * 2
    )
    data = Dataset(("s",), [[1.0], [-1.0]])
    ll = forward_loglik(model, data)
    assert ll.value == -math.inf


def test_penalised_loglik():
    rng = np.random.default_rng(5)
    model = random_model(rng, 3, 5, ("normal",))
    data = random_data(rng, model, 40)
    ll = forward_loglik(model, data).value
    assert penalised_loglik(model, PenaltyConfig((0.0,) * 3, 2), data) == ll
    flat = HsmmModel([DwellTimeSpec((0.1,) * 5)] * 3, model.omega, model.emissions)
    assert penalised_loglik(flat, PenaltyConfig((50.0,) * 3, 1), data) == pytest.approx(forward_loglik(flat, data).value, rel=1e-14)
    cfg = PenaltyConfig((3.0, 30.0, 300.0), 2)
    pen = sum(l * np.sum(np.diff(d.pi, 2) ** 2) for l, d in zip(cfg.lam, model.dwell))
    assert penalised_loglik(model, cfg, data) == pytest.approx(unscaled_loglik(expand(model), data) - pen, rel=1e-10)
    assert penalty_value(model, cfg) == pytest.approx(pen, rel=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    for _ in range(10):
        model = random_model(rng, 3, (2, 3, 4), ("normal", "vonmises"))
        data = random_data(rng, model, 50)
        order = list(rng.permutation(3))
        for conv in ("printed", "standard"):
            a = forward_loglik(model, data, conv).value
            b = forward_loglik(model.permute(order), data, conv).value
            assert b == pytest.approx(a, rel=1e-12)


def test_viterbi_separated_states():
    model = HsmmModel(
        [DwellTimeSpec((0.1, 0.2, 0.3)), DwellTimeSpec((0.3, 0.2, 0.1))],
        [[0, 1], [1, 0]],
        [(Normal(-100, 1),), (Normal(100, 1),)],
    )
    sim = simulate(model, 2000, seed=3)
    path = viterbi(model, sim.observations)
    assert np.mean(path == sim.states) >= 0.99


def test_viterbi_single_step():
    rng = np.random.default_rng(9)
    model = random_model(rng, 3, 3, ("normal",))
    data = Dataset(("y0",), [[0.4]])
    hmm = expand(model)
    dens = np.exp(log_density_matrix(hmm.emissions, data.values))[0, hmm.aggregate_of]
    k = int(np.argmax(initial_vector(hmm) * dens))
    assert viterbi(hmm, data)[0] == hmm.aggregate_of[k]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 3), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_viterbi_and_posteriors_against_enumeration(N, T, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, N, 2, ("normal",))
    data = random_data(rng, model, T, missing=0.1)
    hmm = expand(model)
    for conv in ("printed", "standard"):
        probs = path_posteriors(hmm, data, conv)
        best = max(probs, key=lambda p: (probs[p], [-k for k in p]))
        states, subs = viterbi(hmm, data, conv, return_substates=True)
        assert probs[tuple(subs)] == pytest.approx(probs[best], rel=1e-12)
        total = math.fsum(probs.values())
        post = np.zeros((T, N))
        for path, p in probs.items():
            for t, k in enumerate(path):
                post[t, hmm.aggregate_of[k]] += p / total
        sp = state_probs(hmm, data, conv)
        np.testing.assert_allclose(sp, post, atol=1e-10)
        np.testing.assert_allclose(sp.sum(axis=1), 1.0, atol=1e-10)


def test_viterbi_beats_true_path():
    rng = np.random.default_rng(12)
    for k in range(100):
        model = random_model(rng, 3, 3, ("normal",))
        sim = simulate(model, 40, seed=k)
        hmm = expand(model)
        _, subs = viterbi(hmm, sim.observations, return_substates=True)
        best = path_log_probability(hmm, sim.observations, subs)
        true = path_log_probability(hmm, sim.observations, sim.substates(model))
        assert np.isfinite(true)
        assert best >= true - 1e-9


def test_pseudo_residuals_single_state_like():
    # identical emissions in both states: the predictive law is the emission itself
    p = Normal(1.0, 2.0)
    model = HsmmModel([DwellTimeSpec((0.3, 0.3))] * 2, [[0, 1], [1, 0]], [(p,), (p,)])
    data = Dataset(("y",), [[0.3], [np.nan], [4.0]])
    r = pseudo_residuals(model, data, "y")
    from scipy.special import ndtri

    assert r[0] == pytest.approx(ndtri(p.cdf(np.array([0.3]))[0]), rel=1e-12)
    assert np.isnan(r[1])
    assert r[2] == pytest.approx(ndtri(p.cdf(np.array([4.0]))[0]), rel=1e-12)


def test_pseudo_residuals_reject_angles():
    rng = np.random.default_rng(1)
    model = random_model(rng, 2, 2, ("vonmises",))
    data = random_data(rng, model, 5)
    with pytest.raises(NotImplementedError):
        pseudo_residuals(model, data, 0)


def test_pseudo_residuals_seeded_and_normal():
    from scipy.stats import kstest

    model = HsmmModel(
        [DwellTimeSpec((0.2, 0.3, 0.2)), DwellTimeSpec((0.1, 0.1, 0.4))],
        [[0, 1], [1, 0]],
        [(ZeroInflatedGamma(0.2, 2.0, 1.0),), (ZeroInflatedGamma(0.05, 10.0, 4.0),)],
    )
    sim = simulate(model, 5000, seed=4)
    r1 = pseudo_residuals(model, sim.observations, 0, seed=1)
    r2 = pseudo_residuals(model, sim.observations, 0, seed=1)
    np.testing.assert_array_equal(r1, r2)
    assert kstest(r1, "norm").pvalue > 0.01


def test_gradient_pieces_match_finite_differences():
    rng = np.random.default_rng(21)
    model = random_model(rng, 3, 3, ("normal",), init="uniform")
    data = random_data(rng, model, 25)
    hmm = expand(model)
    for conv in ("printed", "standard"):
        g = loglik_gradient(hmm, data, conv)
        h = 1e-6
        for k, l in [(0, 1), (2, 3), (4, 6), (8, 8)]:
            up, dn = hmm.tpm.copy(), hmm.tpm.copy()
            up[k, l] += h
            dn[k, l] -= h
            num = (unscaled_loglik(type(hmm)(up, hmm.aggregate_of, hmm.position_of, hmm.delta, hmm.structure, 3, hmm.emissions), data, conv)
                   - unscaled_loglik(type(hmm)(dn, hmm.aggregate_of, hmm.position_of, hmm.delta, hmm.structure, 3, hmm.emissions), data, conv)) / (2 * h)
            assert g.d_tpm[k, l] == pytest.approx(num, rel=1e-5, abs=1e-7)
