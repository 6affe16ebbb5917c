import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import dwell_tv, random_data, random_model
from pmlhsmm import (
    Dataset,
    DwellTimeSpec,
    FitError,
    FitOptions,
    HsmmModel,
    ModelSpec,
    Normal,
    PenaltyConfig,
    fit,
    forward_loglik,
    initialize,
    penalty_value,
    refit,
)
from pmlhsmm.fit import Objective, ParameterLayout
from pmlhsmm.simulate import simulate


def two_state_truth():
    return HsmmModel(
        [DwellTimeSpec((0.05, 0.15, 0.3, 0.2, 0.1)), DwellTimeSpec((0.3, 0.25, 0.15, 0.1, 0.05))],
        [[0, 1], [1, 0]],
        [(Normal(0.0, 1.0),), (Normal(4.0, 1.0),)],
    )


@pytest.fixture(scope="module")
def two_state_data():
    return simulate(two_state_truth(), 5000, seed=1).observations


@pytest.mark.parametrize(
    "spec",
    [
        ModelSpec((4, 3, 5), ("zigamma", "vonmises")),
        ModelSpec((3, 3), ("normal", "poisson"), init="estimated"),
        ModelSpec((3, 3, 3), ("normal",), dwell_family="nbinom", init="uniform"),
        ModelSpec((3, 3, 3), ("normal",), dwell_family="geometric", convention="standard"),
        ModelSpec((2, 4, 3, 2), ("normal",), init="fresh"),
    ],
)
def test_analytic_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(len(spec.start_lengths))
    fams = spec.families
    model = random_model(rng, spec.n_states, spec.start_lengths, fams)
    data = random_data(rng, model, 60)
    if "poisson" in fams:
        data = Dataset(data.channels, np.where(np.isnan(data.values), np.nan, np.abs(np.round(data.values))))
    pen = PenaltyConfig((3.0,) * spec.n_states, 1) if spec.dwell_family == "free" else None
    obj = Objective(data, spec, pen)
    theta = initialize(data, spec, seed=3, jitter=0.3)
    _, g = obj.value_and_grad(theta)
    np.testing.assert_allclose(g, obj.fd_grad(theta), rtol=1e-5, atol=1e-6)
    _, gl = obj.loglik_and_grad(theta)
    np.testing.assert_allclose(gl, obj.fd_grad(theta, obj.loglik), rtol=1e-5, atol=1e-6)


def test_parameter_counts():
    assert ParameterLayout(ModelSpec((10,) * 3, ("zigamma", "vonmises"))).size == 48
    assert ParameterLayout(ModelSpec((10,) * 3, ("zigamma", "vonmises"), dwell_family="geometric")).size == 21
    assert ParameterLayout(ModelSpec((10,) * 3, ("zigamma", "vonmises"), dwell_family="nbinom")).size == 24


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_pack_unpack_round_trip(N, R, seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, N, R, ("zigamma", "vonmises"))
    lay = ParameterLayout(ModelSpec((R,) * N, ("zigamma", "vonmises")))
    theta = lay.pack(model)
    back = lay.unpack(theta)
    for a, b in zip(back.dwell, model.dwell):
        np.testing.assert_allclose(a.pi, b.pi, rtol=1e-9)
    np.testing.assert_allclose(back.omega, model.omega, atol=1e-12)
    np.testing.assert_allclose(lay.pack(back), theta, atol=1e-9)
    assert len(lay.labels()) == lay.size == len(set(lay.labels()))


def test_initialize_is_deterministic(two_state_data):
    spec = ModelSpec((5, 5), ("normal",))
    a = initialize(two_state_data, spec)
    np.testing.assert_array_equal(a, initialize(two_state_data, spec))
    b = initialize(two_state_data, spec, seed=4, jitter=0.1)
    np.testing.assert_array_equal(b, initialize(two_state_data, spec, seed=4, jitter=0.1))
    assert not np.array_equal(a, b)


def test_fit_is_deterministic(two_state_data):
    data = two_state_data.masked(np.arange(two_state_data.T) < 800)
    spec = ModelSpec((5, 5), ("normal",))
    opts = FitOptions(n_starts=2, seed=3)
    a = fit(data, spec, PenaltyConfig((10.0, 10.0), 2), opts)
    b = fit(data, spec, PenaltyConfig((10.0, 10.0), 2), opts)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.penalised_loglik == b.penalised_loglik


@pytest.fixture(scope="module")
def two_state_fit(two_state_data):
    return fit(two_state_data, ModelSpec((5, 5), ("normal",)), PenaltyConfig((10.0, 10.0), 2), FitOptions(n_starts=2))


def test_recovery_two_states(two_state_fit):
    res = two_state_fit
    assert res.converged
    truth = two_state_truth()
    for est, true in zip(res.model.dwell, truth.dwell):
        assert dwell_tv(est, true) <= 0.05
    assert res.model.emissions[0][0].mean == pytest.approx(0.0, abs=0.1)
    assert res.model.emissions[1][0].mean == pytest.approx(4.0, abs=0.1)


def test_refit_is_stationary(two_state_data, two_state_fit):
    again = refit(two_state_data, two_state_fit)
    assert abs(again.penalised_loglik - two_state_fit.penalised_loglik) < 1e-6


def test_reported_values_are_consistent(two_state_data, two_state_fit):
    res = two_state_fit
    assert res.loglik == pytest.approx(forward_loglik(res.model, two_state_data).value, rel=1e-12)
    assert res.penalty == pytest.approx(penalty_value(res.model, res.penalty_config), rel=1e-12)
    assert res.penalised_loglik == pytest.approx(res.loglik - res.penalty, rel=1e-12)
    assert len(res.starts) == 2 and res.n_params == 2 * 5 + 2 * 2


def test_penalty_response(two_state_data):
    data = two_state_data.masked(np.arange(two_state_data.T) < 1500)
    spec = ModelSpec((5, 5), ("normal",))
    opts = FitOptions(n_starts=1)
    base = fit(data, spec, None, opts)
    prev_pen = math.inf
    for lam in (1.0, 100.0, 1e4):
        res = fit(data, spec, PenaltyConfig((lam, lam), 2), FitOptions(n_starts=1, theta0=tuple(base.theta)))
        # the unpenalised optimum has the higher log-likelihood
        assert base.loglik >= res.loglik - 1e-6
        raw = penalty_value(res.model, PenaltyConfig((1.0, 1.0), 2))
        assert raw <= prev_pen + 1e-9
        prev_pen = raw


def test_geometric_family_is_an_hmm(two_state_data):
    data = two_state_data.masked(np.arange(two_state_data.T) < 1000)
    res = fit(data, ModelSpec((3, 3), ("normal",), dwell_family="geometric"), None, FitOptions(n_starts=1))
    for d in res.model.dwell:
        h = np.array([d.pi[0], d.pi[1] / (1 - d.pi[0]), d.pi[2] / (1 - d.pi[0] - d.pi[1])])
        np.testing.assert_allclose(h, h[0], rtol=1e-8)


def test_fd_gradient_option(two_state_data):
    data = Dataset(two_state_data.channels, two_state_data.values[:300])
    spec = ModelSpec((3, 3), ("normal",))
    a = fit(data, spec, None, FitOptions(n_starts=1))
    b = fit(data, spec, None, FitOptions(n_starts=1, gradient="fd"))
    assert b.loglik == pytest.approx(a.loglik, abs=1e-3)
    with pytest.raises(ValueError):
        fit(data, spec, None, FitOptions(n_starts=1, gradient="nope"))


def test_penalty_needs_free_dwell():
    data = Dataset(("y",), [[1.0], [2.0], [3.0]])
    with pytest.raises(ValueError):
        Objective(data, ModelSpec((2, 2), ("normal",), dwell_family="geometric"), PenaltyConfig((1.0, 1.0), 1))


def test_fit_error_when_nothing_is_finite():
    data = Dataset(("y",), [[1.0], [2.0], [3.0]])
    spec = ModelSpec((2, 2), ("normal",))
    theta0 = np.full(ParameterLayout(spec).size, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(FitError):
            fit(data, spec, None, FitOptions(n_starts=1, theta0=tuple(theta0)))


def test_too_few_observations_warns():
    data = Dataset(("y",), [[0.1], [np.nan], [2.0], [1.5]])
    with pytest.warns(UserWarning, match="observed time points"):
        fit(data, ModelSpec((2, 2), ("normal",)), None, FitOptions(n_starts=1, maxiter=5))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((1, 3), ("normal",))
    with pytest.raises(ValueError):
        ModelSpec((3,), ("normal",))
    with pytest.raises(ValueError):
        ModelSpec((3, 3), ("cauchy",))


def test_states_are_ordered_by_first_channel(two_state_data):
    data = Dataset(two_state_data.channels, two_state_data.values[:600])
    res = fit(data, ModelSpec((3, 3), ("normal",)), None, FitOptions(n_starts=3, jitter=0.5))
    means = [e[0].mean for e in res.model.emissions]
    assert means == sorted(means)


@pytest.mark.slow
def test_estimator_consistency_smoke():
    """Average dwell error shrinks as the series grows."""
    truth = two_state_truth()
    spec = ModelSpec((5, 5), ("normal",))
    err = {}
    for T in (2000, 8000):
        tvs = []
        for seed in range(20):
            data = simulate(truth, T, seed=100 + seed).observations
            res = fit(data, spec, PenaltyConfig((10.0, 10.0), 2), FitOptions(n_starts=1))
            tvs.append(np.mean([dwell_tv(e, t) for e, t in zip(res.model.dwell, truth.dwell)]))
        err[T] = float(np.mean(tvs))
    assert err[8000] < err[2000]
