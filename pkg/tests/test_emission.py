import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from pmlhsmm.emission import (
    ChannelValueError,
    Normal,
    Poisson,
    VonMises,
    ZeroInflatedGamma,
    bessel_i0,
    bessel_ratio_i1_i0,
    emission_cdf,
    emission_density,
    joint_density,
    log_bessel_i0,
    log_density_matrix,
    params_from_dict,
    validate_channel,
    wrap_angle,
)


def gamma_p_oracle(a, x):
    """Regularised lower incomplete gamma: series for x < a + 1, Lentz continued fraction otherwise."""
    if x <= 0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1:
        ap, s, d = a, 1.0 / a, 1.0 / a
        for _ in range(10_000):
            ap += 1
            d *= x / ap
            s += d
            if abs(d) < abs(s) * 1e-16:
                break
        return s * math.exp(-x + a * math.log(x) - lg)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return 1.0 - math.exp(-x + a * math.log(x) - lg) * h


def test_density_examples():
    for mu in (-2.0, 0.0, 1.3):
        for y in (-3.0, 0.0, 2.5):
            assert emission_density(VonMises(mu, 0.0), y) == pytest.approx(1 / (2 * math.pi), rel=1e-14)
    assert emission_density(ZeroInflatedGamma(0.1, 3.0, 2.0), 0.0) == pytest.approx(0.1, rel=1e-14)
    assert emission_density(Normal(0, 1), 0.0) == pytest.approx(0.3989422804014327, rel=1e-14)
    assert emission_density(Poisson(2.0), 3.0) == pytest.approx(math.exp(-2) * 8 / 6, rel=1e-13)


def test_zigamma_continuous_part():
    p = ZeroInflatedGamma(0.2, 4.0, 2.0)
    k, b = 4.0, 1.0  # shape mean^2/sd^2, rate mean/sd^2
    y = 3.3
    expected = 0.8 * b**k * y ** (k - 1) * math.exp(-b * y) / math.gamma(k)
    assert emission_density(p, y) == pytest.approx(expected, rel=1e-13)


def test_joint_density():
    ps = (Normal(0, 1), VonMises(0.5, 2.0))
    assert joint_density(ps, (math.nan, math.nan)) == 1.0
    assert joint_density(ps[:1], (0.3,)) == pytest.approx(emission_density(ps[0], 0.3), rel=1e-15)
    assert joint_density(ps, (0.3, -1.0)) == pytest.approx(emission_density(ps[0], 0.3) * emission_density(ps[1], -1.0), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_joint_density_with_missing_channels(seed):
    rng = np.random.default_rng(seed)
    ps = (Normal(0, 1), ZeroInflatedGamma(0.1, 2, 1), VonMises(0, 1), Poisson(3.0))
    y = [1.0, 0.5, 0.2, 2.0]
    miss = rng.random(4) < 0.5
    obs = [math.nan if m else v for v, m in zip(y, miss)]
    expect = math.prod(emission_density(p, v) for p, v, m in zip(ps, y, miss) if not m)
    assert joint_density(ps, obs) == pytest.approx(expect, rel=1e-12)
    lm = log_density_matrix([ps], np.array([obs]))
    assert math.exp(lm[0, 0]) == pytest.approx(expect, rel=1e-12)


def test_cdf_examples():
    assert emission_cdf(ZeroInflatedGamma(0.15, 2.0, 1.0), 0.0) == pytest.approx(0.15, rel=1e-15)
    assert emission_cdf(Normal(0, 1), 0.0) == 0.5
    with pytest.raises(NotImplementedError):
        emission_cdf(VonMises(0, 1), 0.1)


def test_gamma_cdf_against_independent_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        mean, sd = rng.uniform(0.3, 50), rng.uniform(0.2, 40)
        z = rng.uniform(0.01, 0.4)
        p = ZeroInflatedGamma(z, mean, sd)
        y = float(rng.gamma(p.shape, 1 / p.rate))
        expect = z + (1 - z) * gamma_p_oracle(p.shape, p.rate * y)
        assert emission_cdf(p, y) == pytest.approx(expect, abs=1e-9)


@pytest.mark.parametrize("kappa", [0.1, 1.0, 10.0, 100.0])
def test_bessel_i0_reference(kappa):
    assert bessel_i0(kappa) == pytest.approx(float(special.i0(kappa)), rel=1e-10)
    # large-argument expansion as a second reference (accurate enough only at the top of the range)
    if kappa >= 100:
        asym = math.exp(kappa) / math.sqrt(2 * math.pi * kappa) * sum(
            math.prod((2 * j - 1) ** 2 for j in range(1, k + 1)) / (math.factorial(k) * (8 * kappa) ** k) for k in range(0, 12)
        )
        assert bessel_i0(kappa) == pytest.approx(asym, rel=1e-9)


@pytest.mark.parametrize("x", [0.0, 0.5, 3.0, 40.0, 499.0, 501.0, 2000.0])
def test_bessel_log_and_ratio(x):
    assert log_bessel_i0(x) == pytest.approx(math.log(special.i0e(x)) + x, rel=1e-12, abs=1e-14)
    ref = special.i1e(x) / special.i0e(x) if x > 0 else 0.0
    assert bessel_ratio_i1_i0(x) == pytest.approx(ref, rel=1e-11, abs=1e-15)


@pytest.mark.parametrize(
    "p,lo,hi",
    [
        (Normal(1.0, 2.0), -np.inf, np.inf),
        (VonMises(0.4, 3.0), -math.pi, math.pi),
        (VonMises(-2.0, 0.2), -math.pi, math.pi),
    ],
)
def test_densities_integrate_to_one(p, lo, hi):
    val, _ = integrate.quad(lambda y: emission_density(p, y), lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_zigamma_total_mass():
    p = ZeroInflatedGamma(0.2, 3.0, 2.0)
    cont, _ = integrate.quad(lambda y: emission_density(p, y), 0, np.inf, epsabs=1e-12, limit=200)
    assert cont + p.zero_mass == pytest.approx(1.0, abs=1e-6)
    assert sum(emission_density(Poisson(4.0), k) for k in range(80)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "p",
    [
        ZeroInflatedGamma(0.05, 10.0, 8.0),
        ZeroInflatedGamma(0.3, 0.5, 2.0),
        ZeroInflatedGamma(0.9, 400.0, 1.0),
        VonMises(0.0, 0.3),
        VonMises(3.0, 12.0),
        VonMises(-2.5, 1e-3),
        Normal(-3.0, 0.1),
        Normal(0.0, 1.0),
        Normal(1e3, 50.0),
        Poisson(0.2),
        Poisson(3.0),
        Poisson(150.0),
    ],
)
def test_working_round_trip(p):
    q = type(p).from_working(p.working())
    for a, b in zip(p.to_dict().values(), q.to_dict().values()):
        if isinstance(a, float):
            assert b == pytest.approx(a, rel=1e-10, abs=1e-12)
    np.testing.assert_allclose(type(p).from_working(p.working()).working(), p.working(), rtol=1e-10, atol=1e-12)
    assert params_from_dict(p.to_dict()) == p


def test_vonmises_location_wraps_on_read_back():
    p = VonMises.from_working([math.pi + 0.5, 0.0])
    assert p.location == pytest.approx(-math.pi + 0.5, abs=1e-12)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


@pytest.mark.parametrize(
    "p,ys",
    [
        (ZeroInflatedGamma(0.1, 5.0, 3.0), [0.0, 0.3, 4.0, 17.0]),
        (VonMises(0.7, 2.5), [-3.0, 0.0, 1.1, 3.1]),
        (Normal(0.5, 1.7), [-2.0, 0.5, 4.0]),
        (Poisson(3.5), [0.0, 2.0, 9.0]),
    ],
)
def test_dlogpdf_matches_finite_differences(p, ys):
    ys = np.array(ys)
    w = p.working()
    h = 1e-6
    num = np.empty((len(ys), len(w)))
    for k in range(len(w)):
        e = np.zeros(len(w))
        e[k] = h
        num[:, k] = (type(p).from_working(w + e).logpdf(ys) - type(p).from_working(w - e).logpdf(ys)) / (2 * h)
    np.testing.assert_allclose(p.dlogpdf(ys), num, rtol=1e-6, atol=1e-7)


def test_cdf_bounds_at_point_masses():
    lo, hi = ZeroInflatedGamma(0.2, 2.0, 1.0).cdf_bounds(np.array([0.0, 1.0]))
    np.testing.assert_allclose(lo, [0.0, hi[1]])
    assert hi[0] == pytest.approx(0.2)
    lo, hi = Poisson(2.0).cdf_bounds(np.array([0.0, 3.0]))
    np.testing.assert_allclose(lo, [0.0, special.pdtr(2, 2.0)])
    np.testing.assert_allclose(hi, [math.exp(-2), special.pdtr(3, 2.0)])


def test_validate_channel():
    y = validate_channel("vonmises", np.array([-math.pi, 0.2, np.nan]))
    assert y[0] == math.pi and np.isnan(y[2])
    with pytest.raises(ChannelValueError) as err:
        validate_channel("zigamma", np.array([1.0, -0.1]))
    assert err.value.index == 1
    with pytest.raises(ValueError):
        validate_channel("vonmises", np.array([4.0]))
    with pytest.raises(ValueError):
        validate_channel("poisson", np.array([1.5]))


def test_parameter_validation():
    with pytest.raises(ValueError):
        ZeroInflatedGamma(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ZeroInflatedGamma(0.1, -1.0, 1.0)
    with pytest.raises(ValueError):
        VonMises(0.0, -1.0)
    with pytest.raises(ValueError):
        Normal(0.0, 0.0)
    with pytest.raises(ValueError):
        Poisson(0.0)


def test_samplers_have_right_moments():
    rng = np.random.default_rng(5)
    x = ZeroInflatedGamma(0.1, 10.0, 4.0).sample(rng, 200_000)
    assert np.mean(x == 0) == pytest.approx(0.1, abs=0.003)
    assert x[x > 0].mean() == pytest.approx(10.0, rel=0.01)
    a = VonMises(1.0, 4.0).sample(rng, 200_000)
    assert np.all((a > -math.pi) & (a <= math.pi))
    assert math.atan2(np.sin(a).mean(), np.cos(a).mean()) == pytest.approx(1.0, abs=0.01)
    assert np.hypot(np.sin(a).mean(), np.cos(a).mean()) == pytest.approx(bessel_ratio_i1_i0(4.0), abs=0.005)
