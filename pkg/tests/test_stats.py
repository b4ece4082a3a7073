import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmbm_coupler.errors import DegenerateInput, DomainError, TooFewSamples
from mmbm_coupler.model import validate_params
from mmbm_coupler.sampling import substream
from mmbm_coupler.stats import (
    chi2_critical,
    chi_square_transitions,
    erlang_central_moment,
    erlang_moment_bound,
    fit_rate,
    kolmogorov_critical,
    ks_exponential,
    ks_two_sample,
    mean_within_se,
    mmbm_sup_bound,
)


@pytest.mark.parametrize("k, value", [(0, 1), (1, 0), (2, 4), (3, 8), (4, 72), (5, 416)])
def test_erlang_central_moments_exact(k, value):
    assert erlang_central_moment(4, 1, k) == value


def test_erlang_moment_rescaling():
    assert erlang_central_moment(4, 2, 3) == 1.0
    assert erlang_moment_bound(4, 2, 2) == pytest.approx(erlang_moment_bound(4, 1, 2) / 4)


def test_erlang_bound_examples():
    assert erlang_moment_bound(4, 1, 2) == pytest.approx(28.0)
    assert erlang_moment_bound(4, 1, 1) == pytest.approx(6.0)


def test_erlang_bound_dominates():
    for a in range(2, 21):
        for k in range(1, 11):
            assert erlang_central_moment(a, 1, k) <= erlang_moment_bound(a, 1, k)


def test_erlang_moments_against_samples():
    rng = substream(0, 0)
    for a in (2, 5):
        y = rng.gamma(a, 1.0, size=1_000_000)
        c = y - a
        for k in (2, 3, 4):
            exact = erlang_central_moment(a, 1, k)
            assert np.mean(c**k) == pytest.approx(exact, rel=0.05)


def test_erlang_argument_checks():
    with pytest.raises(ValueError):
        erlang_central_moment(0, 1, 2)
    with pytest.raises(ValueError):
        erlang_moment_bound(1, 1, 2)


def test_sup_bound_examples():
    params = validate_params({"Q": [[0.0]], "mu": [0.0], "sigma": [1.0]})
    b = mmbm_sup_bound(params, 1.0, 3.0)
    assert b.stated == pytest.approx(0.7979 / 3 * math.exp(-4.5), rel=1e-4)
    assert b.stated == pytest.approx(2.955e-3, rel=1e-3)
    assert b.conservative == pytest.approx(2 * b.stated)
    assert b.variance == b.stated  # sigma = 1: both scales coincide
    # reflection principle: P(sup |W| > 3) <= 4 P(W > 3) ~ 5.4e-3
    tail = 4 * 0.5 * math.erfc(3 / math.sqrt(2))
    assert tail <= b.conservative


def test_sup_bound_monotone_tail():
    params = validate_params({"Q": [[0.0]], "mu": [0.0], "sigma": [1.0]})
    vals = [mmbm_sup_bound(params, 1.0, a).conservative for a in np.linspace(1.5, 8, 30)]
    assert np.all(np.diff(vals) < 0)


def test_sup_bound_domain():
    params = validate_params({"Q": [[0.0]], "mu": [2.0], "sigma": [1.0]})
    with pytest.raises(DomainError):
        mmbm_sup_bound(params, 1.0, 1.5)
    with pytest.raises(DomainError):
        mmbm_sup_bound(params, 0.0, 3.0)


def test_kolmogorov_critical_value():
    assert kolmogorov_critical(0.01) == pytest.approx(1.62762, abs=1e-5)
    assert kolmogorov_critical(0.05) == pytest.approx(1.35810, abs=1e-4)


def test_ks_exponential_accepts_and_rejects():
    x = substream(1, 0).exponential(1 / 3.0, size=100_000)
    assert ks_exponential(x, 3.0).passed
    assert not ks_exponential(x, 6.0).passed
    with pytest.raises(TooFewSamples):
        ks_exponential(x[:10], 3.0)


def test_ks_two_sample():
    rng = substream(2, 0)
    a, b = rng.exponential(size=5000), rng.exponential(size=4000)
    assert ks_two_sample(a, b).passed
    assert not ks_two_sample(a, 1.3 * b).passed


def test_chi2_critical_value():
    # tabulated upper 1% points
    assert chi2_critical(1, 0.01) == pytest.approx(6.635, rel=0.03)
    assert chi2_critical(10, 0.01) == pytest.approx(23.209, rel=0.005)
    assert chi2_critical(50, 0.01) == pytest.approx(76.154, rel=0.002)


def test_chi_square_transitions():
    P = np.array([[0.3, 0.7], [0.6, 0.4]])
    rng = substream(3, 0)
    u = rng.random(1_000_000)
    chain = np.empty(1_000_000, dtype=np.int64)
    chain[0] = 0
    for k in range(1, len(chain)):
        chain[k] = int(u[k] >= P[chain[k - 1], 0])
    assert chi_square_transitions(chain, P).passed
    alt = np.arange(1000) % 2
    res = chi_square_transitions(alt, np.eye(2))
    assert not res.passed and math.isinf(res.statistic)
    with pytest.raises(TooFewSamples):
        chi_square_transitions(chain[:300], P)


def test_fit_rate_power_laws():
    ns = np.array([4, 8, 16, 32, 64], dtype=float)
    fit = fit_rate(list(zip(ns, ns**-0.5)))
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    fit = fit_rate(list(zip(ns, ns**-0.5 * np.log(ns))))
    assert fit.slope_logcorrected == pytest.approx(-0.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(1e-6, 1e6), seed=st.integers(0, 2**31))
def test_fit_rate_scale_invariance(c, seed):
    ns = [2.0, 4.0, 8.0, 16.0]
    stats = np.random.default_rng(seed).uniform(0.1, 1.0, 4)
    a = fit_rate(list(zip(ns, stats)))
    b = fit_rate(list(zip(ns, c * stats)))
    assert b.slope == pytest.approx(a.slope, abs=1e-12)
    assert b.intercept == pytest.approx(a.intercept + math.log(c), abs=1e-9)


def test_fit_rate_degenerate():
    with pytest.raises(DegenerateInput):
        fit_rate([(4, 1.0), (8, 0.5), (4, 0.9)])
    with pytest.raises(DegenerateInput):
        fit_rate([(4, 1.0), (8, 0.0), (16, 0.5)])


def test_mean_within_se():
    x = substream(4, 0).normal(2.0, 1.0, size=10_000)
    assert mean_within_se(x, 2.0)
    assert not mean_within_se(x, 2.5)
