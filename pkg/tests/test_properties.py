"""Randomized invariants checked with hypothesis.

Each property states something that must hold for every input, not just
the fixtures used elsewhere: transform round trips, metric ranges,
divergence positivity, and backend agreement on adversarial site
inputs.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elicit import _kernels_py
from elicit.data import standardize_columns
from elicit.evaluation import c_index, empirical_pvalue, mse
from elicit.model import GaussianPredictive
from elicit.strategies import kl_gaussian

compiled = pytest.importorskip("elicit._kernels")

finite = st.floats(
    min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False
)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 12),
    st.integers(1, 6),
    st.integers(0, 2**31 - 1),
)
def test_standardize_round_trip(n, m, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, m)) * rng.uniform(0.1, 50.0, size=m)
    out, transform = standardize_columns(raw)
    np.testing.assert_allclose(transform.invert(out), raw, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_c_index_range_and_antisymmetry(n, seed):
    rng = np.random.default_rng(seed)
    actuals = rng.normal(size=n)
    preds = rng.normal(size=n)
    c = c_index(preds, actuals)
    assert 0.0 <= c <= 1.0
    # Negating predictions flips every decided pair; ties stay ties.
    assert c_index(-preds, actuals) == pytest.approx(1.0 - c, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(finite, st.floats(1e-6, 1e6), finite, st.floats(1e-6, 1e6))
def test_kl_gaussian_nonnegative_and_zero_at_equality(m1, v1, m2, v2):
    p = GaussianPredictive(mean=m1, variance=v1)
    q = GaussianPredictive(mean=m2, variance=v2)
    assert kl_gaussian(p, q) >= 0.0
    assert kl_gaussian(p, p) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_empirical_pvalue_bounds(r, seed):
    rng = np.random.default_rng(seed)
    baselines = rng.normal(size=r)
    value = float(rng.normal())
    p = empirical_pvalue(value, baselines)
    assert 1.0 / (r + 1) <= p <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_mse_zero_iff_equal(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    assert mse(y, y) == 0.0
    shift = y + 1.0
    assert mse(shift, y) == pytest.approx(1.0)


def _random_site_inputs(rng, n):
    """Marginal-parameterized inputs mixing proper, flat, improper cavities."""
    q_site = rng.uniform(0.05, 3.0, n)
    prec_c = rng.uniform(0.2, 4.0, n)
    prec_c[rng.random(n) < 0.15] = 0.0
    prec_c[rng.random(n) < 0.1] = -rng.uniform(0.01, 0.5)
    v_marg = 1.0 / (prec_c + q_site)
    m_marg = rng.normal(0.0, 0.8, n)
    h_site = rng.normal(0.0, 0.5, n)
    u_site = rng.normal(0.0, 0.3, n)
    eta = rng.normal(-1.0, 1.5, n)
    eta[rng.random(n) < 0.05] = np.inf
    eta[rng.random(n) < 0.05] = -np.inf
    tau2 = rng.uniform(0.01, 0.5, n)
    return [
        np.ascontiguousarray(a)
        for a in (v_marg, m_marg, q_site, h_site, u_site, eta, tau2)
    ]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_mixture_site_backends_agree(seed, damping):
    rng = np.random.default_rng(seed)
    args = _random_site_inputs(rng, 24)
    py = _kernels_py.ss_site_update(*[a.copy() for a in args], damping, 1e-10, 1e12)
    cy = compiled.ss_site_update(*[a.copy() for a in args], damping, 1e-10, 1e12)
    for a, b in zip(py[:3], cy[:3]):
        np.testing.assert_allclose(a, b, rtol=5e-15, atol=5e-15)
    assert py[3] == cy[3]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sign_tilt_backends_agree(seed):
    rng = np.random.default_rng(seed)
    mu = np.ascontiguousarray(rng.normal(scale=3.0, size=16))
    var = np.ascontiguousarray(rng.uniform(0.01, 9.0, size=16))
    c_plus = np.ascontiguousarray(rng.uniform(0.01, 0.99, size=16))
    c_minus = np.ascontiguousarray(1.0 - c_plus)
    py = _kernels_py.sign_tilted_moments(mu, var, c_plus, c_minus)
    cy = compiled.sign_tilted_moments(mu, var, c_plus, c_minus)
    for a, b in zip(py, cy):
        np.testing.assert_allclose(a, b, rtol=5e-15, atol=5e-15)
    logz, mean, out_var = py
    assert np.all(np.isfinite(logz))
    # The tilt reweights the two half-lines, so variance can move either
    # way, but it stays a proper distribution.
    assert np.all(out_var > 0.0)
    assert np.all(np.isfinite(mean))
