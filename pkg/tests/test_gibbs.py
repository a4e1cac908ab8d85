"""Gibbs sampler against the enumeration oracle on tiny instances."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.random import default_rng

from elicit.exact import exact_enumerate
from elicit.gibbs import gibbs_fit
from elicit.model import FeedbackAnswer, FeedbackSet, Hyperparameters

from conftest import fixed_hp, make_dataset, make_feedback


def test_deterministic_given_seed(tiny_dataset, tiny_feedback):
    hp = fixed_hp()
    a = gibbs_fit(tiny_dataset, tiny_feedback, hp, n_samples=200, n_burnin=50, seed=3)
    b = gibbs_fit(tiny_dataset, tiny_feedback, hp, n_samples=200, n_burnin=50, seed=3)
    np.testing.assert_array_equal(a.inclusion, b.inclusion)
    np.testing.assert_array_equal(a.weight_mean, b.weight_mean)
    np.testing.assert_array_equal(a.predictive_mean, b.predictive_mean)
    c = gibbs_fit(tiny_dataset, tiny_feedback, hp, n_samples=200, n_burnin=50, seed=4)
    assert not np.array_equal(a.weight_mean, c.weight_mean)


def test_shapes_and_ranges(tiny_dataset, tiny_feedback):
    res = gibbs_fit(tiny_dataset, tiny_feedback, fixed_hp(), n_samples=150, n_burnin=30, seed=0)
    n, m, d = tiny_dataset.n_samples, tiny_dataset.n_features, tiny_dataset.n_drugs
    assert res.inclusion.shape == (d, m)
    assert res.weight_mean.shape == (d, m)
    assert res.predictive_mean.shape == (n, d)
    assert res.predictive_var.shape == (n, d)
    assert res.n_kept == 150
    assert np.all((res.inclusion >= 0) & (res.inclusion <= 1))
    assert np.all((res.prob_nonneg >= 0) & (res.prob_nonneg <= 1))
    assert np.all(res.weight_var >= 0)
    assert np.all(res.predictive_var > 0)
    assert np.all(res.sigma2_mean > 0)
    assert np.all((res.rho_mean >= 0) & (res.rho_mean <= 1))
    assert np.all((res.pi_mean > 0) & (res.pi_mean < 1))


def test_fixed_scalars_are_not_resampled(tiny_dataset):
    hp = fixed_hp(fixed_sigma2=0.33, fixed_rho=0.22, fixed_pi=0.88)
    res = gibbs_fit(tiny_dataset, FeedbackSet(), hp, n_samples=100, n_burnin=20, seed=1)
    np.testing.assert_allclose(res.sigma2_mean, 0.33)
    np.testing.assert_allclose(res.rho_mean, 0.22)
    np.testing.assert_allclose(res.pi_mean, 0.88)


@pytest.mark.parametrize("seed", [0, 1])
def test_matches_enumeration_with_mixed_feedback(seed):
    # Long chain on a 2-feature instance with every answer type in play.
    ds = make_dataset(n=6, m=2, d=2, seed=seed)
    fb = make_feedback(
        ds,
        {
            (ds.drugs[0].id, ds.features[0].id): FeedbackAnswer.RELEVANT_POSITIVE,
            (ds.drugs[0].id, ds.features[1].id): FeedbackAnswer.NOT_RELEVANT,
            (ds.drugs[1].id, ds.features[0].id): FeedbackAnswer.RELEVANT_NEGATIVE,
            (ds.drugs[1].id, ds.features[1].id): FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION,
        },
    )
    hp = fixed_hp(fixed_tau=0.5)
    want = exact_enumerate(ds, fb, hp)
    got = gibbs_fit(ds, fb, hp, n_samples=20000, n_burnin=2000, seed=seed)
    for j, drug in enumerate(ds.drugs):
        de = want[drug.id]
        np.testing.assert_allclose(got.inclusion[j], de.inclusion, atol=0.02)
        np.testing.assert_allclose(got.weight_mean[j], de.weight_mean, atol=0.02)
        pred = ds.X @ de.weight_mean
        np.testing.assert_allclose(got.predictive_mean[:, j], pred, atol=0.03)


def test_learns_rho_and_pi_from_feedback():
    # Many confidently-relevant answers on truly predictive features should
    # pull the accuracy estimate above its prior mean when the data agrees.
    ds = make_dataset(n=20, m=4, d=1, seed=7)
    hp = Hyperparameters(fixed_tau=1.0)
    fb = make_feedback(
        ds,
        {
            (ds.drugs[0].id, ds.features[0].id): FeedbackAnswer.RELEVANT_POSITIVE,
            (ds.drugs[0].id, ds.features[1].id): FeedbackAnswer.RELEVANT_NEGATIVE,
            (ds.drugs[0].id, ds.features[2].id): FeedbackAnswer.NOT_RELEVANT,
            (ds.drugs[0].id, ds.features[3].id): FeedbackAnswer.NOT_RELEVANT,
        },
    )
    base = gibbs_fit(ds, FeedbackSet(), hp, n_samples=4000, n_burnin=500, seed=0)
    res = gibbs_fit(ds, fb, hp, n_samples=4000, n_burnin=500, seed=0)
    # Feedback raises inclusion of the flagged feature relative to no feedback.
    assert res.inclusion[0, 0] > base.inclusion[0, 0]
    # The direction claims match the planted signs, so accuracy stays high.
    assert res.pi_mean[0] > 0.7
    assert res.prob_nonneg[0, 0] > 0.5


def test_dont_know_is_inert(tiny_dataset):
    hp = fixed_hp()
    fb = make_feedback(
        tiny_dataset,
        {(tiny_dataset.drugs[0].id, tiny_dataset.features[0].id): FeedbackAnswer.DONT_KNOW},
    )
    a = gibbs_fit(tiny_dataset, FeedbackSet(), hp, n_samples=300, n_burnin=50, seed=5)
    b = gibbs_fit(tiny_dataset, fb, hp, n_samples=300, n_burnin=50, seed=5)
    np.testing.assert_array_equal(a.inclusion, b.inclusion)
    np.testing.assert_array_equal(a.weight_mean, b.weight_mean)
