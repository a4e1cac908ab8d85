"""Metrics, cross-validation conventions, synthetic data, simulated experts
and the elicitation harness."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.random import default_rng

from elicit.evaluation import (
    ElicitationTrace,
    EvaluationError,
    OracleExpert,
    ReplayExpert,
    SyntheticConfig,
    TracePoint,
    auc_mse,
    baseline_mean,
    baseline_ridge,
    bayes_bootstrap_compare,
    c_index,
    descriptor_discrimination,
    empirical_pvalue,
    feedback_from_csv,
    feedback_to_csv,
    generate_synthetic,
    loo_cv,
    mse,
    queries_log_csv,
    queries_to_half_improvement,
    run_elicitation_experiment,
    strip_direction,
    trace_csv,
    trace_long_csv,
)
from elicit.model import FeedbackAnswer, FeedbackEvent, FeedbackSet, Hyperparameters

from conftest import make_dataset, make_feedback


# ---------------------------------------------------------------------------
# Point metrics


def test_mse_basic():
    assert mse(np.array([1.0, 2.0]), np.array([1.0, 4.0])) == pytest.approx(2.0)
    with pytest.raises(EvaluationError):
        mse(np.zeros(3), np.zeros(4))


def test_c_index_closed_forms():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert c_index(y, y) == 1.0
    assert c_index(-y, y) == 0.0
    # All predictions tied on untied actuals: exact half by convention.
    assert c_index(np.zeros(4), y) == 0.5
    # Tied actual pairs are skipped, not counted.
    assert c_index(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 2.0])) == 1.0
    with pytest.raises(EvaluationError):
        c_index(np.array([1.0]), np.array([1.0]))
    with pytest.raises(EvaluationError):
        c_index(np.array([1.0, 2.0]), np.array([3.0, 3.0]))


# ---------------------------------------------------------------------------
# Leave-one-out protocol


def test_constant_predictor_identities():
    # The fold-mean predictor must score MSE (N/(N-1))^2 in full-dataset
    # units and concordance exactly one half, for any data.
    ds = make_dataset(n=9, m=3, d=2, seed=0)
    res = baseline_mean(ds)
    n = ds.n_samples
    want = (n / (n - 1)) ** 2
    np.testing.assert_allclose(res.mse_per_drug, want, rtol=1e-12)
    np.testing.assert_allclose(res.c_index_per_drug, 0.5, atol=0.0)
    assert res.failed_folds == ()


def test_loo_needs_three_samples():
    ds = make_dataset(n=2, m=2, d=1, seed=1)
    with pytest.raises(EvaluationError):
        baseline_mean(ds)


def test_failed_folds_are_warned_and_excluded():
    ds = make_dataset(n=6, m=2, d=1, seed=2)
    from elicit.evaluation import _loo_loop

    calls = []

    def predictor(fold, x_star):
        calls.append(1)
        if len(calls) == 3:
            raise RuntimeError("synthetic fold failure")
        return np.zeros(fold.n_drugs)

    with pytest.warns(UserWarning, match="fold 2 failed"):
        res = _loo_loop(ds, predictor)
    assert res.failed_folds == (2,)
    assert np.isnan(res.predictions[2]).all()

    def all_fail(fold, x_star):
        raise RuntimeError("nope")

    with pytest.warns(UserWarning):
        with pytest.raises(EvaluationError, match="too many failed folds"):
            _loo_loop(ds, all_fail)


def test_loo_cv_beats_mean_on_planted_signal():
    ds = make_dataset(n=14, m=3, d=2, seed=3)
    model = loo_cv(ds)
    mean = baseline_mean(ds)
    assert model.mse_mean < mean.mse_mean
    assert model.c_index_mean > 0.5


def test_loo_cv_warm_start_matches_cold():
    ds = make_dataset(n=10, m=3, d=2, seed=4)
    fb = make_feedback(
        ds, {(ds.drugs[0].id, ds.features[0].id): FeedbackAnswer.RELEVANT_POSITIVE}
    )
    from elicit.ep import ep_fit

    warm = ep_fit(ds, fb, Hyperparameters())
    a = loo_cv(ds, fb)
    b = loo_cv(ds, fb, warm_start=warm)
    np.testing.assert_allclose(a.mse_per_drug, b.mse_per_drug, rtol=1e-4)


def test_baseline_ridge_runs_and_competes():
    ds = make_dataset(n=16, m=4, d=1, seed=5, binary=False)
    ridge = baseline_ridge(ds)
    mean = baseline_mean(ds)
    assert ridge.mse_mean < mean.mse_mean
    with pytest.raises(EvaluationError):
        baseline_ridge(ds, lam_grid=[])
    with pytest.raises(EvaluationError):
        baseline_ridge(ds, lam_grid=[-1.0])


# ---------------------------------------------------------------------------
# Bootstrap comparison


def test_bayes_bootstrap_symmetry_and_ties():
    rng = default_rng(0)
    y = rng.normal(size=40)
    a = y + 0.1 * rng.normal(size=40)
    b = y + 0.8 * rng.normal(size=40)
    p_ab = bayes_bootstrap_compare(a, b, y, n_draws=400, rng=default_rng(1))
    p_ba = bayes_bootstrap_compare(b, a, y, n_draws=400, rng=default_rng(1))
    assert p_ab == pytest.approx(1.0 - p_ba, abs=1e-12)
    assert p_ab > 0.9
    # Identical predictions tie on every draw.
    p_tie = bayes_bootstrap_compare(a, a, y, n_draws=50, rng=default_rng(2))
    assert p_tie == 0.5


# ---------------------------------------------------------------------------
# Synthetic benchmark


def test_synthetic_config_validation():
    with pytest.raises(EvaluationError):
        SyntheticConfig(nonzero_per_drug=0)
    with pytest.raises(EvaluationError):
        SyntheticConfig(pool_features=5000)
    with pytest.raises(EvaluationError):
        SyntheticConfig(feature_model="counts")
    with pytest.raises(EvaluationError):
        SyntheticConfig(weight_dist="laplace")
    with pytest.raises(EvaluationError):
        SyntheticConfig(nonzero_per_drug=10, driver_features=5)
    with pytest.raises(EvaluationError):
        SyntheticConfig(noise_sd=-0.1)


def small_config(**kw):
    base = dict(
        n_samples=20,
        n_features=40,
        n_drugs=3,
        nonzero_per_drug=4,
        pool_features=12,
        noise_sd=0.5,
        weight_scale=0.8,
    )
    base.update(kw)
    return SyntheticConfig(**base)


def test_generate_synthetic_shapes_and_truth():
    ds, truth, pool = generate_synthetic(small_config(), default_rng(0))
    assert ds.n_samples == 20 and ds.n_features == 40 and ds.n_drugs == 3
    assert truth.weights.shape == (40, 3)
    np.testing.assert_array_equal(truth.active, truth.weights != 0)
    assert truth.active.sum(axis=0).tolist() == [4, 4, 4]
    np.testing.assert_array_equal(truth.signs, np.sign(truth.weights))
    # Pool: every selected feature is paired with every drug.
    assert len(pool.pairs) == 12 * 3
    feats = {f for _, f in pool.pairs}
    assert len(feats) == 12
    # Binary features before standardization.
    raw = ds.x_transform.invert(ds.X)
    assert set(np.unique(np.round(raw, 9))) <= {0.0, 1.0}


def test_generate_synthetic_round_robin_covers_every_drug():
    # The first pool features must include each drug's strongest feature.
    ds, truth, pool = generate_synthetic(small_config(), default_rng(3))
    pooled = {ds.feature_index(f) for _, f in pool.pairs}
    for j in range(3):
        top = int(np.argmax(np.abs(truth.weights[:, j])))
        assert top in pooled


def test_generate_synthetic_reproducible_and_seed_sensitive():
    cfg = small_config()
    a = generate_synthetic(cfg, default_rng(7))
    b = generate_synthetic(cfg, default_rng(7))
    c = generate_synthetic(cfg, default_rng(8))
    np.testing.assert_array_equal(a[0].X, b[0].X)
    np.testing.assert_array_equal(a[1].weights, b[1].weights)
    assert a[2].pairs == b[2].pairs
    assert not np.array_equal(a[0].X, c[0].X)


def test_generate_synthetic_fixed_weights_and_drivers():
    cfg = small_config(weight_dist="fixed", driver_features=8, weight_scale=1.5)
    ds, truth, pool = generate_synthetic(cfg, default_rng(1))
    mags = np.abs(truth.weights[truth.active])
    np.testing.assert_allclose(mags, 1.5)
    # All drugs draw from at most driver_features distinct features.
    used = np.flatnonzero(truth.active.any(axis=1))
    assert used.size <= 8


# ---------------------------------------------------------------------------
# Simulated experts


def test_replay_expert():
    table = {("d0", "f0"): FeedbackAnswer.RELEVANT_POSITIVE}
    ex = ReplayExpert(table)
    assert ex.answer(("d0", "f0")) is FeedbackAnswer.RELEVANT_POSITIVE
    assert ex.answer(("d0", "f9")) is FeedbackAnswer.DONT_KNOW
    fb = FeedbackSet([FeedbackEvent("d1", "f1", FeedbackAnswer.NOT_RELEVANT)])
    assert ReplayExpert(fb).answer(("d1", "f1")) is FeedbackAnswer.NOT_RELEVANT
    csv = "drug_id,feature_id,answer\nd0,f0,rel_neg\n"
    assert ReplayExpert.from_csv(csv).answer(("d0", "f0")) is FeedbackAnswer.RELEVANT_NEGATIVE
    with pytest.raises(EvaluationError):
        ReplayExpert.from_csv("drug_id,feature_id,answer\nd0,f0,rel_neg\nd0,f0,rel_pos\n")


def oracle_setup(seed=0, **kw):
    ds, truth, pool = generate_synthetic(small_config(), default_rng(seed))
    return ds, truth, pool, OracleExpert(ds, truth, **kw)


def test_oracle_expert_is_order_independent():
    ds, truth, pool, _ = oracle_setup()
    fwd = OracleExpert(ds, truth, seed=5)
    rev = OracleExpert(ds, truth, seed=5)
    pairs = list(pool.pairs)
    forward = {p: fwd.answer(p) for p in pairs}
    backward = {p: rev.answer(p) for p in reversed(pairs)}
    assert forward == backward


def test_oracle_expert_perfect_settings_reproduce_truth():
    ds, truth, pool, ex = oracle_setup(p_correct=1.0, coverage=1.0, seed=1)
    for drug_id, feature_id in pool.pairs:
        fi = ds.feature_index(feature_id)
        di = ds.drug_index(drug_id)
        got = ex.answer((drug_id, feature_id))
        if truth.is_relevant(fi, di):
            want = (
                FeedbackAnswer.RELEVANT_POSITIVE
                if truth.is_nonnegative(fi, di)
                else FeedbackAnswer.RELEVANT_NEGATIVE
            )
        else:
            want = FeedbackAnswer.NOT_RELEVANT
        assert got is want


def test_oracle_expert_coverage_gates_relevant_pairs_only():
    # Zero coverage: every truly relevant pair is unanswerable, while
    # irrelevant pairs still get substantive answers.
    ds, truth, pool, ex = oracle_setup(p_correct=1.0, coverage=0.0, seed=2)
    for drug_id, feature_id in pool.pairs:
        fi = ds.feature_index(feature_id)
        di = ds.drug_index(drug_id)
        got = ex.answer((drug_id, feature_id))
        if truth.is_relevant(fi, di):
            assert got is FeedbackAnswer.DONT_KNOW
        else:
            assert got is FeedbackAnswer.NOT_RELEVANT


def test_oracle_expert_direction_stripping_preserves_relevance():
    ds, truth, pool, _ = oracle_setup(seed=3)
    full = OracleExpert(ds, truth, seed=9)
    bare = OracleExpert(ds, truth, give_directions=False, seed=9)
    for pair in pool.pairs:
        a, b = full.answer(pair), bare.answer(pair)
        assert b is strip_direction(a) or (
            a is b
        ), f"stripping changed relevance at {pair}: {a} vs {b}"
        assert b not in (FeedbackAnswer.RELEVANT_POSITIVE, FeedbackAnswer.RELEVANT_NEGATIVE)


def test_oracle_expert_validation():
    ds, truth, pool, _ = oracle_setup()
    with pytest.raises(EvaluationError):
        OracleExpert(ds, truth, p_correct=0.0)
    with pytest.raises(EvaluationError):
        OracleExpert(ds, truth, coverage=1.5)


def test_strip_direction_mapping():
    assert strip_direction(FeedbackAnswer.RELEVANT_POSITIVE) is FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION
    assert strip_direction(FeedbackAnswer.RELEVANT_NEGATIVE) is FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION
    for keep in (
        FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION,
        FeedbackAnswer.NOT_RELEVANT,
        FeedbackAnswer.DONT_KNOW,
    ):
        assert strip_direction(keep) is keep


def test_feedback_csv_round_trip():
    fb = FeedbackSet(
        [
            FeedbackEvent("d0", "f0", FeedbackAnswer.RELEVANT_POSITIVE, iteration=1),
            FeedbackEvent("d1", "f1", FeedbackAnswer.DONT_KNOW, iteration=2),
        ]
    )
    text = feedback_to_csv(fb)
    back = feedback_from_csv(text)
    assert len(back) == 2
    assert back.get(("d0", "f0")).answer is FeedbackAnswer.RELEVANT_POSITIVE
    assert back.get(("d1", "f1")).iteration == 2


# ---------------------------------------------------------------------------
# Harness


def harness_setup(seed=0):
    ds, truth, pool = generate_synthetic(
        SyntheticConfig(
            n_samples=16,
            n_features=20,
            n_drugs=2,
            nonzero_per_drug=3,
            pool_features=6,
            noise_sd=0.4,
            weight_scale=1.0,
        ),
        default_rng(seed),
    )
    expert = OracleExpert(ds, truth, p_correct=0.95, coverage=0.9, seed=100 + seed)
    return ds, truth, pool, expert


def test_harness_validation():
    ds, truth, pool, expert = harness_setup()
    with pytest.raises(EvaluationError):
        run_elicitation_experiment(ds, pool, expert, strategy="greedy", budget=1)
    with pytest.raises(EvaluationError):
        run_elicitation_experiment(ds, pool, expert, budget=len(pool.pairs) + 1)
    with pytest.raises(EvaluationError):
        run_elicitation_experiment(ds, pool, expert, budget=1, cadence=0)
    with pytest.raises(EvaluationError):
        run_elicitation_experiment(ds, pool, expert, strategy="bandit", budget=1)


@pytest.mark.parametrize("strategy", ["random", "eig"])
def test_harness_trace_invariants(strategy):
    ds, truth, pool, expert = harness_setup()
    budget = 8
    trace = run_elicitation_experiment(
        ds, pool, expert, strategy=strategy, budget=budget, cadence=4, seed=1
    )
    assert trace.strategy == strategy
    assert len(trace.queries) == budget
    pairs = [p for _, p, _ in trace.queries]
    assert len(set(pairs)) == budget
    # Evaluation before the first query plus one every cadence answers.
    assert [p.iteration for p in trace.points] == [0, 4, 8]
    for point in trace.points:
        assert np.all(np.isfinite(point.mse_per_drug))
        assert np.all((point.c_index_per_drug >= 0) & (point.c_index_per_drug <= 1))
    # Iterations recorded 1..budget in order.
    assert [it for it, _, _ in trace.queries] == list(range(1, budget + 1))
    # The input pool is not mutated.
    assert pool.remaining() == len(pool.pairs)


def test_harness_random_is_seed_deterministic():
    ds, truth, pool, expert = harness_setup()
    a = run_elicitation_experiment(ds, pool, expert, budget=6, cadence=3, seed=9)
    b = run_elicitation_experiment(ds, pool, expert, budget=6, cadence=3, seed=9)
    c = run_elicitation_experiment(ds, pool, expert, budget=6, cadence=3, seed=10)
    assert [q[:2] for q in a.queries] == [q[:2] for q in b.queries]
    assert [q[:2] for q in a.queries] != [q[:2] for q in c.queries]
    np.testing.assert_array_equal(a.mse_curve(), b.mse_curve())


def test_harness_bandit_runs_with_descriptions():
    ds, truth, pool, expert = harness_setup()
    rng = default_rng(0)
    descriptions = {p: (rng.random(3) < 0.5).astype(float) for p in pool.pairs}
    trace = run_elicitation_experiment(
        ds, pool, expert, strategy="bandit", budget=5, cadence=5, seed=0,
        descriptions=descriptions,
    )
    assert len(trace.queries) == 5
    assert [p.iteration for p in trace.points] == [0, 5]


def test_harness_dont_know_consumes_budget_without_model_change():
    ds, truth, pool, _ = harness_setup()

    class Mute:
        def answer(self, pair):
            return FeedbackAnswer.DONT_KNOW

    trace = run_elicitation_experiment(ds, pool, Mute(), budget=4, cadence=2, seed=0)
    assert len(trace.queries) == 4
    assert all(ans is FeedbackAnswer.DONT_KNOW for _, _, ans in trace.queries)
    # Metrics cannot move when no substantive answer arrives.
    curves = trace.mse_curve()
    np.testing.assert_allclose(curves, curves[0], rtol=1e-9)


def test_harness_broadcast_copies_within_group():
    ds, truth, pool, expert = harness_setup()
    # Both drugs share the synthetic group, so each answer fans out.
    assert len({d.group for d in ds.drugs}) == 1
    budget = 4
    trace = run_elicitation_experiment(
        ds, pool, expert, budget=budget, cadence=4, seed=2, broadcast=True
    )
    by_iter: dict[int, list] = {}
    for it, pair, ans in trace.queries:
        by_iter.setdefault(it, []).append((pair, ans))
    assert len(by_iter) == budget
    for it, rows in by_iter.items():
        feats = {p[1] for p, _ in rows}
        answers = {a for _, a in rows}
        assert len(feats) == 1  # copies share the feature
        assert len(answers) == 1  # and the answer
        drugs = [p[0] for p, _ in rows]
        assert len(set(drugs)) == len(drugs)
    # More queried rows than budget, thanks to the copies.
    assert len(trace.queries) >= budget


# ---------------------------------------------------------------------------
# Trace summaries


def fake_trace(curve, iters=None, cadence=5):
    t = ElicitationTrace(strategy="random", seed=0, cadence=cadence)
    iters = iters or [i * cadence for i in range(len(curve))]
    for it, v in zip(iters, curve):
        t.points.append(
            TracePoint(
                iteration=it,
                mse_per_drug=np.array([v]),
                c_index_per_drug=np.array([0.5]),
                wall_time=0.0,
            )
        )
    return t


def test_auc_mse_trapezoid_over_point_index():
    trace = fake_trace([1.0, 0.6, 0.4])
    assert auc_mse(trace) == pytest.approx(0.5 * 1.0 + 0.6 + 0.5 * 0.4, abs=1e-12)
    assert auc_mse([1.0, 0.6, 0.4]) == auc_mse(trace)
    with pytest.raises(EvaluationError):
        auc_mse([1.0])


def test_empirical_pvalue_conventions():
    assert empirical_pvalue(0.1, [0.5, 0.6, 0.7, 0.8]) == pytest.approx(1 / 5)
    assert empirical_pvalue(0.9, [0.5, 0.6, 0.7, 0.8]) == pytest.approx(1.0)
    # Plus-one correction keeps the floor at 1/(R+1).
    r = 20
    assert empirical_pvalue(-1.0, [1.0] * r) == pytest.approx(1 / (r + 1))
    with pytest.raises(EvaluationError):
        empirical_pvalue(0.5, [1.0])


def test_queries_to_half_improvement():
    trace = fake_trace([1.0, 0.9, 0.55, 0.5], iters=[0, 10, 20, 30])
    # Final improvement 0.5, target 0.75, first hit at iteration 20.
    assert queries_to_half_improvement(trace) == 20
    flat = fake_trace([1.0, 1.0], iters=[0, 10])
    assert queries_to_half_improvement(flat) == 0  # target equals start


def test_trace_csv_layouts():
    ds = make_dataset(n=6, m=2, d=2, seed=0)
    trace = ElicitationTrace(strategy="eig", seed=3, cadence=2)
    trace.points.append(
        TracePoint(
            iteration=0,
            mse_per_drug=np.array([1.0, 2.0]),
            c_index_per_drug=np.array([0.5, 0.75]),
            wall_time=1.234,
        )
    )
    trace.queries.append((1, ("d00", "f0000"), FeedbackAnswer.RELEVANT_POSITIVE))

    wide = trace_csv(trace, ds)
    head = wide.strip().split("\n")[0].split(",")
    assert head[:4] == ["iteration", "mse_mean", "c_index_mean", "wall_time"]
    bare = trace_csv(trace, ds, include_wall_time=False)
    assert "wall_time" not in bare
    row = bare.strip().split("\n")[1].split(",")
    assert row[0] == "0" and float(row[1]) == pytest.approx(1.5)

    longf = trace_long_csv(trace, ds)
    lines = longf.strip().split("\n")
    assert lines[0] == "iteration,strategy,seed,drug,metric,value"
    assert len(lines) == 1 + 2 * 2

    qlog = queries_log_csv(trace)
    assert qlog.strip().split("\n")[1] == "1,d00,f0000,rel_pos"


# ---------------------------------------------------------------------------
# Descriptor discrimination


def test_descriptor_discrimination_separable_fixture():
    # Answerability is exactly determined by the first slot of the good
    # source; the bad source is pure noise.
    rng = default_rng(0)
    pairs = [("d0", f"f{i:02d}") for i in range(40)]
    answered = {p: (i % 2 == 0) for i, p in enumerate(pairs)}
    answers = {
        p: FeedbackAnswer.NOT_RELEVANT if ok else FeedbackAnswer.DONT_KNOW
        for p, ok in answered.items()
    }
    good = {p: np.array([1.0 if answered[p] else 0.0, 1.0]) for p in pairs}
    noise = {p: (rng.random(2) < 0.5).astype(float) for p in pairs}
    out = descriptor_discrimination({"good": good, "noise": noise}, answers)
    g_prec, g_rec = out["good"]
    n_prec, n_rec = out["noise"]
    assert g_prec == pytest.approx(1.0)
    assert g_rec == pytest.approx(1.0)
    assert g_rec > n_rec
    with pytest.raises(EvaluationError):
        descriptor_discrimination({"bad": {}}, answers)
    with pytest.raises(EvaluationError):
        descriptor_discrimination({"good": good}, answers, n_folds=1)
