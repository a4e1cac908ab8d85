"""Metrics, baselines, synthetic benchmarks, simulated experts, and the
feedback-elicitation experiment harness.

Cross-validated metrics follow one convention throughout: mean squared
error is computed in the full-dataset standardized response units, while
the concordance index is computed on each patient's prediction in its
own training fold's units. The latter makes a constant predictor score
exactly chance level (all predictions tie at the fold mean) instead of
picking up the spurious anti-signal that leave-one-out re-centering
injects into constant predictions.
"""

from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .data import Dataset, standardize
from .ep import EPConfig, EPState, ep_fit, ep_incorporate
from .model import FeedbackAnswer, FeedbackEvent, FeedbackSet, Hyperparameters
from .strategies import (
    BanditConfig,
    CandidatePool,
    bandit_init,
    bandit_select,
    bandit_update,
    eig_select,
    random_select,
)

Pair = tuple[str, str]

RIDGE_GRID = tuple(np.logspace(-2.0, 4.0, 13))


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Point metrics


def mse(predictions: np.ndarray, actuals: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if predictions.shape != actuals.shape:
        raise EvaluationError("prediction and actual vectors differ in shape")
    return float(np.mean((predictions - actuals) ** 2))


def c_index(predictions: np.ndarray, actuals: np.ndarray) -> float:
    """Probability of ordering a random sample pair correctly.

    Pairs with tied actuals are skipped; tied predictions on untied
    actuals count one half.
    """
    predictions = np.asarray(predictions, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if predictions.shape != actuals.shape or predictions.ndim != 1:
        raise EvaluationError("need two equal-length vectors")
    if predictions.size < 2:
        raise EvaluationError("need at least two samples")
    da = actuals[:, None] - actuals[None, :]
    dp = predictions[:, None] - predictions[None, :]
    upper = np.triu_indices(predictions.size, k=1)
    da, dp = da[upper], dp[upper]
    usable = da != 0.0
    if not usable.any():
        raise EvaluationError("concordance is undefined when all actuals are identical")
    da, dp = da[usable], dp[usable]
    score = np.where(dp == 0.0, 0.5, (np.sign(dp) == np.sign(da)).astype(float))
    return float(np.mean(score))


# ---------------------------------------------------------------------------
# Leave-one-out cross-validation


@dataclass(frozen=True)
class LooResult:
    """Per-drug LOO metrics plus the collected held-out predictions.

    ``predictions`` are in full-dataset standardized units (rows
    patients, columns drugs); ``fold_unit_predictions`` keep each row in
    its own fold's units and feed the concordance index.
    """

    mse_per_drug: np.ndarray
    c_index_per_drug: np.ndarray
    predictions: np.ndarray
    fold_unit_predictions: np.ndarray
    failed_folds: tuple[int, ...] = ()

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse_per_drug))

    @property
    def c_index_mean(self) -> float:
        return float(np.mean(self.c_index_per_drug))


FoldPredictor = Callable[[Dataset, np.ndarray], np.ndarray]
"""Fits on a fold dataset and predicts one held-out row (fold units)."""


def _loo_loop(dataset: Dataset, predictor: FoldPredictor) -> LooResult:
    n, d = dataset.n_samples, dataset.n_drugs
    if n < 3:
        raise EvaluationError("leave-one-out needs at least 3 samples")
    raw_x = dataset.x_transform.invert(dataset.X)
    raw_y = dataset.y_transform.invert(dataset.Y)
    preds_full = np.full((n, d), np.nan)
    preds_fold = np.full((n, d), np.nan)
    failed: list[int] = []
    for k in range(n):
        keep = np.arange(n) != k
        fold = standardize(
            raw_x[keep],
            raw_y[keep],
            dataset.features,
            dataset.drugs,
            [dataset.sample_ids[i] for i in range(n) if i != k] if dataset.sample_ids else None,
        )
        try:
            x_star = fold.x_transform.apply(raw_x[k])
            fold_pred = predictor(fold, x_star)
        except Exception as exc:  # noqa: BLE001 - fold isolation is the contract
            warnings.warn(f"fold {k} failed and is excluded: {exc}", stacklevel=2)
            failed.append(k)
            continue
        preds_fold[k] = fold_pred
        raw_pred = fold.y_transform.invert(fold_pred)
        preds_full[k] = dataset.y_transform.apply(raw_pred)
    ok = np.asarray([k for k in range(n) if k not in failed], dtype=int)
    if ok.size < 2:
        raise EvaluationError("too many failed folds to compute metrics")
    mse_d = np.array([mse(preds_full[ok, j], dataset.Y[ok, j]) for j in range(d)])
    ci_d = np.array([c_index(preds_fold[ok, j], dataset.Y[ok, j]) for j in range(d)])
    return LooResult(
        mse_per_drug=mse_d,
        c_index_per_drug=ci_d,
        predictions=preds_full,
        fold_unit_predictions=preds_fold,
        failed_folds=tuple(failed),
    )


def loo_cv(
    dataset: Dataset,
    feedback: FeedbackSet | None = None,
    hp: Hyperparameters | None = None,
    config: EPConfig | None = None,
    warm_start: EPState | None = None,
) -> LooResult:
    """Leave-one-out evaluation of the sparse model with shared feedback.

    Each fold re-standardizes on its remaining patients and refits,
    warm-started from a full-data fit so repeated evaluations inside an
    elicitation run stay affordable. The feedback set is shared across
    folds: expert knowledge is about features, not patients.
    """
    feedback = feedback if feedback is not None else FeedbackSet()
    hp = hp or Hyperparameters()
    if warm_start is None:
        warm_start = ep_fit(dataset, feedback, hp, config)

    def predictor(fold: Dataset, x_star: np.ndarray) -> np.ndarray:
        state = ep_fit(fold, feedback, hp, config, warm_start=warm_start)
        return np.array(
            [state.predictive_for(dr.id, x_star).mean for dr in fold.drugs]
        )

    return _loo_loop(dataset, predictor)


def baseline_mean(dataset: Dataset) -> LooResult:
    """Training-fold mean predictor under the same LOO protocol."""

    def predictor(fold: Dataset, x_star: np.ndarray) -> np.ndarray:
        return np.zeros(fold.n_drugs)

    return _loo_loop(dataset, predictor)


def baseline_ridge(dataset: Dataset, lam_grid: Sequence[float] = RIDGE_GRID) -> LooResult:
    """Ridge regression with the penalty chosen per fold by inner LOO."""
    grid = np.asarray(list(lam_grid), dtype=float)
    if grid.size == 0:
        raise EvaluationError("ridge grid must be non-empty")
    if np.any(grid <= 0):
        raise EvaluationError("ridge penalties must be positive")

    def predictor(fold: Dataset, x_star: np.ndarray) -> np.ndarray:
        u, s, vt = np.linalg.svd(fold.X, full_matrices=False)
        uy = u.T @ fold.Y
        out = np.zeros(fold.n_drugs)
        for j in range(fold.n_drugs):
            y = fold.Y[:, j]
            best_lam, best_err = None, np.inf
            for lam in grid:
                shrink = s * s / (s * s + lam)
                fitted = u @ (shrink * uy[:, j])
                h = np.einsum("ir,r,ir->i", u, shrink, u)
                resid = (y - fitted) / np.maximum(1.0 - h, 1e-12)
                err = float(np.mean(resid**2))
                if err < best_err:
                    best_err, best_lam = err, lam
            coef = vt.T @ ((s / (s * s + best_lam)) * uy[:, j])
            out[j] = float(x_star @ coef)
        return out

    return _loo_loop(dataset, predictor)


# ---------------------------------------------------------------------------
# Bayesian bootstrap comparison


def bayes_bootstrap_compare(
    preds_a: np.ndarray,
    preds_b: np.ndarray,
    actuals: np.ndarray,
    n_draws: int = 1000,
    rng: np.random.Generator | None = None,
) -> float:
    """Probability that A's weighted squared error beats B's.

    One Dirichlet(1, ..., 1) weight vector per draw is shared between
    the two models; exact ties count one half.
    """
    rng = rng or np.random.default_rng(0)
    a = np.asarray(preds_a, dtype=float).ravel()
    b = np.asarray(preds_b, dtype=float).ravel()
    y = np.asarray(actuals, dtype=float).ravel()
    if a.shape != y.shape or b.shape != y.shape:
        raise EvaluationError("prediction and actual arrays differ in shape")
    if n_draws < 1:
        raise EvaluationError("need at least one bootstrap draw")
    se_a = (a - y) ** 2
    se_b = (b - y) ** 2
    wins = 0.0
    for _ in range(n_draws):
        w = rng.exponential(size=y.size)
        w /= w.sum()
        ea, eb = float(w @ se_a), float(w @ se_b)
        wins += 0.5 if ea == eb else float(ea < eb)
    return wins / n_draws


# ---------------------------------------------------------------------------
# Synthetic benchmark data


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int = 51
    n_features: int = 3032
    n_drugs: int = 12
    nonzero_per_drug: int = 25
    noise_sd: float = 0.7
    weight_scale: float = 0.3
    pool_features: int = 168
    feature_model: str = "binary"
    weight_dist: str = "normal"
    driver_features: int = 0
    mutation_rate_low: float = 0.05
    mutation_rate_high: float = 0.3

    def __post_init__(self):
        if min(self.n_samples, self.n_features, self.n_drugs) < 1:
            raise EvaluationError("dimensions must be positive")
        if not 0 < self.nonzero_per_drug <= self.n_features:
            raise EvaluationError("nonzero_per_drug must lie in [1, n_features]")
        if not 0 < self.pool_features <= self.n_features:
            raise EvaluationError("pool_features must lie in [1, n_features]")
        if self.feature_model not in ("binary", "gaussian"):
            raise EvaluationError(f"unknown feature model {self.feature_model!r}")
        if self.weight_dist not in ("normal", "fixed"):
            raise EvaluationError(f"unknown weight distribution {self.weight_dist!r}")
        if self.driver_features and not (
            self.nonzero_per_drug <= self.driver_features <= self.n_features
        ):
            raise EvaluationError(
                "driver_features must lie in [nonzero_per_drug, n_features]"
            )
        if self.noise_sd < 0:
            raise EvaluationError("noise_sd must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    """Planted weights and the relevance/sign labels they imply."""

    weights: np.ndarray
    active: np.ndarray
    signs: np.ndarray

    def is_relevant(self, feature_index: int, drug_index: int) -> bool:
        return bool(self.active[feature_index, drug_index])

    def is_nonnegative(self, feature_index: int, drug_index: int) -> bool:
        return bool(self.signs[feature_index, drug_index] >= 0)


def generate_synthetic(
    config: SyntheticConfig, rng: np.random.Generator
) -> tuple[Dataset, GroundTruth, CandidatePool]:
    """Sparse planted-signal benchmark with a query pool of known pairs.

    The candidate pool is filled round-robin over drugs, each drug
    contributing its largest-weight features in turn, so expert answers
    are worth eliciting for every drug; once the planted signals are
    exhausted the remaining slots are zero-weight decoys.
    """
    n, m, d = config.n_samples, config.n_features, config.n_drugs
    if config.feature_model == "binary":
        freq = rng.uniform(config.mutation_rate_low, config.mutation_rate_high, size=m)
        raw_x = (rng.random((n, m)) < freq[None, :]).astype(float)
        # constant columns carry no signal and cannot be standardized away
        for k in range(m):
            tries = 0
            while raw_x[:, k].min() == raw_x[:, k].max() and tries < 100:
                raw_x[:, k] = (rng.random(n) < freq[k]).astype(float)
                tries += 1
    else:
        raw_x = rng.normal(size=(n, m))
    weights = np.zeros((m, d))
    if config.driver_features:
        # drugs draw their active features from a shared driver subset, the
        # usual situation when related compounds hit overlapping mechanisms
        drivers = rng.choice(m, size=config.driver_features, replace=False)
    else:
        drivers = np.arange(m)
    for j in range(d):
        active = rng.choice(drivers, size=config.nonzero_per_drug, replace=False)
        if config.weight_dist == "fixed":
            # equal magnitudes spread the signal evenly over the planted
            # features, so partial expert coverage recovers a predictable share
            weights[active, j] = config.weight_scale * rng.choice(
                [-1.0, 1.0], size=active.size
            )
        else:
            weights[active, j] = rng.normal(scale=config.weight_scale, size=active.size)
    raw_y = raw_x @ weights + rng.normal(scale=config.noise_sd, size=(n, d))
    dataset = standardize(raw_x, raw_y)

    truth = GroundTruth(
        weights=weights,
        active=weights != 0.0,
        signs=np.sign(weights).astype(np.int8),
    )
    per_drug_rank = [
        list(np.lexsort((np.arange(m), -np.abs(weights[:, j])))) for j in range(d)
    ]
    chosen: list[int] = []
    seen: set[int] = set()
    cursors = [0] * d
    while len(chosen) < config.pool_features:
        progressed = False
        for j in range(d):
            if len(chosen) >= config.pool_features:
                break
            while cursors[j] < m and per_drug_rank[j][cursors[j]] in seen:
                cursors[j] += 1
            if cursors[j] < m:
                k = per_drug_rank[j][cursors[j]]
                chosen.append(k)
                seen.add(k)
                progressed = True
        if not progressed:
            break
    chosen = sorted(chosen)
    pairs = [
        (dataset.drugs[j].id, dataset.features[k].id) for k in chosen for j in range(d)
    ]
    return dataset, truth, CandidatePool(pairs=pairs)


# ---------------------------------------------------------------------------
# Simulated experts


class ReplayExpert:
    """Answers from a pre-collected table; unknown pairs get DontKnow."""

    def __init__(self, table: Mapping[Pair, FeedbackAnswer] | FeedbackSet):
        if isinstance(table, FeedbackSet):
            table = {ev.pair: ev.answer for ev in table}
        self.table = {(str(d), str(f)): FeedbackAnswer(a) for (d, f), a in table.items()}

    def answer(self, pair: Pair) -> FeedbackAnswer:
        return self.table.get(pair, FeedbackAnswer.DONT_KNOW)

    @classmethod
    def from_csv(cls, text: str) -> "ReplayExpert":
        df = pd.read_csv(io.StringIO(text), dtype=str)
        required = {"drug_id", "feature_id", "answer"}
        if not required.issubset(df.columns):
            raise EvaluationError(f"replay table needs columns {sorted(required)}")
        table = {}
        for row in df.itertuples(index=False):
            pair = (row.drug_id, row.feature_id)
            if pair in table:
                raise EvaluationError(f"replay table repeats pair {pair}")
            table[pair] = FeedbackAnswer(row.answer)
        return cls(table)


class OracleExpert:
    """Noisy ground-truth expert for synthetic benchmarks.

    Answers are pre-drawn per pair from a seed keyed by the pair's
    indices, so the same expert gives the same answer no matter which
    strategy asks or in what order. A relevant pair is answerable with
    probability ``coverage``; outside that knowledge the answer is
    DontKnow. Answers are correct with probability ``p_correct``, and a
    correct relevance call comes with a direction with probability
    ``direction_known``. Erroneous "relevant" calls on truly irrelevant
    pairs carry no direction.
    """

    def __init__(
        self,
        dataset: Dataset,
        truth: GroundTruth,
        p_correct: float = 0.9,
        coverage: float = 0.6,
        direction_known: float = 1.0,
        give_directions: bool = True,
        seed: int = 0,
    ):
        if not 0.0 < p_correct <= 1.0:
            raise EvaluationError("p_correct must lie in (0, 1]")
        if not 0.0 <= coverage <= 1.0:
            raise EvaluationError("coverage must lie in [0, 1]")
        if not 0.0 <= direction_known <= 1.0:
            raise EvaluationError("direction_known must lie in [0, 1]")
        self.dataset = dataset
        self.truth = truth
        self.p_correct = p_correct
        self.coverage = coverage
        self.direction_known = direction_known
        self.give_directions = give_directions
        self.seed = seed
        self._cache: dict[Pair, FeedbackAnswer] = {}

    def answer(self, pair: Pair) -> FeedbackAnswer:
        if pair in self._cache:
            return self._cache[pair]
        di = self.dataset.drug_index(pair[0])
        fi = self.dataset.feature_index(pair[1])
        # separate streams so stripping directions cannot change relevance
        rng_rel = np.random.default_rng([self.seed, 11, di, fi])
        rng_dir = np.random.default_rng([self.seed, 13, di, fi])
        if self.truth.is_relevant(fi, di):
            if rng_rel.random() >= self.coverage:
                ans = FeedbackAnswer.DONT_KNOW
            elif rng_rel.random() >= self.p_correct:
                ans = FeedbackAnswer.NOT_RELEVANT
            elif not self.give_directions or rng_dir.random() >= self.direction_known:
                ans = FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION
            else:
                correct = rng_dir.random() < self.p_correct
                nonneg = self.truth.is_nonnegative(fi, di) == correct
                ans = (
                    FeedbackAnswer.RELEVANT_POSITIVE
                    if nonneg
                    else FeedbackAnswer.RELEVANT_NEGATIVE
                )
        else:
            if rng_rel.random() < self.p_correct:
                ans = FeedbackAnswer.NOT_RELEVANT
            else:
                ans = FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION
        self._cache[pair] = ans
        return ans


def strip_direction(answer: FeedbackAnswer) -> FeedbackAnswer:
    """Collapse directional answers to plain relevance."""
    if answer in (FeedbackAnswer.RELEVANT_POSITIVE, FeedbackAnswer.RELEVANT_NEGATIVE):
        return FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION
    return answer


def feedback_to_csv(feedback: FeedbackSet) -> str:
    buf = io.StringIO()
    buf.write("iteration,drug_id,feature_id,answer\n")
    for ev in feedback:
        buf.write(f"{ev.iteration},{ev.drug_id},{ev.feature_id},{ev.answer.value}\n")
    return buf.getvalue()


def feedback_from_csv(text: str) -> FeedbackSet:
    df = pd.read_csv(io.StringIO(text), dtype=str).fillna("")
    required = {"drug_id", "feature_id", "answer"}
    if not required.issubset(df.columns):
        raise EvaluationError(f"feedback table needs columns {sorted(required)}")
    out = FeedbackSet()
    for row in df.itertuples(index=False):
        iteration = int(getattr(row, "iteration", 0) or 0)
        out.add(
            FeedbackEvent(
                drug_id=row.drug_id,
                feature_id=row.feature_id,
                answer=FeedbackAnswer(row.answer),
                iteration=iteration,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Elicitation experiment harness


@dataclass(frozen=True)
class TracePoint:
    iteration: int
    mse_per_drug: np.ndarray
    c_index_per_drug: np.ndarray
    wall_time: float

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse_per_drug))

    @property
    def c_index_mean(self) -> float:
        return float(np.mean(self.c_index_per_drug))


@dataclass
class ElicitationTrace:
    strategy: str
    seed: int
    cadence: int
    queries: list[tuple[int, Pair, FeedbackAnswer]] = field(default_factory=list)
    points: list[TracePoint] = field(default_factory=list)

    def mse_curve(self) -> np.ndarray:
        return np.array([p.mse_mean for p in self.points])

    def iterations(self) -> np.ndarray:
        return np.array([p.iteration for p in self.points])


def run_elicitation_experiment(
    dataset: Dataset,
    pool: CandidatePool,
    expert,
    strategy: str = "random",
    budget: int = 0,
    cadence: int = 25,
    seed: int = 0,
    hp: Hyperparameters | None = None,
    ep_config: EPConfig | None = None,
    descriptions: Mapping[Pair, np.ndarray] | None = None,
    bandit_config: BanditConfig | None = None,
    broadcast: bool = False,
) -> ElicitationTrace:
    """One sequential elicitation run with cadence-spaced LOO evaluation.

    Every queried pair, answered or not, leaves the pool; the model only
    changes on substantive answers. Metrics are evaluated before the
    first query and after every ``cadence`` answers. With ``broadcast``
    on, an answer also applies to the same feature under every other
    drug of the answered drug's group, and those pairs leave the pool;
    budget counts queries, not broadcast copies.
    """
    if strategy not in ("eig", "bandit", "random"):
        raise EvaluationError(f"unknown strategy {strategy!r}")
    if budget < 0 or budget > len(pool.pairs):
        raise EvaluationError("budget must lie in [0, pool size]")
    if cadence < 1:
        raise EvaluationError("cadence must be >= 1")
    hp = hp or Hyperparameters()
    pool = pool.copy()
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()

    feedback = FeedbackSet()
    state = ep_fit(dataset, feedback, hp, ep_config)
    trace = ElicitationTrace(strategy=strategy, seed=seed, cadence=cadence)

    bandit = None
    if strategy == "bandit":
        if descriptions is None:
            raise EvaluationError("bandit strategy needs description vectors")
        inclusions = {
            (d, f): float(state.inclusion(d)[dataset.feature_index(f)])
            for d, f in pool.pairs
        }
        bandit = bandit_init(descriptions, inclusions, pool, bandit_config)

    def evaluate(iteration: int) -> None:
        res = loo_cv(dataset, feedback, hp, ep_config, warm_start=state)
        trace.points.append(
            TracePoint(
                iteration=iteration,
                mse_per_drug=res.mse_per_drug,
                c_index_per_drug=res.c_index_per_drug,
                wall_time=time.perf_counter() - t0,
            )
        )

    group_of = {d.id: d.group for d in dataset.drugs}

    evaluate(0)
    for it in range(1, budget + 1):
        if not pool.unqueried():
            break
        if strategy == "eig":
            pair, _ = eig_select(state, pool)
        elif strategy == "bandit":
            pair, _ = bandit_select(bandit, pool, t=it)
        else:
            pair = random_select(pool, rng)
        ans = expert.answer(pair)
        pool.mark_queried(pair)
        event = FeedbackEvent(
            drug_id=pair[0], feature_id=pair[1], answer=ans, iteration=it
        )
        feedback.add(event)
        state = ep_incorporate(state, event)
        trace.queries.append((it, pair, ans))
        if bandit is not None:
            bandit = bandit_update(bandit, pair, ans)
        if broadcast:
            unqueried = set(pool.unqueried())
            for drug in dataset.drugs:
                sibling = (drug.id, pair[1])
                if drug.id == pair[0] or group_of[drug.id] != group_of[pair[0]]:
                    continue
                if sibling not in unqueried:
                    continue
                pool.mark_queried(sibling)
                copy_event = FeedbackEvent(
                    drug_id=sibling[0], feature_id=sibling[1], answer=ans, iteration=it
                )
                feedback.add(copy_event)
                state = ep_incorporate(state, copy_event)
                trace.queries.append((it, sibling, ans))
        if it % cadence == 0:
            evaluate(it)
    return trace


# ---------------------------------------------------------------------------
# Trace summaries


def auc_mse(trace: ElicitationTrace | Sequence[float]) -> float:
    """Trapezoidal area under the MSE curve over evaluation-point index."""
    curve = trace.mse_curve() if isinstance(trace, ElicitationTrace) else np.asarray(trace, dtype=float)
    if curve.size < 2:
        raise EvaluationError("need at least two evaluation points")
    return float(np.trapezoid(curve))


def empirical_pvalue(method_auc: float, random_aucs: Sequence[float]) -> float:
    """Plus-one-corrected rank of the method among random baselines."""
    aucs = np.asarray(list(random_aucs), dtype=float)
    if aucs.size < 2:
        raise EvaluationError("need at least two random runs")
    return float((1 + np.sum(aucs <= method_auc)) / (aucs.size + 1))


def queries_to_half_improvement(trace: ElicitationTrace) -> int:
    """First iteration at which half of the final MSE improvement is reached."""
    curve = trace.mse_curve()
    iters = trace.iterations()
    if curve.size < 1:
        raise EvaluationError("empty trace")
    target = curve[0] - 0.5 * (curve[0] - curve[-1])
    for it, v in zip(iters, curve):
        if v <= target:
            return int(it)
    return int(iters[-1])


def trace_csv(
    trace: ElicitationTrace, dataset: Dataset, include_wall_time: bool = True
) -> str:
    """Wide per-evaluation-point export.

    Batch outputs that must reproduce bit-for-bit across runs set
    ``include_wall_time=False`` to drop the only nondeterministic column.
    """
    buf = io.StringIO()
    drug_ids = [d.id for d in dataset.drugs]
    head = ",".join(
        ["iteration", "mse_mean", "c_index_mean"]
        + (["wall_time"] if include_wall_time else [])
        + [f"mse_{d}" for d in drug_ids]
        + [f"c_index_{d}" for d in drug_ids]
    )
    buf.write(head + "\n")
    for p in trace.points:
        row = [str(p.iteration), f"{p.mse_mean:.17g}", f"{p.c_index_mean:.17g}"]
        if include_wall_time:
            row.append(f"{p.wall_time:.3f}")
        row += [f"{v:.17g}" for v in p.mse_per_drug]
        row += [f"{v:.17g}" for v in p.c_index_per_drug]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def trace_long_csv(trace: ElicitationTrace, dataset: Dataset) -> str:
    """Plot-ready long format: iteration, strategy, seed, drug, metric, value."""
    buf = io.StringIO()
    buf.write("iteration,strategy,seed,drug,metric,value\n")
    for p in trace.points:
        for j, drug in enumerate(dataset.drugs):
            for metric, vec in (("mse", p.mse_per_drug), ("c_index", p.c_index_per_drug)):
                buf.write(
                    f"{p.iteration},{trace.strategy},{trace.seed},{drug.id},{metric},{vec[j]:.17g}\n"
                )
    return buf.getvalue()


def queries_log_csv(trace: ElicitationTrace) -> str:
    buf = io.StringIO()
    buf.write("iteration,drug_id,feature_id,answer\n")
    for it, pair, ans in trace.queries:
        buf.write(f"{it},{pair[0]},{pair[1]},{ans.value}\n")
    return buf.getvalue()


@dataclass(frozen=True)
class ComparisonReport:
    """Summary statistics comparing elicitation strategies on one instance."""

    mse_initial: float
    mse_final: Mapping[str, float]
    auc: Mapping[str, float]
    p_value: Mapping[str, float]
    half_improvement: Mapping[str, float]
    bootstrap_probability: Mapping[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mse_initial": self.mse_initial,
            "mse_final": dict(self.mse_final),
            "auc": dict(self.auc),
            "p_value": dict(self.p_value),
            "half_improvement": dict(self.half_improvement),
            "bootstrap_probability": dict(self.bootstrap_probability),
        }


# ---------------------------------------------------------------------------
# Descriptor-source discrimination


def descriptor_discrimination(
    sources: Mapping[str, Mapping[Pair, np.ndarray]],
    answers: Mapping[Pair, FeedbackAnswer],
    n_folds: int = 5,
    threshold: float = 0.5,
    lam: float = 1e-3,
    b: float = 0.5,
) -> dict[str, tuple[float, float]]:
    """Cross-validated precision/recall of "will the expert answer".

    Each descriptor source gets the same regularized linear read-out the
    bandit uses; a pair whose predicted response reaches ``threshold``
    counts as predicted-answered. Folds missing either true or predicted
    positives are excluded from the respective average with a warning.
    """
    if n_folds < 2:
        raise EvaluationError("need at least two folds")
    pairs = sorted(answers)
    labels = {
        p: 0.0 if answers[p] is FeedbackAnswer.DONT_KNOW else 1.0 for p in pairs
    }
    out: dict[str, tuple[float, float]] = {}
    for name, vectors in sources.items():
        missing = [p for p in pairs if p not in vectors]
        if missing:
            raise EvaluationError(f"source {name!r} lacks vectors for {missing[:3]}")
        precisions, recalls = [], []
        for fold in range(n_folds):
            test = [p for i, p in enumerate(pairs) if i % n_folds == fold]
            train = [p for i, p in enumerate(pairs) if i % n_folds != fold]
            if not test or not train:
                continue
            Z = np.stack([np.asarray(vectors[p], dtype=float) for p in train])
            r = np.array([labels[p] for p in train])
            gram = Z.T @ Z + lam * np.eye(Z.shape[1])
            v = np.linalg.solve(gram, Z.T @ (r - b))
            zt = np.stack([np.asarray(vectors[p], dtype=float) for p in test])
            pred = (zt @ v + b) >= threshold
            actual = np.array([labels[p] for p in test]) == 1.0
            tp = int(np.sum(pred & actual))
            if pred.sum() == 0:
                warnings.warn(
                    f"{name}: fold {fold} has no predicted positives, precision skipped",
                    stacklevel=2,
                )
            else:
                precisions.append(tp / int(pred.sum()))
            if actual.sum() == 0:
                warnings.warn(
                    f"{name}: fold {fold} has no answered pairs, recall skipped",
                    stacklevel=2,
                )
            else:
                recalls.append(tp / int(actual.sum()))
        precision = float(np.mean(precisions)) if precisions else float("nan")
        recall = float(np.mean(recalls)) if recalls else 0.0
        out[name] = (precision, recall)
    return out
