"""Shared builders for small deterministic test instances."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.random import default_rng

from elicit.data import Dataset, DrugInfo, FeatureInfo, dataset_from_arrays, standardize
from elicit.model import FeedbackAnswer, FeedbackEvent, FeedbackSet, Hyperparameters


# Acceptance tests push one line each here; the terminal summary prints
# them so the verdicts are visible even when stdout capture is on.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        )


def make_dataset(
    n: int = 8,
    m: int = 4,
    d: int = 2,
    seed: int = 0,
    binary: bool = True,
    standardized: bool = True,
) -> Dataset:
    """Small dense dataset with planted signal in the first feature."""
    rng = default_rng(seed)
    if binary:
        raw_X = rng.random((n, m)) < 0.4
        raw_X = raw_X.astype(float)
        # Guard against constant columns so standardization keeps the signal.
        for k in range(m):
            if raw_X[:, k].std() == 0.0:
                raw_X[k % n, k] = 1.0 - raw_X[k % n, k]
    else:
        raw_X = rng.normal(size=(n, m))
    w = np.zeros((m, d))
    w[0, :] = 1.0
    if m > 1:
        w[1, : max(1, d // 2)] = -0.8
    raw_Y = raw_X @ w + 0.3 * rng.normal(size=(n, d))
    if standardized:
        return standardize(raw_X, raw_Y)
    return dataset_from_arrays(raw_X, raw_Y)


def make_feedback(dataset: Dataset, answers: dict[tuple[str, str], FeedbackAnswer]) -> FeedbackSet:
    fb = FeedbackSet()
    for it, ((drug_id, feature_id), ans) in enumerate(answers.items(), start=1):
        fb.add(
            FeedbackEvent(drug_id=drug_id, feature_id=feature_id, answer=ans, iteration=it)
        )
    return fb


def fixed_hp(**overrides) -> Hyperparameters:
    """Hyperparameters with every latent scalar pinned, for oracle comparisons."""
    base = dict(fixed_sigma2=0.25, fixed_rho=0.3, fixed_tau=1.0, fixed_pi=0.9)
    base.update(overrides)
    return Hyperparameters(**base)


@pytest.fixture
def tiny_dataset() -> Dataset:
    return make_dataset(n=8, m=4, d=2, seed=0)


@pytest.fixture
def tiny_feedback(tiny_dataset: Dataset) -> FeedbackSet:
    f = tiny_dataset.features
    d = tiny_dataset.drugs
    return make_feedback(
        tiny_dataset,
        {
            (d[0].id, f[0].id): FeedbackAnswer.RELEVANT_POSITIVE,
            (d[0].id, f[2].id): FeedbackAnswer.NOT_RELEVANT,
            (d[1].id, f[1].id): FeedbackAnswer.RELEVANT_NEGATIVE,
            (d[1].id, f[3].id): FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION,
        },
    )
