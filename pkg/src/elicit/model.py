"""Probabilistic model core: types, densities, answer mapping and the
predictive computations shared by every inference engine and strategy.

Per drug d the generative model is

    y_n ~ Normal(w . x_n, sigma2)
    w_m ~ gamma_m * Normal(0, tau_m^2) + (1 - gamma_m) * delta_0
    gamma_m ~ Bernoulli(rho)
    sigma^-2 ~ Gamma(alpha_sigma, beta_sigma)   (shape-rate)
    rho ~ Beta(alpha_rho, beta_rho)
    tau_m ~ LogNormal(mu, omega2)
    pi ~ Beta(alpha_pi, beta_pi)

with two expert-feedback observation channels: a relevance bit observing
gamma_m through an accuracy-pi Bernoulli, and a direction bit observing
I(w_m >= 0) the same way (w = 0, the spike, counts as non-negative).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .data import Dataset, standardize


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Feedback answers

class FeedbackAnswer(enum.Enum):
    RELEVANT_POSITIVE = "rel_pos"
    RELEVANT_NEGATIVE = "rel_neg"
    RELEVANT_UNKNOWN_DIRECTION = "rel_unknown"
    NOT_RELEVANT = "not_relevant"
    DONT_KNOW = "dont_know"


def map_answer(answer: FeedbackAnswer) -> tuple[Optional[int], Optional[int]]:
    """Map an expert answer to (relevance bit, direction bit).

    Directional answers imply relevance; "don't know" carries no bits.
    """
    return {
        FeedbackAnswer.RELEVANT_POSITIVE: (1, 1),
        FeedbackAnswer.RELEVANT_NEGATIVE: (1, 0),
        FeedbackAnswer.RELEVANT_UNKNOWN_DIRECTION: (1, None),
        FeedbackAnswer.NOT_RELEVANT: (0, None),
        FeedbackAnswer.DONT_KNOW: (None, None),
    }[answer]


@dataclass(frozen=True)
class FeedbackEvent:
    drug_id: str
    feature_id: str
    answer: FeedbackAnswer
    iteration: int = 0

    @property
    def pair(self) -> tuple[str, str]:
        return (self.drug_id, self.feature_id)

    @property
    def bits(self) -> tuple[Optional[int], Optional[int]]:
        return map_answer(self.answer)


class FeedbackSet:
    """Ordered collection of feedback events, at most one per pair.

    Don't-know events are retained (they suppress re-querying) but carry no
    likelihood factor.
    """

    def __init__(self, events: Iterable[FeedbackEvent] = ()):
        self._events: list[FeedbackEvent] = []
        self._by_pair: dict[tuple[str, str], FeedbackEvent] = {}
        for ev in events:
            self.add(ev)

    def add(self, event: FeedbackEvent) -> None:
        if event.pair in self._by_pair:
            raise ModelError(f"duplicate feedback for pair {event.pair}")
        self._events.append(event)
        self._by_pair[event.pair] = event

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[FeedbackEvent]:
        return iter(self._events)

    def __contains__(self, pair: tuple[str, str]) -> bool:
        return pair in self._by_pair

    def get(self, pair: tuple[str, str]) -> Optional[FeedbackEvent]:
        return self._by_pair.get(pair)

    def for_drug(self, drug_id: str) -> list[FeedbackEvent]:
        return [ev for ev in self._events if ev.drug_id == drug_id]

    def informative(self) -> list[FeedbackEvent]:
        return [ev for ev in self._events if ev.answer is not FeedbackAnswer.DONT_KNOW]

    def copy(self) -> "FeedbackSet":
        return FeedbackSet(self._events)


# ---------------------------------------------------------------------------
# Hyperparameters

@dataclass(frozen=True)
class Hyperparameters:
    """Hyperprior settings, with optional point-mass overrides.

    A point-mass override fixes the corresponding quantity to a constant
    (degenerate prior), which the enumeration oracle requires.
    """

    alpha_sigma: float = 4.0
    beta_sigma: float = 4.0
    alpha_rho: float = 1.0
    beta_rho: float = 2.0
    mu: float = -2.0
    omega2: float = 0.5
    alpha_pi: float = 9.0
    beta_pi: float = 1.0
    fixed_sigma2: Optional[float] = None
    fixed_rho: Optional[float] = None
    fixed_pi: Optional[float] = None
    fixed_tau: Optional[float] = None

    def __post_init__(self):
        for name in ("alpha_sigma", "beta_sigma", "alpha_rho", "beta_rho", "alpha_pi", "beta_pi", "omega2"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.fixed_sigma2 is not None and self.fixed_sigma2 <= 0:
            raise ModelError("fixed_sigma2 must be positive")
        if self.fixed_rho is not None and not 0.0 <= self.fixed_rho <= 1.0:
            raise ModelError("fixed_rho must lie in [0, 1]")
        if self.fixed_pi is not None and not 0.0 < self.fixed_pi < 1.0:
            raise ModelError("fixed_pi must lie in (0, 1)")
        if self.fixed_tau is not None and self.fixed_tau <= 0:
            raise ModelError("fixed_tau must be positive")

    @property
    def all_fixed(self) -> bool:
        return (
            self.fixed_sigma2 is not None
            and self.fixed_rho is not None
            and self.fixed_pi is not None
            and self.fixed_tau is not None
        )

    def tau_default(self) -> float:
        """Slab scale used when tau is not inferred: the log-normal median."""
        return self.fixed_tau if self.fixed_tau is not None else math.exp(self.mu)

    def with_fixed(self, sigma2=None, rho=None, pi=None, tau=None) -> "Hyperparameters":
        return replace(self, fixed_sigma2=sigma2, fixed_rho=rho, fixed_pi=pi, fixed_tau=tau)


@dataclass
class ModelParameters:
    """Ground-truth or sampled parameters, one entry per drug."""

    w: np.ndarray        # (D, M)
    gamma: np.ndarray    # (D, M) binary
    sigma2: np.ndarray   # (D,)
    rho: np.ndarray      # (D,)
    pi: np.ndarray       # (D,)
    tau: np.ndarray      # (D, M)

    def __post_init__(self):
        if np.any((self.gamma == 0) & (self.w != 0)):
            raise ModelError("w must be zero wherever gamma is zero")
        if np.any(self.sigma2 <= 0):
            raise ModelError("sigma2 must be positive")


@dataclass(frozen=True)
class GaussianPredictive:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ModelError("predictive variance must be positive")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


# ---------------------------------------------------------------------------
# Densities

def _log_normal_pdf(x: float, mean: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


def expected_sigma2(shape: float, rate: float) -> float:
    """Mean residual variance under a Gamma(shape, rate) precision factor.

    Uses the inverse-Gamma mean rate/(shape-1) when it exists, falling back
    to 1/E[precision] so the result is always finite.
    """
    if shape > 1.0:
        return rate / (shape - 1.0)
    return rate / shape


def log_joint(
    params: ModelParameters,
    dataset: Dataset,
    feedback: FeedbackSet,
    hp: Hyperparameters,
) -> float:
    """Unnormalized log posterior of the full model.

    Likelihood, spike-and-slab prior, Bernoulli inclusion prior, hyperpriors
    (evaluated on their natural scales: Gamma on the precision, log-normal on
    tau) and both feedback channels. Returns -inf only for parameter values
    that violate the type invariants or contradict a point-mass override.
    """
    X, Y = dataset.X, dataset.Y
    n, m = X.shape
    d = Y.shape[1]
    if params.w.shape != (d, m):
        raise ModelError(f"w has shape {params.w.shape}, expected {(d, m)}")

    total = 0.0
    for j in range(d):
        w = params.w[j]
        gamma = params.gamma[j]
        sigma2 = float(params.sigma2[j])
        rho = float(params.rho[j])
        pi = float(params.pi[j])
        tau = params.tau[j]

        if np.any((gamma == 0) & (w != 0)):
            return -math.inf
        if not (0.0 <= rho <= 1.0) or not (0.0 < pi < 1.0) or sigma2 <= 0:
            return -math.inf

        # Point-mass overrides pin their parameter exactly.
        for fixed, value in (
            (hp.fixed_sigma2, sigma2),
            (hp.fixed_rho, rho),
            (hp.fixed_pi, pi),
        ):
            if fixed is not None and abs(value - fixed) > 1e-12:
                return -math.inf
        if hp.fixed_tau is not None and np.any(np.abs(tau - hp.fixed_tau) > 1e-12):
            return -math.inf

        resid = Y[:, j] - X @ w
        total += -0.5 * n * math.log(2.0 * math.pi * sigma2) - 0.5 * float(resid @ resid) / sigma2

        on = gamma == 1
        if np.any(on):
            total += float(np.sum(-0.5 * (np.log(2.0 * math.pi * tau[on] ** 2) + (w[on] / tau[on]) ** 2)))
        n_on = int(on.sum())
        if 0.0 < rho < 1.0:
            total += n_on * math.log(rho) + (m - n_on) * math.log(1.0 - rho)
        elif (rho == 0.0 and n_on > 0) or (rho == 1.0 and n_on < m):
            return -math.inf

        if hp.fixed_sigma2 is None:
            total += float(stats.gamma.logpdf(1.0 / sigma2, a=hp.alpha_sigma, scale=1.0 / hp.beta_sigma))
        if hp.fixed_rho is None:
            total += float(stats.beta.logpdf(rho, hp.alpha_rho, hp.beta_rho))
        if hp.fixed_pi is None:
            total += float(stats.beta.logpdf(pi, hp.alpha_pi, hp.beta_pi))
        if hp.fixed_tau is None:
            total += float(np.sum(stats.lognorm.logpdf(tau, s=math.sqrt(hp.omega2), scale=math.exp(hp.mu))))

        for ev in feedback.for_drug(dataset.drugs[j].id):
            rel, direction = ev.bits
            if rel is None and direction is None:
                continue
            k = dataset.feature_index(ev.feature_id)
            if rel is not None:
                p_say_rel = pi if gamma[k] == 1 else 1.0 - pi
                total += math.log(p_say_rel if rel == 1 else 1.0 - p_say_rel)
            if direction is not None:
                p_say_pos = pi if w[k] >= 0 else 1.0 - pi
                total += math.log(p_say_pos if direction == 1 else 1.0 - p_say_pos)

    return total


# ---------------------------------------------------------------------------
# Prior simulation

def sample_prior(
    hp: Hyperparameters,
    n: int,
    m: int,
    d: int,
    rng: np.random.Generator,
    feature_model: str = "bernoulli",
    bernoulli_p: float = 0.1,
) -> tuple[ModelParameters, Dataset]:
    """Draw parameters and data from the generative model.

    Features default to sparse Bernoulli(0.1) mutation-like columns; the
    returned dataset is standardized, the parameters are in the raw scale of
    the generated responses.
    """
    if min(n, m, d) <= 0:
        raise ModelError("dimensions must be positive")

    rho = np.full(d, hp.fixed_rho) if hp.fixed_rho is not None else rng.beta(hp.alpha_rho, hp.beta_rho, size=d)
    pi = np.full(d, hp.fixed_pi) if hp.fixed_pi is not None else rng.beta(hp.alpha_pi, hp.beta_pi, size=d)
    if hp.fixed_sigma2 is not None:
        sigma2 = np.full(d, hp.fixed_sigma2)
    else:
        sigma2 = 1.0 / rng.gamma(shape=hp.alpha_sigma, scale=1.0 / hp.beta_sigma, size=d)
    if hp.fixed_tau is not None:
        tau = np.full((d, m), hp.fixed_tau)
    else:
        tau = np.exp(rng.normal(hp.mu, math.sqrt(hp.omega2), size=(d, m)))

    gamma = (rng.random((d, m)) < rho[:, None]).astype(int)
    w = np.where(gamma == 1, rng.normal(0.0, 1.0, size=(d, m)) * tau, 0.0)

    if feature_model == "bernoulli":
        raw_X = (rng.random((n, m)) < bernoulli_p).astype(float)
    elif feature_model == "gaussian":
        raw_X = rng.normal(size=(n, m))
    else:
        raise ModelError(f"unknown feature model {feature_model!r}")

    X_std, _ = _standardize_for_generation(raw_X)
    noise = rng.normal(size=(n, d)) * np.sqrt(sigma2)
    raw_Y = X_std @ w.T + noise

    dataset = standardize(X_std, raw_Y)
    params = ModelParameters(w=w, gamma=gamma, sigma2=sigma2, rho=rho, pi=pi, tau=tau)
    return params, dataset


def _standardize_for_generation(raw: np.ndarray) -> tuple[np.ndarray, None]:
    from .data import standardize_columns

    out, _ = standardize_columns(raw)
    return out, None


# ---------------------------------------------------------------------------
# Predictive computations

def predictive(
    weight_mean: np.ndarray,
    weight_cov: np.ndarray,
    noise_variance: float,
    x: np.ndarray,
) -> GaussianPredictive:
    """Gaussian predictive for one patient: mean m.x, variance x'Vx + E[sigma2]."""
    x = np.asarray(x, dtype=float)
    if x.shape != weight_mean.shape:
        raise ModelError(f"x has shape {x.shape}, expected {weight_mean.shape}")
    mean = float(weight_mean @ x)
    var = float(x @ weight_cov @ x) + noise_variance
    return GaussianPredictive(mean=mean, variance=var)


def prob_nonnegative(mean: float, sd: float, inclusion: float | None = None, slab_conditional: bool = False) -> float:
    """P(w >= 0) for a weight marginal.

    With ``slab_conditional`` the (mean, sd) describe the slab component only
    and the spike mass (probability 1 - inclusion at exactly zero) counts as
    non-negative, matching the indicator convention.
    """
    if sd < 0:
        raise ModelError("sd must be non-negative")
    p_slab = float(ndtr(mean / sd)) if sd > 0 else (1.0 if mean >= 0 else 0.0)
    if slab_conditional:
        if inclusion is None:
            raise ModelError("slab_conditional requires the inclusion probability")
        return (1.0 - inclusion) + inclusion * p_slab
    return p_slab


def feedback_predictive(
    inclusion: float,
    weight_mean: float,
    weight_sd: float,
    expected_pi: float,
    slab_conditional: bool = False,
) -> tuple[float, float]:
    """Posterior predictive probabilities of a "relevant" and a "positive"
    answer on a (drug, feature) pair, given a posterior summary.

    Returns (P(f_rel = 1), P(f_dir = 1)).
    """
    if not 0.0 <= inclusion <= 1.0:
        raise ModelError("inclusion probability must lie in [0, 1]")
    p_rel1 = inclusion * expected_pi + (1.0 - inclusion) * (1.0 - expected_pi)
    p_pos = prob_nonnegative(weight_mean, weight_sd, inclusion=inclusion, slab_conditional=slab_conditional)
    p_dir1 = p_pos * expected_pi + (1.0 - p_pos) * (1.0 - expected_pi)
    return p_rel1, p_dir1
