"""Query-selection policies over unanswered (drug, feature) pairs.

Three interchangeable strategies pick the next pair to put in front of
the expert: expected information gain on the predictive distributions,
a linear-UCB bandit over pair description vectors, and a uniform random
baseline. All of them select without replacement and break ties
lexicographically so that runs are reproducible.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from .ep import EPState, whatif_shift
from .model import FeedbackAnswer, GaussianPredictive

Pair = tuple[str, str]


class StrategyError(ValueError):
    """Raised for invalid pools, schema mismatches, or bad bandit input."""


# ---------------------------------------------------------------------------
# Candidate pool


@dataclass
class CandidatePool:
    """Ordered pairs eligible for querying plus the already-asked set.

    Pairs answered with "I don't know" still count as queried: asking
    again would not produce new information from the same expert.
    """

    pairs: list[Pair]
    queried: set[Pair] = field(default_factory=set)

    def __post_init__(self):
        self.pairs = [(str(d), str(f)) for d, f in self.pairs]
        if len(set(self.pairs)) != len(self.pairs):
            raise StrategyError("candidate pool contains duplicate pairs")
        self.queried = {(str(d), str(f)) for d, f in self.queried}
        stray = self.queried - set(self.pairs)
        if stray:
            raise StrategyError(f"queried pairs outside the pool: {sorted(stray)[:3]}")

    def unqueried(self) -> list[Pair]:
        return [p for p in self.pairs if p not in self.queried]

    def remaining(self) -> int:
        return len(self.pairs) - len(self.queried)

    def mark_queried(self, pair: Pair) -> None:
        pair = (str(pair[0]), str(pair[1]))
        if pair not in set(self.pairs):
            raise StrategyError(f"pair {pair} is not in the pool")
        if pair in self.queried:
            raise StrategyError(f"pair {pair} was already queried")
        self.queried.add(pair)

    def copy(self) -> "CandidatePool":
        return CandidatePool(pairs=list(self.pairs), queried=set(self.queried))


def _require_unqueried(pool: CandidatePool) -> list[Pair]:
    cands = pool.unqueried()
    if not cands:
        raise StrategyError("candidate pool has no unqueried pairs")
    return cands


# ---------------------------------------------------------------------------
# Gaussian KL and expected information gain


def kl_gaussian(p: GaussianPredictive, q: GaussianPredictive) -> float:
    """KL(p || q) between two univariate Gaussians."""
    if p.variance <= 0 or q.variance <= 0:
        raise StrategyError("kl_gaussian requires positive variances")
    ratio = p.variance / q.variance
    return 0.5 * (-math.log(ratio) + ratio + (p.mean - q.mean) ** 2 / q.variance - 1.0)


@dataclass(frozen=True)
class EigScore:
    """One candidate's expected gain with its per-feedback-value breakdown.

    ``breakdown`` holds four (f_rel, f_dir, probability, kl_sum) tuples,
    one per joint hypothetical answer; probabilities sum to one.
    """

    pair: Pair
    gain: float
    breakdown: tuple[tuple[int, int, float, float], ...]

    @property
    def score(self) -> float:
        return self.gain


def _kl_sums(
    shift: np.ndarray, drop: np.ndarray, wvar: np.ndarray, noise: float
) -> np.ndarray:
    """Sum over patients of KL(after || before), one value per candidate."""
    vq = wvar[:, None] + noise
    vp = np.maximum(vq - drop, 1e-300)
    ratio = vp / vq
    kl = 0.5 * (-np.log(ratio) + ratio + shift * shift / vq - 1.0)
    return np.maximum(kl, 0.0).sum(axis=0)


def eig_select(state: EPState, pool: CandidatePool) -> tuple[Pair, list[EigScore]]:
    """Pick the unqueried pair with the largest expected information gain.

    For every candidate the four joint feedback values (relevant?,
    non-negative?) are weighted by their posterior predictive
    probabilities; each value's information is the KL divergence summed
    over the training patients between the one-step updated predictive
    and the current one. Returns the winner and the full ranked list.
    """
    cands = _require_unqueried(pool)
    dataset = state.dataset
    by_drug: dict[str, list[str]] = {}
    for d, f in cands:
        by_drug.setdefault(d, []).append(f)

    scores: list[EigScore] = []
    for drug_id, feats in by_drug.items():
        st = state.drug_state(drug_id)
        coords = np.asarray([dataset.feature_index(f) for f in feats], dtype=np.intp)
        pbar = state.expected_pi(drug_id)
        g = st.g[coords]
        sd = np.sqrt(np.maximum(st.v[coords], 1e-300))
        p_pos = ndtr(st.m[coords] / sd)
        p_rel1 = g * pbar + (1.0 - g) * (1.0 - pbar)
        p_dir1 = p_pos * pbar + (1.0 - p_pos) * (1.0 - pbar)

        noise = state.expected_noise_variance(drug_id)
        kl_by_value = {}
        for rel_bit in (1, 0):
            for dir_bit in (1, 0):
                shift, drop = whatif_shift(state, drug_id, coords, rel_bit, dir_bit)
                kl_by_value[(rel_bit, dir_bit)] = _kl_sums(shift, drop, st.pred_wvar, noise)

        for i, f in enumerate(feats):
            breakdown = []
            gain = 0.0
            for rel_bit in (1, 0):
                pr = p_rel1[i] if rel_bit == 1 else 1.0 - p_rel1[i]
                for dir_bit in (1, 0):
                    pd = p_dir1[i] if dir_bit == 1 else 1.0 - p_dir1[i]
                    prob = float(pr * pd)
                    kl = float(kl_by_value[(rel_bit, dir_bit)][i])
                    breakdown.append((rel_bit, dir_bit, prob, kl))
                    gain += prob * kl
            scores.append(EigScore(pair=(drug_id, f), gain=gain, breakdown=tuple(breakdown)))

    scores.sort(key=lambda s: (-s.gain, s.pair))
    return scores[0].pair, scores


# ---------------------------------------------------------------------------
# LinUCB user model


@dataclass(frozen=True)
class BanditConfig:
    lam: float = 1e-3
    b: float = 0.5
    pseudo_weight: float = 0.1
    delta: float = 0.05

    def __post_init__(self):
        if self.lam <= 0:
            raise StrategyError("regularizer must be positive")
        if not 0.0 < self.pseudo_weight <= 1.0:
            raise StrategyError("pseudo_weight must lie in (0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise StrategyError("delta must lie in (0, 1)")


@dataclass
class BanditState:
    """Regularized linear model of which pairs the expert will answer.

    ``Z`` holds the design rows already scaled by the square root of
    their weight, so the normal equations and the confidence ellipsoid
    use the same Gram matrix. ``r`` keeps the raw responses.
    """

    descriptions: Mapping[Pair, np.ndarray]
    dim: int
    Z: np.ndarray
    r: np.ndarray
    row_weights: np.ndarray
    gram: np.ndarray
    rhs: np.ndarray
    v_hat: np.ndarray
    lam: float
    b: float
    pseudo_weight: float
    delta: float
    t: int
    K: int
    recorded: set[Pair] = field(default_factory=set)

    def confidence_width(self, z: np.ndarray) -> float:
        """sqrt of the quadratic form z' (Z'Z + lam I)^-1 z."""
        c, low = cho_factor(self.gram, lower=True)
        return float(math.sqrt(max(z @ cho_solve((c, low), z), 0.0)))


def _vector_for(state: BanditState, pair: Pair) -> np.ndarray:
    try:
        z = np.asarray(state.descriptions[pair], dtype=float)
    except KeyError:
        raise StrategyError(f"no description vector for pair {pair}") from None
    if z.shape != (state.dim,):
        raise StrategyError(f"description length {z.shape} does not match schema {state.dim}")
    return z


def _refit(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    c, low = cho_factor(gram, lower=True)
    return cho_solve((c, low), rhs)


def bandit_init(
    descriptions: Mapping[Pair, np.ndarray],
    inclusions: Mapping[Pair, float],
    pool: CandidatePool,
    config: BanditConfig | None = None,
) -> BanditState:
    """Build the user model, warm-started from the prediction model.

    Every pool pair contributes a pseudo-row whose response is the
    posterior inclusion probability of its feature, down-weighted so a
    real answer counts ten times as much.
    """
    cfg = config or BanditConfig()
    vecs = {p: np.asarray(v, dtype=float) for p, v in descriptions.items()}
    if not vecs:
        raise StrategyError("empty description map")
    dim = next(iter(vecs.values())).shape[0]
    for p, v in vecs.items():
        if v.shape != (dim,):
            raise StrategyError(f"description length mismatch for pair {p}")

    rows, resp = [], []
    root = math.sqrt(cfg.pseudo_weight)
    for pair in pool.pairs:
        if pair not in vecs:
            raise StrategyError(f"no description vector for pool pair {pair}")
        g = float(inclusions[pair])
        rows.append(root * vecs[pair])
        resp.append(g)
    Z = np.asarray(rows, dtype=float).reshape(len(rows), dim)
    r = np.asarray(resp, dtype=float)
    w = np.full(len(rows), cfg.pseudo_weight)
    gram = Z.T @ Z + cfg.lam * np.eye(dim)
    rhs = Z.T @ (root * (r - cfg.b))
    return BanditState(
        descriptions=vecs,
        dim=dim,
        Z=Z,
        r=r,
        row_weights=w,
        gram=gram,
        rhs=rhs,
        v_hat=_refit(gram, rhs),
        lam=cfg.lam,
        b=cfg.b,
        pseudo_weight=cfg.pseudo_weight,
        delta=cfg.delta,
        t=0,
        K=len(pool.pairs),
    )


def confidence_scale(t: int, K: int, delta: float) -> float:
    """Exploration coefficient rho_t = sqrt(log(2 t K / delta) / 2)."""
    if t < 1:
        raise StrategyError("query counter must be >= 1")
    return math.sqrt(0.5 * math.log(2.0 * t * K / delta))


@dataclass(frozen=True)
class UcbScore:
    pair: Pair
    estimate: float
    width: float

    @property
    def score(self) -> float:
        return self.estimate + self.width


def bandit_select(state: BanditState, pool: CandidatePool, t: int) -> tuple[Pair, list[UcbScore]]:
    """Pick the unqueried pair maximizing estimate + confidence width."""
    cands = _require_unqueried(pool)
    rho = confidence_scale(t, state.K, state.delta)
    c, low = cho_factor(state.gram, lower=True)
    Zc = np.stack([_vector_for(state, p) for p in cands])
    est = Zc @ state.v_hat + state.b
    quad = np.einsum("ij,ij->i", Zc, cho_solve((c, low), Zc.T).T)
    width = rho * np.sqrt(np.maximum(quad, 0.0))
    scores = [
        UcbScore(pair=p, estimate=float(est[i]), width=float(width[i]))
        for i, p in enumerate(cands)
    ]
    scores.sort(key=lambda s: (-s.score, s.pair))
    return scores[0].pair, scores


def bandit_update(
    state: BanditState, pair: Pair, answer: FeedbackAnswer | int
) -> BanditState:
    """Record one real answer at full weight and refit the estimate.

    The response is 1 for any substantive answer, including "not
    relevant", and 0 only for "I don't know".
    """
    if pair in state.recorded:
        raise StrategyError(f"pair {pair} was already recorded")
    if isinstance(answer, FeedbackAnswer):
        r_val = 0.0 if answer is FeedbackAnswer.DONT_KNOW else 1.0
    else:
        r_val = float(answer)
        if r_val not in (0.0, 1.0):
            raise StrategyError("integer responses must be 0 or 1")
    z = _vector_for(state, pair)
    gram = state.gram + np.outer(z, z)
    rhs = state.rhs + z * (r_val - state.b)
    return replace(
        state,
        Z=np.vstack([state.Z, z[None, :]]),
        r=np.append(state.r, r_val),
        row_weights=np.append(state.row_weights, 1.0),
        gram=gram,
        rhs=rhs,
        v_hat=_refit(gram, rhs),
        t=state.t + 1,
        recorded=set(state.recorded) | {pair},
    )


# ---------------------------------------------------------------------------
# Random baseline and score dumps


def random_select(pool: CandidatePool, rng: np.random.Generator) -> Pair:
    """Uniform draw over the unqueried pairs."""
    cands = _require_unqueried(pool)
    return cands[int(rng.integers(len(cands)))]


def scores_csv(iteration: int, scores: Sequence, chosen: Pair) -> str:
    """Ranked per-iteration score dump for audit and display."""
    buf = io.StringIO()
    buf.write("iteration,drug_id,feature_id,score,chosen\n")
    for s in scores:
        flag = 1 if s.pair == chosen else 0
        buf.write(f"{iteration},{s.pair[0]},{s.pair[1]},{s.score:.17g},{flag}\n")
    return buf.getvalue()


def pool_to_csv(pool: CandidatePool) -> str:
    """Pool listing in file order; queried pairs are flagged, not dropped."""
    buf = io.StringIO()
    buf.write("drug_id,feature_id,queried\n")
    for pair in pool.pairs:
        buf.write(f"{pair[0]},{pair[1]},{1 if pair in pool.queried else 0}\n")
    return buf.getvalue()


def pool_from_csv(text: str) -> CandidatePool:
    """Inverse of pool_to_csv; the queried column is optional."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise StrategyError("empty pool file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:2] != ["drug_id", "feature_id"]:
        raise StrategyError("pool file must start with drug_id,feature_id columns")
    has_flag = len(header) > 2 and header[2] == "queried"
    pairs: list[Pair] = []
    queried: set[Pair] = set()
    for ln_no, ln in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) < 2:
            raise StrategyError(f"pool file line {ln_no}: expected at least 2 columns")
        pair = (cells[0], cells[1])
        pairs.append(pair)
        if has_flag and len(cells) > 2 and cells[2] == "1":
            queried.add(pair)
    return CandidatePool(pairs=pairs, queried=queried)
