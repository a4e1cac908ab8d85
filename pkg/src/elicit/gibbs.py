"""Reference Gibbs sampler.

Collapsed joint updates of each (gamma_m, w_m) pair in index order, followed
by conjugate draws of the noise precision, the inclusion rate and the expert
accuracy. The slab scale tau is held at its prior median (or the point-mass
override). Written with scalar arithmetic and an incrementally maintained
X'residual vector so long chains on small instances stay cheap; drugs are
fully independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .data import Dataset
from .model import FeedbackSet, Hyperparameters, expected_sigma2

_SQRT2 = math.sqrt(2.0)


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / _SQRT2))


def _sample_truncated(rng: np.random.Generator, mu: float, sd: float, positive: bool) -> float:
    """One draw from N(mu, sd^2) restricted to [0, inf) or (-inf, 0)."""
    a = _phi(-mu / sd)  # mass below zero
    u = rng.random()
    if positive:
        q = a + (1.0 - a) * u
    else:
        q = a * u
    q = min(max(q, 1e-300), 1.0 - 1e-16)
    return mu + sd * float(ndtri(q))


@dataclass
class GibbsResult:
    """Posterior summaries from the kept draws."""

    inclusion: np.ndarray          # (D, M) mean of gamma
    weight_mean: np.ndarray        # (D, M)
    weight_var: np.ndarray         # (D, M)
    prob_nonneg: np.ndarray        # (D, M) share of draws with w >= 0
    predictive_mean: np.ndarray    # (N, D) posterior mean of X w
    predictive_var: np.ndarray     # (N, D) var of X w plus mean noise variance
    sigma2_mean: np.ndarray        # (D,)
    rho_mean: np.ndarray           # (D,)
    pi_mean: np.ndarray            # (D,)
    n_kept: int


def gibbs_fit(
    dataset: Dataset,
    feedback: FeedbackSet,
    hp: Hyperparameters,
    n_samples: int = 2000,
    n_burnin: int = 500,
    seed: int = 0,
) -> GibbsResult:
    """Run the sampler and average the draws after burn-in."""
    rng = np.random.default_rng(seed)
    X, Y = dataset.X, dataset.Y
    n, m = X.shape
    d = Y.shape[1]
    tau = hp.tau_default()
    tau2 = tau * tau

    # Per-drug feedback, resolved to column indices once.
    rel_events: list[list[tuple[int, int]]] = [[] for _ in range(d)]
    dir_events: list[list[tuple[int, int]]] = [[] for _ in range(d)]
    dir_by_coord: list[dict[int, int]] = [{} for _ in range(d)]
    for ev in feedback:
        rel, direction = ev.bits
        if rel is None and direction is None:
            continue
        j = dataset.drug_index(ev.drug_id)
        k = dataset.feature_index(ev.feature_id)
        if rel is not None:
            rel_events[j].append((k, rel))
        if direction is not None:
            dir_events[j].append((k, direction))
            dir_by_coord[j][k] = direction

    G = np.asarray(X.T @ X, dtype=float)
    G_rows = [G[k].copy() for k in range(m)]
    diag_G = [float(G[k, k]) for k in range(m)]
    xy_all = X.T @ Y  # (M, D)
    yy_all = [float(Y[:, j] @ Y[:, j]) for j in range(d)]

    # State per drug.
    w = np.zeros((d, m))
    gamma = np.zeros((d, m), dtype=int)
    sigma2 = [hp.fixed_sigma2 if hp.fixed_sigma2 is not None else expected_sigma2(hp.alpha_sigma, hp.beta_sigma) for _ in range(d)]
    rho = [hp.fixed_rho if hp.fixed_rho is not None else hp.alpha_rho / (hp.alpha_rho + hp.beta_rho) for _ in range(d)]
    pi = [hp.fixed_pi if hp.fixed_pi is not None else hp.alpha_pi / (hp.alpha_pi + hp.beta_pi) for _ in range(d)]
    s = [xy_all[:, j].copy() for j in range(d)]  # X' residual
    rss = [yy_all[j] for j in range(d)]

    gamma_sum = np.zeros((d, m))
    w_sum = np.zeros((d, m))
    w_sq_sum = np.zeros((d, m))
    nonneg_sum = np.zeros((d, m))
    pred_sum = np.zeros((n, d))
    pred_sq_sum = np.zeros((n, d))
    sigma2_sum = np.zeros(d)
    rho_sum = np.zeros(d)
    pi_sum = np.zeros(d)

    total_iters = n_burnin + n_samples
    for it in range(total_iters):
        for j in range(d):
            sj = s[j]
            wj = w[j]
            gj = gamma[j]
            sig2 = sigma2[j]
            rho_j = rho[j]
            pi_j = pi[j]
            log_pi_odds = math.log(pi_j / (1.0 - pi_j))
            if rho_j <= 0.0:
                log_rho_odds = -math.inf
            elif rho_j >= 1.0:
                log_rho_odds = math.inf
            else:
                log_rho_odds = math.log(rho_j / (1.0 - rho_j))

            for k in range(m):
                w_old = float(wj[k])
                s_minus = float(sj[k]) + diag_G[k] * w_old
                lam = diag_G[k] / sig2 + 1.0 / tau2
                v = 1.0 / lam
                mu = v * s_minus / sig2
                logit = log_rho_odds + 0.5 * math.log(v / tau2) + 0.5 * mu * mu / v

                for kk, f in rel_events[j]:
                    if kk == k:
                        logit += log_pi_odds if f == 1 else -log_pi_odds

                direction = dir_by_coord[j].get(k)
                tilt = None
                if direction is not None:
                    c_plus = pi_j if direction == 1 else 1.0 - pi_j
                    c_minus = 1.0 - c_plus
                    sd = math.sqrt(v)
                    p_up = _phi(mu / sd)
                    z_on = c_plus * p_up + c_minus * (1.0 - p_up)
                    # Excluded coordinate sits at zero, which reads as
                    # non-negative, so the spike side contributes c_plus.
                    logit += math.log(z_on / c_plus)
                    tilt = (c_plus, p_up, z_on, sd)

                if logit > 0:
                    p_on = 1.0 / (1.0 + math.exp(-logit))
                else:
                    e = math.exp(logit)
                    p_on = e / (1.0 + e)

                g_new = 1 if rng.random() < p_on else 0
                if g_new == 1:
                    if tilt is None:
                        w_new = mu + math.sqrt(v) * float(rng.standard_normal())
                    else:
                        c_plus, p_up, z_on, sd = tilt
                        if rng.random() < c_plus * p_up / z_on:
                            w_new = _sample_truncated(rng, mu, sd, positive=True)
                        else:
                            w_new = _sample_truncated(rng, mu, sd, positive=False)
                else:
                    w_new = 0.0

                delta = w_new - w_old
                gj[k] = g_new
                wj[k] = w_new
                if delta != 0.0:
                    rss[j] = rss[j] - 2.0 * delta * float(sj[k]) + delta * delta * diag_G[k]
                    sj -= G_rows[k] * delta

            # Periodically recompute the residual sum exactly to stop the
            # incremental value from drifting over long chains.
            if (it + 1) % 1000 == 0:
                resid = Y[:, j] - X @ wj
                rss[j] = float(resid @ resid)
                sj[:] = X.T @ resid

            if hp.fixed_sigma2 is None:
                rate = hp.beta_sigma + 0.5 * max(rss[j], 0.0)
                prec = rng.gamma(shape=hp.alpha_sigma + 0.5 * n, scale=1.0 / rate)
                sigma2[j] = 1.0 / prec
            if hp.fixed_rho is None:
                k_on = int(gj.sum())
                rho[j] = rng.beta(hp.alpha_rho + k_on, hp.beta_rho + m - k_on)
            if hp.fixed_pi is None:
                correct = 0
                wrong = 0
                for kk, f in rel_events[j]:
                    if f == gj[kk]:
                        correct += 1
                    else:
                        wrong += 1
                for kk, f in dir_events[j]:
                    said_pos = 1 if wj[kk] >= 0.0 else 0
                    if f == said_pos:
                        correct += 1
                    else:
                        wrong += 1
                pi[j] = rng.beta(hp.alpha_pi + correct, hp.beta_pi + wrong)

        if it >= n_burnin:
            gamma_sum += gamma
            w_sum += w
            w_sq_sum += w * w
            nonneg_sum += (w >= 0.0)
            fits = X @ w.T
            pred_sum += fits
            pred_sq_sum += fits * fits
            sigma2_sum += np.asarray(sigma2)
            rho_sum += np.asarray(rho)
            pi_sum += np.asarray(pi)

    k_kept = n_samples
    inclusion = gamma_sum / k_kept
    weight_mean = w_sum / k_kept
    weight_var = np.maximum(w_sq_sum / k_kept - weight_mean**2, 0.0)
    pred_mean = pred_sum / k_kept
    sigma2_mean = sigma2_sum / k_kept
    pred_var = np.maximum(pred_sq_sum / k_kept - pred_mean**2, 0.0) + sigma2_mean[None, :]
    return GibbsResult(
        inclusion=inclusion,
        weight_mean=weight_mean,
        weight_var=weight_var,
        prob_nonneg=nonneg_sum / k_kept,
        predictive_mean=pred_mean,
        predictive_var=pred_var,
        sigma2_mean=sigma2_mean,
        rho_mean=rho_sum / k_kept,
        pi_mean=pi_sum / k_kept,
        n_kept=k_kept,
    )
