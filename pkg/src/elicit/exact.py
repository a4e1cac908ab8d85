"""Brute-force posterior oracle for tiny instances.

Enumerates every inclusion configuration, integrating the weights out in
closed form and the directional-feedback sign factors either via the normal
CDF (one directional coordinate) or adaptive 2-D quadrature (two). Only
meant for M <= 12 with all hyperparameters fixed to points; every other
engine is validated against this one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, ndtr

from .data import Dataset
from .model import (
    FeedbackSet,
    GaussianPredictive,
    Hyperparameters,
    ModelError,
)

_NORM_CONST = 1.0 / math.sqrt(2.0 * math.pi)
QUAD_ABS_TOL = 1e-8


class OracleError(ValueError):
    pass


@dataclass
class DrugExact:
    """Exact posterior summary for one drug."""

    drug_id: str
    config_probs: np.ndarray      # (2^M,), config c includes feature m iff bit m of c is set
    inclusion: np.ndarray         # (M,) marginal inclusion probabilities
    weight_mean: np.ndarray       # (M,) posterior mean of w
    weight_cov: np.ndarray        # (M, M) posterior covariance of w
    sigma2: float
    log_evidence: float

    def predictive(self, x: np.ndarray) -> GaussianPredictive:
        x = np.asarray(x, dtype=float)
        mean = float(self.weight_mean @ x)
        var = float(x @ self.weight_cov @ x) + self.sigma2
        return GaussianPredictive(mean=mean, variance=var)


@dataclass
class ExactPosterior:
    per_drug: dict[str, DrugExact]

    def __getitem__(self, drug_id: str) -> DrugExact:
        return self.per_drug[drug_id]


def _sign_factor_constants(direction_bit: int, pi: float) -> tuple[float, float]:
    """(c_plus, c_minus): factor values on w >= 0 and w < 0."""
    if direction_bit == 1:
        return pi, 1.0 - pi
    return 1.0 - pi, pi


def _tilted_univariate(mu: float, var: float, c_plus: float, c_minus: float) -> tuple[float, float, float]:
    """Normalizer, mean and variance of N(mu, var) tilted by a sign factor."""
    sd = math.sqrt(var)
    z = mu / sd
    phi = _NORM_CONST * math.exp(-0.5 * z * z)
    big_phi = float(ndtr(z))
    zed = c_plus * big_phi + c_minus * (1.0 - big_phi)
    alpha = phi * (c_plus - c_minus) / zed
    mean = mu + sd * alpha
    variance = var * (1.0 - alpha * (alpha + z))
    return zed, mean, variance


def _tilted_bivariate(
    mu: np.ndarray, cov: np.ndarray, consts: list[tuple[float, float]]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Normalizer, mean and covariance of a bivariate Gaussian tilted by two
    sign factors, via adaptive quadrature on each quadrant."""
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    if det <= 0:
        raise OracleError("degenerate bivariate covariance in directional tilt")
    inv = np.linalg.inv(cov)
    norm = 1.0 / (2.0 * math.pi * math.sqrt(det))

    def density(w0: float, w1: float) -> float:
        d0, d1 = w0 - mu[0], w1 - mu[1]
        q = inv[0, 0] * d0 * d0 + 2.0 * inv[0, 1] * d0 * d1 + inv[1, 1] * d1 * d1
        return norm * math.exp(-0.5 * q)

    def quadrant(g, s0: int, s1: int) -> float:
        lo0, hi0 = (0.0, np.inf) if s0 > 0 else (-np.inf, 0.0)
        lo1, hi1 = (0.0, np.inf) if s1 > 0 else (-np.inf, 0.0)
        # dblquad integrates f(y, x); keep w0 as the outer variable.
        val, _ = integrate.dblquad(
            lambda w1, w0: g(w0, w1) * density(w0, w1),
            lo0, hi0, lo1, hi1, epsabs=QUAD_ABS_TOL, epsrel=1e-10,
        )
        return val

    moments = {}
    for name, g in (
        ("z", lambda a, b: 1.0),
        ("m0", lambda a, b: a),
        ("m1", lambda a, b: b),
        ("s00", lambda a, b: a * a),
        ("s11", lambda a, b: b * b),
        ("s01", lambda a, b: a * b),
    ):
        acc = 0.0
        for s0 in (1, -1):
            for s1 in (1, -1):
                c0 = consts[0][0] if s0 > 0 else consts[0][1]
                c1 = consts[1][0] if s1 > 0 else consts[1][1]
                acc += c0 * c1 * quadrant(g, s0, s1)
        moments[name] = acc

    zed = moments["z"]
    mean = np.array([moments["m0"], moments["m1"]]) / zed
    second = np.array(
        [[moments["s00"], moments["s01"]], [moments["s01"], moments["s11"]]]
    ) / zed
    return zed, mean, second - np.outer(mean, mean)


def _config_posterior(
    y: np.ndarray,
    X: np.ndarray,
    active: np.ndarray,
    sigma2: float,
    tau2: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log marginal likelihood of y and Gaussian posterior of the active
    weights for one configuration."""
    n = y.shape[0]
    k = int(active.sum())
    if k == 0:
        if n == 0:
            return 0.0, np.zeros(0), np.zeros((0, 0))
        loglik = -0.5 * n * math.log(2.0 * math.pi * sigma2) - 0.5 * float(y @ y) / sigma2
        return loglik, np.zeros(0), np.zeros((0, 0))

    Xa = X[:, active]
    Ta = np.diag(tau2[active])
    if n == 0:
        return 0.0, np.zeros(k), Ta

    S = sigma2 * np.eye(n) + Xa @ Ta @ Xa.T
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise OracleError("marginal covariance not positive definite")
    solve_y = np.linalg.solve(S, y)
    loglik = -0.5 * (n * math.log(2.0 * math.pi) + logdet + float(y @ solve_y))

    prec = Xa.T @ Xa / sigma2 + np.diag(1.0 / tau2[active])
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (Xa.T @ y) / sigma2
    return loglik, mean, cov


def exact_enumerate(
    dataset: Dataset,
    feedback: FeedbackSet,
    hp: Hyperparameters,
    max_features: int = 12,
    max_directional: int = 2,
) -> ExactPosterior:
    """Exact posterior by enumeration over inclusion configurations."""
    if not hp.all_fixed:
        raise OracleError("enumeration requires all hyperparameters fixed to points")
    m = dataset.n_features
    if m > max_features:
        raise OracleError(f"enumeration limited to {max_features} features, got {m}")

    sigma2 = float(hp.fixed_sigma2)
    rho = float(hp.fixed_rho)
    pi = float(hp.fixed_pi)
    tau2 = np.full(m, float(hp.fixed_tau) ** 2)

    per_drug: dict[str, DrugExact] = {}
    for j, drug in enumerate(dataset.drugs):
        rel_events: list[tuple[int, int]] = []
        dir_events: list[tuple[int, int]] = []
        for ev in feedback.for_drug(drug.id):
            rel, direction = ev.bits
            k = dataset.feature_index(ev.feature_id)
            if rel is not None:
                rel_events.append((k, rel))
            if direction is not None:
                dir_events.append((k, direction))
        if len(dir_events) > max_directional:
            raise OracleError(
                f"at most {max_directional} directional feedbacks per drug are supported"
            )

        y = dataset.Y[:, j]
        n_configs = 1 << m
        log_weights = np.empty(n_configs)
        means = np.zeros((n_configs, m))
        covs = np.zeros((n_configs, m, m))

        for c in range(n_configs):
            active = np.array([(c >> b) & 1 for b in range(m)], dtype=bool)
            k_on = int(active.sum())

            # Inclusion prior.
            if rho in (0.0, 1.0):
                ok = (rho == 0.0 and k_on == 0) or (rho == 1.0 and k_on == m)
                log_prior = 0.0 if ok else -math.inf
            else:
                log_prior = k_on * math.log(rho) + (m - k_on) * math.log(1.0 - rho)
            if log_prior == -math.inf:
                log_weights[c] = -math.inf
                continue

            loglik, mean_a, cov_a = _config_posterior(y, dataset.X, active, sigma2, tau2)

            log_fb = 0.0
            for k, rel in rel_events:
                p_say_rel = pi if active[k] else 1.0 - pi
                log_fb += math.log(p_say_rel if rel == 1 else 1.0 - p_say_rel)

            # Directional factors: exact for excluded coordinates (the spike
            # sits at zero, which counts as non-negative), integrated over
            # the conditional weight posterior for included ones.
            active_idx = np.flatnonzero(active)
            pos_in_active = {k: i for i, k in enumerate(active_idx)}
            tilted_dirs = [(k, f) for k, f in dir_events if active[k]]
            for k, f in dir_events:
                if not active[k]:
                    c_plus, _ = _sign_factor_constants(f, pi)
                    log_fb += math.log(c_plus)

            if len(tilted_dirs) == 0:
                pass
            elif len(tilted_dirs) == 1:
                k, f = tilted_dirs[0]
                i = pos_in_active[k]
                c_plus, c_minus = _sign_factor_constants(f, pi)
                zed, t_mean, t_var = _tilted_univariate(
                    float(mean_a[i]), float(cov_a[i, i]), c_plus, c_minus
                )
                log_fb += math.log(zed)
                col = cov_a[:, i] / cov_a[i, i]
                mean_a = mean_a + col * (t_mean - mean_a[i])
                cov_a = cov_a + np.outer(col, col) * (t_var - cov_a[i, i])
            else:
                idx = [pos_in_active[k] for k, _ in tilted_dirs]
                consts = [_sign_factor_constants(f, pi) for _, f in tilted_dirs]
                mu2 = mean_a[idx]
                cov2 = cov_a[np.ix_(idx, idx)]
                zed, t_mean2, t_cov2 = _tilted_bivariate(mu2, cov2, consts)
                log_fb += math.log(zed)
                B = cov_a[:, idx] @ np.linalg.inv(cov2)
                mean_a = mean_a + B @ (t_mean2 - mu2)
                cov_a = cov_a + B @ (t_cov2 - cov2) @ B.T

            log_weights[c] = log_prior + loglik + log_fb
            means[c, active_idx] = mean_a
            covs[c][np.ix_(active_idx, active_idx)] = cov_a

        log_z = float(logsumexp(log_weights))
        probs = np.exp(log_weights - log_z)
        probs /= probs.sum()

        inclusion = np.zeros(m)
        for c in range(n_configs):
            for b in range(m):
                if (c >> b) & 1:
                    inclusion[b] += probs[c]

        w_mean = probs @ means
        second = np.einsum("c,cij->ij", probs, covs + np.einsum("ci,cj->cij", means, means))
        w_cov = second - np.outer(w_mean, w_mean)
        w_cov = 0.5 * (w_cov + w_cov.T)

        per_drug[drug.id] = DrugExact(
            drug_id=drug.id,
            config_probs=probs,
            inclusion=inclusion,
            weight_mean=w_mean,
            weight_cov=w_cov,
            sigma2=sigma2,
            log_evidence=log_z,
        )

    return ExactPosterior(per_drug=per_drug)
