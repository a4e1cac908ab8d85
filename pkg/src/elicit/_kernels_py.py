"""Pure-numpy implementations of the moment-matching kernels.

These are the per-sweep hot loops of the approximate inference engine. The
compiled extension (_kernels.pyx) mirrors this module operation for
operation; keep the two in sync.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

BACKEND = "python"

_LOG_2PI = float(np.log(2.0 * np.pi))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Cavity precisions below this are treated as flat (data-free coordinate);
# below the negative of it the cavity is improper and the update is skipped.
PREC_TINY = 1e-12


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def ss_site_update(
    v_marg: np.ndarray,
    m_marg: np.ndarray,
    q_site: np.ndarray,
    h_site: np.ndarray,
    u_site: np.ndarray,
    eta_base: np.ndarray,
    tau2: np.ndarray,
    damping: float,
    q_floor: float,
    q_cap: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """One parallel moment-matching pass over all mixture-prior sites.

    Each site couples a weight coordinate with its inclusion indicator; the
    tilted distribution is the Gaussian cavity times the mixture
    g*N(0, tau2) + (1-g)*delta_0 with prior inclusion odds ``eta_base``
    (inclusion-rate odds plus relevance-feedback odds, excluding this site's
    own contribution ``u_site``).

    Returns damped new site naturals (q, h, u) and the count of skipped
    updates (improper cavities). Site precisions are kept in
    [q_floor, q_cap].
    """
    prec_marg = 1.0 / v_marg
    prec_c = prec_marg - q_site
    skip = prec_c < -PREC_TINY
    flat = np.abs(prec_c) <= PREC_TINY
    ok = ~(skip | flat)

    q_t = q_site.copy()
    h_t = h_site.copy()
    u_t = u_site.copy()

    # Flat cavity: the tilted distribution is the prior mixture itself, so
    # the site is set to its exact moment match. This keeps data-free
    # (all-zero) columns tracking the inclusion-rate factor as it moves.
    if np.any(flat):
        g0 = _sigmoid(eta_base[flat])
        var0 = np.maximum(g0 * tau2[flat], 1.0 / q_cap)
        q_t[flat] = np.clip(1.0 / var0, q_floor, q_cap)
        h_t[flat] = 0.0
        u_t[flat] = 0.0

    if np.any(ok):
        pc = prec_c[ok]
        v_c = 1.0 / pc
        m_c = v_c * (prec_marg[ok] * m_marg[ok] - h_site[ok])
        t2 = tau2[ok]
        eta = eta_base[ok]

        s1 = v_c + t2
        # log odds of the tilted inclusion indicator
        lam = eta + 0.5 * np.log(v_c / s1) + 0.5 * m_c * m_c * (t2 / (v_c * s1))
        lam = np.where(eta == np.inf, np.inf, lam)
        lam = np.where(eta == -np.inf, -np.inf, lam)
        g = _sigmoid(lam)

        v1 = v_c * t2 / s1          # slab-conditional posterior variance
        m1 = m_c * (t2 / s1)        # slab-conditional posterior mean
        v_tilt = g * v1 + g * (1.0 - g) * m1 * m1
        m_tilt = g * m1

        with np.errstate(divide="ignore"):
            q_new = np.where(v_tilt > 0.0, 1.0 / v_tilt - pc, q_cap)
        q_new = np.clip(q_new, q_floor, q_cap)
        # h is chosen against the clipped precision so the matched marginal
        # mean equals the tilted mean even when the clip binds.
        h_new = (pc + q_new) * m_tilt - pc * m_c
        with np.errstate(invalid="ignore"):
            u_new = np.where(np.isfinite(lam), lam - eta, 0.0)

        q_t[ok] = q_new
        h_t[ok] = h_new
        u_t[ok] = u_new

    q_out = (1.0 - damping) * q_site + damping * q_t
    h_out = (1.0 - damping) * h_site + damping * h_t
    u_out = (1.0 - damping) * u_site + damping * u_t
    # Skipped coordinates keep their previous site untouched.
    q_out[skip] = q_site[skip]
    h_out[skip] = h_site[skip]
    u_out[skip] = u_site[skip]
    q_out = np.clip(q_out, q_floor, q_cap)
    return q_out, h_out, u_out, int(skip.sum())


def ss_dir_site_update(
    v_marg: np.ndarray,
    m_marg: np.ndarray,
    q_site: np.ndarray,
    h_site: np.ndarray,
    u_site: np.ndarray,
    eta_base: np.ndarray,
    tau2: np.ndarray,
    c_plus: np.ndarray,
    damping: float,
    q_floor: float,
    q_cap: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Moment-matching pass for coordinates carrying directional feedback.

    The site at such a coordinate covers the product of the mixture prior
    and the noisy sign-observation factor, which takes value ``c_plus`` on
    w >= 0 and 1 - c_plus on w < 0; the spike at zero counts as
    non-negative. Fusing the two factors keeps the inclusion indicator
    coupled to the sign observation, which a Gaussian-only site cannot
    express: the spike branch is weighted by exactly c_plus while the slab
    branch is sign-tilted in closed form.

    The sign factor's precision contribution (fused minus feedback-free
    match) is clamped non-negative, so a directional answer never widens
    the site beyond its feedback-free counterpart at the same cavity.
    """
    c_minus = 1.0 - c_plus
    prec_marg = 1.0 / v_marg
    prec_c = prec_marg - q_site
    skip = prec_c < -PREC_TINY
    flat = np.abs(prec_c) <= PREC_TINY
    ok = ~(skip | flat)

    q_t = q_site.copy()
    h_t = h_site.copy()
    u_t = u_site.copy()

    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(flat):
            eta = eta_base[flat]
            t2 = tau2[flat]
            cp = c_plus[flat]
            var0 = np.maximum(_sigmoid(eta) * t2, 1.0 / q_cap)
            logz_s, m_s, v_s = sign_tilted_moments(
                np.zeros_like(t2), t2, cp, c_minus[flat]
            )
            lam = eta + logz_s - np.log(cp)
            lam = np.where(eta == np.inf, np.inf, lam)
            lam = np.where(eta == -np.inf, -np.inf, lam)
            g = _sigmoid(lam)
            m_tilt = g * m_s
            v_tilt = g * v_s + g * (1.0 - g) * m_s * m_s
            q0 = np.clip(1.0 / var0, q_floor, q_cap)
            extra = np.where(v_tilt > 0.0, np.maximum(1.0 / v_tilt - 1.0 / var0, 0.0), q_cap)
            qf = np.minimum(q0 + extra, q_cap)
            q_t[flat] = qf
            h_t[flat] = qf * m_tilt
            u_t[flat] = np.where(np.isfinite(lam), lam - eta, 0.0)

        if np.any(ok):
            pc = prec_c[ok]
            v_c = 1.0 / pc
            m_c = v_c * (prec_marg[ok] * m_marg[ok] - h_site[ok])
            t2 = tau2[ok]
            eta = eta_base[ok]
            cp = c_plus[ok]

            s1 = v_c + t2
            lam0 = eta + 0.5 * np.log(v_c / s1) + 0.5 * m_c * m_c * (t2 / (v_c * s1))
            lam0 = np.where(eta == np.inf, np.inf, lam0)
            lam0 = np.where(eta == -np.inf, -np.inf, lam0)
            v1 = v_c * t2 / s1
            m1 = m_c * (t2 / s1)

            # Feedback-free match, used as the precision baseline.
            g0 = _sigmoid(lam0)
            vt0 = g0 * v1 + g0 * (1.0 - g0) * m1 * m1
            q0 = np.where(vt0 > 0.0, 1.0 / vt0 - pc, q_cap)
            q0 = np.clip(q0, q_floor, q_cap)

            logz_s, m_s, v_s = sign_tilted_moments(m1, v1, cp, c_minus[ok])
            lam = lam0 + logz_s - np.log(cp)
            lam = np.where(eta == np.inf, np.inf, lam)
            lam = np.where(eta == -np.inf, -np.inf, lam)
            g = _sigmoid(lam)
            m_tilt = g * m_s
            v_tilt = g * v_s + g * (1.0 - g) * m_s * m_s

            extra = np.where(
                (v_tilt > 0.0) & (vt0 > 0.0),
                np.maximum(1.0 / v_tilt - 1.0 / vt0, 0.0),
                q_cap,
            )
            q_new = np.minimum(q0 + extra, q_cap)
            h_new = (pc + q_new) * m_tilt - pc * m_c
            u_new = np.where(np.isfinite(lam), lam - eta, 0.0)

            q_t[ok] = q_new
            h_t[ok] = h_new
            u_t[ok] = u_new

    q_out = (1.0 - damping) * q_site + damping * q_t
    h_out = (1.0 - damping) * h_site + damping * h_t
    u_out = (1.0 - damping) * u_site + damping * u_t
    q_out[skip] = q_site[skip]
    h_out[skip] = h_site[skip]
    u_out[skip] = u_site[skip]
    q_out = np.clip(q_out, q_floor, q_cap)
    return q_out, h_out, u_out, int(skip.sum())


def sign_tilted_moments(
    m_in: np.ndarray,
    v_in: np.ndarray,
    c_plus: np.ndarray,
    c_minus: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moments of N(m_in, v_in) tilted by a step factor.

    The factor takes value c_plus on w >= 0 and c_minus on w < 0 (the noisy
    direction-feedback likelihood). Returns (log normalizer, tilted mean,
    tilted variance), elementwise over the inputs.
    """
    sd = np.sqrt(v_in)
    z = m_in / sd
    big_phi = ndtr(z)
    zed = c_minus + (c_plus - c_minus) * big_phi
    phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    alpha = phi * (c_plus - c_minus) / zed
    m_out = m_in + sd * alpha
    v_out = v_in * (1.0 - alpha * (alpha + z))
    v_out = np.maximum(v_out, 1e-300)
    return np.log(zed), m_out, v_out
