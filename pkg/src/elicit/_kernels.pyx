# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled moment-matching kernels.

Mirrors _kernels_py.py operation for operation; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, exp, fabs, log, sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"

cdef double _LOG_2PI = 1.8378770664093453
cdef double _INV_SQRT_2PI = 0.3989422804014327
cdef double _INV_SQRT_2 = 0.7071067811865476
cdef double PREC_TINY = 1e-12


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _ndtr(double z) nogil:
    return 0.5 * erfc(-z * _INV_SQRT_2)


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def ss_site_update(
    double[::1] v_marg,
    double[::1] m_marg,
    double[::1] q_site,
    double[::1] h_site,
    double[::1] u_site,
    double[::1] eta_base,
    double[::1] tau2,
    double damping,
    double q_floor,
    double q_cap,
):
    """See _kernels_py.ss_site_update."""
    cdef Py_ssize_t n = v_marg.shape[0]
    cdef cnp.ndarray[double, ndim=1] q_out_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] h_out_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] u_out_arr = np.empty(n)
    cdef double[::1] q_out = q_out_arr
    cdef double[::1] h_out = h_out_arr
    cdef double[::1] u_out = u_out_arr

    cdef Py_ssize_t i
    cdef int skipped = 0
    cdef double prec_marg, prec_c, v_c, m_c, t2, eta, s1, lam, g, v1, m1
    cdef double v_tilt, m_tilt, q_t, h_t, u_t, g0, var0, keep

    keep = 1.0 - damping
    with nogil:
        for i in range(n):
            prec_marg = 1.0 / v_marg[i]
            prec_c = prec_marg - q_site[i]
            if prec_c < -PREC_TINY:
                skipped += 1
                q_out[i] = q_site[i]
                h_out[i] = h_site[i]
                u_out[i] = u_site[i]
                continue
            if fabs(prec_c) <= PREC_TINY:
                g0 = _sigmoid(eta_base[i])
                var0 = g0 * tau2[i]
                if var0 < 1.0 / q_cap:
                    var0 = 1.0 / q_cap
                q_t = _clip(1.0 / var0, q_floor, q_cap)
                h_t = 0.0
                u_t = 0.0
            else:
                v_c = 1.0 / prec_c
                m_c = v_c * (prec_marg * m_marg[i] - h_site[i])
                t2 = tau2[i]
                eta = eta_base[i]
                s1 = v_c + t2
                if eta == INFINITY:
                    lam = INFINITY
                elif eta == -INFINITY:
                    lam = -INFINITY
                else:
                    lam = eta + 0.5 * log(v_c / s1) + 0.5 * m_c * m_c * (t2 / (v_c * s1))
                g = _sigmoid(lam)
                v1 = v_c * t2 / s1
                m1 = m_c * (t2 / s1)
                v_tilt = g * v1 + g * (1.0 - g) * m1 * m1
                m_tilt = g * m1
                if v_tilt > 0.0:
                    q_t = _clip(1.0 / v_tilt - prec_c, q_floor, q_cap)
                else:
                    q_t = q_cap
                # h consistent with the clipped precision: the matched
                # marginal mean equals the tilted mean even when clipped.
                h_t = (prec_c + q_t) * m_tilt - prec_c * m_c
                if lam == INFINITY or lam == -INFINITY:
                    u_t = 0.0
                else:
                    u_t = lam - eta
            q_out[i] = _clip(keep * q_site[i] + damping * q_t, q_floor, q_cap)
            h_out[i] = keep * h_site[i] + damping * h_t
            u_out[i] = keep * u_site[i] + damping * u_t

    return q_out_arr, h_out_arr, u_out_arr, skipped


cdef inline void _sign_tilt(double m_in, double v_in, double cp, double cm,
                            double* logz, double* m_out, double* v_out) nogil:
    cdef double sd = sqrt(v_in)
    cdef double z = m_in / sd
    cdef double zed = cm + (cp - cm) * _ndtr(z)
    cdef double phi = _INV_SQRT_2PI * exp(-0.5 * z * z)
    cdef double alpha = phi * (cp - cm) / zed
    cdef double v = v_in * (1.0 - alpha * (alpha + z))
    if v < 1e-300:
        v = 1e-300
    logz[0] = log(zed)
    m_out[0] = m_in + sd * alpha
    v_out[0] = v


def ss_dir_site_update(
    double[::1] v_marg,
    double[::1] m_marg,
    double[::1] q_site,
    double[::1] h_site,
    double[::1] u_site,
    double[::1] eta_base,
    double[::1] tau2,
    double[::1] c_plus,
    double damping,
    double q_floor,
    double q_cap,
):
    """See _kernels_py.ss_dir_site_update."""
    cdef Py_ssize_t n = v_marg.shape[0]
    cdef cnp.ndarray[double, ndim=1] q_out_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] h_out_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] u_out_arr = np.empty(n)
    cdef double[::1] q_out = q_out_arr
    cdef double[::1] h_out = h_out_arr
    cdef double[::1] u_out = u_out_arr

    cdef Py_ssize_t i
    cdef int skipped = 0
    cdef double prec_marg, prec_c, v_c, m_c, t2, eta, cp, s1, lam0, lam, g, g0
    cdef double v1, m1, vt0, q0, var0, logz_s, m_s, v_s, v_tilt, m_tilt, extra
    cdef double q_t, h_t, u_t, keep

    keep = 1.0 - damping
    with nogil:
        for i in range(n):
            prec_marg = 1.0 / v_marg[i]
            prec_c = prec_marg - q_site[i]
            if prec_c < -PREC_TINY:
                skipped += 1
                q_out[i] = q_site[i]
                h_out[i] = h_site[i]
                u_out[i] = u_site[i]
                continue
            t2 = tau2[i]
            eta = eta_base[i]
            cp = c_plus[i]
            if fabs(prec_c) <= PREC_TINY:
                var0 = _sigmoid(eta) * t2
                if var0 < 1.0 / q_cap:
                    var0 = 1.0 / q_cap
                _sign_tilt(0.0, t2, cp, 1.0 - cp, &logz_s, &m_s, &v_s)
                if eta == INFINITY:
                    lam = INFINITY
                elif eta == -INFINITY:
                    lam = -INFINITY
                else:
                    lam = eta + logz_s - log(cp)
                g = _sigmoid(lam)
                m_tilt = g * m_s
                v_tilt = g * v_s + g * (1.0 - g) * m_s * m_s
                q0 = _clip(1.0 / var0, q_floor, q_cap)
                if v_tilt > 0.0:
                    extra = 1.0 / v_tilt - 1.0 / var0
                    if extra < 0.0:
                        extra = 0.0
                else:
                    extra = q_cap
                q_t = q0 + extra
                if q_t > q_cap:
                    q_t = q_cap
                h_t = q_t * m_tilt
                if lam == INFINITY or lam == -INFINITY:
                    u_t = 0.0
                else:
                    u_t = lam - eta
            else:
                v_c = 1.0 / prec_c
                m_c = v_c * (prec_marg * m_marg[i] - h_site[i])
                s1 = v_c + t2
                if eta == INFINITY:
                    lam0 = INFINITY
                elif eta == -INFINITY:
                    lam0 = -INFINITY
                else:
                    lam0 = eta + 0.5 * log(v_c / s1) + 0.5 * m_c * m_c * (t2 / (v_c * s1))
                v1 = v_c * t2 / s1
                m1 = m_c * (t2 / s1)

                g0 = _sigmoid(lam0)
                vt0 = g0 * v1 + g0 * (1.0 - g0) * m1 * m1
                if vt0 > 0.0:
                    q0 = _clip(1.0 / vt0 - prec_c, q_floor, q_cap)
                else:
                    q0 = q_cap

                _sign_tilt(m1, v1, cp, 1.0 - cp, &logz_s, &m_s, &v_s)
                if eta == INFINITY:
                    lam = INFINITY
                elif eta == -INFINITY:
                    lam = -INFINITY
                else:
                    lam = lam0 + logz_s - log(cp)
                g = _sigmoid(lam)
                m_tilt = g * m_s
                v_tilt = g * v_s + g * (1.0 - g) * m_s * m_s

                if v_tilt > 0.0 and vt0 > 0.0:
                    extra = 1.0 / v_tilt - 1.0 / vt0
                    if extra < 0.0:
                        extra = 0.0
                else:
                    extra = q_cap
                q_t = q0 + extra
                if q_t > q_cap:
                    q_t = q_cap
                h_t = (prec_c + q_t) * m_tilt - prec_c * m_c
                if lam == INFINITY or lam == -INFINITY:
                    u_t = 0.0
                else:
                    u_t = lam - eta
            q_out[i] = _clip(keep * q_site[i] + damping * q_t, q_floor, q_cap)
            h_out[i] = keep * h_site[i] + damping * h_t
            u_out[i] = keep * u_site[i] + damping * u_t

    return q_out_arr, h_out_arr, u_out_arr, skipped


def sign_tilted_moments(
    double[::1] m_in,
    double[::1] v_in,
    double[::1] c_plus,
    double[::1] c_minus,
):
    """See _kernels_py.sign_tilted_moments."""
    cdef Py_ssize_t n = m_in.shape[0]
    cdef cnp.ndarray[double, ndim=1] logz_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] m_arr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] v_arr = np.empty(n)
    cdef double[::1] logz = logz_arr
    cdef double[::1] m_out = m_arr
    cdef double[::1] v_out = v_arr

    cdef Py_ssize_t i
    cdef double sd, z, big_phi, zed, phi, alpha, v

    with nogil:
        for i in range(n):
            sd = sqrt(v_in[i])
            z = m_in[i] / sd
            big_phi = _ndtr(z)
            zed = c_minus[i] + (c_plus[i] - c_minus[i]) * big_phi
            phi = _INV_SQRT_2PI * exp(-0.5 * z * z)
            alpha = phi * (c_plus[i] - c_minus[i]) / zed
            m_out[i] = m_in[i] + sd * alpha
            v = v_in[i] * (1.0 - alpha * (alpha + z))
            if v < 1e-300:
                v = 1e-300
            v_out[i] = v
            logz[i] = log(zed)

    return logz_arr, m_arr, v_arr
