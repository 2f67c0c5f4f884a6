# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Dormand-Prince integration of the built-in systems and
categorical error sampling with interpolated quantiles.

Mirrors ``hopcast._pykernels`` operation for operation; keep both in sync.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow, isfinite, floor
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF MAX_DIM = 16

# Butcher tableau (Dormand & Prince 1980)
cdef double C2 = 1.0 / 5.0, C3 = 3.0 / 10.0, C4 = 4.0 / 5.0, C5 = 8.0 / 9.0
cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0, A53 = 64448.0 / 6561.0
cdef double A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0, A63 = 46732.0 / 5247.0
cdef double A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0
cdef double B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0
# b - b_hat (error estimate weights)
cdef double E1 = 71.0 / 57600.0, E3 = -71.0 / 16695.0, E4 = 71.0 / 1920.0
cdef double E5 = -17253.0 / 339200.0, E6 = 22.0 / 525.0, E7 = -1.0 / 40.0

cdef double SAFETY = 0.9, MIN_FACTOR = 0.2, MAX_FACTOR = 10.0
cdef double EPS = 2.220446049250313e-16


cdef void rhs(int sys_id, const double* p, const double* x, double* out, int n) noexcept nogil:
    cdef double r, s6q
    cdef int i
    if sys_id == 0:  # Lotka-Volterra: alpha, beta, gamma, delta
        out[0] = p[0] * x[0] - p[1] * x[0] * x[1]
        out[1] = p[3] * x[0] * x[1] - p[2] * x[1]
    elif sys_id == 1:  # Lorenz: sigma, rho, beta
        out[0] = p[0] * (x[1] - x[0])
        out[1] = x[0] * (p[1] - x[2]) - x[1]
        out[2] = x[0] * x[1] - p[2] * x[2]
    elif sys_id == 2:  # FitzHugh-Nagumo: a, b, eps, I
        out[0] = x[0] - x[0] * x[0] * x[0] / 3.0 - x[1] + p[3]
        out[1] = p[2] * (x[0] + p[0] - p[1] * x[1])
    elif sys_id == 3:  # Lorenz95, (x[i+1] - x[i-1]) * x[i-2] form: F
        for i in range(n):
            out[i] = (x[(i + 1) % n] - x[(i - 2 + n) % n]) * x[(i - 1 + n) % n] - x[i] + p[0]
    elif sys_id == 4:  # Glycolytic: J0 k1 k2 k3 k4 k5 k6 k kappa q K1 psi N A
        s6q = pow(x[5] / p[10], p[9])
        r = p[1] * x[0] * x[5] / (1.0 + s6q)
        out[0] = p[0] - r
        out[1] = 2.0 * r - p[2] * x[1] * (p[12] - x[4]) - p[6] * x[1] * x[4]
        out[2] = p[2] * x[1] * (p[12] - x[4]) - p[3] * x[2] * (p[13] - x[5])
        out[3] = p[3] * x[2] * (p[13] - x[5]) - p[4] * x[3] * x[4] - p[8] * (x[3] - x[6])
        out[4] = p[2] * x[1] * (p[12] - x[4]) - p[4] * x[3] * x[4] - p[6] * x[1] * x[4]
        out[5] = -2.0 * r + 2.0 * p[3] * x[2] * (p[13] - x[5]) - p[5] * x[5]
        out[6] = p[11] * p[8] * (x[3] - x[6]) - p[7] * x[6]
    else:  # linear decay: rate
        for i in range(n):
            out[i] = -p[0] * x[i]


def eval_rhs_batch(int sys_id, const double[::1] params, const double[:, ::1] states):
    """Evaluate the vector field row-wise over ``states`` (n, D)."""
    cdef Py_ssize_t n = states.shape[0], d = states.shape[1], i
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            rhs(sys_id, &params[0], &states[i, 0], &o[i, 0], <int>d)
    return out


cdef double rms_norm(const double* v, const double* scale, int n) noexcept nogil:
    cdef double acc = 0.0, q
    cdef int i
    for i in range(n):
        q = v[i] / scale[i]
        acc += q * q
    return sqrt(acc / n)


cdef double initial_step(int sys_id, const double* p, const double* y0, const double* f0,
                         int n, double rtol, double atol, double max_step) noexcept nogil:
    cdef double scale[MAX_DIM]
    cdef double y1[MAX_DIM]
    cdef double f1[MAX_DIM]
    cdef double diff[MAX_DIM]
    cdef double d0, d1, d2, h0, h1
    cdef int i
    for i in range(n):
        scale[i] = atol + fabs(y0[i]) * rtol
    d0 = rms_norm(y0, scale, n)
    d1 = rms_norm(f0, scale, n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    for i in range(n):
        y1[i] = y0[i] + h0 * f0[i]
    rhs(sys_id, p, y1, f1, n)
    for i in range(n):
        diff[i] = f1[i] - f0[i]
    d2 = rms_norm(diff, scale, n) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = h0 * 1e-3
        if h1 < 1e-6:
            h1 = 1e-6
    else:
        h1 = pow(0.01 / (d1 if d1 > d2 else d2), 1.0 / 5.0)
    h0 = 100.0 * h0
    if h1 < h0:
        h0 = h1
    if max_step < h0:
        h0 = max_step
    return h0


def integrate_grid(int sys_id, const double[::1] params, const double[::1] x0, double dt, int n_rows,
                   double rtol, double atol, double max_step, long max_steps):
    """Adaptive DOPRI5 from ``x0`` sampled every ``dt`` for ``n_rows`` rows.

    Returns ``(rows, status, t_reached)``; status 0 ok, 1 step-size underflow,
    2 non-finite state, 3 step budget exhausted. Rows past a failure are NaN.
    """
    cdef int n = <int>x0.shape[0]
    if n > MAX_DIM:
        raise ValueError("state dimension exceeds compiled kernel limit")
    rows = np.full((n_rows, n), np.nan, dtype=np.float64)
    cdef double[:, ::1] out = rows
    cdef double y[MAX_DIM]
    cdef double yn[MAX_DIM]
    cdef double tmp[MAX_DIM]
    cdef double k1[MAX_DIM]
    cdef double k2[MAX_DIM]
    cdef double k3[MAX_DIM]
    cdef double k4[MAX_DIM]
    cdef double k5[MAX_DIM]
    cdef double k6[MAX_DIM]
    cdef double k7[MAX_DIM]
    cdef double err[MAX_DIM]
    cdef double scale[MAX_DIM]
    cdef const double* p = &params[0]
    cdef double t = 0.0, t_end, h, h_prop, err_norm, factor, a
    cdef int i, r, status = 0
    cdef bint rejected, clipped, finite
    cdef long steps = 0

    with nogil:
        for i in range(n):
            y[i] = x0[i]
            out[0, i] = y[i]
        rhs(sys_id, p, y, k1, n)
        h_prop = initial_step(sys_id, p, y, k1, n, rtol, atol, max_step)
        for r in range(1, n_rows):
            t_end = r * dt
            while t < t_end and status == 0:
                rejected = False
                while True:
                    steps += 1
                    if steps > max_steps:
                        status = 3
                        break
                    if h_prop < 10.0 * EPS * fabs(t) or h_prop <= 0.0:
                        status = 1
                        break
                    h = h_prop
                    clipped = False
                    if t + h >= t_end or t_end - (t + h) < 10.0 * EPS * fabs(t_end):
                        h = t_end - t
                        clipped = True
                    for i in range(n):
                        tmp[i] = y[i] + h * (A21 * k1[i])
                    rhs(sys_id, p, tmp, k2, n)
                    for i in range(n):
                        tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
                    rhs(sys_id, p, tmp, k3, n)
                    for i in range(n):
                        tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
                    rhs(sys_id, p, tmp, k4, n)
                    for i in range(n):
                        tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
                    rhs(sys_id, p, tmp, k5, n)
                    for i in range(n):
                        tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i]
                                             + A64 * k4[i] + A65 * k5[i])
                    rhs(sys_id, p, tmp, k6, n)
                    for i in range(n):
                        yn[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i]
                                            + B5 * k5[i] + B6 * k6[i])
                    rhs(sys_id, p, yn, k7, n)
                    finite = True
                    for i in range(n):
                        err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i]
                                      + E6 * k6[i] + E7 * k7[i])
                        a = fabs(y[i])
                        if fabs(yn[i]) > a:
                            a = fabs(yn[i])
                        scale[i] = atol + a * rtol
                        if not isfinite(yn[i]) or not isfinite(k7[i]):
                            finite = False
                    if not finite:
                        err_norm = 1e300
                    else:
                        err_norm = rms_norm(err, scale, n)
                    if err_norm < 1.0:
                        if err_norm == 0.0:
                            factor = MAX_FACTOR
                        else:
                            factor = SAFETY * pow(err_norm, -0.2)
                            if factor > MAX_FACTOR:
                                factor = MAX_FACTOR
                        if rejected and factor > 1.0:
                            factor = 1.0
                        if clipped and h < h_prop and factor >= 1.0:
                            h_prop = h_prop if h_prop > h * factor else h * factor
                        else:
                            h_prop = h * factor
                        if h_prop > max_step:
                            h_prop = max_step
                        t = t_end if clipped else t + h
                        for i in range(n):
                            y[i] = yn[i]
                            k1[i] = k7[i]
                        break
                    else:
                        if err_norm >= 1e300:
                            factor = MIN_FACTOR
                        else:
                            factor = SAFETY * pow(err_norm, -0.2)
                            if factor < MIN_FACTOR:
                                factor = MIN_FACTOR
                        h_prop = h * factor
                        rejected = True
            if status != 0:
                break
            finite = True
            for i in range(n):
                if not isfinite(y[i]):
                    finite = False
            if not finite:
                status = 2
                break
            for i in range(n):
                out[r, i] = y[i]
    return rows, status, t


def sample_quantile_stats(const double[:, ::1] cum_weights, const double[::1] values,
                          const double[:, ::1] uniforms, const double[::1] probs):
    """Inverse-CDF categorical draws per row, then sample mean and quantiles.

    ``cum_weights`` (B, K) are row-wise cumulative weights, ``uniforms`` (B, s)
    lie in [0, 1). Quantiles use linear interpolation between order statistics.
    """
    cdef Py_ssize_t nb = cum_weights.shape[0], k = cum_weights.shape[1]
    cdef Py_ssize_t s = uniforms.shape[1], nq = probs.shape[0]
    means = np.empty(nb, dtype=np.float64)
    quants = np.empty((nb, nq), dtype=np.float64)
    # draws come from ``values``, so each row is sorted by counting draws per value rank
    order = np.argsort(np.asarray(values), kind="stable")
    rank_arr = np.empty(k, dtype=np.intp)
    rank_arr[order] = np.arange(k, dtype=np.intp)
    sorted_arr = np.ascontiguousarray(np.asarray(values)[order])
    cdef Py_ssize_t[::1] rank = rank_arr
    cdef double[::1] sorted_vals = sorted_arr
    cdef double[::1] m = means
    cdef double[:, ::1] q = quants
    cdef double* buf = <double*>malloc(s * sizeof(double))
    cdef Py_ssize_t* counts = <Py_ssize_t*>malloc(k * sizeof(Py_ssize_t))
    if buf == NULL or counts == NULL:
        free(buf)
        free(counts)
        raise MemoryError()
    cdef Py_ssize_t b, j, lo, hi, mid, idx, r, pos
    cdef double total, target, acc, hpos, frac
    try:
        with nogil:
            for b in range(nb):
                total = cum_weights[b, k - 1]
                acc = 0.0
                for r in range(k):
                    counts[r] = 0
                for j in range(s):
                    target = uniforms[b, j] * total
                    # branchless count of cum_weights <= target (searchsorted side=right)
                    lo = 0
                    hi = k
                    while hi > 1:
                        mid = hi >> 1
                        lo = lo + mid if cum_weights[b, lo + mid] <= target else lo
                        hi -= mid
                    lo += cum_weights[b, lo] <= target
                    idx = lo if lo < k else k - 1
                    acc += values[idx]
                    counts[rank[idx]] += 1
                m[b] = acc / s
                pos = 0
                for r in range(k):
                    for j in range(counts[r]):
                        buf[pos] = sorted_vals[r]
                        pos += 1
                for j in range(nq):
                    hpos = (s - 1) * probs[j]
                    lo = <Py_ssize_t>floor(hpos)
                    if lo >= s - 1:
                        q[b, j] = buf[s - 1]
                    else:
                        frac = hpos - lo
                        q[b, j] = buf[lo] + frac * (buf[lo + 1] - buf[lo])
    finally:
        free(buf)
        free(counts)
    return means, quants
