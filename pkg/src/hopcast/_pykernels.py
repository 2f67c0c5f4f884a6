"""Pure-Python/numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Same algorithms, same operation order where it matters for agreement.
"""
import math

import numpy as np

C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200,
                          22 / 525, -1 / 40)

SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 10.0
EPS = np.finfo(float).eps


def _lv(p, x):
    return np.stack([p[0] * x[..., 0] - p[1] * x[..., 0] * x[..., 1],
                     p[3] * x[..., 0] * x[..., 1] - p[2] * x[..., 1]], axis=-1)


def _lorenz(p, x):
    return np.stack([p[0] * (x[..., 1] - x[..., 0]),
                     x[..., 0] * (p[1] - x[..., 2]) - x[..., 1],
                     x[..., 0] * x[..., 1] - p[2] * x[..., 2]], axis=-1)


def _fhn(p, x):
    v, w = x[..., 0], x[..., 1]
    return np.stack([v - v * v * v / 3.0 - w + p[3],
                     p[2] * (v + p[0] - p[1] * w)], axis=-1)


def _lorenz95(p, x):
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + p[0]


def _glycolytic(p, x):
    s = [x[..., i] for i in range(7)]
    r = p[1] * s[0] * s[5] / (1.0 + (s[5] / p[10]) ** p[9])
    flux2 = p[2] * s[1] * (p[12] - s[4])
    flux3 = p[3] * s[2] * (p[13] - s[5])
    return np.stack([
        p[0] - r,
        2.0 * r - flux2 - p[6] * s[1] * s[4],
        flux2 - flux3,
        flux3 - p[4] * s[3] * s[4] - p[8] * (s[3] - s[6]),
        flux2 - p[4] * s[3] * s[4] - p[6] * s[1] * s[4],
        -2.0 * r + 2.0 * flux3 - p[5] * s[5],
        p[11] * p[8] * (s[3] - s[6]) - p[7] * s[6],
    ], axis=-1)


def _decay(p, x):
    return -p[0] * x


RHS = {0: _lv, 1: _lorenz, 2: _fhn, 3: _lorenz95, 4: _glycolytic, 5: _decay}


def eval_rhs_batch(sys_id, params, states):
    return np.ascontiguousarray(RHS[sys_id](params, np.asarray(states, dtype=float)))


def _rms(v, scale):
    return math.sqrt(float(np.sum((v / scale) ** 2)) / v.size)


def _initial_step(f, y0, f0, rtol, atol, max_step):
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0, scale), _rms(f0, scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(y0 + h0 * f0)
    d2 = _rms(f1 - f0, scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, max_step)


def integrate_grid(sys_id, params, x0, dt, n_rows, rtol, atol, max_step, max_steps):
    rhs = RHS[sys_id]
    f = lambda y: rhs(params, y)  # noqa: E731
    n = x0.shape[0]
    rows = np.full((n_rows, n), np.nan)
    y = np.array(x0, dtype=float)
    rows[0] = y
    k1 = f(y)
    h_prop = _initial_step(f, y, k1, rtol, atol, max_step)
    t, status, steps = 0.0, 0, 0
    for r in range(1, n_rows):
        t_end = r * dt
        while t < t_end and status == 0:
            rejected = False
            while True:
                steps += 1
                if steps > max_steps:
                    status = 3
                    break
                if h_prop < 10 * EPS * abs(t) or h_prop <= 0.0:
                    status = 1
                    break
                h, clipped = h_prop, False
                if t + h >= t_end or t_end - (t + h) < 10 * EPS * abs(t_end):
                    h, clipped = t_end - t, True
                k2 = f(y + h * (A21 * k1))
                k3 = f(y + h * (A31 * k1 + A32 * k2))
                k4 = f(y + h * (A41 * k1 + A42 * k2 + A43 * k3))
                k5 = f(y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4))
                k6 = f(y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5))
                yn = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
                k7 = f(yn)
                err = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
                scale = atol + np.maximum(np.abs(y), np.abs(yn)) * rtol
                if np.all(np.isfinite(yn)) and np.all(np.isfinite(k7)):
                    with np.errstate(over="ignore", invalid="ignore"):
                        err_norm = _rms(err, scale)
                else:
                    err_norm = 1e300
                if err_norm < 1.0:
                    if err_norm == 0.0:
                        factor = MAX_FACTOR
                    else:
                        factor = min(MAX_FACTOR, SAFETY * err_norm ** -0.2)
                    if rejected and factor > 1.0:
                        factor = 1.0
                    if clipped and h < h_prop and factor >= 1.0:
                        h_prop = max(h_prop, h * factor)
                    else:
                        h_prop = h * factor
                    h_prop = min(h_prop, max_step)
                    t = t_end if clipped else t + h
                    y, k1 = yn, k7
                    break
                factor = MIN_FACTOR if err_norm >= 1e300 else max(
                    MIN_FACTOR, SAFETY * err_norm ** -0.2)
                h_prop = h * factor
                rejected = True
        if status != 0:
            break
        if not np.all(np.isfinite(y)):
            status = 2
            break
        rows[r] = y
    return rows, status, t


def sample_quantile_stats(cum_weights, values, uniforms, probs):
    cum_weights = np.asarray(cum_weights, dtype=float)
    nb, k = cum_weights.shape
    s = uniforms.shape[1]
    targets = uniforms * cum_weights[:, -1:]
    idx = np.empty(uniforms.shape, dtype=np.intp)
    for b in range(nb):
        idx[b] = np.searchsorted(cum_weights[b], targets[b], side="right")
    np.minimum(idx, k - 1, out=idx)
    draws = values[idx]
    # sequential accumulation, matching the compiled kernel
    means = np.cumsum(draws, axis=1)[:, -1] / s
    draws.sort(axis=1)
    hpos = (s - 1) * np.asarray(probs, dtype=float)
    lo = np.floor(hpos).astype(np.intp)
    top = lo >= s - 1
    lo_c = np.minimum(lo, s - 2) if s > 1 else np.zeros_like(lo)
    frac = hpos - lo_c
    if s > 1:
        quants = draws[:, lo_c] + frac * (draws[:, lo_c + 1] - draws[:, lo_c])
        quants[:, top] = draws[:, -1:]
    else:
        quants = np.repeat(draws, len(probs), axis=1)
    return means, quants
