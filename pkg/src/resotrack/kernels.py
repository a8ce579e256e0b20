"""Hot numeric kernels with a numba fast path and a numpy fallback.

The scalar sample chain and the closed-loop tracking recurrence are written
once as plain Python and compiled twice: through ``numba.njit`` when numba is
importable, and as-is otherwise.  The open-loop chain and the median filter
additionally have vectorized numpy implementations, so the package works
(slower) with numba absent or disabled.

Backend selection: ``RESOTRACK_NO_NUMBA=1`` in the environment forces the
fallback path; tests and the benchmark call both implementations directly.
Bit-exactness between backends is part of the contract -- the fallback
expressions mirror the scalar source operation-for-operation, and median
outputs are order statistics, so equality is exact, not approximate.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag instead
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


_DISABLED = os.environ.get("RESOTRACK_NO_NUMBA", "").lower() in ("1", "true", "yes")
USE_NUMBA = HAS_NUMBA and not _DISABLED

_SAT_STREAK_LIMIT = 100  # consecutive saturated ADC samples that drop lock


def _define(deco):
    """Build the scalar kernels under a decorator (njit or identity).

    Keeping one source for both backends is what makes the bit-identity
    guarantee testable rather than aspirational.
    """

    @deco
    def sample_one(vq, c0, c1, c2, c3, jit_hz, f_r, q, dt, base, g, off, nl,
                   nz, emi, lsb, fs):
        # DAC volts -> VCO Hz (Horner) -> Lorentzian dip -> detector -> ADC
        f = ((c3 * vq + c2) * vq + c1) * vq + c0 + jit_hz
        x = 2.0 * q * (f - f_r) / f_r
        t = base - dt / (1.0 + x * x)
        v = g * t + off + nl * (t * t) + nz + emi
        sat = (v < 0.0) or (v > fs)
        va = np.rint(v / lsb) * lsb
        if va < 0.0:
            va = 0.0
        elif va > fs:
            va = fs
        return va, sat

    @deco
    def chain_loop(vq, c0, c1, c2, c3, jitter, f_r, q, dt, base, g, off, nl,
                   noise, emi, lsb, fs):
        n = vq.shape[0]
        out = np.empty(n)
        sat = np.empty(n, np.bool_)
        for i in range(n):
            va, s = sample_one(vq[i], c0, c1, c2, c3, jitter[i], f_r[i], q,
                               dt, base, g, off, nl, noise[i], emi[i], lsb, fs)
            out[i] = va
            sat[i] = s
        return out, sat

    @deco
    def track_square_loop(v_c, a_m, k_i, k_p, k_d, n, jitter, f_r, noise, emi,
                          c0, c1, c2, c3, q, dt, base, g, off, nl, lsb, fs,
                          dac_lo, dac_hi, limit_mult, locked0, streak0,
                          e1, e2):
        # Two ADC conversions per iteration: v_center + a_m then v_center - a_m.
        # jitter/f_r/noise/emi are pre-drawn per conversion (length 2n) so the
        # plant's RNG/time stream advances exactly as for 2n open-loop samples.
        v_out = np.empty(n)
        err = np.empty(n)
        locked_arr = np.empty(n, np.bool_)
        sat_arr = np.empty(n, np.bool_)
        locked = locked0
        streak = streak0
        for i in range(n):
            j = 2 * i
            cmd_p = v_c + a_m
            cmd_m = v_c - a_m
            range_exit = (cmd_p > dac_hi) or (cmd_p < dac_lo) \
                or (cmd_m > dac_hi) or (cmd_m < dac_lo)
            cp = min(max(cmd_p, dac_lo), dac_hi)
            cm = min(max(cmd_m, dac_lo), dac_hi)
            vqp = np.rint(cp / lsb) * lsb
            if vqp < dac_lo:
                vqp = dac_lo
            elif vqp > dac_hi:
                vqp = dac_hi
            vqm = np.rint(cm / lsb) * lsb
            if vqm < dac_lo:
                vqm = dac_lo
            elif vqm > dac_hi:
                vqm = dac_hi
            vp, sp = sample_one(vqp, c0, c1, c2, c3, jitter[j], f_r[j], q, dt,
                                base, g, off, nl, noise[j], emi[j], lsb, fs)
            if sp:
                streak += 1
            else:
                streak = 0
            sat_trip = streak >= _SAT_STREAK_LIMIT
            vm, sm = sample_one(vqm, c0, c1, c2, c3, jitter[j + 1], f_r[j + 1],
                                q, dt, base, g, off, nl, noise[j + 1],
                                emi[j + 1], lsb, fs)
            if sm:
                streak += 1
            else:
                streak = 0
            if streak >= _SAT_STREAK_LIMIT:
                sat_trip = True
            e = (vp - vm) / (2.0 * a_m)
            # velocity-form PID: the integral part is the plain accumulation
            delta = k_i * e + k_p * (e - e1) + k_d * (e - 2.0 * e1 + e2)
            # loss of lock: oversized integral step (strict), range exit,
            # or a long saturated streak; the flag latches until relock
            if abs(k_i * e) > limit_mult * a_m or range_exit or sat_trip:
                locked = False
            v_c = v_c - delta
            e2 = e1
            e1 = e
            v_out[i] = v_c
            err[i] = e
            locked_arr[i] = locked
            sat_arr[i] = sp or sm
        return v_out, err, locked_arr, sat_arr, v_c, e1, e2, locked, streak

    @deco
    def median_loop(x, h):
        # centered sliding median; windows shrink symmetrically at the edges
        n = x.shape[0]
        out = np.empty(n)
        w = 2 * h + 1
        if w > n:
            for i in range(n):
                k = min(i, n - 1 - i)
                out[i] = np.median(x[i - k:i + k + 1])
            return out
        for i in range(h):
            out[i] = np.median(x[0:2 * i + 1])
        for i in range(n - h, n):
            k = n - 1 - i
            out[i] = np.median(x[i - k:i + k + 1])
        win = np.sort(x[0:w])
        out[h] = win[h]
        for i in range(h + 1, n - h):
            old = x[i - h - 1]
            new = x[i + h]
            pos = np.searchsorted(win, old)
            for jj in range(pos, w - 1):
                win[jj] = win[jj + 1]
            pos = np.searchsorted(win[:w - 1], new)
            for jj in range(w - 1, pos, -1):
                win[jj] = win[jj - 1]
            win[pos] = new
            out[i] = win[h]
        return out

    return sample_one, chain_loop, track_square_loop, median_loop


_py = _define(lambda fn: fn)
sample_one_py, chain_py, track_square_py, median_py = _py

if HAS_NUMBA:
    _nb = _define(njit(nogil=True))
    sample_one_nb, chain_nb, track_square_nb, median_nb = _nb
else:  # pragma: no cover
    sample_one_nb = chain_nb = track_square_nb = median_nb = None


def chain_numpy(vq, c0, c1, c2, c3, jitter, f_r, q, dt, base, g, off, nl,
                noise, emi, lsb, fs):
    """Vectorized open-loop chain; operation order mirrors ``sample_one``."""
    f = ((c3 * vq + c2) * vq + c1) * vq + c0 + jitter
    x = 2.0 * q * (f - f_r) / f_r
    t = base - dt / (1.0 + x * x)
    v = g * t + off + nl * (t * t) + noise + emi
    sat = (v < 0.0) | (v > fs)
    va = np.rint(v / lsb) * lsb
    np.clip(va, 0.0, fs, out=va)
    return va, sat


def median_numpy(x, h):
    """Vectorized centered median with the same shrinking-edge semantics."""
    n = x.shape[0]
    out = np.empty_like(x)
    w = 2 * h + 1
    if w > n:
        for i in range(n):
            k = min(i, n - 1 - i)
            out[i] = np.median(x[i - k:i + k + 1])
        return out
    for i in range(h):
        out[i] = np.median(x[0:2 * i + 1])
    for i in range(n - h, n):
        k = n - 1 - i
        out[i] = np.median(x[i - k:i + k + 1])
    view = np.lib.stride_tricks.sliding_window_view(x, w)
    # chunked to bound the partition scratch memory at wide windows
    step = max(1, (1 << 21) // w)
    for lo in range(0, view.shape[0], step):
        out[h + lo:h + min(lo + step, view.shape[0])] = np.median(
            view[lo:lo + step], axis=1
        )
    return out


# ------------------------------------------------------------- dispatchers
def chain(vq, *args, backend=None):
    be = backend or ("numba" if USE_NUMBA else "numpy")
    if be == "numba":
        return chain_nb(vq, *args)
    if be == "numpy":
        return chain_numpy(vq, *args)
    if be == "python":
        return chain_py(vq, *args)
    raise ValueError(f"unknown backend {be!r}")


def track_square(*args, backend=None):
    be = backend or ("numba" if USE_NUMBA else "python")
    if be == "numba":
        return track_square_nb(*args)
    if be in ("python", "numpy"):
        return track_square_py(*args)
    raise ValueError(f"unknown backend {be!r}")


def median(x, h, backend=None):
    be = backend or ("numba" if USE_NUMBA else "numpy")
    if be == "numba":
        return median_nb(x, h)
    if be == "numpy":
        return median_numpy(x, h)
    if be == "python":
        return median_py(x, h)
    raise ValueError(f"unknown backend {be!r}")


def warmup():
    """Trigger numba compilation on tiny inputs (no-op without numba)."""
    if not USE_NUMBA:
        return
    z = np.zeros(4)
    chain_nb(np.full(4, 1.6), 4.6e9, 2e8, 0.0, 0.0, z, np.full(4, 4.92e9),
             100.0, 0.4, 1.0, 2.4, 0.0, 0.0, z, z, 8e-4, 3.3)
    z2 = np.zeros(8)
    track_square_nb(1.6, 0.017, 0.006, 0.0, 0.0, 4, z2, np.full(8, 4.92e9),
                    z2, z2, 4.6e9, 2e8, 0.0, 0.0, 100.0, 0.4, 1.0, 2.4, 0.0,
                    0.0, 8e-4, 3.3, 0.0, 3.3, 5.0, True, 0, 0.0, 0.0)
    median_nb(np.arange(16.0), 3)
