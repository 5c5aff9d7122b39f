"""Hot per-window synthesis + tone-extraction kernels, two backends.

Backend selection: env var ``FIELDCYCLE_BACKEND`` = ``numba`` (default when
numba imports) or ``numpy`` (pure-vectorized fallback).  Both implement the
same arithmetic in the same order so results agree across backends, and the
noise stream is counter-based so results are independent of chunking and
worker count.

Noise stream: sample k of window w draws

    raw  = mix64(key_w + k * GOLDEN),   key_w = mix64(seed + w * GOLDEN)
    u    = ((raw >> 11) + 0.5) * 2^-53          # uniform in (0, 1)
    z    = norm_ppf(u)                          # rational-poly inverse CDF

where mix64 is the splitmix64 finalizer.  The inverse normal CDF uses the
Acklam rational approximation (central region plus sqrt-log tails), accurate
to ~1.2e-9 absolute, which is far below the physical noise amplitudes used
here and identical across backends.

The tone term uses an exact cosine table: for a bin-aligned tone with m
cycles in n samples only n/gcd(m, n) distinct phases occur.

Tone extraction is the standard Goertzel recursion; for bin-aligned
omega = 2*pi*m/n the complex bin is X = s1*e^{i*omega} - s2 after n steps.
"""

from __future__ import annotations

import math
import os

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53

# Acklam inverse-normal-CDF coefficients
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_PLOW = 0.02425
_PHIGH = 1.0 - _PLOW

_TILE = 8  # windows per inner tile; lets the Goertzel recursion vectorize
           # across windows while each window's chain stays sequential


def mix64_np(z):
    """splitmix64 finalizer on uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def window_keys(seed, indices):
    """Per-window noise keys for absolute window indices (uint64 array)."""
    idx = np.asarray(indices, dtype=np.uint64)
    return mix64_np(np.uint64(seed) + idx * GOLDEN)


def tone_tables(m, n):
    """cos/sin lookup of the n/gcd(m,n) distinct phases of a bin-m tone."""
    p = n // math.gcd(m, n)
    ang = 2.0 * np.pi * ((m * np.arange(p, dtype=np.int64)) % n) / n
    return np.cos(ang), np.sin(ang)


def norm_ppf_np(p):
    """Inverse normal CDF (Acklam), vectorized; p in (0, 1)."""
    p = np.asarray(p, dtype=float)
    out = np.empty_like(p)
    q = p - 0.5
    r = q * q
    # central branch evaluated everywhere, tails fixed up after
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r
           + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    out[:] = num / den
    lo = p < _PLOW
    hi = p > _PHIGH
    # scalar libm in the rare tails keeps both backends bit-identical
    for idx in np.flatnonzero(lo):
        out.flat[idx] = _tail_ppf(float(p.flat[idx]))
    for idx in np.flatnonzero(hi):
        out.flat[idx] = -_tail_ppf(1.0 - float(p.flat[idx]))
    return out


def _tail_ppf(p):
    q = math.sqrt(-2.0 * math.log(p))
    return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q
            + _C[5]) / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q
                        + 1.0)


def uniforms_np(key, n):
    """The n uniform draws of one window, as float64 in (0, 1)."""
    k = np.arange(n, dtype=np.uint64)
    raw = mix64_np(np.uint64(key) + k * GOLDEN)
    return (np.asarray(raw >> np.uint64(11), dtype=np.float64) + 0.5) * _TWO_M53


def synth_window_np(key, amp, phase, sigma, n, ct, st):
    """One window's raw samples: A*cos(omega*k + phi) + sigma*noise."""
    p = len(ct)
    reps = -(-n // p)
    tone_c = np.tile(ct, reps)[:n]
    tone_s = np.tile(st, reps)[:n]
    # scalar libm coefficients, matching the batch pipeline exactly
    x = (amp * math.cos(phase)) * tone_c - (amp * math.sin(phase)) * tone_s
    if sigma != 0.0:
        x = x + sigma * norm_ppf_np(uniforms_np(key, n))
    return x


_NP_BLOCK = 256  # windows per fallback block, bounds buffer memory


def _pipeline_numpy(keys, cas, sas, n, sigma, ct, st, coeff, cw, sw,
                    out_amp, out_phase):
    """Vectorized fallback: same passes as the jit kernel, in bounded blocks."""
    p = len(ct)
    reps = -(-n // p)
    tone_c = np.tile(ct, reps)[:n]
    tone_s = np.tile(st, reps)[:n]
    ks = np.arange(n, dtype=np.uint64) * GOLDEN
    for w0 in range(0, len(keys), _NP_BLOCK):
        sl = slice(w0, min(w0 + _NP_BLOCK, len(keys)))
        ca = cas[sl]
        sa = sas[sl]
        if sigma != 0.0:
            raw = mix64_np(keys[sl][:, None] + ks[None, :])
            u = (np.asarray(raw >> np.uint64(11), np.float64) + 0.5) * _TWO_M53
            buf = norm_ppf_np(u)
            buf *= sigma
            buf += ca[:, None] * tone_c[None, :] \
                + (-sa)[:, None] * tone_s[None, :]
        else:
            buf = ca[:, None] * tone_c[None, :] \
                + (-sa)[:, None] * tone_s[None, :]
        nw = buf.shape[0]
        s1 = np.zeros(nw)
        s2 = np.zeros(nw)
        for k in range(n):
            s0 = buf[:, k] + coeff * s1 - s2
            s2 = s1
            s1 = s0
        xre = s1 * cw - s2
        xim = s1 * sw
        # sqrt form (not hypot) so the rounding matches the jit kernel;
        # scalar libm atan2 for the same reason (SIMD arctan2 can differ)
        out_amp[sl] = (2.0 / n) * np.sqrt(xre * xre + xim * xim)
        ph = np.empty(len(xre))
        for j in range(len(xre)):
            ph[j] = math.atan2(xim[j], xre[j])
        out_phase[sl] = ph


def have_numba():
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


def active_backend():
    """Resolve the backend name from FIELDCYCLE_BACKEND (numba|numpy)."""
    choice = os.environ.get("FIELDCYCLE_BACKEND", "").strip().lower()
    if choice in ("numba", "numpy"):
        if choice == "numba" and not have_numba():
            raise RuntimeError("FIELDCYCLE_BACKEND=numba but numba not importable")
        return choice
    return "numba" if have_numba() else "numpy"


if have_numba():
    from numba import njit

    _U = np.uint64

    @njit(cache=True, nogil=True)
    def _uniform_pass(key, n, ubuf):
        for k in range(n):
            z = key + _U(k) * GOLDEN
            z = (z ^ (z >> _U(30))) * _M1
            z = (z ^ (z >> _U(27))) * _M2
            z = z ^ (z >> _U(31))
            ubuf[k] = (np.float64(z >> _U(11)) + 0.5) * _TWO_M53

    @njit(cache=True, nogil=True)
    def _central_pass(ubuf, n, buf):
        for k in range(n):
            q = ubuf[k] - 0.5
            r = q * q
            num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r
                    + _A[4]) * r + _A[5]) * q
            den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r
                   + _B[4]) * r + 1.0
            buf[k] = num / den

    @njit(cache=True, nogil=True)
    def _tail_pass(ubuf, n, buf):
        for k in range(n):
            p = ubuf[k]
            if p < _PLOW:
                q = math.sqrt(-2.0 * math.log(p))
                buf[k] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q
                           + _C[4]) * q + _C[5]) / \
                    ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
            elif p > _PHIGH:
                q = math.sqrt(-2.0 * math.log(1.0 - p))
                buf[k] = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q
                            + _C[4]) * q + _C[5]) / \
                    ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)

    @njit(cache=True, nogil=True)
    def _tone_noise_pass(ca, sa, sigma, ct, st, n, buf):
        p = ct.shape[0]
        idx = 0
        for k in range(n):
            buf[k] = sigma * buf[k] + (ca * ct[idx] + (-sa) * st[idx])
            idx += 1
            if idx == p:
                idx = 0

    @njit(cache=True, nogil=True)
    def _tone_only_pass(ca, sa, ct, st, n, buf):
        p = ct.shape[0]
        idx = 0
        for k in range(n):
            buf[k] = ca * ct[idx] + (-sa) * st[idx]
            idx += 1
            if idx == p:
                idx = 0

    @njit(cache=True, nogil=True)
    def _goertzel_tile(buf, nw, n, coeff, s1, s2):
        for w in range(nw):
            s1[w] = 0.0
            s2[w] = 0.0
        for k in range(n):
            for w in range(nw):
                s0 = buf[w, k] + coeff * s1[w] - s2[w]
                s2[w] = s1[w]
                s1[w] = s0

    @njit(cache=True, nogil=True)
    def _pipeline_numba(keys, cas, sas, n, sigma, ct, st, coeff, cw, sw,
                        out_amp, out_phase):
        nw = keys.shape[0]
        inv = 2.0 / n
        buf = np.empty((_TILE, n), np.float64)
        s1 = np.empty(_TILE, np.float64)
        s2 = np.empty(_TILE, np.float64)
        for w0 in range(0, nw, _TILE):
            wn = min(_TILE, nw - w0)
            for t in range(wn):
                w = w0 + t
                ca = cas[w]
                sa = sas[w]
                if sigma != 0.0:
                    _uniform_pass(keys[w], n, buf[t])
                    ubuf = buf[t].copy()
                    _central_pass(ubuf, n, buf[t])
                    _tail_pass(ubuf, n, buf[t])
                    _tone_noise_pass(ca, sa, sigma, ct, st, n, buf[t])
                else:
                    _tone_only_pass(ca, sa, ct, st, n, buf[t])
            _goertzel_tile(buf, wn, n, coeff, s1, s2)
            for t in range(wn):
                xre = s1[t] * cw - s2[t]
                xim = s1[t] * sw
                out_amp[w0 + t] = inv * math.sqrt(xre * xre + xim * xim)
                out_phase[w0 + t] = math.atan2(xim, xre)

    @njit(cache=True, nogil=True)
    def _goertzel_single(x, n, coeff, cw, sw):
        s1 = 0.0
        s2 = 0.0
        for k in range(n):
            s0 = x[k] + coeff * s1 - s2
            s2 = s1
            s1 = s0
        xre = s1 * cw - s2
        xim = s1 * sw
        return xre, xim


def goertzel_bin(x, m):
    """Complex DFT bin m of a real vector via the Goertzel recursion.

    Exact identity (not an approximation) for integer m.  Uses the jit
    kernel when the active backend is numba.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    w = 2.0 * np.pi * m / n
    coeff = 2.0 * np.cos(w)
    cw = np.cos(w)
    sw = np.sin(w)
    if active_backend() == "numba":
        xre, xim = _goertzel_single(x, n, coeff, cw, sw)
    else:
        s1 = 0.0
        s2 = 0.0
        for k in range(n):
            s0 = x[k] + coeff * s1 - s2
            s2 = s1
            s1 = s0
        xre = s1 * cw - s2
        xim = s1 * sw
    return complex(xre, xim)


def run_pipeline(keys, amps, phases, n, sigma, ct, st, m, out_amp, out_phase,
                 backend=None):
    """Synthesize + extract a batch of windows into preallocated outputs.

    keys/amps/phases are per-window arrays; m is the analysis bin.  The
    extracted phase convention matches a signal A*cos(omega*k + phi): the
    reported phase is phi in (-pi, pi].
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    amps = np.ascontiguousarray(amps, dtype=np.float64)
    phases = np.ascontiguousarray(phases, dtype=np.float64)
    w = 2.0 * np.pi * m / n
    coeff = 2.0 * np.cos(w)
    cw = np.cos(w)
    sw = np.sin(w)
    # per-window tone coefficients via scalar libm: each value depends only
    # on that window's (amp, phase), never on array position or batching,
    # which keeps results identical across backends, chunkings and workers
    nw = len(keys)
    cas = np.empty(nw)
    sas = np.empty(nw)
    for j in range(nw):
        cas[j] = amps[j] * math.cos(phases[j])
        sas[j] = amps[j] * math.sin(phases[j])
    be = backend or active_backend()
    if be == "numba":
        _pipeline_numba(keys, cas, sas, n, sigma, ct, st, coeff, cw, sw,
                        out_amp, out_phase)
    elif be == "numpy":
        _pipeline_numpy(keys, cas, sas, n, sigma, ct, st, coeff, cw, sw,
                        out_amp, out_phase)
    else:
        raise ValueError(f"unknown backend {be!r}")
    # atan2 can emit exactly -pi; the reported range is (-pi, pi]
    out_phase[out_phase == -np.pi] = np.pi
