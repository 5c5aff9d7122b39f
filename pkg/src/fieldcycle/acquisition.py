"""Per-window heterodyne signal synthesis, tone extraction, and analysis.

Every acquisition window holds n_samples of the 20 MHz heterodyned signal
digitized at fs.  The per-window tone amplitude/phase is extracted with a
single-bin Goertzel recursion (an exact DFT-bin identity for bin-aligned
tones, see kernels).  stream_process fuses synthesis and extraction so
millions of windows run at memory cost independent of stream length, with
records bit-identical for a fixed seed regardless of worker count.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, least_squares

from . import kernels

WINDOW_LOG_MAGIC = b"FCWR"
WINDOW_LOG_VERSION = 1
_RECORD = struct.Struct("<Qdd")


class DataError(ValueError):
    """Samples unusable for extraction (non-finite values)."""


class ArtifactFormatError(ValueError):
    """Stored artifact has a bad magic or version."""


class FitError(RuntimeError):
    """Nonlinear fit did not converge."""


@dataclass(frozen=True)
class AcqConfig:
    """Digitizer window geometry and noise model.

    Defaults put the 20 MHz heterodyne tone exactly on DFT bin 100
    (f_het * n_samples / fs = 100), so extraction is scallop-free.
    """

    f_het_hz: float = 20e6
    fs_hz: float = 1e9
    n_samples: int = 5000
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.f_het_hz < self.fs_hz / 2:
            raise ValueError("need 0 < f_het < fs/2")
        if self.n_samples < 16:
            raise ValueError("need n_samples >= 16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit u64")

    @property
    def bin_exact(self) -> float:
        return self.f_het_hz * self.n_samples / self.fs_hz

    @property
    def bin_index(self) -> int:
        return int(round(self.bin_exact))

    @property
    def bin_aligned(self) -> bool:
        return abs(self.bin_exact - self.bin_index) < 1e-9


@dataclass(frozen=True)
class WindowRecord:
    index: int
    amplitude: float
    phase: float


@dataclass
class DecaySeries:
    """A decay curve: y(t) on a strictly increasing time grid (signed y)."""

    t: np.ndarray
    y: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.shape != self.y.shape or self.t.ndim != 1:
            raise ValueError("t and y must be matching 1-d arrays")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("t must be strictly increasing")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("y must be finite")


def _tone_tables_for(cfg: AcqConfig, n: int):
    return kernels.tone_tables(cfg.bin_index, n)


def synthesize_window(true_amplitude, true_phase, cfg: AcqConfig, index=0):
    """Raw samples of one window: A*cos(2*pi*f_het*k/fs + phi) + noise.

    Deterministic per (cfg.seed, index); the same stream positions are
    consumed whether windows are generated singly or in batches.
    """
    n = cfg.n_samples
    key = kernels.window_keys(cfg.seed, np.array([index], dtype=np.uint64))[0]
    if cfg.bin_aligned:
        ct, st = _tone_tables_for(cfg, n)
        return kernels.synth_window_np(key, float(true_amplitude),
                                       float(true_phase), cfg.noise_sigma,
                                       n, ct, st)
    k = np.arange(n)
    x = true_amplitude * np.cos(2 * np.pi * cfg.f_het_hz * k / cfg.fs_hz
                                + true_phase)
    if cfg.noise_sigma != 0.0:
        z = kernels.norm_ppf_np(kernels.uniforms_np(key, n))
        x = x + cfg.noise_sigma * z
    return x


def extract_tone(samples, cfg: AcqConfig):
    """(amplitude, phase) of the heterodyne component of one window.

    Amplitude is 2|X|/n for the analysis-bin value X; phase is the cosine
    phase in (-pi, pi], 0 for an all-zero window.  Matches dft_bin_oracle
    to better than 1e-9 relative.
    """
    x = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples")
    n = len(x)
    m = int(round(cfg.f_het_hz * n / cfg.fs_hz))
    X = kernels.goertzel_bin(x, m)
    # same op order as the batch pipeline so both routes agree bit for bit
    amp = (2.0 / n) * math.sqrt(X.real * X.real + X.imag * X.imag)
    phase = math.atan2(X.imag, X.real)
    if phase == -math.pi:
        phase = math.pi
    return amp, phase


def dft_bin_oracle(samples, f, fs):
    """Reference DFT bin: direct sum of s[k] * exp(-2*pi*i*f*k/fs)."""
    x = np.asarray(samples, dtype=float)
    k = np.arange(len(x))
    return complex(np.sum(x * np.exp(-2j * np.pi * f * k / fs)))


def stream_process(window_source, cfg: AcqConfig, n_workers=1,
                   chunk_size=4096, start_index=0):
    """Fused synthesize + extract over a stream of true (amplitude, phase).

    window_source yields per-window true values: scalars (amplitude, phase
    pairs) or bare amplitudes (phase 0).  Yields WindowRecord in index
    order; memory use is bounded by chunk_size regardless of stream length,
    and output is bit-identical across n_workers and chunk_size choices.
    """
    if not cfg.bin_aligned:
        raise ValueError("stream_process requires a bin-aligned config")
    if n_workers < 1 or chunk_size < 1:
        raise ValueError("n_workers and chunk_size must be >= 1")
    n = cfg.n_samples
    m = cfg.bin_index
    ct, st = _tone_tables_for(cfg, n)
    backend = kernels.active_backend()

    def chunks():
        idx = start_index
        amps = np.empty(chunk_size)
        phases = np.empty(chunk_size)
        count = 0
        for item in window_source:
            if np.isscalar(item):
                amps[count] = item
                phases[count] = 0.0
            else:
                amps[count] = item[0]
                phases[count] = item[1]
            count += 1
            if count == chunk_size:
                yield idx, amps.copy(), phases.copy()
                idx += count
                count = 0
        if count:
            yield idx, amps[:count].copy(), phases[:count].copy()

    def run(job):
        idx, amps, phases = job
        nw = len(amps)
        keys = kernels.window_keys(cfg.seed,
                                   idx + np.arange(nw, dtype=np.uint64))
        out_amp = np.empty(nw)
        out_phase = np.empty(nw)
        kernels.run_pipeline(keys, amps, phases, n, cfg.noise_sigma, ct, st,
                             m, out_amp, out_phase, backend=backend)
        return idx, out_amp, out_phase

    def emit(result):
        idx, out_amp, out_phase = result
        for j in range(len(out_amp)):
            yield WindowRecord(index=idx + j, amplitude=float(out_amp[j]),
                               phase=float(out_phase[j]))

    if n_workers == 1:
        for job in chunks():
            yield from emit(run(job))
        return

    # keep a small in-flight window of chunk futures; emit strictly in order
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        pending = []
        gen = chunks()
        done = False
        while True:
            while not done and len(pending) < n_workers + 2:
                try:
                    pending.append(pool.submit(run, next(gen)))
                except StopIteration:
                    done = True
            if not pending:
                break
            yield from emit(pending.pop(0).result())


def record_digest(records) -> str:
    """sha256 over the packed (index, amplitude, phase) stream."""
    h = hashlib.sha256()
    for r in records:
        h.update(_RECORD.pack(r.index, r.amplitude, r.phase))
    return h.hexdigest()


def records_to_series(records, dt_s, metadata=None) -> DecaySeries:
    """Amplitude series on t = (index+1)*dt from a record list."""
    idx = np.array([r.index for r in records], dtype=float)
    y = np.array([r.amplitude for r in records])
    return DecaySeries(t=(idx + 1.0) * dt_s, y=y, metadata=metadata or {})


def boxcar_smooth(series: DecaySeries, width: int) -> DecaySeries:
    """Centered moving average; edge windows renormalized by their count."""
    if width < 1 or width % 2 == 0:
        raise ValueError("width must be odd and >= 1")
    npts = len(series.y)
    if width > npts:
        raise ValueError(f"width {width} exceeds series length {npts}")
    if width == 1:
        return DecaySeries(series.t.copy(), series.y.copy(),
                           dict(series.metadata))
    kernel = np.ones(width)
    num = np.convolve(series.y, kernel, mode="same")
    cnt = np.convolve(np.ones(npts), kernel, mode="same")
    return DecaySeries(series.t.copy(), num / cnt, dict(series.metadata))


# ---------------------------------------------------------------------------
# decay models and fitting

def _model_exponential(t, p):
    a, tau = p
    return a * np.exp(-t / tau)


def _jac_exponential(t, p):
    a, tau = p
    e = np.exp(-t / tau)
    return np.column_stack([e, a * e * t / tau ** 2])


def _model_stretched(t, p):
    a, tau, beta = p
    return a * np.exp(-((t / tau) ** beta))


def _jac_stretched(t, p):
    a, tau, beta = p
    with np.errstate(divide="ignore", invalid="ignore"):
        x = t / tau
        xb = np.where(x > 0, x ** beta, 0.0)
        e = np.exp(-xb)
        dlog = np.where(x > 0, np.log(np.maximum(x, 1e-300)), 0.0)
    return np.column_stack([e,
                            a * e * xb * beta / tau,
                            -a * e * xb * dlog])


def _model_gaussian(t, p):
    a, tau = p
    return a * np.exp(-((t / tau) ** 2))


def _jac_gaussian(t, p):
    a, tau = p
    e = np.exp(-((t / tau) ** 2))
    return np.column_stack([e, 2.0 * a * e * t ** 2 / tau ** 3])


def _model_two_shell(t, p):
    a, w_minus, tau_p, tau_m = p
    return a * ((1.0 - w_minus) * np.exp(-t / tau_p)
                - w_minus * np.exp(-t / tau_m))


def _jac_two_shell(t, p):
    a, w_minus, tau_p, tau_m = p
    ep = np.exp(-t / tau_p)
    em = np.exp(-t / tau_m)
    return np.column_stack([
        (1.0 - w_minus) * ep - w_minus * em,
        a * (-ep - em),
        a * (1.0 - w_minus) * ep * t / tau_p ** 2,
        -a * w_minus * em * t / tau_m ** 2,
    ])


_MODELS = {
    "exponential": (_model_exponential, _jac_exponential, ("a", "tau")),
    "stretched": (_model_stretched, _jac_stretched, ("a", "tau", "beta")),
    "gaussian": (_model_gaussian, _jac_gaussian, ("a", "tau")),
    "two_shell_signed": (_model_two_shell, _jac_two_shell,
                         ("a", "w_minus", "tau_plus", "tau_minus")),
}


@dataclass(frozen=True)
class FitResult:
    model: str
    params: dict
    one_over_e_time: float
    residual: float
    n_evaluations: int


def _loglinear_tau(t, y, power):
    """Initial decay-time guess from a log-linear regression on |y|."""
    mask = y > np.max(np.abs(y)) * 1e-3
    if np.count_nonzero(mask) < 2:
        return max(t[-1], 1e-30), np.max(np.abs(y))
    tt = t[mask] ** power
    ly = np.log(y[mask])
    slope, intercept = np.polyfit(tt, ly, 1)
    if slope >= 0:
        return max(t[-1], 1e-30), float(np.exp(intercept))
    return float((-1.0 / slope) ** (1.0 / power)), float(np.exp(intercept))


def _initial_guess(model, t, y):
    if model == "exponential":
        tau, a = _loglinear_tau(t, y, 1)
        return np.array([a, tau])
    if model == "gaussian":
        tau2, a = _loglinear_tau(t, y, 2)
        return np.array([a, tau2])
    if model == "stretched":
        tau, a = _loglinear_tau(t, y, 1)
        return np.array([a, tau, 1.0])
    # two-shell: early decay sets tau_plus scale, start with a mild
    # negative-shell weight
    tau, a = _loglinear_tau(t, np.maximum(y, 0.0), 1)
    return np.array([a, 0.25, 0.8 * tau, 2.4 * tau])


def fit_decay(series: DecaySeries, model="exponential") -> FitResult:
    """Levenberg-Marquardt fit of a decay model, log-linear initialized.

    Reports fitted parameters, the 1/e intercept of the fitted curve, and
    the residual 2-norm.  Raises FitError when the solver stalls.
    """
    if model not in _MODELS:
        raise ValueError(f"unknown model {model!r}; have {sorted(_MODELS)}")
    t, y = series.t, series.y
    if len(t) < 8:
        raise ValueError("need at least 8 points")
    if y[0] <= 0:
        raise ValueError("need positive initial amplitude")
    fn, jac, names = _MODELS[model]
    x0 = _initial_guess(model, t, y)

    res = least_squares(lambda p: fn(t, p) - y, x0,
                        jac=lambda p: jac(t, p), method="lm",
                        xtol=1e-10, ftol=1e-10, gtol=1e-10,
                        max_nfev=200 * (len(x0) + 1))
    if not res.success:
        raise FitError(f"fit did not converge: {res.message}; "
                       f"final residual {np.linalg.norm(res.fun):.3e}")
    p = res.x
    if model == "gaussian":
        # tau enters the model squared; canonicalize the unidentifiable sign
        p = np.array([p[0], abs(p[1])])
    params = dict(zip(names, (float(v) for v in p)))
    one_e = _one_over_e_time(model, p, t)
    return FitResult(model=model, params=params, one_over_e_time=one_e,
                     residual=float(np.linalg.norm(res.fun)),
                     n_evaluations=int(res.nfev))


def _one_over_e_time(model, p, t):
    if model == "exponential":
        return float(p[1])
    if model == "gaussian":
        return float(p[1])
    if model == "stretched":
        return float(p[1])
    # signed two-shell curve: first time the curve falls to y(0)/e
    fn = _MODELS[model][0]
    y0 = fn(np.array([0.0]), p)[0]
    target = y0 / np.e

    def g(tt):
        return fn(np.array([tt]), p)[0] - target

    hi = float(t[-1])
    if g(hi) > 0:  # has not decayed that far inside the window
        return float("nan")
    return float(brentq(g, 0.0, hi, xtol=1e-12))


def spectrum_of_series(series: DecaySeries):
    """(frequency axis, magnitude spectrum, SNR) of a uniformly sampled series.

    SNR = peak magnitude over a robust noise floor, the floor being
    1.4826 * MAD of the off-peak bins (peak bin and 3 neighbors each side
    excluded).  An all-zero series reports SNR 0.
    """
    t, y = series.t, series.y
    if len(t) < 2:
        raise ValueError("series too short for a spectrum")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0.0):
        raise ValueError("spectrum requires a uniform time grid")
    mag = np.abs(np.fft.rfft(y))
    freq = np.fft.rfftfreq(len(y), d=float(dt[0]))
    i_peak = int(np.argmax(mag))
    keep = np.ones(len(mag), dtype=bool)
    keep[max(0, i_peak - 3): i_peak + 4] = False
    off = mag[keep]
    peak = float(mag[i_peak])
    if peak == 0.0:
        return freq, mag, 0.0
    floor = 1.4826 * float(np.median(np.abs(off - np.median(off)))) \
        if len(off) else 0.0
    snr = peak / floor if floor > 0 else float("inf")
    return freq, mag, snr


# ---------------------------------------------------------------------------
# stored artifacts

def write_window_log(path, records):
    """Binary record log: magic FCWR, u16 version, (u64, f64, f64) LE rows."""
    with open(path, "wb") as fh:
        fh.write(WINDOW_LOG_MAGIC)
        fh.write(struct.pack("<H", WINDOW_LOG_VERSION))
        for r in records:
            fh.write(_RECORD.pack(r.index, r.amplitude, r.phase))


def read_window_log(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WINDOW_LOG_MAGIC:
            raise ArtifactFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != WINDOW_LOG_VERSION:
            raise ArtifactFormatError(f"unsupported version {version}")
        out = []
        while True:
            blob = fh.read(_RECORD.size)
            if not blob:
                return out
            if len(blob) != _RECORD.size:
                raise ArtifactFormatError("truncated record")
            idx, amp, ph = _RECORD.unpack(blob)
            out.append(WindowRecord(index=idx, amplitude=amp, phase=ph))


def write_series_csv(path, series: DecaySeries):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_s,y\n")
        for tt, yy in zip(series.t, series.y):
            # repr of the plain float round-trips the exact double
            fh.write(f"{float(tt)!r},{float(yy)!r}\n")


def read_series_csv(path) -> DecaySeries:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "t_s,y":
            raise ArtifactFormatError(f"bad series header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return DecaySeries(t=data[:, 0], y=data[:, 1])
