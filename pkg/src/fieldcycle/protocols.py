"""End-to-end experiment protocols.

Each protocol composes the same stages: optical pumping at the parking
field, fringe-field shuttling with relaxation along B(t), a pulse program
on the ns grid, per-window signal synthesis + tone extraction, and decay
fitting.  Five protocols are provided:

    SPINLOCK      pump, shuttle up, pulsed spin-lock readout, T2' fit
    FID           pump, shuttle up, segmented FID readout, T2* fit
    DNP_EPR_SCAN  pump-frequency sweep, integrated readout per point
    RELAXOMETRY   relax at B_int for t_int, readout, T1(B_int) fits
    TEXTURE_SCAN  pulse-angle sweep of the signed two-shell readout

Measured series are phase-referenced: each window contributes its in-phase
component amp*cos(phase) relative to the programmed tone, so windows with
no signal average to zero instead of a rectified noise pedestal.

Determinism: a run is a pure function of (config, seed).  Scan points use
derived seeds (seed XOR point index) and absolute window indices, so
results do not depend on execution order or worker count.  Simulated time
is accounted in integer ns per stage; the per-point total is exactly the
sum of its stages.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .acquisition import (AcqConfig, DecaySeries, FitError, fit_decay,
                          spectrum_of_series, write_series_csv)
from .fieldmap import calibrate_default_map
from .sequencer import build_spinlock_program, compile_program
from .shuttle import DEFAULT_LIMITS, MotionLimits, field_vs_time, \
    plan_trajectory
from .spinmodel import (DEFAULT_DNP, DNPParams, RelaxationParams,
                        SpinEnsembleState, default_relaxation_params,
                        dnp_pump, epr_spectrum, fid_series, relax,
                        spinlock_series, t1_of, zero_crossing_time)

PROTOCOLS = ("SPINLOCK", "FID", "DNP_EPR_SCAN", "RELAXOMETRY",
             "TEXTURE_SCAN")

_NS = 1_000_000_000


class StageError(RuntimeError):
    """A protocol stage failed; carries the stage tag."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


@contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _default_t_int_axis():
    return tuple(float(v) for v in np.geomspace(30.0, 12000.0, 8))


def _default_frequency_axis():
    return tuple(round(f, 5) for f in np.arange(2.60, 3.0501, 0.00625))


def _default_theta_axis():
    return (0.5 * math.pi, math.pi, 1.03 * math.pi, 1.06 * math.pi,
            1.09 * math.pi, 1.12 * math.pi)


@dataclass(frozen=True)
class ProtocolConfig:
    """Full description of one run; hashable to a stable provenance id."""

    protocol: str = "SPINLOCK"
    temperature_K: float = 100.0
    pump_duration_s: float = None       # None: 90 s for the EPR scan, 60 s else
    readout_duration_s: float = 60.0
    fid_duration_s: float = 5.5e-3
    seed: int = 0
    thermal_reference: bool = False
    thermal_polarization: float = 2.4e-5
    pump_window_GHz: float = None       # None: track the main peak center
    pump_bandwidth_GHz: float = 0.025
    frequency_axis_GHz: tuple = ()
    b_int_axis_T: tuple = ()
    t_int_axis_s: tuple = ()
    theta_axis_rad: tuple = ()
    theta_rad: float = 0.5 * math.pi
    t_p_ns: int = 68_000
    period_ns: int = 75_000
    acq_gate_ns: tuple = (69_000, 74_000)
    readout_stride: int = 4             # SPINLOCK fit decimation
    n_scan_windows: int = 500           # readout samples per scan point
    texture_readout_s: float = 150.0
    acq: AcqConfig = field(default_factory=AcqConfig)
    limits: MotionLimits = field(default_factory=lambda: DEFAULT_LIMITS)
    relax_params: RelaxationParams = \
        field(default_factory=default_relaxation_params)
    dnp_params: DNPParams = field(default_factory=lambda: DEFAULT_DNP)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; "
                             f"have {PROTOCOLS}")
        if self.pump_duration_s is None:
            object.__setattr__(self, "pump_duration_s",
                               90.0 if self.protocol == "DNP_EPR_SCAN"
                               else 60.0)
        if min(self.pump_duration_s, self.readout_duration_s,
               self.fid_duration_s, self.texture_readout_s) < 0:
            raise ValueError("durations must be >= 0")
        if self.protocol == "DNP_EPR_SCAN" and not self.frequency_axis_GHz:
            object.__setattr__(self, "frequency_axis_GHz",
                               _default_frequency_axis())
        if self.protocol == "RELAXOMETRY":
            if not self.b_int_axis_T:
                object.__setattr__(self, "b_int_axis_T", (0.027, 9.4))
            if not self.t_int_axis_s:
                object.__setattr__(self, "t_int_axis_s",
                                   _default_t_int_axis())
        if self.protocol == "TEXTURE_SCAN" and not self.theta_axis_rad:
            object.__setattr__(self, "theta_axis_rad", _default_theta_axis())
        if self.readout_stride < 1 or self.n_scan_windows < 1:
            raise ValueError("stride and window counts must be >= 1")


def _canonical_items(obj, prefix=""):
    if is_dataclass(obj) and not isinstance(obj, type):
        for f in sorted(fields(obj), key=lambda f: f.name):
            yield from _canonical_items(getattr(obj, f.name),
                                        f"{prefix}{f.name}.")
    elif isinstance(obj, (tuple, list)):
        vals = ",".join(_scalar_repr(v) for v in obj)
        yield f"{prefix[:-1]}=[{vals}]"
    else:
        yield f"{prefix[:-1]}={_scalar_repr(obj)}"


def _scalar_repr(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ",".join(_scalar_repr(x) for x in v) + "]"
    return repr(v)


def config_hash(cfg: ProtocolConfig) -> str:
    """sha256 of the canonical sorted key=value form; field order free."""
    text = "\n".join(sorted(_canonical_items(cfg)))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class PointRecord:
    axis: dict
    observables: dict
    fit: dict = None
    stages_ns: dict = None

    @property
    def total_ns(self):
        return sum(self.stages_ns.values()) if self.stages_ns else 0


@dataclass
class ProtocolResult:
    protocol: str
    records: list
    series: dict
    seed: int
    config_hash: str
    meta: dict


# ---------------------------------------------------------------------------
# shared stage helpers

def _ns(seconds) -> int:
    return int(round(seconds * _NS))


class _Run:
    """Per-run context: calibrated map and a trajectory cache."""

    def __init__(self, cfg):
        self.cfg = cfg
        with _stage("fieldmap"):
            self.fmap = calibrate_default_map()
        self._plans = {}

    def plan(self, z_from, z_to):
        key = (round(z_from, 9), round(z_to, 9))
        if key not in self._plans:
            with _stage("shuttle"):
                self._plans[key] = plan_trajectory(self.fmap, z_from, z_to,
                                                   self.cfg.limits)
        return self._plans[key]

    def shuttle(self, state, z_from, z_to):
        """Move the sample, relaxing along B(t); returns (state, ns)."""
        traj = self.plan(z_from, z_to)
        with _stage("shuttle"):
            trace = field_vs_time(traj, self.fmap)
            state = relax(state, trace, self.cfg.relax_params)
        return state, _ns(traj.total_time)

    def pumped_state(self):
        """Polarization after the pump stage, still at the parking field."""
        cfg = self.cfg
        b_park = self.fmap.field_at(0.0)
        if cfg.thermal_reference:
            # thermally equilibrated in the magnet; no pump, no shuttle
            state = SpinEnsembleState(
                polarization=cfg.thermal_polarization,
                temperature=cfg.temperature_K,
                current_field=self.fmap.field_at(
                    self.fmap.sweet_spot_position))
            return state, 0
        with _stage("pump"):
            spectrum = epr_spectrum(cfg.temperature_K, cfg.dnp_params)
            f_c = cfg.pump_window_GHz
            if f_c is None:
                f_c = cfg.dnp_params.zfs_center(cfg.temperature_K)
            state = SpinEnsembleState(polarization=0.0,
                                      temperature=cfg.temperature_K,
                                      current_field=b_park)
            state = dnp_pump(state, (f_c, cfg.pump_bandwidth_GHz),
                             cfg.pump_duration_s, spectrum, cfg.dnp_params,
                             b_park, cfg.relax_params)
        return state, _ns(cfg.pump_duration_s)


def _extract_windows(acq: AcqConfig, point_seed, indices, amps, phases=None):
    """Batch synthesize + extract at explicit absolute window indices."""
    indices = np.asarray(indices, dtype=np.uint64)
    amps = np.ascontiguousarray(amps, dtype=np.float64)
    if phases is None:
        phases = np.zeros(len(amps))
    n = acq.n_samples
    m = acq.bin_index
    ct, st = kernels.tone_tables(m, n)
    out_amp = np.empty(len(amps))
    out_phase = np.empty(len(amps))
    backend = kernels.active_backend()
    chunk = 65536
    for i0 in range(0, len(amps), chunk):
        sl = slice(i0, min(i0 + chunk, len(amps)))
        keys = kernels.window_keys(point_seed, indices[sl])
        kernels.run_pipeline(keys, amps[sl], phases[sl], n,
                             acq.noise_sigma, ct, st, m,
                             out_amp[sl], out_phase[sl], backend=backend)
    return out_amp, out_phase


def _spinlock_readout(run, state, point_seed, duration_s, stride,
                      theta=None):
    """Pulsed SL readout: program, model amplitudes, measured series.

    Returns (measured series, model series, n_pulses, readout ns).
    """
    cfg = run.cfg
    period_s = cfg.period_ns / _NS
    n_pulses = int(round(duration_s / period_s))
    if n_pulses < 1:
        raise ValueError("readout shorter than one pulse period")
    with _stage("sequence"):
        program = build_spinlock_program(n_pulses, cfg.t_p_ns,
                                         cfg.period_ns, cfg.acq_gate_ns)
        stream = compile_program(program)  # validates; not consumed here
    with _stage("model"):
        model = spinlock_series(state, cfg.theta_rad if theta is None
                                else theta, cfg.t_p_ns / _NS, period_s,
                                n_pulses, cfg.relax_params)
    with _stage("acquire"):
        idx = np.arange(0, n_pulses, stride, dtype=np.uint64)
        amps, phs = _extract_windows(cfg.acq, point_seed, idx,
                                     model.y[::stride])
        # phase-referenced (lock-in) component: magnitudes would rectify
        # empty windows to a sigma-dependent pedestal
        measured = DecaySeries(t=model.t[::stride], y=amps * np.cos(phs),
                               metadata={"kind": "spinlock_measured",
                                         "stride": stride})
    return measured, model, n_pulses, stream.duration


def _integrated_signal(measured: DecaySeries, stride, t_max_s):
    """Single-shot metric: stride-weighted sum of window amplitudes
    within the first t_max_s seconds."""
    mask = measured.t <= t_max_s
    return float(stride * np.sum(measured.y[mask]))


def _try_fit(series, model):
    """Fit noisy data; failures are recorded, not raised.

    Operational stages fail hard, but a decay fit on measured data can
    legitimately fail (buried signal, all-zero series); the protocol still
    returns the series and spectrum in that case.
    """
    try:
        fit = fit_decay(series, model=model)
    except (ValueError, FitError) as exc:
        return None, str(exc)
    return {"model": fit.model, **fit.params,
            "one_over_e_time_s": fit.one_over_e_time,
            "residual": fit.residual}, None


def _point_seed(seed, index):
    return (int(seed) ^ int(index)) & (2 ** 64 - 1)


# ---------------------------------------------------------------------------
# protocols

def run_spinlock_protocol(cfg: ProtocolConfig) -> ProtocolResult:
    """Pump, shuttle to the sweet spot, pulsed spin-lock readout, T2' fit."""
    run = _Run(cfg)
    stages = {}
    state, stages["pump"] = run.pumped_state()
    if not cfg.thermal_reference:
        state, stages["shuttle"] = run.shuttle(
            state, 0.0, run.fmap.sweet_spot_position)
    else:
        stages["shuttle"] = 0
    measured, model, n_pulses, readout_ns = _spinlock_readout(
        run, state, cfg.seed, cfg.readout_duration_s, cfg.readout_stride)
    stages["readout"] = readout_ns
    fit, fit_err = _try_fit(measured, "exponential")
    with _stage("spectrum"):
        _, _, snr = spectrum_of_series(measured)
    integrated = _integrated_signal(measured, cfg.readout_stride, 60.0)
    obs = {
        "initial_polarization": state.polarization,
        "integrated_signal": integrated,
        "spectrum_snr": snr,
        "n_pulses": n_pulses,
    }
    if fit_err is not None:
        obs["fit_error"] = fit_err
    rec = PointRecord(axis={}, observables=obs, fit=fit, stages_ns=stages)
    return ProtocolResult(
        protocol="SPINLOCK", records=[rec],
        series={"spinlock": measured},
        seed=cfg.seed, config_hash=config_hash(cfg),
        meta={"temperature_K": cfg.temperature_K,
              "t2_prime_fit_s": None if fit is None
              else fit["one_over_e_time_s"]})


def run_fid_protocol(cfg: ProtocolConfig) -> ProtocolResult:
    """Pump, shuttle, segmented FID readout, Gaussian 1/e fit."""
    run = _Run(cfg)
    stages = {}
    state, stages["pump"] = run.pumped_state()
    if not cfg.thermal_reference:
        state, stages["shuttle"] = run.shuttle(
            state, 0.0, run.fmap.sweet_spot_position)
    else:
        stages["shuttle"] = 0
    acq = cfg.acq
    window_dt = acq.n_samples / acq.fs_hz
    n_windows = int(round(cfg.fid_duration_s / window_dt))
    if n_windows < 8:
        raise StageError("model", ValueError(
            "FID duration shorter than 8 acquisition windows"))
    with _stage("model"):
        model = fid_series(state, cfg.relax_params, window_dt, n_windows + 1)
        true_amps = model.y[1:]          # window w reports the envelope at
        t_axis = model.t[1:]             # its end, t = (w+1) * dt
    with _stage("acquire"):
        idx = np.arange(n_windows, dtype=np.uint64)
        amps, phs = _extract_windows(acq, cfg.seed, idx, true_amps)
        measured = DecaySeries(t=t_axis, y=amps * np.cos(phs),
                               metadata={"kind": "fid_measured"})
    stages["readout"] = _ns(n_windows * window_dt)
    fit, fit_err = _try_fit(measured, "gaussian")
    with _stage("spectrum"):
        _, _, snr = spectrum_of_series(measured)
    obs = {"initial_polarization": state.polarization,
           "spectrum_snr": snr, "n_windows": n_windows}
    if fit_err is not None:
        obs["fit_error"] = fit_err
    rec = PointRecord(axis={}, observables=obs, fit=fit, stages_ns=stages)
    return ProtocolResult(
        protocol="FID", records=[rec], series={"fid": measured},
        seed=cfg.seed, config_hash=config_hash(cfg),
        meta={"temperature_K": cfg.temperature_K,
              "t2_star_fit_s": None if fit is None
              else fit["one_over_e_time_s"]})


def _fit_scan_gaussians(freqs, values):
    """Two-Gaussian fit of an enhancement scan; returns peak dicts."""
    freqs = np.asarray(freqs)
    values = np.asarray(values)
    i_max = int(np.argmax(values))
    p0 = np.array([values[i_max], freqs[i_max], 0.04,
                   0.4 * values[i_max], 2.72, 0.025])

    def resid(p):
        a1, c1, s1, a2, c2, s2 = p
        return (a1 * np.exp(-((freqs - c1) ** 2) / (2 * s1 * s1))
                + a2 * np.exp(-((freqs - c2) ** 2) / (2 * s2 * s2))) - values

    res = least_squares(resid, p0, method="lm", xtol=1e-12, ftol=1e-12,
                        max_nfev=5000)
    a1, c1, s1, a2, c2, s2 = res.x
    main, second = ((a1, c1, s1), (a2, c2, s2))
    if abs(main[0]) < abs(second[0]):
        main, second = second, main
    return {
        "main_amp": float(main[0]), "main_center_GHz": float(main[1]),
        "main_sigma_GHz": float(abs(main[2])),
        "second_amp": float(second[0]),
        "second_center_GHz": float(second[1]),
        "second_sigma_GHz": float(abs(second[2])),
        "residual": float(np.linalg.norm(res.fun)),
    }


def run_dnp_epr_scan(cfg: ProtocolConfig) -> ProtocolResult:
    """Sweep the pump window center; integrated SL signal per point."""
    run = _Run(cfg)
    if not cfg.frequency_axis_GHz:
        raise ValueError("frequency axis must be non-empty")
    spectrum = epr_spectrum(cfg.temperature_K, cfg.dnp_params)
    b_park = run.fmap.field_at(0.0)
    period_s = cfg.period_ns / _NS
    n_pulses = int(round(cfg.readout_duration_s / period_s))
    stride = max(1, n_pulses // cfg.n_scan_windows)
    records = []
    curve = []
    for i, f_c in enumerate(cfg.frequency_axis_GHz):
        seed_i = _point_seed(cfg.seed, i)
        stages = {}
        with _stage("pump"):
            state = SpinEnsembleState(polarization=0.0,
                                      temperature=cfg.temperature_K,
                                      current_field=b_park)
            state = dnp_pump(state, (f_c, cfg.pump_bandwidth_GHz),
                             cfg.pump_duration_s, spectrum, cfg.dnp_params,
                             b_park, cfg.relax_params)
        stages["pump"] = _ns(cfg.pump_duration_s)
        state, stages["shuttle"] = run.shuttle(
            state, 0.0, run.fmap.sweet_spot_position)
        measured, _, _, readout_ns = _spinlock_readout(
            run, state, seed_i, cfg.readout_duration_s, stride)
        stages["readout"] = readout_ns
        integrated = _integrated_signal(measured, stride, 60.0)
        curve.append(integrated)
        records.append(PointRecord(
            axis={"f_center_GHz": float(f_c)},
            observables={"integrated_signal": integrated,
                         "pumped_polarization": state.polarization},
            stages_ns=stages))
    if len(cfg.frequency_axis_GHz) >= 6:
        try:
            peaks = _fit_scan_gaussians(cfg.frequency_axis_GHz, curve)
        except ValueError as exc:
            peaks = {"fit_error": str(exc)}
    else:
        # fewer points than Gaussian parameters; curve still recorded
        peaks = {}
    scan = DecaySeries(t=np.asarray(cfg.frequency_axis_GHz),
                       y=np.asarray(curve),
                       metadata={"kind": "epr_scan",
                                 "x_axis": "f_center_GHz"})
    return ProtocolResult(
        protocol="DNP_EPR_SCAN", records=records,
        series={"scan": scan},
        seed=cfg.seed, config_hash=config_hash(cfg),
        meta={"temperature_K": cfg.temperature_K, **peaks})


def run_relaxometry(cfg: ProtocolConfig) -> ProtocolResult:
    """T1 dispersion: relax at B_int for t_int, then high-field readout."""
    run = _Run(cfg)
    period_s = cfg.period_ns / _NS
    n_pulses = int(round(cfg.readout_duration_s / period_s))
    stride = max(1, n_pulses // cfg.n_scan_windows)
    z_sweet = run.fmap.sweet_spot_position
    records = []
    fits = {}
    for i_b, b_int in enumerate(cfg.b_int_axis_T):
        with _stage("fieldmap"):
            z_int = run.fmap.position_of_field(b_int)
        signals = []
        survivals = []
        for i_t, t_int in enumerate(cfg.t_int_axis_s):
            index = i_b * len(cfg.t_int_axis_s) + i_t
            seed_i = _point_seed(cfg.seed, index)
            stages = {}
            state, stages["pump"] = run.pumped_state()
            p0 = state.polarization
            state, leg1 = run.shuttle(state, 0.0, z_int)
            with _stage("wait"):
                b_here = run.fmap.field_at(z_int)
                t_trace = np.array([0.0, float(t_int)])
                b_trace = np.array([b_here, b_here])
                if t_int > 0:
                    state = relax(state, (t_trace, b_trace),
                                  cfg.relax_params)
            stages["wait"] = _ns(t_int)
            state, leg2 = run.shuttle(state, z_int, z_sweet)
            stages["shuttle"] = leg1 + leg2
            measured, _, _, readout_ns = _spinlock_readout(
                run, state, seed_i, cfg.readout_duration_s, stride)
            stages["readout"] = readout_ns
            integrated = _integrated_signal(measured, stride, 60.0)
            # shuttle survival excluding the intentional wait at B_int
            wait_decay = math.exp(-float(t_int) / _t1_at(cfg, b_here))
            survival = state.polarization / (p0 * wait_decay) \
                if p0 * wait_decay else 0.0
            signals.append(integrated)
            survivals.append(survival)
            records.append(PointRecord(
                axis={"b_int_T": float(b_int), "t_int_s": float(t_int)},
                observables={"integrated_signal": integrated,
                             "final_polarization": state.polarization},
                stages_ns=stages))
        if len(cfg.t_int_axis_s) >= 8:
            t_axis = np.asarray(cfg.t_int_axis_s, dtype=float)
            y_raw = np.asarray(signals)
            raw, err_raw = _try_fit(DecaySeries(t=t_axis, y=y_raw),
                                    "exponential")
            y_corr = y_raw / np.asarray(survivals)
            corrected, err_corr = _try_fit(DecaySeries(t=t_axis, y=y_corr),
                                           "exponential")
            if raw is None or corrected is None:
                fits[float(b_int)] = {"fit_error": err_raw or err_corr}
            else:
                fits[float(b_int)] = {
                    "t1_raw_s": raw["tau"],
                    "t1_corrected_s": corrected["tau"],
                    "amplitude_raw": raw["a"],
                    "amplitude_corrected": corrected["a"],
                }
        else:
            # too few delays for the exponential fit; points still recorded
            fits[float(b_int)] = None
    series = {}
    for b_int in cfg.b_int_axis_T:
        pts = [r for r in records if r.axis["b_int_T"] == float(b_int)]
        series[f"b_{b_int:g}T"] = DecaySeries(
            t=np.array([r.axis["t_int_s"] for r in pts]),
            y=np.array([r.observables["integrated_signal"] for r in pts]),
            metadata={"kind": "relaxometry", "b_int_T": float(b_int)})
    return ProtocolResult(
        protocol="RELAXOMETRY", records=records, series=series,
        seed=cfg.seed, config_hash=config_hash(cfg),
        meta={"temperature_K": cfg.temperature_K,
              "t1_fits": fits})


def _t1_at(cfg, b):
    return t1_of(b, cfg.temperature_K, cfg.relax_params)


def run_texture_scan(cfg: ProtocolConfig) -> ProtocolResult:
    """Pulse-angle sweep; zero-crossing time of the signed SL readout."""
    run = _Run(cfg)
    records = []
    series = {}
    state0, pump_ns = run.pumped_state()
    if not cfg.thermal_reference:
        state0, shuttle_ns = run.shuttle(state0, 0.0,
                                         run.fmap.sweet_spot_position)
    else:
        shuttle_ns = 0
    period_s = cfg.period_ns / _NS
    n_pulses = int(round(cfg.texture_readout_s / period_s))
    for i, theta in enumerate(cfg.theta_axis_rad):
        with _stage("model"):
            model = spinlock_series(state0, float(theta), cfg.t_p_ns / _NS,
                                    period_s, n_pulses, cfg.relax_params)
            crossing = zero_crossing_time(model)
        stages = {"pump": pump_ns, "shuttle": shuttle_ns,
                  "readout": n_pulses * cfg.period_ns}
        records.append(PointRecord(
            axis={"theta_rad": float(theta)},
            observables={"zero_crossing_s":
                         float("nan") if crossing is None else crossing,
                         "has_crossing": crossing is not None},
            stages_ns=stages))
        series[f"theta_{theta / math.pi:.4g}pi"] = DecaySeries(
            t=model.t[::64], y=model.y[::64],
            metadata={"kind": "texture", "theta_rad": float(theta)})
    return ProtocolResult(
        protocol="TEXTURE_SCAN", records=records, series=series,
        seed=cfg.seed, config_hash=config_hash(cfg),
        meta={"temperature_K": cfg.temperature_K})


_RUNNERS = {
    "SPINLOCK": run_spinlock_protocol,
    "FID": run_fid_protocol,
    "DNP_EPR_SCAN": run_dnp_epr_scan,
    "RELAXOMETRY": run_relaxometry,
    "TEXTURE_SCAN": run_texture_scan,
}


def run_protocol(cfg: ProtocolConfig) -> ProtocolResult:
    return _RUNNERS[cfg.protocol](cfg)


# ---------------------------------------------------------------------------
# export

# bump when the result.json layout changes; readers refuse other versions
RESULT_FORMAT = "fieldcycle-result/1"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def result_to_json(result: ProtocolResult, cfg: ProtocolConfig = None):
    doc = {
        "format": RESULT_FORMAT,
        "protocol": result.protocol,
        "seed": result.seed,
        "config_hash": result.config_hash,
        "meta": {k: _jsonable(v) for k, v in result.meta.items()},
        "records": [
            {
                "axis": {k: _jsonable(v) for k, v in r.axis.items()},
                "observables": {k: _jsonable(v)
                                for k, v in r.observables.items()},
                "fit": None if r.fit is None
                else {k: _jsonable(v) for k, v in r.fit.items()},
                "stages_ns": r.stages_ns,
                "total_ns": r.total_ns,
            }
            for r in result.records
        ],
        "series_files": {name: f"{name}.csv" for name in result.series},
    }
    if cfg is not None:
        doc["config"] = dict(item.split("=", 1)
                             for item in sorted(_canonical_items(cfg)))
    return doc


def write_result(result: ProtocolResult, outdir,
                 cfg: ProtocolConfig = None):
    """result.json plus one CSV per series; returns the JSON path."""
    os.makedirs(outdir, exist_ok=True)
    for name, series in result.series.items():
        write_series_csv(os.path.join(outdir, f"{name}.csv"), series)
    path = os.path.join(outdir, "result.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result_to_json(result, cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
