"""Command line front end: plan shuttles, run protocols, analyze artifacts.

Config files are flat ``key = value`` text.  Keys name protocol settings
directly (``protocol``, ``seed``, ``readout_duration_s``, ...); dotted
prefixes reach nested groups: ``acq.noise_sigma`` for acquisition,
``limits.v_max_mm_s`` for motion limits, ``relax.beta`` for relaxation,
``dnp.gamma0`` for pumping, ``plan.z_start_mm`` / ``plan.z_end_mm`` for the
plan subcommand.  ``#`` starts a comment, blank lines are skipped, later
assignments win.  Axis keys take comma separated numbers; optional keys
accept ``none``.  The same ``key=value`` strings can be passed with
``--set`` to override the file.

Subcommands:

  plan      calibrate the field map and plan the shuttle move only; prints
            the total time and the time spent below 1 T, both recomputed
            from the exported trajectory CSV so the printed summary always
            matches the artifact
  run       execute a protocol end to end; writes result.json, one CSV per
            recorded series, and manifest.json into the output directory
  analyze   fit, spectrum or smooth on stored artifacts; never re-simulates
  validate  sequencer check of a program file

Exit codes: 0 ok, 2 config error, 3 protocol or program error, 4 artifact
format error.  Diagnostics go to stderr as single-line key=value records.
The output directory defaults to $FIELDCYCLE_OUTDIR, then ./fieldcycle-out.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .acquisition import (AcqConfig, ArtifactFormatError, FitError,
                          boxcar_smooth, fit_decay, read_series_csv,
                          read_window_log, records_to_series,
                          spectrum_of_series, write_series_csv)
from .fieldmap import calibrate_default_map
from .protocols import (ProtocolConfig, RESULT_FORMAT, StageError,
                        run_protocol, write_result)
from .sequencer import (ParseError, compile_program, parse_program,
                        print_program)
from .sequencer import validate as validate_program
from .shuttle import MotionLimits, export_csv, plan_trajectory
from .spinmodel import (DEFAULT_DNP, DNPParams, RelaxationParams,
                        default_relaxation_params)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_ARTIFACT = 4

OUTDIR_ENV = "FIELDCYCLE_OUTDIR"


class ConfigError(ValueError):
    """Bad config file, override, or command usage; maps to exit 2."""


def _log(**kv):
    """One key=value record per line on stderr; values with spaces quoted."""
    parts = []
    for k, v in kv.items():
        s = repr(v) if isinstance(v, float) else str(v)
        if " " in s or "\t" in s:
            s = '"%s"' % s
        parts.append(f"{k}={s}")
    print(" ".join(parts), file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# config grammar

def _parse_float(text):
    v = float(text)
    if not np.isfinite(v):
        raise ValueError("must be finite")
    return v


def _parse_opt_float(text):
    if text.lower() in ("none", ""):
        return None
    return _parse_float(text)


def _parse_int(text):
    return int(text, 10)


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_str(text):
    return text


def _parse_floats(text):
    return tuple(_parse_float(p) for p in text.split(",") if p.strip())


def _parse_int_pair(text):
    vals = tuple(_parse_int(p) for p in text.split(",") if p.strip())
    if len(vals) != 2:
        raise ValueError("expected two integers")
    return vals


def _group_schema(cls, skip=()):
    # value parser per field, inferred from the default's type
    out = {}
    for f in cls.__dataclass_fields__.values():
        if f.name in skip:
            continue
        if isinstance(f.default, bool):
            out[f.name] = _parse_bool
        elif isinstance(f.default, int):
            out[f.name] = _parse_int
        else:
            out[f.name] = _parse_float
    return out


_TOP = {
    "protocol": _parse_str,
    "temperature_K": _parse_float,
    "pump_duration_s": _parse_opt_float,
    "readout_duration_s": _parse_float,
    "fid_duration_s": _parse_float,
    "seed": _parse_int,
    "thermal_reference": _parse_bool,
    "thermal_polarization": _parse_float,
    "pump_window_GHz": _parse_opt_float,
    "pump_bandwidth_GHz": _parse_float,
    "frequency_axis_GHz": _parse_floats,
    "b_int_axis_T": _parse_floats,
    "t_int_axis_s": _parse_floats,
    "theta_axis_rad": _parse_floats,
    "theta_rad": _parse_float,
    "t_p_ns": _parse_int,
    "period_ns": _parse_int,
    "acq_gate_ns": _parse_int_pair,
    "readout_stride": _parse_int,
    "n_scan_windows": _parse_int,
    "texture_readout_s": _parse_float,
}

# t2_prime_s is a table of (temperature, value) anchors, not a flat scalar
_GROUPS = {
    "acq": _group_schema(AcqConfig),
    "limits": _group_schema(MotionLimits),
    "relax": _group_schema(RelaxationParams, skip=("t2_prime_s",)),
    "dnp": _group_schema(DNPParams),
    "plan": {"z_start_mm": _parse_float, "z_end_mm": _parse_opt_float},
}


def parse_config(text, source="<config>"):
    """Flat key=value lines to a {key: raw string} dict, later keys win."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(
                f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        entries[key] = value.strip()
    return entries


def build_config(entries):
    """Typed ProtocolConfig plus plan options from raw string entries."""
    top = {}
    groups = {name: {} for name in _GROUPS}
    for key, text in entries.items():
        if "." in key:
            prefix, _, name = key.partition(".")
            schema = _GROUPS.get(prefix)
            if schema is None or name not in schema:
                raise ConfigError(f"unknown config key {key!r}")
            parse, dest = schema[name], groups[prefix]
        else:
            if key not in _TOP:
                raise ConfigError(f"unknown config key {key!r}")
            parse, dest, name = _TOP[key], top, key
        try:
            dest[name] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    plan_opts = {"z_start_mm": 0.0, "z_end_mm": None}
    plan_opts.update(groups.pop("plan"))
    try:
        cfg = ProtocolConfig(
            acq=AcqConfig(**groups["acq"]),
            limits=MotionLimits(**groups["limits"]),
            relax_params=replace(default_relaxation_params(),
                                 **groups["relax"]),
            dnp_params=replace(DEFAULT_DNP, **groups["dnp"]),
            **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, plan_opts


def load_config(path, overrides=()):
    """Parse a config file and apply key=value override strings on top."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        entries = parse_config(fh.read(), source=path)
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override must be key=value, got {item!r}")
        entries[key] = value.strip()
    return build_config(entries)


# ---------------------------------------------------------------------------
# run manifest

@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every run result.

    Pins everything needed to repeat the run: config path, overrides and
    seed.  rerun_from_manifest uses it to regenerate byte-identical
    result.json and series CSVs in a fresh directory.
    """

    config_path: str
    output_dir: str
    seed: int
    protocol: str
    timestamp: str
    overrides: tuple = ()
    config_hash: str = ""
    version: str = __version__


def write_manifest(manifest, outdir):
    doc = asdict(manifest)
    doc["overrides"] = list(manifest.overrides)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        kw = {f.name: doc[f.name] for f in fields(RunManifest)}
    except KeyError as exc:
        raise ConfigError(f"manifest missing field {exc.args[0]!r}") from None
    kw["overrides"] = tuple(kw["overrides"])
    return RunManifest(**kw)


def rerun_from_manifest(manifest_path, outdir):
    """Repeat a recorded run into ``outdir``; returns the result.json path.

    The regenerated result.json and CSVs are byte-identical to the
    originals because the manifest pins config, overrides and seed.
    """
    m = read_manifest(manifest_path)
    cfg, _ = load_config(m.config_path, m.overrides)
    if cfg.seed != m.seed:
        raise ConfigError(
            f"manifest seed {m.seed} disagrees with config seed {cfg.seed}")
    return _execute_run(cfg, m.config_path, m.overrides, outdir)


# ---------------------------------------------------------------------------
# subcommands

def _utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_outdir(arg):
    outdir = arg or os.environ.get(OUTDIR_ENV) or "fieldcycle-out"
    try:
        os.makedirs(outdir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {outdir}: {exc}")
    if not os.access(outdir, os.W_OK):
        raise ConfigError(f"output dir not writable: {outdir}")
    return outdir


def _execute_run(cfg, config_path, overrides, outdir):
    _log(event="run_start", protocol=cfg.protocol, seed=cfg.seed,
         outdir=outdir)
    t0 = time.perf_counter()
    result = run_protocol(cfg)
    path = write_result(result, outdir, cfg)
    manifest = RunManifest(
        config_path=os.path.abspath(config_path),
        output_dir=os.path.abspath(outdir),
        seed=cfg.seed,
        protocol=cfg.protocol,
        timestamp=_utc_now(),
        overrides=tuple(overrides),
        config_hash=result.config_hash)
    write_manifest(manifest, outdir)
    _log(event="run_done", protocol=cfg.protocol, seed=cfg.seed,
         seconds=round(time.perf_counter() - t0, 3), result=path)
    return path


def cmd_run(args):
    if args.from_manifest:
        path = rerun_from_manifest(args.from_manifest,
                                   _resolve_outdir(args.outdir))
    else:
        if not args.config:
            raise ConfigError("need a config file or --from-manifest")
        cfg, _ = load_config(args.config, args.set)
        path = _execute_run(cfg, args.config, args.set,
                            _resolve_outdir(args.outdir))
    print(path)
    return EXIT_OK


def _band_time(t, b, b_high):
    # same half-sample trapezoid of the indicator as the planner uses
    if len(t) < 2:
        return 0.0
    ind = (np.asarray(b) < b_high).astype(float)
    dt = np.diff(np.asarray(t))
    return float(np.sum(dt * 0.5 * (ind[:-1] + ind[1:])))


def cmd_plan(args):
    """Field map calibration and shuttle planning only, no spin physics.

    The printed numbers are computed from the exported CSV after writing
    it, so an independent recomputation from the artifact agrees exactly.
    """
    cfg, plan_opts = load_config(args.config, args.set)
    outdir = _resolve_outdir(args.outdir)
    fmap = calibrate_default_map()
    z0 = plan_opts["z_start_mm"]
    z1 = plan_opts["z_end_mm"]
    if z1 is None:
        z1 = fmap.sweet_spot_position
    try:
        traj = plan_trajectory(fmap, z0, z1, cfg.limits)
    except ValueError as exc:
        _log(event="error", kind="plan", detail=str(exc))
        return EXIT_PROTOCOL
    csv_path = os.path.join(outdir, "trajectory.csv")
    export_csv(traj, fmap, csv_path)
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    total = float(data[-1, 0]) if data.size else 0.0
    below = _band_time(data[:, 0], data[:, 3], 1.0)
    _log(event="plan_done", z_start_mm=z0, z_end_mm=float(z1),
         samples=data.shape[0])
    print(f"total_time_s={total!r}")
    print(f"time_below_1T_s={below!r}")
    print(f"csv={csv_path}")
    return EXIT_OK


def _load_series(target, series_name, dt_s):
    """Series from a result dir/JSON, a series CSV, or a binary window log.

    Returns (series, base dir, series name, result doc or None).
    """
    if os.path.isdir(target):
        target = os.path.join(target, "result.json")
    if not os.path.exists(target):
        raise ConfigError(f"no such artifact: {target}")
    base = os.path.dirname(os.path.abspath(target))
    ext = os.path.splitext(target)[1].lower()
    if ext == ".json":
        with open(target, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArtifactFormatError(f"not a result artifact: {exc}")
        fmt = doc.get("format")
        if fmt != RESULT_FORMAT:
            raise ArtifactFormatError(
                f"result format {fmt!r}, this tool reads {RESULT_FORMAT!r}")
        files = doc.get("series_files", {})
        if not files:
            raise ConfigError("result records no series")
        if series_name is None:
            if len(files) > 1:
                raise ConfigError("result has several series, pick one with "
                                  f"--series: {sorted(files)}")
            series_name = next(iter(files))
        if series_name not in files:
            raise ConfigError(
                f"no series {series_name!r}, have {sorted(files)}")
        try:
            series = read_series_csv(os.path.join(base, files[series_name]))
        except OSError as exc:
            raise ConfigError(f"series file missing: {exc}") from None
        return series, base, series_name, doc
    if ext == ".csv":
        name = os.path.splitext(os.path.basename(target))[0]
        return read_series_csv(target), base, name, None
    # anything else is treated as a binary window log
    records = read_window_log(target)
    name = os.path.splitext(os.path.basename(target))[0]
    return records_to_series(records, dt_s), base, name, None


def cmd_analyze(args):
    """Post-hoc analysis of stored artifacts; never re-simulates."""
    series, base, name, _doc = _load_series(args.target, args.series,
                                            args.dt)
    if args.kind == "fit":
        fit = fit_decay(series, model=args.model)
        _log(event="analyze_done", kind="fit", series=name,
             n_evaluations=fit.n_evaluations)
        for key, value in fit.params.items():
            print(f"{key}={value!r}")
        print(f"one_over_e_time_s={fit.one_over_e_time!r}")
        print(f"residual={fit.residual!r}")
        return EXIT_OK
    if args.kind == "spectrum":
        freqs, mag, snr = spectrum_of_series(series)
        out = args.output
        if out:
            with open(out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("f_hz,magnitude\n")
                for fv, mv in zip(freqs, mag):
                    fh.write(f"{float(fv)!r},{float(mv)!r}\n")
        _log(event="analyze_done", kind="spectrum", series=name, snr=snr)
        print(f"snr={snr!r}")
        print(f"peak_hz={float(freqs[int(np.argmax(mag))])!r}")
        if out:
            print(f"csv={out}")
        return EXIT_OK
    # smooth
    smoothed = boxcar_smooth(series, args.width)
    out = args.output or os.path.join(base,
                                      f"{name}_smooth{args.width}.csv")
    write_series_csv(out, smoothed)
    _log(event="analyze_done", kind="smooth", series=name, width=args.width)
    print(f"csv={out}")
    return EXIT_OK


def cmd_validate(args):
    """Sequencer check of a program file."""
    try:
        with open(args.program, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read program: {exc}")
    try:
        program = parse_program(text)
    except ParseError as exc:
        _log(event="error", kind="parse", detail=str(exc))
        return EXIT_CONFIG
    if args.canonical:
        sys.stdout.write(print_program(program))
    violations = validate_program(program)
    if violations:
        for v in violations:
            print(f"violation kind={v.kind} channel={v.channel} "
                  f"t_start={v.t_start} t_end={v.t_end} "
                  f"message={v.message!r}")
        _log(event="validate_done", violations=len(violations))
        return EXIT_PROTOCOL
    stream = compile_program(program)
    print(f"ok events={stream.n_events} duration_ns={stream.duration}")
    _log(event="validate_done", violations=0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring

def build_parser():
    p = argparse.ArgumentParser(
        prog="fieldcycle",
        description="Field-cycling DNP-NMR experiment engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a protocol end to end")
    run.add_argument("config", nargs="?", help="key=value config file")
    run.add_argument("-s", "--set", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config entry")
    run.add_argument("-o", "--outdir", help="output directory")
    run.add_argument("--from-manifest", metavar="PATH",
                     help="repeat the run recorded in a manifest.json")
    run.set_defaults(func=cmd_run)

    plan = sub.add_parser("plan", help="shuttle plan only, no spin physics")
    plan.add_argument("config", help="key=value config file")
    plan.add_argument("-s", "--set", action="append", default=[],
                      metavar="KEY=VALUE", help="override a config entry")
    plan.add_argument("-o", "--outdir", help="output directory")
    plan.set_defaults(func=cmd_plan)

    an = sub.add_parser("analyze", help="analyze stored run artifacts")
    an.add_argument("target",
                    help="result dir, result.json, series CSV or window log")
    an.add_argument("kind", choices=("fit", "spectrum", "smooth"))
    an.add_argument("--series", help="series name inside a result")
    an.add_argument("--model", default="exponential",
                    help="decay model for fit")
    an.add_argument("--width", type=int, default=101,
                    help="boxcar width for smooth")
    an.add_argument("--dt", type=float, default=5e-6,
                    help="window spacing in s when reading a binary log")
    an.add_argument("-o", "--output", help="output CSV path")
    an.set_defaults(func=cmd_analyze)

    val = sub.add_parser("validate", help="sequencer check of a program file")
    val.add_argument("program", help="pulse program text file")
    val.add_argument("--canonical", action="store_true",
                     help="also print the canonical program text")
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(event="error", kind="config", detail=str(exc))
        return EXIT_CONFIG
    except ArtifactFormatError as exc:
        _log(event="error", kind="artifact", detail=str(exc))
        return EXIT_ARTIFACT
    except FitError as exc:
        _log(event="error", kind="fit", detail=str(exc))
        return EXIT_PROTOCOL
    except StageError as exc:
        _log(event="error", kind="protocol", stage=exc.stage,
             detail=str(exc))
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
