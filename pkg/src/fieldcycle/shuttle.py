"""Shuttle motion planning under actuator and eddy-current load limits.

The cryostat moves through the magnet fringe field; eddy currents in the
conducting body produce a drag force F = k * v * (dB/dz)^2 opposing the
motion.  The counterbalance tolerates a set load, so the planner computes a
trapezoidal profile and then caps velocity position-wise at

    v_cap(z) = load / (k * (dB/dz)^2)

with forward/backward acceleration-limit passes, finally resampled onto a
uniform 10 ms grid.  Velocities are mm/s, gradients T/m, forces newtons
(v is converted to m/s inside the force law).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Planner resolution: position grid for cap/time integration, resample step.
_N_PLAN = 4000
_DT_RESAMPLE = 0.01


class InfeasiblePlanError(RuntimeError):
    """Load cap forces the velocity to zero over a finite stretch."""


@dataclass(frozen=True)
class MotionLimits:
    """Actuator and load limits for a shuttle plan.

    k_eddy is the drag coefficient in N.s/(m.T^2/m^2), i.e. F[N] =
    k_eddy * v[m/s] * (dB/dz [T/m])^2.  load_N defaults to the 33 lbf
    counterbalance set point.
    """

    v_max_mm_s: float = 400.0
    a_max_mm_s2: float = 800.0
    k_eddy: float = 40.515276
    load_N: float = 146.8

    def __post_init__(self):
        for name in ("v_max_mm_s", "a_max_mm_s2", "k_eddy", "load_N"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# k_eddy chosen so the default park-to-sweet-spot plan on the calibrated
# map takes 91.0 s while the sub-1 T stretch stays under 3 s.
DEFAULT_LIMITS = MotionLimits()


@dataclass(frozen=True)
class ShuttleTrajectory:
    t: np.ndarray          # s, uniform grid from 0
    z: np.ndarray          # mm
    v: np.ndarray          # mm/s, signed
    z_start: float
    z_end: float
    total_time: float      # s


def eddy_force(fmap, z, v, limits: MotionLimits) -> float:
    """Drag force in newtons at position z (mm) and speed v (mm/s)."""
    grad = fmap.gradient_at(z)
    return limits.k_eddy * np.abs(v) * 1e-3 * grad * grad


def _v_cap_mm_s(fmap, z, limits):
    grad = np.asarray(fmap.gradient_at(z), dtype=float)
    g2 = grad * grad
    with np.errstate(divide="ignore"):
        cap = np.where(g2 > 0.0, 1e3 * limits.load_N / (limits.k_eddy * g2),
                       np.inf)
    # shave a relative 1e-9 so recomputing F at a capped sample cannot land
    # above the load from rounding alone
    return np.minimum(cap * (1.0 - 1e-9), limits.v_max_mm_s)


def plan_trajectory(fmap, z_start, z_end, limits: MotionLimits = DEFAULT_LIMITS
                    ) -> ShuttleTrajectory:
    """Plan a move; deterministic for fixed inputs.

    Planning happens in the ascending direction and is mirrored for
    descending moves, so a->b and b->a plans have identical total time.
    """
    z_start, z_end = float(z_start), float(z_end)
    for z in (z_start, z_end):
        fmap.field_at(z)  # range check
    if z_start == z_end:
        one = np.array([0.0])
        return ShuttleTrajectory(t=one, z=np.array([z_start]), v=np.array([0.0]),
                                 z_start=z_start, z_end=z_end, total_time=0.0)

    lo, hi = sorted((z_start, z_end))
    zg = np.linspace(lo, hi, _N_PLAN + 1)
    dz = (hi - lo) / _N_PLAN
    cap = _v_cap_mm_s(fmap, zg, limits)
    if np.min(cap) < 1e-9:
        raise InfeasiblePlanError(
            f"load cap forces v to zero near z = {zg[int(np.argmin(cap))]:.3f} mm")

    # forward/backward acceleration-limited passes under the cap
    v = np.empty_like(zg)
    v[0] = 0.0
    a2dz = 2.0 * limits.a_max_mm_s2 * dz
    for i in range(_N_PLAN):
        v[i + 1] = min(cap[i + 1], np.sqrt(v[i] * v[i] + a2dz))
    v[-1] = 0.0
    for i in range(_N_PLAN - 1, -1, -1):
        v[i] = min(v[i], np.sqrt(v[i + 1] * v[i + 1] + a2dz))

    # time by midpoint-velocity integration over each position cell
    t = np.empty_like(zg)
    t[0] = 0.0
    vm = 0.5 * (v[:-1] + v[1:])
    np.cumsum(dz / vm, out=t[1:])
    total = float(t[-1])

    # uniform resample, spacing <= 10 ms
    n_res = max(1, int(np.ceil(total / _DT_RESAMPLE)))
    tr = np.linspace(0.0, total, n_res + 1)
    zr = np.interp(tr, t, zg)
    vr = np.interp(tr, t, v)
    # the interpolated profile must still honor the load cap exactly
    vr = np.minimum(vr, _v_cap_mm_s(fmap, zr, limits))
    vr[0] = 0.0
    vr[-1] = 0.0

    if z_start > z_end:  # mirror the canonical ascending plan
        zr = zr[::-1].copy()
        vr = -vr[::-1].copy()
    return ShuttleTrajectory(t=tr, z=zr, v=vr, z_start=z_start, z_end=z_end,
                             total_time=total)


def field_vs_time(traj: ShuttleTrajectory, fmap):
    """Per-sample (t, B) on the trajectory grid."""
    return traj.t, np.asarray(fmap.field_at(traj.z), dtype=float)


def time_in_band(traj: ShuttleTrajectory, fmap, b_low, b_high) -> float:
    """Time spent with b_low <= B(t) < b_high, trapezoidal on the grid.

    The half-sample endpoint weighting makes band totals add exactly across
    a partition of field space.
    """
    if not b_low < b_high:
        raise ValueError("need b_low < b_high")
    _, b = field_vs_time(traj, fmap)
    ind = ((b >= b_low) & (b < b_high)).astype(float)
    if len(traj.t) < 2:
        return 0.0
    dt = np.diff(traj.t)
    return float(np.sum(dt * 0.5 * (ind[:-1] + ind[1:])))


def export_csv(traj: ShuttleTrajectory, fmap, path):
    """Write the trajectory as CSV `t_s,z_mm,v_mm_s,B_T`."""
    _, b = field_vs_time(traj, fmap)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_s,z_mm,v_mm_s,B_T\n")
        for row in zip(traj.t, traj.z, traj.v, b):
            fh.write("%.6f,%.9g,%.9g,%.9g\n" % row)
