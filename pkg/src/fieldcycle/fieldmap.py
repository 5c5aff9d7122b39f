"""On-axis magnet field profile: analytic fringe model and tabulated maps.

The magnet is modeled as a finite solenoid evaluated on its central axis,

    B(z) = (B0 / 2) * (g(u+) - g(u-)),   g(u) = u / sqrt(u^2 + R^2),

with u+- = z - center +- half_length.  Positions are millimetres along the
shuttle travel axis, z = 0 at the low-field park position and z increasing
toward the magnet bore.  Gradients are reported in T/m.

A map can instead be built from a measured table (CSV `position_mm,field_T`),
interpolated with a shape-preserving monotone cubic so the gradient stays
free of spurious oscillation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, root


class RangeError(ValueError):
    """Position or field outside the modeled range."""


class CalibrationError(RuntimeError):
    """Anchor constraints could not be satisfied."""


@dataclass(frozen=True)
class FieldAnchors:
    """Anchor points pinning the analytic model.

    b_sweet_T: field at the sweet spot (plateau maximum).
    b_gradient_peak_T: field at the position of maximum gradient.
    gradient_peak_offset_mm: distance of the gradient peak below the sweet spot.
    b_park_T: field at the park position.
    park_position_mm: park position on the travel axis (origin by convention).
    """

    b_sweet_T: float = 9.4
    b_gradient_peak_T: float = 5.1
    gradient_peak_offset_mm: float = 186.0
    b_park_T: float = 0.027
    park_position_mm: float = 0.0


DEFAULT_ANCHORS = FieldAnchors()


@dataclass(frozen=True)
class SolenoidParams:
    center_mm: float
    half_length_mm: float
    radius_mm: float
    plateau_T: float


def _g(u, r2):
    return u / np.sqrt(u * u + r2)


def _g1(u, r2):
    # d/du of u/sqrt(u^2+R^2)
    return r2 / (u * u + r2) ** 1.5


def _g2(u, r2):
    # second derivative; vanishes only at u = 0
    return -3.0 * u * r2 / (u * u + r2) ** 2.5


class FieldMap:
    """Immutable on-axis field profile over [z_min, z_max].

    Either analytic (``params`` set) or tabulated (``table`` set).  The
    modeled range runs from the travel start to the sweet spot, so the
    field is monotone non-decreasing over the whole range.
    """

    def __init__(self, *, params=None, table=None, sweet_spot_position=None,
                 plateau_field=None, z_min=None, z_max=None):
        if (params is None) == (table is None):
            raise ValueError("exactly one of params/table required")
        self.params = params
        self._pchip = None
        if table is not None:
            z, b = table
            self._pchip = PchipInterpolator(z, b, extrapolate=False)
            self._table = (z, b)
        self.sweet_spot_position = float(sweet_spot_position)
        self.plateau_field = float(plateau_field)
        self.z_min = float(z_min)
        self.z_max = float(z_max)

    def _check_range(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < self.z_min - 1e-9) or np.any(z > self.z_max + 1e-9):
            raise RangeError(
                f"position outside modeled range [{self.z_min}, {self.z_max}] mm")
        return z

    def field_at(self, z):
        """Field in tesla at position z (mm). Scalar in, scalar out."""
        zz = self._check_range(z)
        if self.params is not None:
            p = self.params
            r2 = p.radius_mm ** 2
            b = 0.5 * p.plateau_T * (_g(zz - p.center_mm + p.half_length_mm, r2)
                                     - _g(zz - p.center_mm - p.half_length_mm, r2))
        else:
            b = self._pchip(np.clip(zz, self._table[0][0], self._table[0][-1]))
        return float(b) if np.isscalar(z) else b

    def gradient_at(self, z):
        """Field gradient dB/dz in T/m at position z (mm)."""
        zz = self._check_range(z)
        if self.params is not None:
            p = self.params
            r2 = p.radius_mm ** 2
            # derivative is per mm; scale to T/m
            g = 0.5 * p.plateau_T * (_g1(zz - p.center_mm + p.half_length_mm, r2)
                                     - _g1(zz - p.center_mm - p.half_length_mm, r2))
            g = g * 1e3
        else:
            # centered difference on the interpolant, h chosen against node spacing
            h = 0.1
            lo = np.clip(zz - h, self._table[0][0], self._table[0][-1])
            hi = np.clip(zz + h, self._table[0][0], self._table[0][-1])
            g = (self._pchip(hi) - self._pchip(lo)) / (hi - lo) * 1e3
        return float(g) if np.isscalar(z) else g

    def position_of_field(self, b_target):
        """Inverse lookup on the monotone segment, |B(result) - target| < 1e-9 T."""
        b_target = float(b_target)
        b_lo = self.field_at(self.z_min)
        b_hi = self.plateau_field
        if not (b_lo - 1e-12 <= b_target <= b_hi + 1e-12):
            raise RangeError(
                f"field {b_target} T outside attainable [{b_lo:.6g}, {b_hi:.6g}] T")
        if b_target <= b_lo:
            return self.z_min
        if b_target >= self.field_at(self.z_max):
            return self.z_max
        return brentq(lambda z: self.field_at(z) - b_target,
                      self.z_min, self.z_max, xtol=1e-13, rtol=8.9e-16)


def calibrate_default_map(anchors: FieldAnchors = DEFAULT_ANCHORS) -> FieldMap:
    """Solve the solenoid parameters against the four anchor constraints.

    Constraints: B(sweet) = b_sweet; B(sweet - offset) = b_gradient_peak;
    B''(sweet - offset) = 0 (the gradient maximum sits there); and
    B(park) = b_park.  Unknowns: center, half_length, radius, plateau field.
    Raises CalibrationError when the anchors are inconsistent or the solve
    leaves any relative residual above 1e-6.
    """
    a = anchors
    if not (0.0 < a.b_park_T < a.b_gradient_peak_T < a.b_sweet_T):
        raise CalibrationError(
            "anchors must satisfy 0 < B_park < B_gradient_peak < B_sweet, got "
            f"{a.b_park_T}, {a.b_gradient_peak_T}, {a.b_sweet_T}")
    if a.gradient_peak_offset_mm <= 0:
        raise CalibrationError("gradient peak offset must be positive")

    off = a.gradient_peak_offset_mm

    def residuals(x):
        zc, hl, rad, b0 = x
        r2 = rad * rad
        def field(z):
            return 0.5 * b0 * (_g(z - zc + hl, r2) - _g(z - zc - hl, r2))
        zg = zc - off
        # curvature residual scaled to be dimensionless like the others
        curv = 0.5 * b0 * (_g2(zg - zc + hl, r2) - _g2(zg - zc - hl, r2))
        return [
            field(zc) / a.b_sweet_T - 1.0,
            field(zg) / a.b_gradient_peak_T - 1.0,
            curv * off * off / a.b_gradient_peak_T,
            field(a.park_position_mm) / a.b_park_T - 1.0,
        ]

    # geometry-informed start: gradient peak near the coil end face, fringe
    # field ~ B0*R^2*hl/zc^3 setting the park distance scale
    x0 = np.array([a.park_position_mm + 4.0 * off, off, 0.45 * off,
                   1.02 * a.b_sweet_T])
    sol = root(residuals, x0, method="hybr", tol=1e-14)
    res = np.abs(residuals(sol.x))
    if not sol.success or np.max(res) > 1e-6:
        raise CalibrationError(
            "anchor solve did not converge; residuals "
            + ", ".join(f"{r:.3e}" for r in res))
    zc, hl, rad, b0 = (float(v) for v in sol.x)
    if hl <= 0 or rad <= 0 or b0 <= 0 or zc <= a.park_position_mm:
        raise CalibrationError(f"unphysical solved parameters {sol.x}")
    params = SolenoidParams(center_mm=zc, half_length_mm=hl, radius_mm=rad,
                            plateau_T=b0)
    fmap = FieldMap(params=params,
                    sweet_spot_position=zc,
                    plateau_field=0.5 * b0 * (_g(hl, rad * rad) - _g(-hl, rad * rad)),
                    z_min=a.park_position_mm, z_max=zc)
    return fmap


def load_field_table(path) -> FieldMap:
    """Read a measured map from CSV with header `position_mm,field_T`.

    Positions must be strictly increasing; the monotone rise toward the
    maximum-field node defines the invertible segment.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "position_mm,field_T":
            raise ValueError(f"bad field-table header: {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] < 4:
        raise ValueError("field table needs at least 4 rows")
    z, b = data[:, 0], data[:, 1]
    if np.any(np.diff(z) <= 0):
        raise ValueError("field-table positions must be strictly increasing")
    if np.any(b <= 0):
        raise ValueError("field-table fields must be positive")
    i_max = int(np.argmax(b))
    return FieldMap(table=(z, b),
                    sweet_spot_position=z[i_max],
                    plateau_field=float(b[i_max]),
                    z_min=float(z[0]), z_max=float(z[i_max]))
