"""Noise ellipses, Gaussian Wigner grids, spectra and operating-point search."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import cavity
from .engine import (
    DEFAULT_MOD_RATIO,
    MAX_WARMUP,
    DriveSpec,
    ConvergenceError,
    EngineError,
    choose_record_length,
    run_sidebands,
    snap_frequency,
)
from .transfer import (
    VACUUM,
    SpectralMatrix,
    TransferMatrix,
    total_spectral_density,
    transfer_from_sidebands,
    zero_transfer,
)

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-12
ANGLE_TOL = 1e-4
FRACTION_TOL = 1e-10
LINEARITY_LIMIT = 1e-4  # -80 dB harmonic content
DEPTH_MARGIN = 0.3
MIN_MOD_RATIO = 1e-13
MAX_DEPTH_RETRIES = 3


@dataclass(frozen=True)
class NoiseEllipse:
    var_min: float
    var_max: float
    angle_min: float

    @property
    def purity(self):
        return 1.0 / math.sqrt(self.var_min * self.var_max)

    def spectral_matrix(self, omega=0.0):
        """Covariance with these principal variances; inverse of ellipse_from_spectral."""
        c, s = math.cos(self.angle_min), math.sin(self.angle_min)
        u = np.array([[c, -s], [s, c]])
        return SpectralMatrix.from_array(u @ np.diag([self.var_min, self.var_max]) @ u.T, omega)


@dataclass
class WignerGrid:
    x1: np.ndarray
    x2: np.ndarray
    values: np.ndarray
    ellipse: NoiseEllipse
    peak: float

    @property
    def bounds(self):
        return (float(self.x1[0]), float(self.x1[-1]), float(self.x2[0]), float(self.x2[-1]))

    @property
    def resolution(self):
        return self.values.shape


@dataclass(frozen=True)
class Measurement:
    """Transfer matrices of one operating point at one snapped frequency."""

    omega: float
    coupler: TransferMatrix
    loss: TransferMatrix
    linearity: float
    n_record: int
    mod_ratio: float = DEFAULT_MOD_RATIO
    # (mod_ratio, linearity) of every depth tried, first one at the requested ratio
    attempts: tuple = ()


@dataclass
class SpectrumTable:
    """One row per frequency.  Angles in radians in (-pi/2, pi/2]."""

    omega_over_gamma: np.ndarray
    s11: np.ndarray
    s22: np.ndarray
    s12: np.ndarray
    angle_min: np.ndarray
    power_min: np.ndarray
    linearity: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def angle_unwrapped(self):
        """Minimum-noise angle made continuous across rows (period pi)."""
        return np.unwrap(self.angle_min, period=math.pi)

    def __len__(self):
        return len(self.omega_over_gamma)


def _wrap_axis(angle):
    a = (angle + math.pi / 2) % math.pi - math.pi / 2
    return math.pi / 2 if a == -math.pi / 2 else a


def ellipse_from_spectral(s):
    """Principal variances and minimum-noise quadrature angle of S."""
    mean = 0.5 * (s.s11 + s.s22)
    half = 0.5 * (s.s11 - s.s22)
    radius = math.hypot(half, s.s12)
    if radius <= DEGENERACY_TOL * max(abs(mean), 1.0):
        return NoiseEllipse(mean, mean, 0.0)
    # quadrature_noise(zeta) = mean + half cos 2zeta + s12 sin 2zeta, minimal opposite (half, s12)
    angle = 0.5 * math.atan2(-s.s12, -half)
    var_max = mean + radius
    # mean - radius cancels badly under strong anti-squeezing; the determinant does not
    return NoiseEllipse(s.det / var_max, var_max, _wrap_axis(angle))


def wigner_grid(ellipse, bounds=None, resolution=201, normalize=True):
    """Gaussian Wigner function on a rectangular (x1, x2) grid.

    Quadratures are scaled so the vacuum has W = exp(-x1^2 - x2^2) / pi, i.e.
    variance S / 2.  ``bounds`` defaults to six standard deviations of the
    widest axis.  With ``normalize`` the grid is divided by its peak.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    if min(resolution) < 2:
        raise ValueError("Wigner grid resolution must be at least 2")
    if ellipse.var_min <= 0:
        raise ValueError("Wigner function needs positive variances")
    if bounds is None:
        r = 6.0 * math.sqrt(ellipse.var_max / 2.0)
        bounds = (-r, r, -r, r)
    x1 = np.linspace(bounds[0], bounds[1], resolution[0])
    x2 = np.linspace(bounds[2], bounds[3], resolution[1])
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    c, s = math.cos(ellipse.angle_min), math.sin(ellipse.angle_min)
    along_min = g1 * c + g2 * s
    along_max = -g1 * s + g2 * c
    peak = 1.0 / (math.pi * math.sqrt(ellipse.var_min * ellipse.var_max))
    w = peak * np.exp(-(along_min**2) / ellipse.var_min - along_max**2 / ellipse.var_max)
    if normalize:
        w = w / peak
    return WignerGrid(x1, x2, w, ellipse, peak)


def measure_transfer(
    spec, op, omega, n_record=None, mod_ratio=DEFAULT_MOD_RATIO, tolerance=None, min_cycles=16,
    max_warmup=MAX_WARMUP, linearity_limit=LINEARITY_LIMIT,
):
    """Coupler and loss transfer matrices from four time-domain runs.

    ``omega`` is snapped to the record's DFT grid; the snapped value is
    carried by the returned matrices.  When the harmonic content exceeds
    ``linearity_limit`` the runs are repeated at a smaller modulation depth
    (harmonics scale with depth); ``None`` disables this.
    """
    t_rt = cavity.round_trip_time(spec)
    if n_record is None:
        n_record = choose_record_length(omega, t_rt, min_cycles)
    omega, _ = snap_frequency(omega, n_record, t_rt)
    attempts = []
    ratio = mod_ratio
    while True:
        t, loss, lin = _transfer_at_depth(spec, op, omega, n_record, ratio, tolerance, max_warmup)
        attempts.append((ratio, lin))
        if linearity_limit is None or lin <= linearity_limit or len(attempts) > MAX_DEPTH_RETRIES:
            break
        ratio = max(ratio * DEPTH_MARGIN * linearity_limit / lin, MIN_MOD_RATIO)
        if ratio >= attempts[-1][0]:
            break
    return Measurement(omega, t, loss, lin, n_record, ratio, tuple(attempts))


def _transfer_at_depth(spec, op, omega, n_record, ratio, tolerance, max_warmup):
    x = ratio * math.sqrt(op.drive_power)
    ports = ("coupler", "end_mirror") if spec.l_rt > 0 else ("coupler",)
    runs = {}
    for port in ports:
        for kind in ("amplitude", "phase"):
            drive = DriveSpec.modulated(op.drive_power, kind, omega, port, ratio)
            runs[port, kind] = run_sidebands(spec, op, drive, n_record, tolerance, max_warmup)
    t = transfer_from_sidebands(
        runs["coupler", "amplitude"].reflected, runs["coupler", "phase"].reflected, x, x
    )
    if spec.l_rt > 0:
        loss = transfer_from_sidebands(
            runs["end_mirror", "amplitude"].reflected,
            runs["end_mirror", "phase"].reflected,
            x,
            x,
            channel="loss",
        )
    else:
        loss = zero_transfer(omega)
    return t, loss, max(r.reflected.linearity for r in runs.values())


def spectral_row(meas, noise=VACUUM):
    s = total_spectral_density(meas.coupler, meas.loss, _noise_at(noise, meas.omega))
    return s, ellipse_from_spectral(s)


def _noise_at(noise, omega):
    # frequency-dependent input noise exposes at(omega)
    return noise.at(omega) if hasattr(noise, "at") else noise


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def sweep_spectrum(spec, op, noise=VACUUM, freq_grid=(), threads=1, **engine_kw):
    """Total spectral matrix and noise ellipse at each frequency of ``freq_grid``.

    Rows are independent; the table is ordered by the snapped frequencies.
    """
    gamma = cavity.half_bandwidth(spec)
    grid = np.asarray(freq_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty frequency grid")

    def one(omega):
        try:
            return measure_transfer(spec, op, omega, **engine_kw)
        except EngineError as exc:
            raise EngineError(f"at omega = {omega:g} rad/s ({omega / gamma:g} gamma): {exc}") from exc

    meas = _map(one, grid, threads)
    order = np.argsort([m.omega for m in meas], kind="stable")
    rows = []
    for i in order:
        s, ell = spectral_row(meas[i], noise)
        rows.append((meas[i].omega / gamma, s.s11, s.s22, s.s12, ell.angle_min, ell.var_min, meas[i].linearity))
    cols = np.array(rows).T
    return SpectrumTable(
        *cols,
        metadata={
            "spec": spec,
            "operating_point": op,
            "noise": noise,
            "gamma": gamma,
            "requested_omega": [float(g) for g in grid[order]],
        },
    )


@dataclass(frozen=True)
class OptimizeResult:
    operating_point: cavity.OperatingPoint
    angle: float
    crossings: tuple
    note: str = ""


def angle_at(spec, drive_power, fraction, omega, noise=VACUUM, **engine_kw):
    op = cavity.operating_point_for_fraction(spec, drive_power, fraction)
    s, ell = spectral_row(measure_transfer(spec, op, omega, **engine_kw), noise)
    return ell.angle_min


def _angle_or_nan(spec, drive_power, fraction, omega, noise, engine_kw):
    # the immediate neighbourhood of the critical point relaxes too slowly to
    # converge at finite modulation depth; such grid points are skipped
    try:
        return angle_at(spec, drive_power, fraction, omega, noise, **engine_kw)
    except ConvergenceError as exc:
        log.warning("skipping power fraction %.4f: %s", fraction, exc)
        return math.nan


def scan_angles(spec, drive_power, omega, fractions, noise=VACUUM, threads=1, **engine_kw):
    """Minimum-noise angle at ``omega`` for each power fraction (NaN where unconverged)."""
    return np.array(
        _map(
            lambda f: _angle_or_nan(spec, drive_power, f, omega, noise, engine_kw),
            list(fractions),
            threads,
        )
    )


def zero_crossings(fractions, angles):
    """Brackets where the angle passes through zero (not through the +-pi/2 wrap)."""
    out = []
    for i in range(len(fractions) - 1):
        a, b = angles[i], angles[i + 1]
        if not (math.isfinite(a) and math.isfinite(b)):
            continue
        if a == 0.0:
            out.append((fractions[i], fractions[i]))
        elif a * b < 0 and abs(a) < math.pi / 4 and abs(b) < math.pi / 4:
            out.append((fractions[i], fractions[i + 1]))
    return out


def optimize_operating_point(
    spec,
    drive_power,
    omega_target,
    noise=VACUUM,
    fractions=None,
    angle_tol=ANGLE_TOL,
    fraction_tol=FRACTION_TOL,
    threads=1,
    **engine_kw,
):
    """Operating point whose minimum-noise quadrature is the amplitude quadrature.

    Scans the steep flank in power fraction, brackets the zero crossings of the
    minimum-noise angle at ``omega_target`` and refines the crossing at the
    highest intra-cavity power with a bracketed Brent iteration down to
    ``fraction_tol``.  Far below the bandwidth the anti-squeezing is so strong
    that |angle| < ``angle_tol`` alone does not pin the noise floor.  Without a
    crossing the critical point is returned with a note.
    """
    if fractions is None:
        fractions = np.round(np.arange(0.25, 0.99 + 1e-9, 0.01), 10)
    fractions = np.asarray(fractions, dtype=float)
    angles = scan_angles(spec, drive_power, omega_target, fractions, noise, threads, **engine_kw)
    brackets = zero_crossings(fractions, angles)
    if not brackets:
        op = cavity.critical_operating_point(spec, drive_power)
        s, ell = spectral_row(measure_transfer(spec, op, omega_target, **engine_kw), noise)
        return OptimizeResult(
            op, ell.angle_min, (), "no zero crossing of the squeezing angle; using the critical point"
        )
    lo, hi = brackets[-1]
    if lo == hi:
        best = lo
    else:
        best = optimize.brentq(
            lambda f: angle_at(spec, drive_power, f, omega_target, noise, **engine_kw),
            lo,
            hi,
            xtol=fraction_tol,
            rtol=4 * np.finfo(float).eps,
        )
    op = cavity.operating_point_for_fraction(spec, drive_power, best)
    angle = angle_at(spec, drive_power, best, omega_target, noise, **engine_kw)
    note = ""
    if abs(angle) >= angle_tol:
        note = f"refined angle {angle:.2e} rad exceeds tolerance {angle_tol:g}"
        log.warning(note)
    log.info("optimised operating point: fraction %.9f, angle %.2e rad", best, angle)
    return OptimizeResult(op, angle, tuple(brackets), note)
