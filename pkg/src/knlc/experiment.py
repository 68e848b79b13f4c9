"""End-to-end model of passive laser power-noise reduction with a Kerr cavity.

Chain: measured laser spectrum -> input noise ellipse -> mode cleaner ->
Kerr cavity (time-domain transfer matrices) -> optional intra-cavity 1/f
phase noise -> mode cleaner again -> attenuation to the detected power.
Spectra are reported in dB relative to the peak of the same chain with the
cavity replaced by a perfect mirror.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize

from . import cavity
from .engine import DEFAULT_MOD_RATIO, choose_record_length, snap_frequency
from .phasespace import LINEARITY_LIMIT, measure_transfer
from .transfer import (
    InputNoiseSpec,
    InputNoiseTable,
    SpectralMatrix,
    TransferMatrix,
    dress_with_input_noise,
    mix_with_vacuum,
    spectral_density,
    to_db,
)

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
PHASE_NOISE_PORTS = ("loss", "input")
MIN_CYCLES = 16
MAX_RECORD = 1 << 20  # longest record spent on sharpening the relaxation frequency


class SpectrumFormatError(ValueError):
    pass


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class MeasuredSpectrum:
    """Power spectrum in dB over ascending frequencies in Hz."""

    freq_hz: np.ndarray
    level_db: np.ndarray
    source: str = ""
    reference: str = "dB relative to the shot noise of the driving beam"

    def __post_init__(self):
        f = np.asarray(self.freq_hz, dtype=float)
        v = np.asarray(self.level_db, dtype=float)
        if f.ndim != 1 or f.shape != v.shape or f.size == 0:
            raise SpectrumFormatError("spectrum needs two matching non-empty columns")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(v))):
            raise SpectrumFormatError("spectrum contains non-finite values")
        if np.any(f <= 0):
            raise SpectrumFormatError("frequencies must be positive")
        if np.any(np.diff(f) <= 0):
            raise SpectrumFormatError("frequencies must be strictly ascending")
        object.__setattr__(self, "freq_hz", f)
        object.__setattr__(self, "level_db", v)

    def covers(self, lo_hz, hi_hz):
        return self.freq_hz[0] * (1 - 1e-12) <= lo_hz and hi_hz <= self.freq_hz[-1] * (1 + 1e-12)

    def at(self, freq_hz):
        """Level in dB, linear in log-frequency between rows."""
        f = np.asarray(freq_hz, dtype=float)
        if np.any(f < self.freq_hz[0] * (1 - 1e-12)) or np.any(f > self.freq_hz[-1] * (1 + 1e-12)):
            raise SpectrumFormatError("frequency outside the measured band")
        return np.interp(np.log(f), np.log(self.freq_hz), self.level_db)

    @property
    def peak(self):
        i = int(np.argmax(self.level_db))
        return float(self.freq_hz[i]), float(self.level_db[i])


def _parse_float(text, lineno, what):
    try:
        return float(text)
    except ValueError:
        raise SpectrumFormatError(f"line {lineno}: {what} {text!r} is not a number") from None


def ingest_spectrum(path, source=None):
    """Read a two-column CSV (Hz, dB); one non-numeric header line is allowed first.

    Blank lines and lines starting with '#' are skipped.
    """
    freqs, levels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise SpectrumFormatError(f"line {lineno}: expected 2 columns, found {len(row)}")
            if not freqs and not levels and lineno == 1:
                try:
                    float(row[0])
                except ValueError:
                    continue  # header
            freqs.append(_parse_float(row[0].strip(), lineno, "frequency"))
            levels.append(_parse_float(row[1].strip(), lineno, "level"))
            if not (math.isfinite(freqs[-1]) and math.isfinite(levels[-1])):
                raise SpectrumFormatError(f"line {lineno}: non-finite value")
            if freqs[-1] <= 0:
                raise SpectrumFormatError(f"line {lineno}: frequency must be positive")
            if len(freqs) > 1 and freqs[-1] <= freqs[-2]:
                raise SpectrumFormatError(f"line {lineno}: frequencies must be strictly ascending")
    if not freqs:
        raise SpectrumFormatError(f"{path}: no data rows")
    return MeasuredSpectrum(np.array(freqs), np.array(levels), source or str(path))


def write_spectrum(spectrum, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_Hz", "level_dB"])
        for f, v in zip(spectrum.freq_hz, spectrum.level_db):
            w.writerow([repr(float(f)), repr(float(v))])


def synthetic_laser_spectrum(freq_hz, relaxation_hz=1.0e6, peak_db=70.0, quality=20.0):
    """Free-running solid-state laser power noise: a damped relaxation resonance on shot noise.

    Levels are relative to shot noise; the maximum (``peak_db``) sits at
    ``relaxation_hz``.
    """
    f = np.asarray(freq_hz, dtype=float)
    x = f / relaxation_hz
    excess = (10 ** (peak_db / 10) - 1) / quality**2
    resp = 1.0 / ((1 - x * x) ** 2 + (x / quality) ** 2)
    return MeasuredSpectrum(f, to_db(1.0 + excess * resp), "synthetic")


@dataclass(frozen=True)
class PipelineConfig:
    coupler_reflectance: float = 0.983
    round_trip_loss: float = 0.005
    half_bandwidth_hz: float = 4.5e6
    drive_power_W: float = 0.75
    theta: float | None = None  # None: critical non-linearity for the drive power
    vartheta_deg: float = 10.0
    minor_offset_db: float = -33.0
    relaxation_hz: float | None = None  # None: frequency of the measured maximum
    minor_pole_hz: float | None = None  # None: relaxation frequency
    mode_cleaner_pole_hz: float = 2.0e6
    kappa: float = 0.0
    phase_noise_port: str = "loss"
    detection_power_W: float = 0.15
    fractions: tuple = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9)
    freq_min_hz: float = 1.0e5
    freq_max_hz: float = 1.0e7
    points_per_decade: int = 10
    mod_ratio: float = DEFAULT_MOD_RATIO
    linearity_limit: float | None = LINEARITY_LIMIT
    tolerance: float | None = None
    # long records at the relaxation frequency keep its snap within ~0.2 % of the peak
    relaxation_min_cycles: int = 256

    def __post_init__(self):
        for name in ("half_bandwidth_hz", "drive_power_W", "mode_cleaner_pole_hz", "detection_power_W",
                     "freq_min_hz", "freq_max_hz"):
            if not getattr(self, name) > 0:
                raise PipelineError(f"{name} must be positive")
        for name in ("relaxation_hz", "minor_pole_hz"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise PipelineError(f"{name} must be positive")
        if self.kappa < 0:
            raise PipelineError("kappa must be non-negative")
        if self.phase_noise_port not in PHASE_NOISE_PORTS:
            raise PipelineError(f"phase_noise_port must be one of {PHASE_NOISE_PORTS}")
        if self.detection_power_W > self.drive_power_W:
            raise PipelineError("detection power cannot exceed the drive power")
        if self.freq_max_hz <= self.freq_min_hz:
            raise PipelineError("freq_max_hz must exceed freq_min_hz")
        if self.points_per_decade < 1:
            raise PipelineError("points_per_decade must be at least 1")
        if self.relaxation_min_cycles < 1:
            raise PipelineError("relaxation_min_cycles must be at least 1")
        if not all(0 < f <= 1 for f in self.fractions):
            raise PipelineError("power fractions must lie in (0, 1]")

    @property
    def attenuation(self):
        return self.detection_power_W / self.drive_power_W

    def cavity_spec(self):
        base = cavity.CavitySpec.from_power(self.coupler_reflectance, self.round_trip_loss)
        length = cavity.length_for_half_bandwidth(base, TWO_PI * self.half_bandwidth_hz)
        spec = cavity.CavitySpec.from_power(self.coupler_reflectance, self.round_trip_loss, length)
        if self.theta is None:
            return cavity.critical_spec(spec, self.drive_power_W)
        return spec.with_theta(self.theta)

    def frequency_grid(self):
        decades = math.log10(self.freq_max_hz / self.freq_min_hz)
        n = max(2, int(round(decades * self.points_per_decade)) + 1)
        return np.geomspace(self.freq_min_hz, self.freq_max_hz, n)

    def as_dict(self):
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


def pole_power(freq_hz, pole_hz):
    """|1 / (1 + i f / f_pole)|^2."""
    x = np.asarray(freq_hz, dtype=float) / pole_hz
    return 1.0 / (1.0 + x * x)


def build_input_noise(meas, cfg, lo_hz=None, hi_hz=None):
    """Input ellipse over the measured band.

    Major axis (orientation vartheta) follows the measurement.  The minor axis
    is the level at the relaxation frequency plus ``minor_offset_db``, shaped
    by a single pole normalised to that frequency, and is kept at or above
    the Heisenberg bound set by the major axis.
    """
    lo_hz = cfg.freq_min_hz if lo_hz is None else lo_hz
    hi_hz = cfg.freq_max_hz if hi_hz is None else hi_hz
    if not meas.covers(lo_hz, hi_hz):
        raise PipelineError(
            f"measured spectrum [{meas.freq_hz[0]:g}, {meas.freq_hz[-1]:g}] Hz does not cover "
            f"the analysis band [{lo_hz:g}, {hi_hz:g}] Hz"
        )
    f = meas.freq_hz
    f_ro = cfg.relaxation_hz if cfg.relaxation_hz is not None else meas.peak[0]
    f_pole = cfg.minor_pole_hz if cfg.minor_pole_hz is not None else f_ro
    ref_db = float(meas.at(f_ro)) if meas.covers(f_ro, f_ro) else meas.peak[1]
    major = 10 ** (meas.level_db / 10)
    minor = 10 ** ((ref_db + cfg.minor_offset_db) / 10) * pole_power(f, f_pole) / pole_power(f_ro, f_pole)
    minor = np.maximum(minor, 1.0 / major)
    return InputNoiseTable(TWO_PI * f, np.sqrt(major), np.sqrt(minor), math.radians(cfg.vartheta_deg))


def mode_cleaner_filter(noise, pole_hz, freq_hz=None):
    """Single-pole low-pass on the noise, vacuum entering where sidebands are rejected.

    Accepts an InputNoiseTable, an InputNoiseSpec or SpectralMatrix (then
    ``freq_hz`` is required).  Excess noise above vacuum is scaled by
    |1/(1 + i f/f_pole)|^2.
    """
    if pole_hz <= 0:
        raise PipelineError("mode-cleaner pole must be positive")
    if isinstance(noise, InputNoiseTable):
        h = pole_power(noise.omega / TWO_PI, pole_hz)
        s1 = np.sqrt(h * noise.s1**2 + 1 - h)
        s2 = np.sqrt(h * noise.s2**2 + 1 - h)
        return InputNoiseTable(noise.omega, s1, s2, noise.vartheta)
    if freq_hz is None:
        raise PipelineError("freq_hz is required for a single-frequency noise value")
    h = float(pole_power(freq_hz, pole_hz))
    if isinstance(noise, InputNoiseSpec):
        return InputNoiseSpec(math.sqrt(h * noise.s1**2 + 1 - h), math.sqrt(h * noise.s2**2 + 1 - h), noise.vartheta)
    return mix_with_vacuum(noise, h)


def phase_noise_term(transfer, intracavity_power, kappa, omega):
    """Spectral contribution of 1/f phase noise entering through ``transfer``."""
    if kappa < 0 or omega <= 0:
        raise PipelineError("kappa must be >= 0 and omega > 0")
    amp = kappa * intracavity_power / math.sqrt(omega)
    m = transfer.matrix @ np.diag([0.0, amp])
    return spectral_density(TransferMatrix(m, transfer.omega, transfer.channel))


def inject_phase_noise(s_tot, measurement, op, kappa, omega, port="loss"):
    """Add kappa^2 P^2 / omega of phase noise inside the cavity.

    ``port="loss"`` propagates it through the loss-channel matrix (default);
    ``"input"`` through the coupler matrix instead.
    """
    if kappa == 0:
        return s_tot
    t = measurement.loss if port == "loss" else measurement.coupler
    return s_tot + phase_noise_term(t, op.intracavity_power, kappa, omega)


def _detected(s, freq_hz, cfg):
    s = mode_cleaner_filter(s, cfg.mode_cleaner_pole_hz, freq_hz)
    return mix_with_vacuum(s, cfg.attenuation)


def _kerr_output(meas, noise, op, cfg, kappa):
    s = spectral_density(dress_with_input_noise(meas.coupler, noise)) + spectral_density(meas.loss)
    return inject_phase_noise(s, meas, op, kappa, meas.omega, cfg.phase_noise_port)


def reference_level(noise, freq_hz, cfg):
    """Detected amplitude noise with the cavity replaced by a perfect mirror."""
    s = spectral_density(dress_with_input_noise(TransferMatrix(-np.eye(2), TWO_PI * freq_hz), noise))
    return _detected(s, freq_hz, cfg).s11


@dataclass
class OperatingPointSpectrum:
    fraction: float
    operating_point: cavity.OperatingPoint
    freq_hz: np.ndarray
    detected: list  # SpectralMatrix per frequency
    reduction_db: np.ndarray
    measurements: list = field(repr=False, default_factory=list)

    @property
    def s11(self):
        return np.array([s.s11 for s in self.detected])


@dataclass
class ExperimentResult:
    config: PipelineConfig
    spec: cavity.CavitySpec
    freq_hz: np.ndarray
    reference_db: np.ndarray
    normalization: float
    spectra: list
    best: OperatingPointSpectrum | None = None
    kappa_fit: dict | None = None


class ExperimentModel:
    """Caches transfer matrices so that kappa and noise changes are cheap."""

    def __init__(self, cfg, meas):
        self.cfg = cfg
        self.meas = meas
        self.spec = cfg.cavity_spec()
        self.gamma = cavity.half_bandwidth(self.spec)
        self._cache = {}
        t_rt = cavity.round_trip_time(self.spec)

        def snap(f, cycles=MIN_CYCLES):
            w = TWO_PI * f
            return snap_frequency(w, choose_record_length(w, t_rt, cycles), t_rt)[0] / TWO_PI

        grid = list(cfg.frequency_grid())
        f_ro = cfg.relaxation_hz if cfg.relaxation_hz is not None else meas.peak[0]
        # snap once so the noise model and the cavity share one frequency grid
        cycles = cfg.relaxation_min_cycles
        while cycles > MIN_CYCLES and choose_record_length(TWO_PI * f_ro, t_rt, cycles) > MAX_RECORD:
            cycles //= 2
        self._ro_cycles = max(cycles, MIN_CYCLES)
        self.relaxation_hz = snap(f_ro, self._ro_cycles)
        snapped = [snap(f) for f in grid]
        if grid[0] < f_ro < grid[-1]:
            snapped.append(self.relaxation_hz)
        self.freq_hz = np.unique(snapped)
        lo = min(self.freq_hz.min(), grid[0], self.relaxation_hz)
        hi = max(self.freq_hz.max(), grid[-1], self.relaxation_hz)
        self.input_noise = build_input_noise(meas, cfg, lo, hi)
        self.cleaned = mode_cleaner_filter(self.input_noise, cfg.mode_cleaner_pole_hz)
        ref = np.array([reference_level(self.input_noise.at(TWO_PI * f), f, cfg) for f in self.freq_hz])
        self.normalization = float(ref.max())
        self.reference_db = to_db(ref / self.normalization)

    def operating_point(self, fraction):
        return cavity.operating_point_for_fraction(self.spec, self.cfg.drive_power_W, fraction)

    def _measure(self, fraction, freq_hz):
        key = (float(fraction), float(freq_hz))
        if key not in self._cache:
            op = self.operating_point(fraction)
            self._cache[key] = measure_transfer(
                self.spec, op, TWO_PI * freq_hz, mod_ratio=self.cfg.mod_ratio, tolerance=self.cfg.tolerance,
                min_cycles=self._cycles(freq_hz), linearity_limit=self.cfg.linearity_limit,
            )
        return self._cache[key]

    def _cycles(self, freq_hz):
        return self._ro_cycles if freq_hz == self.relaxation_hz else MIN_CYCLES

    def detected_at(self, fraction, freq_hz, kappa=None):
        kappa = self.cfg.kappa if kappa is None else kappa
        m = self._measure(fraction, freq_hz)
        f = m.omega / TWO_PI
        noise = self.cleaned.at(m.omega)
        s = _kerr_output(m, noise, self.operating_point(fraction), self.cfg, kappa)
        return _detected(s, f, self.cfg)

    def spectrum(self, fraction, kappa=None):
        det = [self.detected_at(fraction, f, kappa) for f in self.freq_hz]
        red = to_db(np.array([s.s11 for s in det]) / self.normalization)
        meas = [self._measure(fraction, f) for f in self.freq_hz]
        return OperatingPointSpectrum(fraction, self.operating_point(fraction), self.freq_hz, det, red, meas)

    def reduction_at(self, fraction, freq_hz, kappa=None):
        s = self.detected_at(fraction, freq_hz, kappa)
        ref = reference_level(self.input_noise.at(TWO_PI * freq_hz), freq_hz, self.cfg)
        return float(to_db(s.s11 / ref))

    def best_fraction(self, freq_hz=None, bounds=(0.3, 0.99), coarse=15):
        """Power fraction with the lowest detected amplitude noise at ``freq_hz``."""
        freq_hz = self.relaxation_hz if freq_hz is None else freq_hz
        grid = np.linspace(bounds[0], bounds[1], coarse)
        vals = [self.detected_at(f, freq_hz, 0.0).s11 for f in grid]
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, coarse - 1)]
        res = optimize.minimize_scalar(
            lambda f: self.detected_at(f, freq_hz, 0.0).s11, bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-6},
        )
        return float(res.x) if res.fun <= vals[i] else float(grid[i])


def fit_kappa(model, target, fraction, kappa0=None):
    """Least-squares kappa matching the modelled reduction spectrum to ``target``.

    ``target`` is a MeasuredSpectrum of noise reduction in dB relative to the
    input peak.  Returns (kappa, rms residual in dB).
    """
    freqs = model.freq_hz
    if not target.covers(freqs[0], freqs[-1]):
        raise PipelineError("target spectrum does not cover the model frequencies")
    want = target.at(freqs)
    op = model.operating_point(fraction)
    base, extra = [], []
    for f in freqs:
        m = model._measure(fraction, f)
        noise = model.cleaned.at(m.omega)
        s0 = _kerr_output(m, noise, op, model.cfg, 0.0)
        t = m.loss if model.cfg.phase_noise_port == "loss" else m.coupler
        q = phase_noise_term(t, op.intracavity_power, 1.0, m.omega)
        base.append(_detected(s0, f, model.cfg).s11)
        # detection chain is affine: the added term scales with h * a
        extra.append(float(pole_power(f, model.cfg.mode_cleaner_pole_hz)) * model.cfg.attenuation * q.s11)
    base, extra = np.array(base), np.array(extra)

    def resid(p):
        return to_db((base + p[0] ** 2 * extra) / model.normalization) - want

    scale = math.sqrt(np.median(base) / max(np.median(extra), 1e-300))
    k0 = scale if kappa0 is None else kappa0
    best = None
    for start in (k0 * 1e-2, k0, k0 * 1e2):
        r = optimize.least_squares(resid, [start], bounds=([0.0], [np.inf]), x_scale=[scale])
        if best is None or r.cost < best.cost:
            best = r
    kappa = float(abs(best.x[0]))
    rms = float(np.sqrt(np.mean(resid([kappa]) ** 2)))
    return kappa, rms


def run_experiment_model(cfg, meas, target=None):
    """Noise-reduction spectra for every configured operating point plus the best one.

    With ``target`` the phase-noise strength is fitted on the best operating
    point first and then used for all curves.
    """
    model = ExperimentModel(cfg, meas)
    best_fraction = model.best_fraction()
    kappa_fit = None
    if target is not None:
        kappa, rms = fit_kappa(model, target, best_fraction)
        kappa_fit = {"kappa": kappa, "rms_residual_dB": rms, "fraction": best_fraction}
        cfg = replace(cfg, kappa=kappa)
        model.cfg = cfg
    spectra = [model.spectrum(f) for f in cfg.fractions]
    best = model.spectrum(best_fraction)
    return ExperimentResult(
        cfg, model.spec, model.freq_hz, model.reference_db, model.normalization, spectra, best, kappa_fit
    )
