"""Round-trip time-domain propagation of modulated fields through the cavity.

One round trip maps the field just behind the coupling mirror, E_{n-1}, to

    B_n = exp(i phi_n) E_{n-1}                      (arrival at end mirror)
    A_n = exp(i phi_n) (rho_end B_n + i tau_end v_n) (arrival back at coupler)
    E_n = i tau_c Ein_n + rho_c A_n
    R_n = rho_c Ein_n + i tau_c A_n                  (reflected)
    T_n = i tau_end B_n                              (leaves through end mirror)

with the one-way phase phi_n = Phi + theta |E_{n-1}|^2.  For v = 0 this is the
usual E_n = i tau_c Ein_n + rho_c rho_end exp[2i(Phi + theta|E_{n-1}|^2)] E_{n-1}.
The reflected field is taken from the coupler beam splitter so that the
recursion conserves energy exactly.

Sideband amplitudes are accumulated as DFT bins inside the loop, one block of
``n_record`` round trips at a time; a block holds an integer number of
modulation periods, so a converged block is identical to the one before it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .cavity import CavityError, OperatingPoint, round_trip_time

N_HARMONICS = 5
DEFAULT_MOD_RATIO = 1e-6
DEFAULT_TOLERANCE = 1e-12
DEFAULT_SIDEBAND_TOLERANCE = 1e-7
MAX_WARMUP = 10_000_000
DIVERGENCE_FACTOR = 1e3
_STABLE_SAMPLES = 10
DRIFT_LIMIT = 0.1

_MOD_KINDS = {"none": 0, "amplitude": 1, "phase": 2}
_PORTS = {"coupler": 0, "end_mirror": 1}


class EngineError(RuntimeError):
    pass


class InstabilityError(EngineError):
    pass


class ConvergenceError(EngineError):
    pass


@dataclass(frozen=True)
class DriveSpec:
    E0: float
    modulation_kind: str = "none"
    mod_amplitude: float = 0.0
    mod_frequency: float = 0.0
    injection_port: str = "coupler"
    max_mod_ratio: float = DEFAULT_MOD_RATIO

    def __post_init__(self):
        if not self.E0 > 0:
            raise EngineError("mean field E0 must be real and positive")
        if self.modulation_kind not in _MOD_KINDS:
            raise EngineError(f"unknown modulation kind {self.modulation_kind!r}")
        if self.injection_port not in _PORTS:
            raise EngineError(f"unknown injection port {self.injection_port!r}")
        if self.modulation_kind != "none":
            if self.mod_amplitude <= 0:
                raise EngineError("modulation amplitude must be positive")
            if self.mod_amplitude > self.max_mod_ratio * self.E0 * (1 + 1e-12):
                raise EngineError(
                    f"modulation ratio {self.mod_amplitude / self.E0:.3g} exceeds the "
                    f"linear-regime limit {self.max_mod_ratio:.3g}"
                )

    @classmethod
    def modulated(cls, drive_power, kind, omega, port="coupler", ratio=DEFAULT_MOD_RATIO):
        e0 = math.sqrt(drive_power)
        return cls(e0, kind, ratio * e0, omega, port, max(ratio, DEFAULT_MOD_RATIO))


@dataclass
class FieldRecord:
    samples: np.ndarray
    t_rt: float
    warmup_count: int

    def __post_init__(self):
        n = len(self.samples)
        if n & (n - 1) or n == 0:
            raise EngineError(f"record length {n} is not a power of two")


@dataclass(frozen=True)
class SidebandPair:
    """Complex amplitudes c(+Omega), c(-Omega) of sum_k c_k exp(i k Omega t).

    A real tone x cos(Omega t) gives upper = lower = x / 2.  ``carrier`` is the
    mean (DC) value of the record.
    """

    upper: complex
    lower: complex
    harmonics_max: float
    omega: float
    carrier: complex

    @property
    def linearity(self):
        """Largest harmonic relative to the fundamental."""
        fund = max(abs(self.upper), abs(self.lower))
        return self.harmonics_max / fund if fund > 0 else 0.0


@dataclass(frozen=True)
class RunResult:
    reflected: SidebandPair
    transmitted: SidebandPair
    omega: float
    n_record: int
    warmup_count: int
    bin_index: int


def choose_record_length(omega, t_rt, min_cycles=16):
    """Smallest power-of-two record holding at least ``min_cycles`` periods."""
    if omega <= 0:
        raise EngineError("modulation frequency must be positive")
    cycles_per_sample = omega * t_rt / (2 * math.pi)
    if cycles_per_sample * 2 * (N_HARMONICS + 1) > 1:
        raise EngineError("modulation frequency too high for harmonic analysis at one sample per round trip")
    need = min_cycles / cycles_per_sample
    return 1 << max(int(math.ceil(math.log2(need))), 4)


def snap_frequency(omega, n_record, t_rt):
    """Nearest DFT bin: returns (snapped omega, bin index)."""
    k = int(round(omega * n_record * t_rt / (2 * math.pi)))
    if k < 1:
        raise EngineError(f"record of {n_record} round trips too short to resolve omega={omega:g}")
    if (N_HARMONICS + 1) * k >= n_record // 2:
        raise EngineError("harmonics of the snapped frequency exceed the Nyquist bin")
    return 2 * math.pi * k / (n_record * t_rt), k


def _bin_of(omega, n, t_rt):
    x = omega * n * t_rt / (2 * math.pi)
    k = int(round(x))
    if abs(x - k) > 1e-9 * max(1.0, x):
        raise EngineError(
            f"omega={omega:g} is off the DFT grid of this record; snap it with snap_frequency()"
        )
    return k


@njit(cache=True, nogil=True)
def _run_block(
    d, n0, n, k, rho_c, tau_c, rho_end, tau_end, theta, e_bar, w_bar, kind, port, amp, v_ref,
    n_ramp, store_r, store_t, bins_r, bins_t, tail, p_abort,
):
    """Advance ``n`` round trips from deviation ``d`` = E - E_bar at global index ``n0``.

    The recursion is the full non-linear round-trip map rewritten for the
    deviation from the steady state (E_bar, one-way phase factor w_bar), so
    round-off scales with the fluctuation rather than with the carrier.

    Accumulates sum dX_m exp(-i 2 pi h k m / n) for h = -H..H into
    bins[h + H] and the ramp moment sum (j - (n - 1)/2) dX_m into bins[-1],
    for the reflected (r) and end-mirror transmitted (t) deviations; writes
    the last deviations of E into ``tail``.  Returns (final deviation,
    status) with status 1 when |E|^2 exceeded p_abort.
    """
    nh = (bins_r.shape[0] - 2) // 2
    mid = 0.5 * (n - 1)
    do_store = store_r.shape[0] > 0
    ntail = tail.shape[0]
    step = 2.0 * math.pi / n
    mask = n - 1
    idx = (k * (n0 & mask)) & mask
    adv = complex(math.cos(step * k), math.sin(step * k))
    rot = complex(1.0, 0.0)
    b_bar = w_bar * e_bar
    for j in range(n):
        m = n0 + j
        # exact resync every 256 steps bounds the recurrence drift
        if j & 255 == 0:
            ang = step * idx
            rot = complex(math.cos(ang), math.sin(ang))
        else:
            rot = rot * adv
        idx = (idx + k) & mask
        ca = rot.real
        sa = rot.imag
        env = 1.0
        if m < n_ramp:
            x = m / n_ramp
            env = x * x * x * x * (35.0 - 84.0 * x + 70.0 * x * x - 20.0 * x * x * x)
        mod = amp * env * ca
        u = complex(0.0, 0.0)
        v = complex(0.0, 0.0)
        if kind == 1:
            if port == 0:
                u = complex(mod, 0.0)
            else:
                v = v_ref * mod
        elif kind == 2:
            if port == 0:
                u = complex(0.0, mod)
            else:
                v = v_ref * complex(0.0, mod)
        # Kerr phase change relative to steady state, exp(i alpha) - 1 without cancellation
        dp = 2.0 * (e_bar.real * d.real + e_bar.imag * d.imag) + d.real * d.real + d.imag * d.imag
        alpha = theta * dp
        sh = math.sin(0.5 * alpha)
        dw = complex(-2.0 * sh * sh, math.sin(alpha))
        db = w_bar * (dw * e_bar + (1.0 + dw) * d)
        da = w_bar * (rho_end * (dw * (b_bar + db) + db) + (1.0 + dw) * 1j * tau_end * v)
        d = 1j * tau_c * u + rho_c * da
        dr = rho_c * u + 1j * tau_c * da
        dt = 1j * tau_end * db
        if do_store:
            store_r[j] = dr
            store_t[j] = dt
        if j >= n - ntail:
            tail[j - (n - ntail)] = d
        ef = e_bar + d
        if ef.real * ef.real + ef.imag * ef.imag > p_abort:
            return d, 1
        # twiddle exp(-i h ang) built by repeated multiplication
        tw = complex(ca, -sa)
        bins_r[nh] += dr
        bins_t[nh] += dt
        bins_r[2 * nh + 1] += (j - mid) * dr
        bins_t[2 * nh + 1] += (j - mid) * dt
        cur = complex(1.0, 0.0)
        for h in range(1, nh + 1):
            cur = cur * tw
            bins_r[nh + h] += dr * cur
            bins_t[nh + h] += dt * cur
            cc = cur.conjugate()
            bins_r[nh - h] += dr * cc
            bins_t[nh - h] += dt * cc
    return d, 0


def _detrend(raw, n, k):
    """Least-squares split of a block into offset + linear drift + exact-bin tones.

    ``raw`` holds the accumulated DFT sums and ramp moment from the kernel.
    The tones at bins +-h k are orthogonal to the offset and to each other
    but not to the ramp, so the drift is solved for first and its leakage
    removed.  Returns normalised amplitudes c_h = X_h / n for h = -H..H.
    """
    h = N_HARMONICS
    sums = raw[: 2 * h + 1].copy()
    moment = raw[-1]
    if k == 0:
        return sums / n
    q = np.arange(-h, h + 1) * k
    q = q[q != 0]
    z = np.exp(-2j * np.pi * q / n)
    # <e_q, ramp> = sum_m m exp(-i theta_q m) = -n / (1 - z)
    overlap = -n / (1.0 - z)
    ramp_norm = n * (n * n - 1) / 12.0
    tones = np.delete(sums, h)
    slope = (moment - np.sum(np.conj(overlap) * tones) / n) / (ramp_norm - np.sum(np.abs(overlap) ** 2) / n)
    tones = tones - slope * overlap
    out = np.insert(tones, h, sums[h]) / n
    return out


class _Runner:
    """Drives the kernel block by block until the periodic state has converged."""

    def __init__(self, spec, op, drive, n_record, tolerance, max_warmup, store):
        if n_record & (n_record - 1) or n_record < 16:
            raise EngineError("n_record must be a power of two >= 16")
        self.spec = spec
        self.op = op
        self.drive = drive
        self.n = n_record
        self.t_rt = round_trip_time(spec)
        if tolerance is None:
            tolerance = DEFAULT_SIDEBAND_TOLERANCE if drive.modulation_kind != "none" else DEFAULT_TOLERANCE
        self.tol = tolerance
        self.max_warmup = max_warmup
        self.store = store
        self.kind = _MOD_KINDS[drive.modulation_kind]
        if self.kind:
            self.k = _bin_of(drive.mod_frequency, n_record, self.t_rt)
            if (N_HARMONICS + 1) * self.k >= n_record // 2:
                raise EngineError("harmonics of the modulation exceed the Nyquist bin")
        else:
            self.k = 0
        if abs(drive.E0**2 - op.drive_power) > 1e-12 * op.drive_power:
            raise EngineError("drive E0^2 does not match the operating point's drive power")
        e_ss = complex(op.steady_field)
        w_bar = complex(np.exp(1j * (op.phi + spec.theta * abs(e_ss) ** 2)))
        b_ss = w_bar * e_ss
        a_ss = w_bar * spec.rho_end * b_ss
        self.e_ss = e_ss
        self.w_bar = w_bar
        self.r_ref = complex(spec.rho_c * drive.E0 + 1j * spec.tau_c * a_ss)
        self.t_ref = complex(1j * spec.tau_end * b_ss)
        # end-mirror input quadratures follow the intra-cavity field there
        self.v_ref = complex(-1j * np.exp(1j * np.angle(b_ss)))

    def run(self):
        spec, drive, n = self.spec, self.drive, self.n
        d = complex(0.0, 0.0)
        p_abort = (DIVERGENCE_FACTOR * abs(self.e_ss)) ** 2
        n_ramp = n if self.kind else 0
        max_blocks = max(2, -(-self.max_warmup // n) + 1)
        prev_tail = prev_bins = None
        nh = 2 * N_HARMONICS + 2
        empty = np.empty(0, dtype=np.complex128)
        change = math.inf
        m = 0
        for block in range(max_blocks):
            bins_r = np.zeros(nh, dtype=np.complex128)
            bins_t = np.zeros(nh, dtype=np.complex128)
            tail = np.empty(_STABLE_SAMPLES, dtype=np.complex128)
            if self.store:
                store_r = np.empty(n, dtype=np.complex128)
                store_t = np.empty(n, dtype=np.complex128)
            else:
                store_r = store_t = empty
            d, status = _run_block(
                d, m, n, self.k, spec.rho_c, spec.tau_c, spec.rho_end, spec.tau_end,
                spec.theta, self.e_ss, self.w_bar, self.kind, _PORTS[drive.injection_port],
                drive.mod_amplitude, self.v_ref, n_ramp,
                store_r, store_t, bins_r, bins_t, tail, p_abort,
            )
            m += n
            if status:
                raise InstabilityError(
                    f"|E| diverged beyond {DIVERGENCE_FACTOR:g} x steady value "
                    f"(wrong branch or drive beyond critical?) after {m} round trips"
                )
            bins_r = _detrend(bins_r, n, self.k)
            bins_t = _detrend(bins_t, n, self.k)
            bins = np.concatenate([bins_r, bins_t])
            if prev_tail is not None:
                if self.kind:
                    change = self._sideband_change(bins, prev_bins, drive.mod_amplitude)
                else:
                    change = float(np.max(np.abs(tail - prev_tail)) / abs(self.e_ss))
                if change < self.tol:
                    drift = float(np.max(np.abs(tail)) / abs(self.e_ss))
                    if drift > DRIFT_LIMIT:
                        # settled, but on another state: the requested point is unstable
                        raise InstabilityError(
                            f"field settled {drift:.3g} x |E| away from the operating point "
                            "(unstable branch or drive beyond critical?)"
                        )
                    self.warmup = m - n
                    if self.store:
                        store_r += self.r_ref
                        store_t += self.t_ref
                    return bins_r, bins_t, store_r, store_t
            prev_tail, prev_bins = tail, bins
        raise ConvergenceError(
            f"no convergence within {m} round trips (tolerance {self.tol:g}); "
            f"last relative change {change:.3e}"
        )

    @staticmethod
    def _sideband_change(bins, prev, amp):
        # exclude the DC bins: a marginal mode near the critical point drifts
        # slowly there without affecting the sidebands
        h = N_HARMONICS
        width = 2 * h + 1
        sel = np.r_[0:h, h + 1 : width + h, width + h + 1 : 2 * width]
        fund = max(np.max(np.abs(bins[[h - 1, h + 1]])), np.max(np.abs(bins[[width + h - 1, width + h + 1]])))
        # an output port may carry (almost) none of the modulation
        fund = max(fund, amp)
        return float(np.max(np.abs(bins[sel] - prev[sel])) / fund)


def _pair(bins, k, omega, ref, axis):
    """Sideband pair from normalised bins; harmonics referenced to the carrier axis."""
    h = N_HARMONICS
    carrier = complex(bins[h] + ref)
    rot = np.exp(-1j * axis)
    harm = np.max(np.abs(np.concatenate([bins[: h - 1], bins[h + 2 :]])))
    return SidebandPair(
        upper=complex(bins[h + 1] * rot),
        lower=complex(bins[h - 1] * rot),
        harmonics_max=float(harm),
        omega=omega,
        carrier=carrier,
    )


def carrier_axis(carrier):
    """Direction of the mean field as an axis angle in (-pi/2, pi/2]."""
    ang = math.atan2(carrier.imag, carrier.real)
    if ang > math.pi / 2:
        ang -= math.pi
    elif ang <= -math.pi / 2:
        ang += math.pi
    return ang


def run_sidebands(spec, op, drive, n_record, tolerance=None, max_warmup=MAX_WARMUP):
    """Propagate without storing samples; return carrier-referenced sidebands.

    Reflected sidebands are rotated onto the axis of the reflected mean field;
    transmitted ones onto the axis of the transmitted mean field.
    """
    runner = _Runner(spec, op, drive, n_record, tolerance, max_warmup, store=False)
    bins_r, bins_t, _, _ = runner.run()
    return _result(runner, bins_r, bins_t)


def _result(runner, bins_r, bins_t):
    omega = 2 * math.pi * runner.k / (runner.n * runner.t_rt) if runner.k else 0.0
    refl = _pair(bins_r, runner.k, omega, runner.r_ref, carrier_axis(bins_r[N_HARMONICS] + runner.r_ref))
    trans = _pair(bins_t, runner.k, omega, runner.t_ref, carrier_axis(bins_t[N_HARMONICS] + runner.t_ref))
    return RunResult(refl, trans, omega, runner.n, runner.warmup, runner.k)


def propagate(spec, op, drive, n_record, tolerance=None, max_warmup=MAX_WARMUP):
    """Run to a converged periodic state and return (reflected, transmitted) records."""
    runner = _Runner(spec, op, drive, n_record, tolerance, max_warmup, store=True)
    _, _, store_r, store_t = runner.run()
    t_rt = runner.t_rt
    return (
        FieldRecord(store_r, t_rt, runner.warmup),
        FieldRecord(store_t, t_rt, runner.warmup),
    )


def extract_sidebands(record, omega):
    """Sidebands at +-omega of a stored record, referenced to its mean-field axis."""
    n = len(record.samples)
    k = _bin_of(omega, n, record.t_rt)
    if k < 1:
        raise EngineError("record too short to resolve omega")
    if N_HARMONICS * k >= n // 2:
        raise EngineError("harmonics of omega exceed the Nyquist bin")
    spectrum = np.fft.fft(record.samples) / n
    carrier = complex(spectrum[0])
    rot = np.exp(-1j * carrier_axis(carrier)) if carrier != 0 else 1.0
    harm = max(abs(spectrum[(h * s * k) % n]) for h in range(2, N_HARMONICS + 1) for s in (1, -1))
    return SidebandPair(
        upper=complex(spectrum[k] * rot),
        lower=complex(spectrum[-k] * rot),
        harmonics_max=float(harm),
        omega=2 * math.pi * k / (n * record.t_rt),
        carrier=carrier,
    )


_MAGIC = b"KNLCFREC"
_HEADER = struct.Struct("<8sIIQd")


def dump_record(record, path):
    """Write a record as a 32-byte header plus little-endian (re, im) doubles."""
    samples = np.ascontiguousarray(record.samples, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, record.warmup_count & 0xFFFFFFFF, len(samples), record.t_rt))
        fh.write(samples.view("<f8").tobytes())


def load_record(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise EngineError(f"{path}: truncated header")
        magic, version, warmup, n, t_rt = _HEADER.unpack(head)
        if magic != _MAGIC or version != 1:
            raise EngineError(f"{path}: not a field record (magic {magic!r}, version {version})")
        raw = fh.read(16 * n)
    if len(raw) != 16 * n:
        raise EngineError(f"{path}: truncated record")
    data = np.frombuffer(raw, dtype="<f8")
    return FieldRecord(data.view("<c16").astype(np.complex128), t_rt, warmup)
