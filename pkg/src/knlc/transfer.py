"""Linearised quadrature transfer matrices and spectral-density algebra.

Quadratures are vacuum-normalised: a coherent (vacuum-noise) input has the
spectral matrix I.  Input noise is described by amplitude factors s1, s2 along
the principal axes of the input ellipse (noise power s^2, vacuum s = 1) and
the ellipse orientation vartheta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HEISENBERG_EPS = 1e-9
_OMEGA_RTOL = 1e-12


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class TransferMatrix:
    matrix: np.ndarray
    omega: float
    channel: str = "coupler"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (2, 2):
            raise TransferError("transfer matrix must be 2x2")
        if not np.all(np.isfinite(m)):
            raise TransferError("transfer matrix has non-finite entries")
        object.__setattr__(self, "matrix", m)

    def __getitem__(self, ij):
        return self.matrix[ij]


@dataclass(frozen=True)
class SpectralMatrix:
    s11: float
    s22: float
    s12: float
    omega: float = 0.0

    @classmethod
    def from_array(cls, a, omega=0.0):
        a = np.asarray(a)
        return cls(float(a[0, 0]), float(a[1, 1]), float(0.5 * (a[0, 1] + a[1, 0])), omega)

    @property
    def array(self):
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])

    @property
    def det(self):
        return self.s11 * self.s22 - self.s12**2

    def satisfies_heisenberg(self, eps=HEISENBERG_EPS):
        return self.s11 > 0 and self.s22 > 0 and self.det >= 1.0 - eps

    def __add__(self, other):
        _check_omega(self.omega, other.omega)
        return SpectralMatrix(self.s11 + other.s11, self.s22 + other.s22, self.s12 + other.s12, self.omega)


@dataclass(frozen=True)
class InputNoiseSpec:
    """Input noise ellipse: amplitude factors along vartheta and vartheta + 90 deg."""

    s1: float = 1.0
    s2: float = 1.0
    vartheta: float = 0.0

    def __post_init__(self):
        if self.s1 < 0 or self.s2 < 0:
            raise TransferError("noise amplitude factors must be non-negative")

    @classmethod
    def from_db(cls, major_db, minor_db, vartheta_deg=0.0):
        """Noise powers in dB relative to vacuum along the two principal axes."""
        return cls(10 ** (major_db / 20), 10 ** (minor_db / 20), math.radians(vartheta_deg))

    @classmethod
    def from_r(cls, r1, r2, vartheta=0.0):
        return cls(math.exp(r1), math.exp(r2), vartheta)

    @property
    def r1(self):
        return math.log(self.s1)

    @property
    def r2(self):
        return math.log(self.s2)

    @property
    def is_physical(self):
        return self.s1 * self.s2 >= 1.0 - HEISENBERG_EPS

    @property
    def is_vacuum(self):
        return self.s1 == 1.0 and self.s2 == 1.0


VACUUM = InputNoiseSpec()


@dataclass(frozen=True)
class InputNoiseTable:
    """Frequency-dependent input ellipse with a fixed orientation.

    Noise powers are interpolated linearly in dB over log(omega); ``omega``
    in rad/s, strictly ascending.
    """

    omega: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    vartheta: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        s1 = np.asarray(self.s1, dtype=float)
        s2 = np.asarray(self.s2, dtype=float)
        if w.ndim != 1 or w.size < 2 or s1.shape != w.shape or s2.shape != w.shape:
            raise TransferError("noise table needs matching 1-D columns with at least two rows")
        if np.any(w <= 0) or np.any(np.diff(w) <= 0):
            raise TransferError("noise table frequencies must be positive and strictly ascending")
        if np.any(s1 <= 0) or np.any(s2 <= 0):
            raise TransferError("noise amplitude factors must be positive")
        for name, val in (("omega", w), ("s1", s1), ("s2", s2)):
            object.__setattr__(self, name, val)

    def covers(self, omega):
        return self.omega[0] * (1 - 1e-12) <= omega <= self.omega[-1] * (1 + 1e-12)

    def at(self, omega):
        if not self.covers(omega):
            raise TransferError(
                f"omega = {omega:g} rad/s outside the noise table [{self.omega[0]:g}, {self.omega[-1]:g}]"
            )
        lw = np.log(self.omega)
        x = math.log(omega)
        p1 = np.interp(x, lw, 2 * np.log(self.s1))
        p2 = np.interp(x, lw, 2 * np.log(self.s2))
        return InputNoiseSpec(math.exp(p1 / 2), math.exp(p2 / 2), self.vartheta)


def _check_omega(a, b):
    if abs(a - b) > _OMEGA_RTOL * max(abs(a), abs(b), 1e-300):
        raise TransferError(f"frequency mismatch: {a!r} vs {b!r}")


def rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def transfer_from_sidebands(am, pm, x1, x2, channel="coupler"):
    """Assemble T from amplitude- and phase-modulation runs.

    ``am``/``pm`` hold two-sided sideband amplitudes c(+-Omega) of the output,
    referenced to its mean-field axis; c = R(+-Omega)/2 for the single-sided
    amplitudes R(+-Omega), so e.g. T11 = [R*(-W) + R(W)] / (2 x1) = [c*(-W) + c(W)] / x1.
    """
    _check_omega(am.omega, pm.omega)
    t11 = (np.conj(am.lower) + am.upper) / x1
    t21 = 1j * (np.conj(am.lower) - am.upper) / x1
    t12 = (np.conj(pm.lower) + pm.upper) / x2
    t22 = 1j * (np.conj(pm.lower) - pm.upper) / x2
    return TransferMatrix(np.array([[t11, t12], [t21, t22]]), am.omega, channel)


def spectral_density(t):
    """S(T) = (T T^dagger + T* T^T) / 2, real and symmetric."""
    m = t.matrix
    s = 0.5 * (m @ m.conj().T + m.conj() @ m.T)
    if np.max(np.abs(s.imag)) > 1e-12 * max(1.0, np.max(np.abs(s.real))):
        raise TransferError("spectral matrix acquired an imaginary part")
    return SpectralMatrix.from_array(s.real, t.omega)


def dress_with_input_noise(t, noise):
    """T' = T . Rot(vartheta) . diag(s1, s2)."""
    m = t.matrix @ rotation(noise.vartheta) @ np.diag([noise.s1, noise.s2])
    return TransferMatrix(m, t.omega, t.channel)


def total_spectral_density(t_coupler, l_loss, noise=VACUUM):
    """Coupler channel dressed with the input noise, loss channel left on vacuum."""
    _check_omega(t_coupler.omega, l_loss.omega)
    return spectral_density(dress_with_input_noise(t_coupler, noise)) + spectral_density(l_loss)


def quadrature_noise(s, zeta):
    c, sn = math.cos(zeta), math.sin(zeta)
    return c * c * s.s11 + 2 * c * sn * s.s12 + sn * sn * s.s22


def zero_transfer(omega, channel="loss"):
    return TransferMatrix(np.zeros((2, 2)), omega, channel)


def mix_with_vacuum(s, a):
    """Beam splitter of power transmission ``a`` with vacuum in the open port."""
    if not 0.0 <= a <= 1.0:
        raise TransferError("power factor must lie in [0, 1]")
    return SpectralMatrix(a * s.s11 + 1 - a, a * s.s22 + 1 - a, a * s.s12, s.omega)


def to_db(power):
    return 10.0 * np.log10(power)
