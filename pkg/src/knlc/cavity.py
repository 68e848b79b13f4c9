"""Static physics of a two-mirror Kerr non-linear cavity.

The steady-state intra-cavity field obeys the transcendental relation

    E = i tau_c E_in / (1 - rho_c rho_end exp[2i (phi + theta |E|^2)])

which is solved here in closed form by parametrising the resonance curve with
the intra-cavity power P instead of the detuning phi.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

SPEED_OF_LIGHT = 299_792_458.0

_UNIT_TOL = 1e-12


class CavityError(ValueError):
    """Raised for invalid cavity parameters or unreachable operating points."""


@dataclass(frozen=True)
class CavitySpec:
    """Mirrors, length and Kerr coefficient of the cavity.

    All round-trip loss sits on the end mirror: ``tau_end = l_rt``.
    """

    rho_c: float
    tau_c: float
    rho_end: float
    l_rt: float
    length_L: float
    theta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.rho_c < 1.0:
            raise CavityError(f"rho_c must lie in (0, 1), got {self.rho_c}")
        if abs(self.rho_c**2 + self.tau_c**2 - 1.0) > _UNIT_TOL:
            raise CavityError("coupling mirror must be lossless: rho_c^2 + tau_c^2 = 1")
        if abs(self.rho_end**2 + self.l_rt**2 - 1.0) > _UNIT_TOL:
            raise CavityError("end mirror must satisfy rho_end^2 + l_rt^2 = 1")
        if not self.rho_c < self.rho_end <= 1.0:
            raise CavityError(
                f"need rho_c < rho_end <= 1, got rho_c={self.rho_c}, rho_end={self.rho_end}"
            )
        if self.theta < 0:
            raise CavityError("theta must be non-negative")
        if self.length_L <= 0:
            raise CavityError("length_L must be positive")

    @classmethod
    def from_power(cls, coupler_reflectance, loss=0.0, length_L=1.0, theta=0.0):
        """Build from power quantities: R_c = rho_c^2 and round-trip loss l_rt^2."""
        rho_c = math.sqrt(coupler_reflectance)
        return cls(
            rho_c=rho_c,
            tau_c=math.sqrt(1.0 - coupler_reflectance),
            rho_end=math.sqrt(1.0 - loss),
            l_rt=math.sqrt(loss),
            length_L=length_L,
            theta=theta,
        )

    @classmethod
    def from_escape_efficiency(cls, coupler_reflectance, eta_esc, length_L=1.0, theta=0.0):
        loss = loss_for_escape(eta_esc, math.sqrt(1.0 - coupler_reflectance)) ** 2
        return cls.from_power(coupler_reflectance, loss, length_L, theta)

    @property
    def tau_end(self):
        return self.l_rt

    @property
    def rho(self):
        """Round-trip amplitude factor rho_c * rho_end."""
        return self.rho_c * self.rho_end

    def with_theta(self, theta):
        return replace(self, theta=theta)


@dataclass(frozen=True)
class KerrMediumSpec:
    n2: float
    L_KM: float
    area_A: float
    omega0: float

    def __post_init__(self):
        for name in ("n2", "L_KM", "area_A", "omega0"):
            if not getattr(self, name) > 0:
                raise CavityError(f"{name} must be strictly positive")

    @property
    def theta(self):
        """Kerr phase coefficient in rad/W."""
        return self.n2 * self.omega0 * self.L_KM / (2.0 * self.area_A * SPEED_OF_LIGHT)


@dataclass(frozen=True)
class OperatingPoint:
    phi: float
    intracavity_power: float
    power_fraction: float
    steady_field: complex
    drive_power: float = 0.0
    branch: str = "low"


@dataclass
class ResonanceCurve:
    """Samples (phi, P, arg E) along one or two branches of the resonance curve.

    ``branch`` is -1 for the low-detuning (steep) flank and +1 for the other.
    Grid powers above ``p_res`` or below the anti-resonant minimum are listed
    in ``omitted``.
    """

    phi: np.ndarray
    power: np.ndarray
    phase: np.ndarray
    branch: np.ndarray
    p_res: float
    omitted: list = field(default_factory=list)


def round_trip_time(spec):
    return 2.0 * spec.length_L / SPEED_OF_LIGHT


def escape_efficiency(spec):
    return escape_efficiency_from(spec.tau_c, spec.l_rt)


def escape_efficiency_from(tau_c, l_rt):
    denom = l_rt**2 + tau_c**2
    if denom == 0.0:
        raise CavityError("escape efficiency undefined for tau_c = l_rt = 0")
    return tau_c**2 / denom


def loss_for_escape(eta_esc, tau_c):
    """Amplitude loss l_rt giving escape efficiency ``eta_esc`` for coupler ``tau_c``."""
    if not 0.0 < eta_esc <= 1.0:
        raise CavityError("eta_esc must lie in (0, 1]")
    return math.sqrt(tau_c**2 * (1.0 - eta_esc) / eta_esc)


def half_bandwidth(spec):
    """HWHM of the linear Airy resonance, in rad/s."""
    rho = spec.rho
    if rho >= 1.0:
        raise CavityError("half-bandwidth undefined for rho_c rho_end >= 1")
    return 2.0 / round_trip_time(spec) * math.asin((1.0 - rho) / (2.0 * math.sqrt(rho)))


def length_for_half_bandwidth(spec, gamma):
    """Cavity length giving half-bandwidth ``gamma`` (rad/s) with the same mirrors."""
    rho = spec.rho
    t_rt = 2.0 / gamma * math.asin((1.0 - rho) / (2.0 * math.sqrt(rho)))
    return t_rt * SPEED_OF_LIGHT / 2.0


def resonant_power(spec, drive_power):
    """Intra-cavity power on exact resonance, P_res."""
    return spec.tau_c**2 * drive_power / (1.0 - spec.rho) ** 2


def _cos2psi(spec, drive_power, power):
    rho = spec.rho
    return (1.0 + rho**2 - spec.tau_c**2 * drive_power / power) / (2.0 * rho)


def _psi_of_power(spec, drive_power, power, sign):
    # psi = phi + theta * P is the total one-way phase; sign picks the flank
    c = np.clip(_cos2psi(spec, drive_power, power), -1.0, 1.0)
    return sign * 0.5 * np.arccos(c)


def _wrap_phi(phi):
    # one free spectral range in phi is pi
    return (np.asarray(phi) + math.pi / 2) % math.pi - math.pi / 2


def steady_field(spec, drive_power, phi, power):
    """Intra-cavity amplitude for a (phi, P) pair lying on the resonance curve."""
    e_in = math.sqrt(drive_power)
    return 1j * spec.tau_c * e_in / (1.0 - spec.rho * np.exp(2j * (phi + spec.theta * power)))


def fixed_point_residual(spec, drive_power, phi, field_):
    e_in = math.sqrt(drive_power)
    lhs = field_ * (1.0 - spec.rho * np.exp(2j * (phi + spec.theta * abs(field_) ** 2)))
    return abs(lhs - 1j * spec.tau_c * e_in)


def solve_resonance_curve(spec, drive_power, power_grid, branches=("low", "high")):
    if drive_power <= 0:
        raise CavityError("drive power must be positive")
    grid = np.asarray(power_grid, dtype=float)
    if grid.ndim != 1 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise CavityError("power grid must be strictly positive and ascending")
    p_res = resonant_power(spec, drive_power)
    p_min = spec.tau_c**2 * drive_power / (1.0 + spec.rho) ** 2
    ok = (grid <= p_res * (1 + 1e-14)) & (grid >= p_min * (1 - 1e-14))
    omitted = [float(p) for p in grid[~ok]]
    powers = grid[ok]

    phis, pw, phases, tags = [], [], [], []
    for name in branches:
        sign = _BRANCH_SIGN[name]
        psi = _psi_of_power(spec, drive_power, powers, sign)
        phi = psi - spec.theta * powers
        e = steady_field(spec, drive_power, phi, powers)
        phis.append(phi)
        pw.append(powers)
        phases.append(np.angle(e))
        tags.append(np.full(powers.shape, sign, dtype=int))
    return ResonanceCurve(
        phi=np.concatenate(phis),
        power=np.concatenate(pw),
        phase=np.concatenate(phases),
        branch=np.concatenate(tags),
        p_res=p_res,
        omitted=omitted,
    )


_BRANCH_SIGN = {"low": -1, "high": 1}


def _dpsi_dfraction(spec, drive_power, u):
    """|d psi / d u| on either flank, u = P / P_res (analytic)."""
    rho = spec.rho
    # P_in tau_c^2 / P = (1 - rho)^2 / u
    c = (1.0 + rho**2 - (1.0 - rho) ** 2 / u) / (2.0 * rho)
    dc = (1.0 - rho) ** 2 / (2.0 * rho * u**2)
    return 0.5 * dc / np.sqrt(np.maximum(1.0 - c * c, 0.0))


def dphi_dpower(spec, drive_power, power, branch="low"):
    """Slope d(phi)/dP along a flank, from the closed-form phi(P)."""
    p_res = resonant_power(spec, drive_power)
    sign = _BRANCH_SIGN[branch]
    return -sign * _dpsi_dfraction(spec, drive_power, power / p_res) / p_res - spec.theta


def _min_slope_fraction(spec, drive_power):
    rho = spec.rho
    u_min = ((1.0 - rho) / (1.0 + rho)) ** 2
    res = optimize.minimize_scalar(
        lambda u: _dpsi_dfraction(spec, drive_power, u),
        bounds=(u_min * (1 + 1e-9), 1.0 - 1e-12),
        method="bounded",
        options={"xatol": 1e-13, "maxiter": 500},
    )
    if not res.success:
        raise CavityError(f"slope minimisation failed: {res.message}")
    return res.x


def find_critical_theta(spec, drive_power, rtol=1e-10, max_iter=200):
    """Smallest theta for which the steep flank develops an infinite slope dP/dphi.

    On the steep flank dphi/dP = g(P) - theta with g > 0 independent of theta, so
    the criticality objective min_P dphi/dP is bracketed and bisected in theta.
    """
    if drive_power <= 0:
        raise CavityError("drive power must be positive")
    p_res = resonant_power(spec, drive_power)

    def objective(theta):
        u = _min_slope_fraction(spec, drive_power)
        return _dpsi_dfraction(spec, drive_power, u) / p_res - theta

    lo, hi = 0.0, 1.0 / p_res
    while objective(hi) > 0:
        hi *= 2.0
        if hi > 1e6 / p_res:
            raise CavityError(f"no critical theta below {hi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if objective(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            return 0.5 * (lo + hi)
    raise CavityError(f"critical theta bisection did not converge: bracket [{lo}, {hi}]")


def critical_fraction(spec, drive_power):
    """Power fraction P/P_res of the infinite-slope point on the critical curve."""
    return float(_min_slope_fraction(spec, drive_power))


def critical_spec(spec, drive_power):
    return spec.with_theta(find_critical_theta(spec, drive_power))


def operating_point_for_fraction(spec, drive_power, fraction, branch="low"):
    """Operating point with |E|^2 = fraction * P_res on the requested flank.

    ``branch="low"`` is the steep, self-phase-shifted flank (phi below the
    peak); ``"high"`` is the opposite flank.
    """
    if not 0.0 < fraction <= 1.0:
        raise CavityError(f"power fraction must lie in (0, 1], got {fraction}")
    if branch not in _BRANCH_SIGN:
        raise CavityError(f"unknown branch {branch!r}; available: low, high")
    rho = spec.rho
    u_min = ((1.0 - rho) / (1.0 + rho)) ** 2
    if fraction < u_min:
        raise CavityError(
            f"fraction {fraction} below anti-resonance minimum {u_min:.3e}: no branch available"
        )
    p_res = resonant_power(spec, drive_power)
    power = fraction * p_res
    psi = float(_psi_of_power(spec, drive_power, power, _BRANCH_SIGN[branch]))
    phi = psi - spec.theta * power
    e = complex(steady_field(spec, drive_power, phi, power))
    # phi may be unwrapped beyond one FSR; the exp() is periodic so e is unaffected
    res = fixed_point_residual(spec, drive_power, phi, e)
    if res > 1e-10 * math.sqrt(drive_power):
        raise CavityError(f"steady-state residual {res:.3e} too large")
    return OperatingPoint(
        phi=float(phi),
        intracavity_power=abs(e) ** 2,
        power_fraction=abs(e) ** 2 / p_res,
        steady_field=e,
        drive_power=drive_power,
        branch=branch,
    )


def critical_operating_point(spec, drive_power):
    """Critical point of a cavity already set to theta = theta_crit."""
    return operating_point_for_fraction(spec, drive_power, critical_fraction(spec, drive_power))


def airy_power(spec, drive_power, phi):
    """Linear (theta = 0) intra-cavity power versus detuning."""
    rho = spec.rho
    return spec.tau_c**2 * drive_power / np.abs(1.0 - rho * np.exp(2j * np.asarray(phi))) ** 2
