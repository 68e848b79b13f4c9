import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from conftest import DRIVE, make_cavity
from knlc import cavity
from knlc.cavity import CavityError, CavitySpec, KerrMediumSpec


def _root_count(spec, phi, powers):
    # sign changes of P |1 - rho exp(2i(phi + theta P))|^2 - tau_c^2 P_in over P
    f = powers * np.abs(1 - spec.rho * np.exp(2j * (phi + spec.theta * powers))) ** 2 - spec.tau_c**2 * DRIVE
    return int(np.sum(np.signbit(f[1:]) != np.signbit(f[:-1])))


def _max_roots(spec, n_phi=1200, n_p=4000):
    p_res = cavity.resonant_power(spec, DRIVE)
    powers = np.linspace(1e-6 * p_res, p_res, n_p)
    gamma_phi = cavity.half_bandwidth(spec) * cavity.round_trip_time(spec) / 2
    # the Kerr shift at full power moves the resonance by at most theta * P_res
    phis = np.linspace(-spec.theta * p_res - 4 * gamma_phi, 4 * gamma_phi, n_phi)
    return max(_root_count(spec, phi, powers) for phi in phis)


class TestSpec:
    def test_from_power(self):
        s = CavitySpec.from_power(0.9, 0.01, 0.5)
        assert s.rho_c**2 == pytest.approx(0.9)
        assert s.l_rt**2 == pytest.approx(0.01)
        assert s.tau_end == s.l_rt

    def test_escape_efficiency_roundtrip(self):
        for eta in (0.55, 0.75, 0.9, 0.999, 1.0):
            assert cavity.escape_efficiency(make_cavity(eta)) == pytest.approx(eta, rel=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(rho_c=1.2, tau_c=0.1, rho_end=1.0, l_rt=0.0, length_L=1.0),
            dict(rho_c=0.9, tau_c=0.9, rho_end=1.0, l_rt=0.0, length_L=1.0),
            dict(rho_c=0.9, tau_c=math.sqrt(0.19), rho_end=0.8, l_rt=0.6, length_L=1.0),
            dict(rho_c=0.9, tau_c=math.sqrt(0.19), rho_end=1.0, l_rt=0.0, length_L=-1.0),
            dict(rho_c=0.9, tau_c=math.sqrt(0.19), rho_end=1.0, l_rt=0.0, length_L=1.0, theta=-1.0),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(CavityError):
            CavitySpec(**kwargs)

    def test_kerr_medium(self):
        m = KerrMediumSpec(2.5e-20, 0.01, 1e-10, 1.77e15)
        assert m.theta == pytest.approx(2.5e-20 * 1.77e15 * 0.01 / (2e-10 * cavity.SPEED_OF_LIGHT))
        with pytest.raises(CavityError):
            KerrMediumSpec(0.0, 0.01, 1e-10, 1.77e15)

    def test_half_bandwidth_is_half_power_point(self):
        s = make_cavity(0.9)
        gamma = cavity.half_bandwidth(s)
        phi = gamma * cavity.round_trip_time(s) / 2
        ratio = cavity.airy_power(s, DRIVE, phi) / cavity.airy_power(s, DRIVE, 0.0)
        assert ratio == pytest.approx(0.5, rel=1e-12)

    def test_length_for_half_bandwidth(self):
        s = make_cavity(0.9)
        length = cavity.length_for_half_bandwidth(s, 2 * math.pi * 4.5e6)
        s2 = CavitySpec(s.rho_c, s.tau_c, s.rho_end, s.l_rt, length)
        assert cavity.half_bandwidth(s2) == pytest.approx(2 * math.pi * 4.5e6, rel=1e-12)


class TestResonance:
    def test_linear_curve_matches_airy(self, lossless):
        p_res = cavity.resonant_power(lossless, DRIVE)
        curve = cavity.solve_resonance_curve(lossless, DRIVE, np.linspace(0.05, 1.0, 50) * p_res)
        assert np.allclose(cavity.airy_power(lossless, DRIVE, curve.phi), curve.power, rtol=1e-10)

    def test_resonant_power(self):
        s = make_cavity(0.9)
        assert cavity.airy_power(s, DRIVE, 0.0) == pytest.approx(cavity.resonant_power(s, DRIVE), rel=1e-14)

    def test_fixed_point_on_kerr_curve(self, lossy_critical):
        p_res = cavity.resonant_power(lossy_critical, DRIVE)
        curve = cavity.solve_resonance_curve(lossy_critical, DRIVE, np.linspace(0.02, 1.0, 200) * p_res)
        for phi, p in zip(curve.phi, curve.power):
            e = cavity.steady_field(lossy_critical, DRIVE, phi, p)
            assert abs(e) ** 2 == pytest.approx(p, rel=1e-10)
            assert cavity.fixed_point_residual(lossy_critical, DRIVE, phi, e) < 1e-10

    def test_out_of_range_powers_omitted(self, lossless):
        p_res = cavity.resonant_power(lossless, DRIVE)
        curve = cavity.solve_resonance_curve(lossless, DRIVE, [0.5 * p_res, 2 * p_res], branches=("low",))
        assert curve.omitted == [2 * p_res]
        assert len(curve.power) == 1

    def test_bad_grid(self, lossless):
        with pytest.raises(CavityError):
            cavity.solve_resonance_curve(lossless, DRIVE, [2.0, 1.0])
        with pytest.raises(CavityError):
            cavity.solve_resonance_curve(lossless, 0.0, [1.0])


class TestCritical:
    @pytest.mark.parametrize("eta", [1.0, 0.9])
    def test_theta_crit_against_root_count(self, eta):
        base = make_cavity(eta)
        tc = cavity.find_critical_theta(base, DRIVE)
        assert _max_roots(base.with_theta(0.97 * tc)) == 1
        assert _max_roots(base.with_theta(1.03 * tc)) == 3

    def test_critical_fraction_near_three_quarters(self, lossless):
        assert cavity.critical_fraction(lossless, DRIVE) == pytest.approx(0.75, abs=0.005)

    def test_critical_fraction_from_finite_differences(self, lossy_critical):
        p_res = cavity.resonant_power(lossy_critical, DRIVE)
        u = np.linspace(0.6, 0.9, 3001)
        curve = cavity.solve_resonance_curve(lossy_critical, DRIVE, u * p_res, branches=("low",))
        slope = np.abs(np.gradient(curve.phi, curve.power))
        assert u[np.argmin(slope)] == pytest.approx(cavity.critical_fraction(lossy_critical, DRIVE), abs=2e-4)
        assert slope.min() < 1e-3 * np.abs(slope).max()

    def test_slope_sign_change_above_critical(self, lossless_critical):
        p_res = cavity.resonant_power(lossless_critical, DRIVE)
        over = lossless_critical.with_theta(1.5 * lossless_critical.theta)
        assert cavity.dphi_dpower(lossless_critical, DRIVE, 0.75 * p_res) > -1e-9
        assert cavity.dphi_dpower(over, DRIVE, 0.75 * p_res) < 0

    def test_critical_operating_point(self, lossless_critical):
        op = cavity.critical_operating_point(lossless_critical, DRIVE)
        assert op.power_fraction == pytest.approx(cavity.critical_fraction(lossless_critical, DRIVE), rel=1e-12)
        assert op.phi < 0


class TestOperatingPoint:
    def test_fraction_bounds(self, lossless):
        with pytest.raises(CavityError):
            cavity.operating_point_for_fraction(lossless, DRIVE, 1.5)
        with pytest.raises(CavityError):
            cavity.operating_point_for_fraction(lossless, DRIVE, 0.0)
        with pytest.raises(CavityError):
            cavity.operating_point_for_fraction(lossless, DRIVE, 1e-6)
        with pytest.raises(CavityError):
            cavity.operating_point_for_fraction(lossless, DRIVE, 0.5, branch="middle")

    def test_branches_mirror_at_theta_zero(self, lossless):
        lo = cavity.operating_point_for_fraction(lossless, DRIVE, 0.5, "low")
        hi = cavity.operating_point_for_fraction(lossless, DRIVE, 0.5, "high")
        assert lo.phi == pytest.approx(-hi.phi, rel=1e-12)

    def test_resonance_peak(self, lossless):
        op = cavity.operating_point_for_fraction(lossless, DRIVE, 1.0)
        assert op.phi == pytest.approx(0.0, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(
    rc=st.floats(0.5, 0.99),
    eta=st.floats(0.55, 1.0),
    mult=st.floats(0.0, 1.0),
    frac=st.floats(0.05, 1.0),
    drive=st.floats(1e-3, 10.0),
)
def test_operating_point_is_fixed_point(rc, eta, mult, frac, drive):
    base = make_cavity(eta, rc=rc)
    spec = base.with_theta(mult * cavity.find_critical_theta(base, drive))
    rho = spec.rho
    if frac < ((1 - rho) / (1 + rho)) ** 2 * 1.01:
        return
    op = cavity.operating_point_for_fraction(spec, drive, frac)
    assert op.intracavity_power == pytest.approx(frac * cavity.resonant_power(spec, drive), rel=1e-9)
    assert cavity.fixed_point_residual(spec, drive, op.phi, op.steady_field) < 1e-9 * math.sqrt(drive)


def test_theta_crit_scales_inversely_with_drive(lossless):
    a = cavity.find_critical_theta(lossless, 1.0)
    b = cavity.find_critical_theta(lossless, 2.0)
    assert a / b == pytest.approx(2.0, rel=1e-8)


def test_critical_slope_brent_consistency(lossless_critical):
    # independent: minimise the finite-difference slope of the closed-form curve
    p_res = cavity.resonant_power(lossless_critical, DRIVE)

    def slope(u):
        h = 1e-6
        c = cavity.solve_resonance_curve(lossless_critical, DRIVE, [(u - h) * p_res, (u + h) * p_res], ("low",))
        return abs(c.phi[1] - c.phi[0]) / (2 * h * p_res)

    res = optimize.minimize_scalar(slope, bounds=(0.6, 0.9), method="bounded", options={"xatol": 1e-6})
    assert res.x == pytest.approx(cavity.critical_fraction(lossless_critical, DRIVE), abs=5e-4)
