import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from conftest import DRIVE, make_cavity
from knlc import cavity
from knlc.phasespace import (
    NoiseEllipse,
    ellipse_from_spectral,
    measure_transfer,
    optimize_operating_point,
    scan_angles,
    spectral_row,
    sweep_spectrum,
    wigner_grid,
    zero_crossings,
)
from knlc.transfer import VACUUM, InputNoiseSpec, SpectralMatrix, rotation
from oracles import airy_transfer, linearized_spectral, linearized_transfer, simulate_white_noise, spectral


def _spec_of(m):
    return SpectralMatrix.from_array(m)


class TestEllipse:
    def test_vacuum(self):
        e = ellipse_from_spectral(SpectralMatrix(1.0, 1.0, 0.0))
        assert (e.var_min, e.var_max, e.angle_min) == (1.0, 1.0, 0.0)
        assert e.purity == pytest.approx(1.0)

    def test_rotated_example(self):
        r = rotation(math.radians(40))
        e = ellipse_from_spectral(_spec_of(r @ np.diag([100.0, 10.0]) @ r.T))
        assert e.var_min == pytest.approx(10.0)
        assert math.degrees(e.angle_min) == pytest.approx(-50.0)

    def test_amplitude_squeezed(self):
        e = ellipse_from_spectral(SpectralMatrix(0.1, 10.0, 0.0))
        assert e.angle_min == 0.0
        assert e.var_min == pytest.approx(0.1)

    def test_strong_antisqueezing_keeps_minor_axis(self):
        # 70 dB of anti-squeezing: mean - radius would lose most digits of var_min
        e = NoiseEllipse(1e-7, 1e7, 1e-4)
        back = ellipse_from_spectral(e.spectral_matrix())
        assert back.var_min == pytest.approx(1e-7, rel=1e-6)
        assert back.purity == pytest.approx(1.0, abs=1e-9)

    def test_phase_squeezed_angle_is_half_pi(self):
        assert ellipse_from_spectral(SpectralMatrix(10.0, 0.1, 0.0)).angle_min == pytest.approx(math.pi / 2)

    @settings(max_examples=100)
    @given(st.floats(0.01, 100), st.floats(1.01, 100), st.floats(-1.5, 1.5), st.floats(1e-3, 1e3))
    def test_roundtrip_and_scale_invariance(self, vmin, ratio, angle, scale):
        e = NoiseEllipse(vmin, vmin * ratio, angle)
        back = ellipse_from_spectral(e.spectral_matrix())
        assert back.var_min == pytest.approx(vmin, rel=1e-9)
        assert back.var_max == pytest.approx(vmin * ratio, rel=1e-9)
        assert back.angle_min == pytest.approx(angle, abs=1e-9)
        s = e.spectral_matrix()
        scaled = ellipse_from_spectral(SpectralMatrix(s.s11 * scale, s.s22 * scale, s.s12 * scale))
        assert scaled.angle_min == pytest.approx(back.angle_min, abs=1e-9)


class TestWigner:
    def test_vacuum_is_isotropic(self):
        g = wigner_grid(NoiseEllipse(1.0, 1.0, 0.0), resolution=101)
        assert np.allclose(g.values, g.values.T)
        assert g.peak == pytest.approx(1 / math.pi)
        assert g.values.max() == pytest.approx(1.0)

    def test_quadrature_integrals(self):
        e = NoiseEllipse(0.1, 10.0, 0.3)
        g = wigner_grid(e, resolution=801, normalize=False)
        dx = (g.x1[1] - g.x1[0]) * (g.x2[1] - g.x2[0])
        assert g.values.sum() * dx == pytest.approx(1.0, rel=1e-4)
        g1, g2 = np.meshgrid(g.x1, g.x2, indexing="ij")
        c, s = math.cos(e.angle_min), math.sin(e.angle_min)
        along = g1 * c + g2 * s
        # variance along the minor axis is var_min / 2 in these units
        assert (along**2 * g.values).sum() * dx == pytest.approx(e.var_min / 2, rel=1e-3)

    def test_level_set_orientation(self):
        g = wigner_grid(NoiseEllipse(0.1, 10.0, 0.0), resolution=201)
        centre = 100
        # narrow along x1 (minimum-noise quadrature), wide along x2
        assert np.sum(g.values[:, centre] > 0.5) < np.sum(g.values[centre, :] > 0.5)

    def test_bounds_and_resolution(self):
        g = wigner_grid(NoiseEllipse(1.0, 4.0, 0.0), bounds=(-1, 1, -2, 2), resolution=(3, 5))
        assert g.resolution == (3, 5)
        assert g.bounds == (-1.0, 1.0, -2.0, 2.0)
        with pytest.raises(ValueError):
            wigner_grid(NoiseEllipse(1.0, 1.0, 0.0), resolution=1)
        with pytest.raises(ValueError):
            wigner_grid(NoiseEllipse(0.0, 1.0, 0.0))


class TestTransferAgainstOracles:
    @pytest.mark.parametrize("phi_over_gamma", [0.0, 0.4, -1.3])
    def test_linear_cavity_is_airy(self, phi_over_gamma):
        spec = make_cavity(0.9)
        gamma = cavity.half_bandwidth(spec)
        phi = phi_over_gamma * gamma * cavity.round_trip_time(spec) / 2
        frac = cavity.airy_power(spec, DRIVE, phi) / cavity.resonant_power(spec, DRIVE)
        op = cavity.operating_point_for_fraction(spec, DRIVE, frac, "low" if phi <= 0 else "high")
        for w in (0.02, 0.5, 4.0):
            m = measure_transfer(spec, op, w * gamma)
            want = airy_transfer(spec, m.omega, op.phi)
            assert np.abs(m.coupler.matrix - want).max() < 1e-8 * np.abs(want).max()

    def test_lossless_resonant_linear_keeps_noise(self, lossless):
        op = cavity.operating_point_for_fraction(lossless, DRIVE, 1.0)
        m = measure_transfer(lossless, op, 0.3 * cavity.half_bandwidth(lossless))
        s, _ = spectral_row(m, InputNoiseSpec.from_db(20, 10, 40))
        r = rotation(math.radians(40))
        assert np.allclose(s.array, r @ np.diag([100.0, 10.0]) @ r.T, rtol=1e-7)

    @pytest.mark.parametrize("w", [0.01, 0.1, 1.0, 5.0])
    @pytest.mark.parametrize("frac", [0.5, 0.75, 0.9])
    def test_kerr_cavity_matches_linearisation(self, lossy_critical, w, frac):
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, frac)
        gamma = cavity.half_bandwidth(lossy_critical)
        m = measure_transfer(lossy_critical, op, w * gamma)
        t, l = linearized_transfer(lossy_critical, op, m.omega)
        assert np.abs(m.coupler.matrix - t).max() < 1e-3 * np.abs(t).max()
        assert np.allclose(spectral(m.loss.matrix), spectral(l), rtol=1e-3, atol=1e-3 * np.abs(spectral(l)).max())

    def test_loss_vacuum_needs_no_reference_axis(self, lossy_critical):
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, 0.6)
        m = measure_transfer(lossy_critical, op, 0.2 * cavity.half_bandwidth(lossy_critical))
        for ang in (0.3, 1.2):
            turned = m.loss.matrix @ rotation(ang)
            assert np.allclose(spectral(turned), spectral(m.loss.matrix), rtol=1e-12)

    def test_monte_carlo_normalisation(self, lossy_critical):
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, 0.7)
        gamma = cavity.half_bandwidth(lossy_critical)
        t_rt = cavity.round_trip_time(lossy_critical)
        x = simulate_white_noise(lossy_critical, op, 1 << 21, seed=3)
        nper = 1 << 13
        f, p11 = signal.welch(x[:, 0], fs=1.0, nperseg=nper)
        _, p22 = signal.welch(x[:, 1], fs=1.0, nperseg=nper)
        _, p12 = signal.csd(x[:, 0], x[:, 1], fs=1.0, nperseg=nper)
        white = 2.0  # one-sided density of unit-variance white noise at fs = 1
        target = 0.5 * gamma * t_rt / (2 * math.pi)
        sel = np.abs(f - target) <= 3 * f[1]
        mc = np.array([[p11[sel].mean(), p12[sel].real.mean()], [p12[sel].real.mean(), p22[sel].mean()]]) / white
        m = measure_transfer(lossy_critical, op, 0.5 * gamma)
        s, _ = spectral_row(m)
        assert np.abs(mc - s.array).max() < 0.05 * np.abs(s.array).max()


class TestModulationDepth:
    def test_depth_reduced_until_linear(self, lossless_critical):
        op = cavity.critical_operating_point(lossless_critical, DRIVE)
        w = 0.001 * cavity.half_bandwidth(lossless_critical)
        m = measure_transfer(lossless_critical, op, w)
        assert m.attempts[0][0] == 1e-6 and m.attempts[0][1] > 1e-4
        assert m.linearity <= 1e-4
        assert m.mod_ratio == m.attempts[-1][0] < 1e-6
        s, e = spectral_row(m)
        assert s.satisfies_heisenberg()
        assert e.purity == pytest.approx(1.0, abs=1e-6)

    def test_disabled_keeps_requested_depth(self, lossless_critical):
        op = cavity.critical_operating_point(lossless_critical, DRIVE)
        w = 0.001 * cavity.half_bandwidth(lossless_critical)
        m = measure_transfer(lossless_critical, op, w, linearity_limit=None)
        assert len(m.attempts) == 1 and m.mod_ratio == 1e-6
        assert m.linearity > 1e-4

    def test_linear_run_single_attempt(self, lossy_critical):
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, 0.5)
        m = measure_transfer(lossy_critical, op, 0.5 * cavity.half_bandwidth(lossy_critical))
        assert len(m.attempts) == 1


class TestSweep:
    def test_table_and_physicality(self, lossy_critical):
        gamma = cavity.half_bandwidth(lossy_critical)
        op = cavity.critical_operating_point(lossy_critical, DRIVE)
        noise = InputNoiseSpec.from_db(10, 3, 20)
        grid = gamma * np.array([1.0, 0.03, 0.3])
        table = sweep_spectrum(lossy_critical, op, noise, grid)
        assert np.all(np.diff(table.omega_over_gamma) > 0)
        assert len(table) == 3
        for i in range(3):
            s = SpectralMatrix(table.s11[i], table.s22[i], table.s12[i])
            assert s.satisfies_heisenberg()
            want = linearized_spectral(
                lossy_critical, op, table.omega_over_gamma[i] * gamma, rotation(noise.vartheta) @ np.diag([noise.s1, noise.s2])
            )
            assert s.array == pytest.approx(want, rel=2e-3)
        assert np.all(np.abs(np.diff(table.angle_unwrapped)) < math.pi / 2)

    def test_threads_give_same_table(self, lossy_critical):
        gamma = cavity.half_bandwidth(lossy_critical)
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, 0.6)
        grid = gamma * np.array([0.1, 1.0])
        a = sweep_spectrum(lossy_critical, op, VACUUM, grid)
        b = sweep_spectrum(lossy_critical, op, VACUUM, grid, threads=2)
        assert np.array_equal(a.s11, b.s11)

    def test_empty_grid(self, lossy_critical):
        op = cavity.operating_point_for_fraction(lossy_critical, DRIVE, 0.6)
        with pytest.raises(ValueError):
            sweep_spectrum(lossy_critical, op, VACUUM, [])

    def test_lossless_critical_amplitude_squeezed_at_low_frequency(self, lossless_critical):
        op = cavity.critical_operating_point(lossless_critical, DRIVE)
        m = measure_transfer(lossless_critical, op, 0.03 * cavity.half_bandwidth(lossless_critical))
        _, e = spectral_row(m)
        assert abs(e.angle_min) < math.radians(5)
        assert e.var_min < 0.1


class TestOptimizer:
    def test_zero_crossings(self):
        f = [0.1, 0.2, 0.3, 0.4, 0.5]
        a = [0.3, -0.2, math.nan, 0.1, -1.5]
        assert zero_crossings(f, a) == [(0.1, 0.2)]
        assert zero_crossings([0.1, 0.2], [1.5, -1.5]) == []
        assert zero_crossings([0.1, 0.2], [0.0, 0.3]) == [(0.1, 0.1)]

    def test_crossing_refined_and_stable(self, lossy_critical):
        gamma = cavity.half_bandwidth(lossy_critical)
        coarse = optimize_operating_point(lossy_critical, DRIVE, 0.1 * gamma, fractions=np.arange(0.25, 0.99, 0.02))
        fine = optimize_operating_point(lossy_critical, DRIVE, 0.1 * gamma)
        assert abs(fine.angle) < 1e-4
        assert fine.note == ""
        assert coarse.operating_point.power_fraction == pytest.approx(fine.operating_point.power_fraction, abs=1e-6)
        assert len(fine.crossings) == 2

    def test_no_crossing_falls_back_to_critical(self, lossy_critical):
        gamma = cavity.half_bandwidth(lossy_critical)
        res = optimize_operating_point(lossy_critical, DRIVE, 0.1 * gamma, fractions=[0.3, 0.4])
        assert res.crossings == ()
        assert "critical" in res.note
        assert res.operating_point.power_fraction == pytest.approx(cavity.critical_fraction(lossy_critical, DRIVE))

    def test_scan_skips_unconverged(self, lossy_critical, caplog):
        gamma = cavity.half_bandwidth(lossy_critical)
        angles = scan_angles(lossy_critical, DRIVE, 0.1 * gamma, [0.5, 0.6], max_warmup=100)
        assert np.all(np.isnan(angles))
