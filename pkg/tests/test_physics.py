"""Physics-core: Bragg geometry, emission angles, suppression, acceptance."""

import math

import numpy as np
import pytest
from scipy.optimize import fsolve

from xpdc.physics import (
    ChainEfficiencyModel,
    CrystalConfig,
    DEG,
    DetectorGeometry,
    HC_EV_ANGSTROM,
    MDEG,
    PhaseMatchingError,
    PhysicsError,
    ReflectionUnreachableError,
    bragg_angle,
    detection_chain_efficiency,
    emission_angle_approx,
    emission_angles_exact,
    geometric_acceptance,
    polarization_suppression,
)

THETA_B_REF = math.radians(84.1) / 2  # the reference setup angle


class TestBraggAngle:
    def test_reference_point_diamond_660(self):
        # 22 keV on diamond (660); the published setup quotes 84.1 deg,
        # which the tabulated lattice constant reproduces to 0.1 deg.
        theta = bragg_angle(22000.0, CrystalConfig())
        assert abs(2 * theta / DEG - 84.1) < 0.1

    def test_edge_wavelength_equals_2d(self):
        crystal = CrystalConfig()
        energy = HC_EV_ANGSTROM / (2 * crystal.d_spacing_angstrom)
        assert bragg_angle(energy, crystal) == pytest.approx(math.pi / 2)

    def test_unreachable_reflection_raises(self):
        # 11 keV: lambda = 1.127 A exceeds 2d = 0.841 A for diamond (660)
        crystal = CrystalConfig()
        assert HC_EV_ANGSTROM / 11000.0 > 2 * crystal.d_spacing_angstrom
        with pytest.raises(ReflectionUnreachableError):
            bragg_angle(11000.0, crystal)

    def test_monotone_decreasing_in_energy(self):
        crystal = CrystalConfig()
        energies = np.linspace(16000.0, 40000.0, 25)
        angles = [bragg_angle(e, crystal) for e in energies]
        assert all(b < a for a, b in zip(angles, angles[1:]))

    def test_invalid_inputs(self):
        with pytest.raises(PhysicsError):
            bragg_angle(-1.0, CrystalConfig())
        with pytest.raises(PhysicsError):
            CrystalConfig(lattice_constant_angstrom=-1.0)
        with pytest.raises(PhysicsError):
            CrystalConfig(reflection=(0, 0, 0))
        with pytest.raises(PhysicsError):
            CrystalConfig(effective_rate_scale=0.0)


class TestEmissionAngleApprox:
    def test_reference_point(self):
        # R(x=0.5) at 10 mdeg detuning and 2 theta_B = 84.1 deg
        r = emission_angle_approx(0.5, 10 * MDEG, THETA_B_REF)
        assert abs(r / DEG - 1.07) < 0.01

    def test_limit_x_to_one(self):
        r = emission_angle_approx(1.0 - 1e-9, 10 * MDEG, THETA_B_REF)
        assert r < 1e-4

    def test_quarter_split_closed_form_ratio(self):
        # sqrt((1-x)/x) at x = 0.25 is sqrt(3) times the x = 0.5 value
        r_half = emission_angle_approx(0.5, 10 * MDEG, THETA_B_REF)
        r_quarter = emission_angle_approx(0.25, 10 * MDEG, THETA_B_REF)
        assert r_quarter == pytest.approx(math.sqrt(3.0) * r_half, rel=1e-12)
        assert r_quarter / DEG == pytest.approx(1.849, abs=2e-3)

    def test_negative_detuning_raises(self):
        with pytest.raises(PhaseMatchingError):
            emission_angle_approx(0.5, 0.0, THETA_B_REF)
        with pytest.raises(PhaseMatchingError):
            emission_angle_approx(0.5, -10 * MDEG, THETA_B_REF)

    def test_bad_split_raises(self):
        for x in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(PhysicsError):
                emission_angle_approx(x, 10 * MDEG, THETA_B_REF)

    def test_separability_in_x(self):
        # R(x) * sqrt(x/(1-x)) must not depend on x
        values = [
            emission_angle_approx(x, 10 * MDEG, THETA_B_REF)
            * math.sqrt(x / (1.0 - x))
            for x in np.linspace(0.05, 0.95, 37)
        ]
        assert max(values) - min(values) < 1e-14


class TestEmissionAnglesExact:
    def test_degenerate_symmetry(self):
        sol = emission_angles_exact(0.5, 10 * MDEG, THETA_B_REF)
        assert sol.r_x == pytest.approx(sol.r_y, rel=1e-14)

    def test_close_to_approx_at_reference_point(self):
        sol = emission_angles_exact(0.5, 10 * MDEG, THETA_B_REF)
        approx = emission_angle_approx(0.5, 10 * MDEG, THETA_B_REF)
        assert abs(approx - sol.r_x) / sol.r_x < 0.005

    def test_transverse_residual_restated(self):
        sol = emission_angles_exact(0.37, 25 * MDEG, THETA_B_REF)
        assert abs(sol.x * math.sin(sol.r_x) - (1 - sol.x) * math.sin(sol.r_y)) <= 1e-12

    def test_residual_bound_on_grid(self):
        for detuning in np.linspace(1, 50, 8) * MDEG:
            for x in np.linspace(0.23, 0.77, 9):
                sol = emission_angles_exact(float(x), float(detuning), THETA_B_REF)
                assert sol.residual <= 1e-12
                assert sol.r_x >= 0 and sol.r_y >= 0
                assert sol.x + sol.y == pytest.approx(1.0, abs=0)

    def test_against_independent_two_equation_solver(self):
        # Solve the raw system (transverse + longitudinal) directly with
        # a generic 2D root finder and compare.
        for x, detuning in ((0.3, 5 * MDEG), (0.5, 10 * MDEG), (0.7, 40 * MDEG)):
            y = 1.0 - x
            closure = 1.0 - detuning * math.sin(2 * THETA_B_REF)

            def system(angles):
                rx, ry = angles
                return (
                    x * math.sin(rx) - y * math.sin(ry),
                    x * math.cos(rx) + y * math.cos(ry) - closure,
                )

            guess = emission_angle_approx(x, detuning, THETA_B_REF)
            rx_ref, ry_ref = fsolve(system, (guess, guess), full_output=False)
            sol = emission_angles_exact(x, detuning, THETA_B_REF)
            assert sol.r_x == pytest.approx(abs(rx_ref), rel=1e-9)
            assert sol.r_y == pytest.approx(abs(ry_ref), rel=1e-9)

    def test_unreachable_raises(self):
        with pytest.raises(PhaseMatchingError):
            emission_angles_exact(0.5, -10 * MDEG, THETA_B_REF)
        # Extreme detuning with an asymmetric split: closure too short.
        with pytest.raises(PhaseMatchingError):
            emission_angles_exact(0.95, 0.9, THETA_B_REF)


class TestPolarizationSuppression:
    def test_full_suppression_at_right_angle(self):
        assert polarization_suppression(math.pi / 4, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_no_suppression_out_of_plane(self):
        assert polarization_suppression(THETA_B_REF, math.pi / 2) == pytest.approx(1.0)

    def test_reference_geometry(self):
        value = polarization_suppression(THETA_B_REF, 0.0)
        assert value == pytest.approx(1.0 - math.sin(math.radians(84.1)) ** 2, rel=1e-12)
        assert abs(value - 0.0105) < 5e-4

    def test_periodic_in_chi_with_minimum_at_zero(self):
        chis = np.linspace(-math.pi, math.pi, 101)
        values = [polarization_suppression(THETA_B_REF, c) for c in chis]
        shifted = [polarization_suppression(THETA_B_REF, c + math.pi) for c in chis]
        assert np.allclose(values, shifted, atol=1e-12)
        assert min(values) == pytest.approx(
            polarization_suppression(THETA_B_REF, 0.0), abs=1e-12
        )


class TestGeometricAcceptance:
    def test_reference_ring(self):
        # w / (2 pi r) with r = 1351 mm * tan(1.07 deg)
        det = DetectorGeometry(distance_mm=1351.0, active_area_mm2=50.0)
        frac, resolved = geometric_acceptance(1.07 * DEG, det)
        expected = math.sqrt(50.0) / (2 * math.pi * 1351.0 * math.tan(1.07 * DEG))
        assert resolved
        assert frac == pytest.approx(expected, rel=1e-12)
        assert frac == pytest.approx(0.0446, abs=5e-4)

    def test_doubling_angle_halves_acceptance(self):
        det = DetectorGeometry(distance_mm=1351.0)
        small, _ = geometric_acceptance(0.5 * DEG, det)
        large, _ = geometric_acceptance(1.0 * DEG, det)
        assert large == pytest.approx(small / 2, rel=1e-3)

    def test_under_resolved_ring(self):
        det = DetectorGeometry(distance_mm=100.0, active_area_mm2=400.0)
        frac, resolved = geometric_acceptance(0.05 * DEG, det)
        assert frac == 1.0
        assert not resolved

    def test_invalid_angle(self):
        with pytest.raises(PhysicsError):
            geometric_acceptance(0.0, DetectorGeometry(distance_mm=1351.0))


class TestDetectionChain:
    def test_default_pair_survival(self):
        chain = ChainEfficiencyModel()
        assert detection_chain_efficiency(11000.0, 11000.0, chain) == pytest.approx(0.18)

    def test_ideal(self):
        chain = ChainEfficiencyModel(model="ideal")
        assert detection_chain_efficiency(6000.0, 16000.0, chain) == 1.0

    def test_table_interpolation_and_monotonicity(self):
        table = ((5000.0, 0.30), (11000.0, 0.42), (17000.0, 0.50))
        chain = ChainEfficiencyModel(model="table", table=table)
        assert chain.photon_efficiency(5000.0) == pytest.approx(0.30)
        assert chain.photon_efficiency(8000.0) == pytest.approx(0.36)
        assert chain.photon_efficiency(20000.0) == pytest.approx(0.50)
        energies = np.linspace(5000.0, 17000.0, 49)
        effs = [chain.photon_efficiency(e) for e in energies]
        assert all(b >= a for a, b in zip(effs, effs[1:]))
        pair = detection_chain_efficiency(8000.0, 14000.0, chain)
        assert pair == pytest.approx(0.36 * chain.photon_efficiency(14000.0))

    def test_decreasing_table_rejected(self):
        with pytest.raises(PhysicsError):
            ChainEfficiencyModel(
                model="table", table=((5000.0, 0.5), (17000.0, 0.3))
            )

    def test_energy_bounds(self):
        chain = ChainEfficiencyModel()
        with pytest.raises(PhysicsError):
            detection_chain_efficiency(0.0, 11000.0, chain)
        with pytest.raises(PhysicsError):
            detection_chain_efficiency(11000.0, 23000.0, chain)


class TestApproxVsExactProperty:
    def test_one_percent_band_coarse_grid(self):
        # The full 50x50 grid runs in the acceptance suite; keep a
        # coarser sweep here for fast feedback.
        worst = 0.0
        for detuning in np.linspace(1, 50, 15) * MDEG:
            for x in np.linspace(0.23, 0.77, 15):
                approx = emission_angle_approx(float(x), float(detuning), THETA_B_REF)
                exact = emission_angles_exact(float(x), float(detuning), THETA_B_REF)
                worst = max(worst, abs(approx - exact.r_x) / exact.r_x)
        assert worst < 0.01
