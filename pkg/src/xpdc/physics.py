"""
Closed-form and numerically solved geometry of near-Bragg parametric
down-conversion: Bragg angles, pair emission angles (small-angle formula
and exact momentum-closure solver), polarization suppression of elastic
and Compton background, thin-ring geometric acceptance, and the
detection-chain efficiency model.

Conventions: energies in eV, angles in radians, lengths in mm (lattice
constants in Angstrom), rates per second.  All functions here are pure
and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy.optimize import brentq

# hc in eV*Angstrom (CODATA 2018)
HC_EV_ANGSTROM = 12398.419843320026

DEG = math.pi / 180.0
MDEG = 1e-3 * DEG
FWHM_OVER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class PhysicsError(ValueError):
    """Invalid physical input (violated precondition)."""


class ReflectionUnreachableError(PhysicsError):
    """Bragg condition cannot be met: wavelength exceeds 2d."""


class PhaseMatchingError(PhysicsError):
    """No real emission-angle solution for the requested split/detuning."""


@dataclass(frozen=True)
class CrystalConfig:
    """Crystal, reflection and detuning state.

    detuning_rad is signed: positive opens the down-conversion cone,
    negative (or zero) makes pair emission impossible.
    effective_rate_scale is a stand-in for crystal-quality effects that
    reduce the usable thickness; it multiplies the configured pair rate.
    """

    lattice_constant_angstrom: float = 3.5668  # diamond, cubic
    reflection: tuple[int, int, int] = (6, 6, 0)
    detuning_rad: float = 10e-3 * DEG
    effective_rate_scale: float = 1.0

    def __post_init__(self):
        if self.lattice_constant_angstrom <= 0:
            raise PhysicsError("lattice constant must be > 0")
        if tuple(self.reflection) == (0, 0, 0):
            raise PhysicsError("reflection (0,0,0) has no lattice vector")
        if not 0.0 < self.effective_rate_scale <= 1.0:
            raise PhysicsError("effective_rate_scale must be in (0, 1]")

    @property
    def d_spacing_angstrom(self) -> float:
        h, k, l = self.reflection
        return self.lattice_constant_angstrom / math.sqrt(h * h + k * k + l * l)


@dataclass(frozen=True)
class BeamConfig:
    """Pump beam: energy, bandwidth, flux and polarization plane angle.

    polarization_angle_rad is the angle chi between the scattering plane
    and the pump polarization; chi = 0 puts the detectors in the
    polarization plane (maximum background suppression).
    """

    pump_energy_ev: float = 22000.0
    bandwidth_fwhm_ev: float = 2.9
    incident_rate_per_s: float = 0.98e13
    polarization_angle_rad: float = 0.0

    def __post_init__(self):
        if self.pump_energy_ev <= 0:
            raise PhysicsError("pump energy must be > 0")
        if self.incident_rate_per_s < 0:
            raise PhysicsError("incident rate must be >= 0")
        if self.bandwidth_fwhm_ev < 0:
            raise PhysicsError("bandwidth must be >= 0")


@dataclass(frozen=True)
class DetectorGeometry:
    """One energy-resolving detector: distance, area and angular position.

    center_angle_offset_rad is the detector center's angle from the Laue
    (diffracted-beam) direction, i.e. the ring radius it is aimed at.
    """

    distance_mm: float
    active_area_mm2: float = 50.0
    center_angle_offset_rad: float = 0.0
    in_plane: bool = True

    def __post_init__(self):
        if self.distance_mm <= 0:
            raise PhysicsError("detector distance must be > 0")
        if self.active_area_mm2 <= 0:
            raise PhysicsError("detector active area must be > 0")

    @property
    def side_mm(self) -> float:
        """Linear extent w = sqrt(area) used by the thin-ring model."""
        return math.sqrt(self.active_area_mm2)

    @property
    def half_extent_rad(self) -> float:
        """Angular half-extent of the detector seen from the crystal."""
        return 0.5 * self.side_mm / self.distance_mm


@dataclass(frozen=True)
class EmissionSolution:
    """Exact pair emission solution for an energy split x + y = 1.

    r_x and r_y are the signal/idler angular offsets from the Laue
    direction.  residual is the transverse momentum-closure defect
    |x sin(r_x) - y sin(r_y)| and must be <= 1e-12.
    """

    x: float
    y: float
    r_x: float
    r_y: float
    residual: float


def bragg_angle(pump_energy_ev: float, crystal: CrystalConfig) -> float:
    """Bragg angle theta_B for the crystal's reflection at a pump energy.

    Parameters
    ----------
    pump_energy_ev : float
        Photon energy in eV.
    crystal : CrystalConfig

    Returns
    -------
    float
        theta_B in radians, with sin(theta_B) = lambda / (2 d_hkl).

    Raises
    ------
    ReflectionUnreachableError
        If lambda > 2 d_hkl, i.e. the photon energy is too low for this
        reflection.
    """
    if pump_energy_ev <= 0:
        raise PhysicsError("pump energy must be > 0")
    wavelength = HC_EV_ANGSTROM / pump_energy_ev
    two_d = 2.0 * crystal.d_spacing_angstrom
    if wavelength > two_d:
        raise ReflectionUnreachableError(
            f"reflection {crystal.reflection} unreachable: lambda = "
            f"{wavelength:.4f} A > 2d = {two_d:.4f} A"
        )
    return math.asin(wavelength / two_d)


def emission_angle_approx(x: float, detuning_rad: float, theta_b_rad: float) -> float:
    """Small-angle emission offset R(x) from the Laue direction.

    R(x) = sqrt(2 * detuning * ((1-x)/x) * sin(2 theta_B)) for a signal
    photon carrying energy fraction x of the pump.

    Parameters
    ----------
    x : float
        Signal energy fraction, 0 < x < 1.
    detuning_rad : float
        Crystal rotation away from the exact Bragg condition; must be > 0.
    theta_b_rad : float
        Bragg angle.

    Returns
    -------
    float
        R(x) in radians.
    """
    _check_split(x)
    if detuning_rad <= 0:
        raise PhaseMatchingError("detuning must be > 0 for a real emission cone")
    return math.sqrt(2.0 * detuning_rad * ((1.0 - x) / x) * math.sin(2.0 * theta_b_rad))


def emission_angles_exact(
    x: float, detuning_rad: float, theta_b_rad: float
) -> EmissionSolution:
    """Solve the full momentum-closure system for the pair emission angles.

    Solves, without small-angle approximation,

        x sin(r_x) = (1-x) sin(r_y)                      (transverse)
        x cos(r_x) + (1-x) cos(r_y) = 1 - dk             (longitudinal)

    with dk = detuning * sin(2 theta_B), by eliminating r_y through the
    transverse condition and bracketed root search on r_x.  The
    longitudinal closure is converged to |defect| <= 1e-12.

    Returns
    -------
    EmissionSolution

    Raises
    ------
    PhaseMatchingError
        If detuning <= 0 or no real solution exists.
    """
    _check_split(x)
    if detuning_rad <= 0:
        raise PhaseMatchingError("detuning must be > 0 for a real emission cone")
    y = 1.0 - x
    closure = 1.0 - detuning_rad * math.sin(2.0 * theta_b_rad)
    if closure <= abs(x - y):
        raise PhaseMatchingError(
            "phase-matching unreachable: longitudinal closure "
            f"{closure:.6g} below the minimum {abs(x - y):.6g} for x = {x:.4g}"
        )

    def defect(r_x: float) -> float:
        s = x * math.sin(r_x)
        return x * math.cos(r_x) + math.sqrt(max(y * y - s * s, 0.0)) - closure

    # defect(0) = detuning * sin(2 theta_B) > 0 and defect decreases
    # monotonically to the bracket end, so the root is unique.
    r_max = math.asin(y / x) if x > y else 0.5 * math.pi
    if defect(r_max) > 0.0:
        raise PhaseMatchingError("phase-matching unreachable: no real emission angle")
    r_x = brentq(defect, 0.0, r_max, xtol=1e-16, rtol=8.9e-16, maxiter=200)
    r_y = math.asin(min(1.0, x * math.sin(r_x) / y))
    residual = abs(x * math.sin(r_x) - y * math.sin(r_y))
    if abs(defect(r_x)) > 1e-12 or residual > 1e-12:
        raise PhaseMatchingError("emission-angle solver failed to converge")
    return EmissionSolution(x=x, y=y, r_x=r_x, r_y=r_y, residual=residual)


def polarization_suppression(theta_b_rad: float, chi_rad: float) -> float:
    """Elastic/Compton intensity ratio I/I0 = 1 - sin^2(2 theta_B) cos^2(chi).

    Returns the surviving fraction of polarization-sensitive scattering
    toward a detector at scattering angle 2 theta_B when the pump
    polarization makes angle chi with the scattering plane.
    """
    value = 1.0 - (math.sin(2.0 * theta_b_rad) ** 2) * (math.cos(chi_rad) ** 2)
    return min(1.0, max(0.0, value))


def geometric_acceptance(
    emission_angle_rad: float, detector: DetectorGeometry
) -> tuple[float, bool]:
    """Azimuthal fraction of the emission ring intercepted by a detector.

    Thin-ring model: the ring of radius r = distance * tan(R) meets a
    detector of linear extent w = sqrt(area) over an arc w, giving the
    fraction w / (2 pi r), clamped to 1.

    Returns
    -------
    (fraction, ring_resolved) : tuple[float, bool]
        ring_resolved is False when r <= w/2 (ring smaller than the
        detector, fraction forced to 1).
    """
    if emission_angle_rad <= 0:
        raise PhysicsError("emission angle must be > 0")
    ring_radius = detector.distance_mm * math.tan(emission_angle_rad)
    w = detector.side_mm
    if ring_radius <= 0.5 * w:
        return 1.0, False
    return min(1.0, w / (2.0 * math.pi * ring_radius)), True


@dataclass(frozen=True)
class ChainEfficiencyModel:
    """Survival probability of down-converted photons on the way to a count.

    Covers everything between emission and a recorded event: air path,
    window transmission and detector quantum efficiency.  Models:

    - "constant": a flat pair survival probability (default 0.18); the
      per-photon probability is its square root.
    - "ideal": no losses.
    - "table": per-photon survival vs energy, linearly interpolated
      between (energy_ev, efficiency) points supplied by the user; must
      be non-decreasing over 5-17 keV where attenuation falls with
      energy.
    """

    model: str = "constant"
    pair_efficiency: float = 0.18
    table: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if self.model not in ("constant", "ideal", "table"):
            raise PhysicsError(f"unknown chain-efficiency model {self.model!r}")
        if self.model == "constant" and not 0.0 < self.pair_efficiency <= 1.0:
            raise PhysicsError("pair efficiency must be in (0, 1]")
        if self.model == "table":
            if len(self.table) < 2:
                raise PhysicsError("table model needs at least two points")
            energies = [e for e, _ in self.table]
            effs = [v for _, v in self.table]
            if sorted(energies) != energies:
                raise PhysicsError("table energies must be ascending")
            if any(not 0.0 < v <= 1.0 for v in effs):
                raise PhysicsError("table efficiencies must be in (0, 1]")
            in_band = [v for e, v in self.table if 5000.0 <= e <= 17000.0]
            if any(b < a for a, b in zip(in_band, in_band[1:])):
                raise PhysicsError(
                    "table efficiency must be non-decreasing over 5-17 keV"
                )

    def photon_efficiency(self, energy_ev: float) -> float:
        """Survival probability for one photon of the given energy."""
        if self.model == "ideal":
            return 1.0
        if self.model == "constant":
            return math.sqrt(self.pair_efficiency)
        pts = self.table
        if energy_ev <= pts[0][0]:
            return pts[0][1]
        if energy_ev >= pts[-1][0]:
            return pts[-1][1]
        for (e0, v0), (e1, v1) in zip(pts, pts[1:]):
            if e0 <= energy_ev <= e1:
                t = (energy_ev - e0) / (e1 - e0)
                return v0 + t * (v1 - v0)
        raise AssertionError("unreachable")


def detection_chain_efficiency(
    signal_energy_ev: float,
    idler_energy_ev: float,
    chain: ChainEfficiencyModel,
    pump_energy_ev: float = 22000.0,
) -> float:
    """Combined survival probability for both members of a pair.

    Parameters
    ----------
    signal_energy_ev, idler_energy_ev : float
        Photon energies; both must lie in (0, pump_energy_ev).
    chain : ChainEfficiencyModel
    pump_energy_ev : float
        Used only to validate the inputs.
    """
    for e in (signal_energy_ev, idler_energy_ev):
        if not 0.0 < e < pump_energy_ev:
            raise PhysicsError("photon energies must be in (0, pump energy)")
    return chain.photon_efficiency(signal_energy_ev) * chain.photon_efficiency(
        idler_energy_ev
    )


def _check_split(x: float) -> None:
    if not 0.0 < x < 1.0:
        raise PhysicsError(f"energy fraction x must be in (0, 1), got {x}")
