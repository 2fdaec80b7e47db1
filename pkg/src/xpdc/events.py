"""
Monte Carlo generation of timestamped, energy-tagged photon event streams
for the two coincidence detectors: down-converted pairs, fluorescence
lines, Compton and elastic background, detector response, and
beam-current drift.

The output of a run is a pair of time-ordered structured arrays with
fields (detector_id, timestamp_ns, energy_ev) plus a manifest of ground
truth counts.  Everything is driven by one 64-bit seed; identical
(config, seed) gives bit-identical streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .physics import (
    BeamConfig,
    ChainEfficiencyModel,
    CrystalConfig,
    DetectorGeometry,
    FWHM_OVER_SIGMA,
    PhysicsError,
    bragg_angle,
    emission_angles_exact,
    polarization_suppression,
)

# On-disk and in-memory event layout; packed to 13 bytes, little endian.
EVENT_DTYPE = np.dtype(
    [("detector_id", "<u1"), ("timestamp_ns", "<u8"), ("energy_ev", "<u4")]
)


class EventRecord(NamedTuple):
    """One recorded photon after detector response."""

    detector_id: int
    timestamp_ns: int
    energy_ev: int


class TruePhoton(NamedTuple):
    """A photon before detector response: exact time and energy."""

    detector_id: int
    time_ns: float
    energy_ev: float


class ConfigError(ValueError):
    """Invalid run or experiment configuration."""


@dataclass(frozen=True)
class GaussianLine:
    """One background component: Gaussian energy profile at a fixed rate."""

    label: str
    center_ev: float
    fwhm_ev: float
    rate_per_s: float
    # Polarization-sensitive components (elastic, Compton) are scaled by
    # the suppression factor; isotropic fluorescence is not.
    suppressed: bool = False

    def __post_init__(self):
        if self.rate_per_s < 0:
            raise ConfigError(f"background rate for {self.label!r} must be >= 0")
        if self.center_ev <= 0 or self.fwhm_ev < 0:
            raise ConfigError(f"bad line shape for {self.label!r}")


@dataclass(frozen=True)
class SourceModel:
    """True pair rate plus per-detector background components.

    true_pair_rate_per_s counts pairs emitted into the full azimuthal
    ring with energy splits inside the configured split window.
    background_lines / compton_hump / elastic_line are per-detector
    tuples (detector 1, detector 2).
    """

    true_pair_rate_per_s: float = 18900.0 / 3600.0
    background_lines: tuple[tuple[GaussianLine, ...], tuple[GaussianLine, ...]] = (
        (),
        (),
    )
    compton_hump: tuple[GaussianLine | None, GaussianLine | None] = (None, None)
    elastic_line: tuple[GaussianLine | None, GaussianLine | None] = (None, None)

    def __post_init__(self):
        if self.true_pair_rate_per_s < 0:
            raise ConfigError("pair rate must be >= 0")

    def components(self, detector_index: int) -> tuple[GaussianLine, ...]:
        """All background components for detector index 0 or 1."""
        parts = list(self.background_lines[detector_index])
        for maybe in (
            self.compton_hump[detector_index],
            self.elastic_line[detector_index],
        ):
            if maybe is not None:
                parts.append(maybe)
        return tuple(parts)


@dataclass(frozen=True)
class DetectorResponse:
    """Recording chain: energy resolution, time jitter, clock, range."""

    energy_resolution_fwhm_ev: float = 150.0
    time_jitter_sigma_ns: float = 150.0
    clock_tick_ns: int = 20
    energy_range_ev: tuple[float, float] = (1000.0, 30000.0)
    dead_time_ns: float = 0.0  # non-paralyzable; 0 disables

    def __post_init__(self):
        if self.energy_resolution_fwhm_ev < 0 or self.time_jitter_sigma_ns < 0:
            raise ConfigError("response widths must be >= 0")
        if self.clock_tick_ns <= 0:
            raise ConfigError("clock tick must be > 0")
        lo, hi = self.energy_range_ev
        if not 0 < lo < hi:
            raise ConfigError("energy range must satisfy 0 < min < max")
        if self.dead_time_ns < 0:
            raise ConfigError("dead time must be >= 0")


@dataclass(frozen=True)
class BeamCurrentProfile:
    """Piecewise-constant relative beam current over the run.

    Segments of equal duration span the run; values are normalized to a
    mean of 1 at construction so configured rates refer to the mean
    current.
    """

    values: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.values or any(v <= 0 for v in self.values):
            raise ConfigError("beam current values must be > 0")
        mean = sum(self.values) / len(self.values)
        object.__setattr__(self, "values", tuple(v / mean for v in self.values))

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values)

    def segments(self, duration_s: float) -> list[tuple[float, float, float]]:
        """(t_start_s, t_end_s, relative_value) covering [0, duration)."""
        n = len(self.values)
        seg = duration_s / n
        return [(i * seg, (i + 1) * seg, v) for i, v in enumerate(self.values)]


@dataclass(frozen=True)
class ExperimentModel:
    """Everything the sampler needs: crystal, beam, detectors, source,
    response and efficiency chain."""

    crystal: CrystalConfig = field(default_factory=CrystalConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    detectors: tuple[DetectorGeometry, DetectorGeometry] = (
        DetectorGeometry(distance_mm=1351.0),
        DetectorGeometry(distance_mm=1560.0),
    )
    source: SourceModel = field(default_factory=SourceModel)
    response: DetectorResponse = field(default_factory=DetectorResponse)
    chain: ChainEfficiencyModel = field(default_factory=ChainEfficiencyModel)
    # Energy-split sampling window; None derives it from the detector
    # radial spans (see split_window()).
    split_window_x: tuple[float, float] | None = None

    def theta_b(self) -> float:
        return bragg_angle(self.beam.pump_energy_ev, self.crystal)

    def degenerate_offset(self) -> float:
        """Emission angle of the degenerate x = 0.5 split."""
        return emission_angles_exact(
            0.5, abs(self.crystal.detuning_rad), self.theta_b()
        ).r_x

    def positioned_detectors(self) -> tuple[DetectorGeometry, DetectorGeometry]:
        """Detectors with zero offsets replaced by the degenerate angle."""
        if self.crystal.detuning_rad <= 0:
            return self.detectors
        r0 = self.degenerate_offset()
        return tuple(
            replace(d, center_angle_offset_rad=r0)
            if d.center_angle_offset_rad == 0.0
            else d
            for d in self.detectors
        )

    def split_window(self) -> tuple[float, float]:
        """Energy-split window actually sampled.

        When not set explicitly this is the range of splits whose signal
        and idler rings fall on the detectors' radial spans (the window
        the detector size implies), clipped to the 5-17 keV analysis
        band.  Falls back to the full band when the detectors do not
        intersect the cone.
        """
        if self.split_window_x is not None:
            return self.split_window_x
        band = (5000.0 / self.beam.pump_energy_ev, 17000.0 / self.beam.pump_energy_ev)
        band = (max(band[0], 0.02), min(band[1], 0.98))
        if self.crystal.detuning_rad <= 0:
            return band
        det1, det2 = self.positioned_detectors()
        r0 = self.degenerate_offset()
        lo, hi = band
        # Signal on detector 1: R(x) = r0 sqrt((1-x)/x) inside its span.
        c1, h1 = det1.center_angle_offset_rad, det1.half_extent_rad
        if c1 + h1 > 0:
            lo = max(lo, 1.0 / (1.0 + ((c1 + h1) / r0) ** 2))
        if c1 - h1 > 0:
            hi = min(hi, 1.0 / (1.0 + ((c1 - h1) / r0) ** 2))
        # Idler on detector 2: R(y) = r0 sqrt(x/(1-x)) inside its span.
        c2, h2 = det2.center_angle_offset_rad, det2.half_extent_rad
        if c2 - h2 > 0:
            q = ((c2 - h2) / r0) ** 2
            lo = max(lo, q / (1.0 + q))
        if c2 + h2 > 0:
            q = ((c2 + h2) / r0) ** 2
            hi = min(hi, q / (1.0 + q))
        if not lo < hi:
            return band
        return (lo, hi)


@dataclass(frozen=True)
class RunConfig:
    """One simulated acquisition."""

    duration_s: float = 1800.0
    seed: int = 1
    experiment: ExperimentModel = field(default_factory=ExperimentModel)
    beam_current_profile: BeamCurrentProfile = field(
        default_factory=BeamCurrentProfile
    )

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration must be > 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")


@dataclass
class RunManifest:
    """Ground-truth counters recorded alongside the event streams."""

    seed: int
    duration_s: float
    config_hash: int
    mean_current: float
    pairs_generated: int = 0
    pairs_landed_both: int = 0
    pairs_detected_both: int = 0
    singles_detected: tuple[int, int] = (0, 0)
    background_counts: dict[str, int] = field(default_factory=dict)
    events_recorded: tuple[int, int] = (0, 0)

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "config_hash": f"{self.config_hash:016x}",
            "mean_current": self.mean_current,
            "pairs_generated": self.pairs_generated,
            "pairs_landed_both": self.pairs_landed_both,
            "pairs_detected_both": self.pairs_detected_both,
            "singles_detected_d1": self.singles_detected[0],
            "singles_detected_d2": self.singles_detected[1],
            "events_recorded_d1": self.events_recorded[0],
            "events_recorded_d2": self.events_recorded[1],
        }
        for key, count in sorted(self.background_counts.items()):
            out[f"bg_{key}"] = count
        return out


# ---------------------------------------------------------------------------
# Sampling


def _poisson_times(
    rng: np.random.Generator,
    rate_per_s: float,
    duration_s: float,
    profile: BeamCurrentProfile,
) -> np.ndarray:
    """Event times (ns, float64, sorted) of a Poisson process whose rate
    follows the piecewise-constant beam-current profile."""
    chunks = []
    for t0, t1, value in profile.segments(duration_s):
        lam = rate_per_s * value * (t1 - t0)
        n = rng.poisson(lam)
        if n:
            chunks.append(rng.uniform(t0 * 1e9, t1 * 1e9, n))
    if not chunks:
        return np.empty(0, dtype=np.float64)
    times = np.concatenate(chunks)
    times.sort(kind="stable")
    return times


def _solve_emission_angles(
    x: np.ndarray, detuning_rad: float, theta_b_rad: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exact emission angles for an array of splits.

    Newton iteration on the longitudinal closure, seeded from the
    small-angle formula; falls back to the scalar bracketed solver for
    any element that fails to converge.
    """
    y = 1.0 - x
    closure = 1.0 - detuning_rad * math.sin(2.0 * theta_b_rad)
    r = np.sqrt(2.0 * detuning_rad * (y / x) * math.sin(2.0 * theta_b_rad))
    for _ in range(12):
        s = x * np.sin(r)
        root = np.sqrt(np.maximum(y * y - s * s, 1e-300))
        f = x * np.cos(r) + root - closure
        fp = -x * np.sin(r) * (1.0 + x * np.cos(r) / root)
        step = f / np.where(fp != 0.0, fp, -1e-300)
        r = np.clip(r - step, 1e-12, None)
        if np.max(np.abs(f)) <= 1e-13:
            break
    s = x * np.sin(r)
    f = x * np.cos(r) + np.sqrt(np.maximum(y * y - s * s, 0.0)) - closure
    bad = np.abs(f) > 1e-12
    if np.any(bad):
        for i in np.nonzero(bad)[0]:
            sol = emission_angles_exact(float(x[i]), detuning_rad, theta_b_rad)
            r[i] = sol.r_x
    r_y = np.arcsin(np.clip(x * np.sin(r) / y, -1.0, 1.0))
    return r, r_y


def _landing_probability_arrays(
    experiment: ExperimentModel,
    x: np.ndarray,
    phi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Geometric landing decisions for signal (detector 1) and idler
    (detector 2), given energy splits and the signal azimuth.

    The signal azimuth phi is measured from detector 1's center; the
    idler leaves back-to-back on the ring, so with the detectors on
    opposite sides of the Laue spot the same phi governs both arcs.
    Landing requires the photon's ring to cross the detector's radial
    span and the azimuth to fall on the intercepted arc.
    """
    theta_b = experiment.theta_b()
    det1, det2 = experiment.positioned_detectors()
    r_x, r_y = _solve_emission_angles(
        x, experiment.crystal.detuning_rad, theta_b
    )
    land = []
    for det, angle in ((det1, r_x), (det2, r_y)):
        radial = np.abs(angle - det.center_angle_offset_rad) <= det.half_extent_rad
        ring_radius = det.distance_mm * np.tan(angle)
        half_arc = np.where(
            ring_radius <= 0.5 * det.side_mm,
            np.pi,
            0.5 * det.side_mm / np.maximum(ring_radius, 1e-12),
        )
        land.append(radial & (np.abs(phi) <= half_arc))
    return land[0], land[1], r_x, r_y


def sample_spdc_pair(
    rng: np.random.Generator,
    experiment: ExperimentModel,
    emission_time_ns: float = 0.0,
) -> tuple[TruePhoton | None, TruePhoton | None]:
    """Draw one down-converted pair and decide which members land.

    Returns the (signal, idler) photons before detector response; a
    member is None when it misses its detector geometrically or is lost
    in the detection chain.  Both present members share the emission
    time exactly, and their energies sum to the drawn pump energy
    exactly.
    """
    if experiment.crystal.detuning_rad <= 0:
        raise PhysicsError("detuning must be > 0 to generate pairs")
    batch = _sample_pair_batch(rng, experiment, np.array([emission_time_ns]))
    signal = idler = None
    if batch["signal_detected"][0]:
        signal = TruePhoton(1, float(emission_time_ns), float(batch["e_signal"][0]))
    if batch["idler_detected"][0]:
        idler = TruePhoton(2, float(emission_time_ns), float(batch["e_idler"][0]))
    return signal, idler


def _sample_pair_batch(
    rng: np.random.Generator,
    experiment: ExperimentModel,
    times_ns: np.ndarray,
) -> dict[str, np.ndarray]:
    """Vectorized pair sampling for an array of emission times."""
    n = len(times_ns)
    lo, hi = experiment.split_window()
    x = rng.uniform(lo, hi, n)
    pump = experiment.beam.pump_energy_ev + rng.normal(
        0.0, experiment.beam.bandwidth_fwhm_ev / FWHM_OVER_SIGMA, n
    )
    e_signal = x * pump
    e_idler = pump - e_signal  # exact energy conservation per pair
    phi = rng.uniform(-np.pi, np.pi, n)
    land1, land2, _, _ = _landing_probability_arrays(experiment, x, phi)
    chain = experiment.chain
    if chain.model == "ideal":
        keep1 = np.ones(n, dtype=bool)
        keep2 = np.ones(n, dtype=bool)
    elif chain.model == "constant":
        eta = math.sqrt(chain.pair_efficiency)
        keep1 = rng.random(n) < eta
        keep2 = rng.random(n) < eta
    else:
        eta1 = np.array([chain.photon_efficiency(e) for e in e_signal])
        eta2 = np.array([chain.photon_efficiency(e) for e in e_idler])
        keep1 = rng.random(n) < eta1
        keep2 = rng.random(n) < eta2
    return {
        "time_ns": times_ns,
        "x": x,
        "e_signal": e_signal,
        "e_idler": e_idler,
        "signal_landed": land1,
        "idler_landed": land2,
        "signal_detected": land1 & keep1,
        "idler_detected": land2 & keep2,
    }


def _background_arrays(
    rng: np.random.Generator,
    source: SourceModel,
    duration_s: float,
    detector_id: int,
    suppression: float,
    profile: BeamCurrentProfile,
) -> tuple[np.ndarray, np.ndarray, dict[str, int]]:
    """Background (times_ns, energies_ev, per-component counts) for one
    detector; unsorted across components."""
    if detector_id not in (1, 2):
        raise ConfigError("detector_id must be 1 or 2")
    times_chunks: list[np.ndarray] = []
    energy_chunks: list[np.ndarray] = []
    counts: dict[str, int] = {}
    for line in source.components(detector_id - 1):
        rate = line.rate_per_s * (suppression if line.suppressed else 1.0)
        times = _poisson_times(rng, rate, duration_s, profile)
        energies = rng.normal(
            line.center_ev, line.fwhm_ev / FWHM_OVER_SIGMA, len(times)
        )
        counts[f"d{detector_id}_{line.label}"] = len(times)
        times_chunks.append(times)
        energy_chunks.append(energies)
    if not times_chunks:
        return np.empty(0), np.empty(0), counts
    return np.concatenate(times_chunks), np.concatenate(energy_chunks), counts


def sample_background(
    rng: np.random.Generator,
    source: SourceModel,
    duration_s: float,
    detector_id: int,
    suppression: float = 1.0,
    profile: BeamCurrentProfile | None = None,
) -> tuple[list[TruePhoton], dict[str, int]]:
    """Background photons for one detector over a run.

    Each component is an independent homogeneous Poisson process (thinned
    by the beam-current profile) with Gaussian-distributed energies.
    Components flagged as polarization-suppressed have their rates
    multiplied by the suppression factor.

    Returns the photons (unsorted) and per-component counts.
    """
    times, energies, counts = _background_arrays(
        rng, source, duration_s, detector_id, suppression, profile or BeamCurrentProfile()
    )
    photons = [
        TruePhoton(detector_id, float(t), float(e))
        for t, e in zip(times, energies)
    ]
    return photons, counts


def apply_detector_response(
    photon: TruePhoton,
    response: DetectorResponse,
    rng: np.random.Generator,
) -> EventRecord | None:
    """Smear one photon through the recording chain.

    Adds Gaussian energy noise (sigma = fwhm / 2.355) and Gaussian time
    jitter, quantizes the timestamp to the clock tick and the energy to
    integer eV, and drops the event if the recorded energy falls outside
    the recordable range (or the jittered time precedes the run start).
    """
    stamps, recorded, keep = _apply_response_batch(
        np.array([photon.time_ns]), np.array([photon.energy_ev]), response, rng
    )
    if not keep[0]:
        return None
    return EventRecord(photon.detector_id, int(stamps[0]), int(recorded[0]))


def _apply_response_batch(
    times_ns: np.ndarray,
    energies_ev: np.ndarray,
    response: DetectorResponse,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized detector response.

    Returns (timestamps, recorded energies, keep mask), index-aligned
    with the inputs; only entries with keep True are valid records.
    """
    n = len(times_ns)
    if response.time_jitter_sigma_ns > 0:
        times_ns = times_ns + rng.normal(0.0, response.time_jitter_sigma_ns, n)
    if response.energy_resolution_fwhm_ev > 0:
        energies_ev = energies_ev + rng.normal(
            0.0, response.energy_resolution_fwhm_ev / FWHM_OVER_SIGMA, n
        )
    tick = response.clock_tick_ns
    stamps = np.floor(times_ns / tick + 0.5) * tick
    recorded = np.rint(energies_ev)
    lo, hi = response.energy_range_ev
    keep = (stamps >= 0) & (recorded >= lo) & (recorded <= hi)
    return stamps, recorded, keep


def _apply_dead_time(stream: np.ndarray, dead_time_ns: float) -> np.ndarray:
    """Non-paralyzable dead time on a time-sorted stream."""
    if dead_time_ns <= 0 or len(stream) == 0:
        return stream
    times = stream["timestamp_ns"].astype(np.int64)
    keep = np.zeros(len(stream), dtype=bool)
    last = -math.inf
    for i, t in enumerate(times):
        if t - last >= dead_time_ns or last == -math.inf:
            keep[i] = True
            last = t
    return stream[keep]


def simulate_run(
    config: RunConfig, config_hash: int = 0
) -> tuple[np.ndarray, np.ndarray, RunManifest]:
    """Simulate one acquisition and return the two event streams.

    Streams are EVENT_DTYPE structured arrays sorted by timestamp.  The
    manifest carries ground truth: pairs generated, pairs landed/detected
    on both detectors, and background counts per component.
    """
    exp = config.experiment
    duration = config.duration_s
    profile = config.beam_current_profile
    master = np.random.SeedSequence(int(config.seed))
    pair_seq, bg1_seq, bg2_seq, resp_seq = master.spawn(4)

    manifest = RunManifest(
        seed=int(config.seed),
        duration_s=duration,
        config_hash=config_hash,
        mean_current=profile.mean,
    )

    truth1: list[np.ndarray] = []  # (time_ns, energy_ev) column pairs
    truth2: list[np.ndarray] = []
    pair_flags: np.ndarray | None = None

    # Down-converted pairs (only when the cone is open).
    if exp.crystal.detuning_rad > 0 and exp.source.true_pair_rate_per_s > 0:
        rng = np.random.default_rng(pair_seq)
        rate = exp.source.true_pair_rate_per_s * exp.crystal.effective_rate_scale
        times = _poisson_times(rng, rate, duration, profile)
        batch = _sample_pair_batch(rng, exp, times)
        manifest.pairs_generated = len(times)
        manifest.pairs_landed_both = int(
            np.sum(batch["signal_landed"] & batch["idler_landed"])
        )
        s_mask, i_mask = batch["signal_detected"], batch["idler_detected"]
        truth1.append(
            np.column_stack([batch["time_ns"][s_mask], batch["e_signal"][s_mask]])
        )
        truth2.append(
            np.column_stack([batch["time_ns"][i_mask], batch["e_idler"][i_mask]])
        )
        pair_flags = np.stack([s_mask, i_mask])

    # Backgrounds, independent per detector.
    suppression = polarization_suppression(
        exp.theta_b(), exp.beam.polarization_angle_rad
    )
    for det_id, seq, bucket in ((1, bg1_seq, truth1), (2, bg2_seq, truth2)):
        rng = np.random.default_rng(seq)
        times, energies, counts = _background_arrays(
            rng, exp.source, duration, det_id, suppression, profile
        )
        manifest.background_counts.update(counts)
        if len(times):
            bucket.append(np.column_stack([times, energies]))

    # Detector response and stream assembly.
    resp_rng = np.random.default_rng(resp_seq)
    streams = []
    pair_survival = []
    for det_index, bucket in enumerate((truth1, truth2)):
        if bucket:
            cols = np.vstack([b.reshape(-1, 2) for b in bucket])
        else:
            cols = np.empty((0, 2))
        # Pair members were appended to the bucket first, so the leading
        # slice of the keep mask tracks their survival for the manifest.
        n_pair_members = (
            int(pair_flags[det_index].sum()) if pair_flags is not None else 0
        )
        stamps, recorded, keep = _apply_response_batch(
            cols[:, 0], cols[:, 1], exp.response, resp_rng
        )
        pair_survival.append(keep[:n_pair_members])

        stream = np.empty(int(keep.sum()), dtype=EVENT_DTYPE)
        stream["detector_id"] = det_index + 1
        stream["timestamp_ns"] = stamps[keep].astype(np.uint64)
        stream["energy_ev"] = recorded[keep].astype(np.uint32)
        order = np.argsort(stream["timestamp_ns"], kind="stable")
        stream = stream[order]
        stream = _apply_dead_time(stream, exp.response.dead_time_ns)
        streams.append(stream)

    if pair_flags is not None:
        detected1 = np.zeros(pair_flags.shape[1], dtype=bool)
        detected2 = np.zeros(pair_flags.shape[1], dtype=bool)
        detected1[np.nonzero(pair_flags[0])[0]] = pair_survival[0]
        detected2[np.nonzero(pair_flags[1])[0]] = pair_survival[1]
        manifest.pairs_detected_both = int(np.sum(detected1 & detected2))
        manifest.singles_detected = (
            int(np.sum(detected1 & ~detected2)),
            int(np.sum(~detected1 & detected2)),
        )
    manifest.events_recorded = (len(streams[0]), len(streams[1]))
    return streams[0], streams[1], manifest
