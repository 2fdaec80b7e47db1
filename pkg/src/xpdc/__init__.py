"""Desk-scale X-ray parametric down-conversion simulator and
coincidence-analysis toolkit."""

from .physics import (
    BeamConfig,
    ChainEfficiencyModel,
    CrystalConfig,
    DetectorGeometry,
    EmissionSolution,
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
from .events import (
    BeamCurrentProfile,
    ConfigError,
    DetectorResponse,
    EVENT_DTYPE,
    EventRecord,
    ExperimentModel,
    GaussianLine,
    RunConfig,
    RunManifest,
    SourceModel,
    TruePhoton,
    apply_detector_response,
    sample_background,
    sample_spdc_pair,
    simulate_run,
)
from .analysis import (
    AnalysisError,
    CoincidenceCriteria,
    CorrelationMap,
    EfficiencyResult,
    GaussianFit,
    PAIR_DTYPE,
    RoiResult,
    RoiSpec,
    ScanResult,
    build_correlation_map,
    conversion_efficiency,
    energy_peak_centroid,
    find_coincidence_pairs,
    fit_energy_profile,
    fit_misalignment_scan,
    fit_time_profile,
    roi_rate,
    select_candidates,
)
from .listmode import (
    ListModeFormatError,
    ListModeHeader,
    merge_streams,
    read_listmode,
    read_manifest,
    split_streams,
    write_listmode,
    write_manifest,
)

__version__ = "0.1.0"
