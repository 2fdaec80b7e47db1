"""
Coincidence analysis of two-detector list-mode streams: candidate
filtering, energy-sum-constrained pairing, the (E1, dt) correlation map,
Gaussian profile fits, background-subtracted region-of-interest rates,
the misalignment-scan power-law fit, and the conversion-efficiency
arithmetic.

All operations are pure transformations on immutable inputs.  Streams
are structured arrays with fields timestamp_ns (u8) and energy_ev (u4),
time-ordered.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

PAIR_DTYPE = np.dtype(
    [
        ("t1_ns", "<i8"),
        ("t2_ns", "<i8"),
        ("e1_ev", "<u4"),
        ("e2_ev", "<u4"),
        ("dt_ns", "<i8"),
    ]
)


class AnalysisError(ValueError):
    """Invalid input to an analysis operation."""


@dataclass(frozen=True)
class CoincidenceCriteria:
    """Selection windows and binning for the coincidence search."""

    single_energy_window_ev: tuple[float, float] = (5000.0, 17000.0)
    sum_center_ev: float = 22000.0
    sum_half_width_ev: float = 500.0
    max_abs_dt_ns: int = 2000
    dt_bin_ns: int = 20
    e_bin_ev: int = 100

    def __post_init__(self):
        lo, hi = self.single_energy_window_ev
        if not lo < hi:
            raise AnalysisError("energy window must satisfy min < max")
        if self.sum_half_width_ev <= 0:
            raise AnalysisError("sum window half-width must be > 0")
        if self.max_abs_dt_ns < 5 * self.dt_bin_ns:
            raise AnalysisError("pairing horizon must span at least 5 dt bins")
        if self.dt_bin_ns <= 0 or self.e_bin_ev <= 0:
            raise AnalysisError("bin widths must be > 0")


@dataclass
class CorrelationMap:
    """2D histogram of accepted pairs over (E1, t2 - t1).

    counts has shape (len(e_edges) - 1, len(dt_edges) - 1); binning is
    half-open [lo, hi) with the uppermost bin closed.  dt bin edges are
    offset half a bin so clock-tick-aligned differences sit at bin
    centers.
    """

    e_edges_ev: np.ndarray
    dt_edges_ns: np.ndarray
    counts: np.ndarray
    duration_s: float
    mean_current: float = 1.0

    @property
    def e_centers_ev(self) -> np.ndarray:
        return 0.5 * (self.e_edges_ev[:-1] + self.e_edges_ev[1:])

    @property
    def dt_centers_ns(self) -> np.ndarray:
        return 0.5 * (self.dt_edges_ns[:-1] + self.dt_edges_ns[1:])

    @property
    def dt_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def e_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class GaussianFit:
    """Gaussian-plus-constant fit of one histogram profile."""

    amplitude: float
    center: float
    sigma: float
    baseline: float
    amplitude_err: float
    center_err: float
    sigma_err: float
    baseline_err: float


@dataclass(frozen=True)
class RoiSpec:
    """Region of interest and accidental sidebands on the map.

    The ROI is |E1 - e_center| <= e_half_width and |dt| <= t_half_width;
    sidebands share the energy band and take |dt| >= sideband_inner out
    to the pairing horizon on both sides.
    """

    e_center_ev: float = 11000.0
    e_half_width_ev: float = 1000.0
    t_half_width_ns: float = 640.0
    sideband_inner_ns: float = 1100.0

    @classmethod
    def from_time_fit(
        cls,
        fit: GaussianFit,
        e_center_ev: float = 11000.0,
        e_half_width_ev: float = 1000.0,
        roi_sigmas: float = 3.0,
        sideband_sigmas: float = 5.0,
    ) -> "RoiSpec":
        return cls(
            e_center_ev=e_center_ev,
            e_half_width_ev=e_half_width_ev,
            t_half_width_ns=roi_sigmas * abs(fit.sigma),
            sideband_inner_ns=sideband_sigmas * abs(fit.sigma),
        )


@dataclass
class RoiResult:
    """Background-subtracted pair rate in the region of interest."""

    roi_counts: int
    sideband_counts: int
    sideband_estimate: float
    net_rate_per_hr: float
    net_rate_err_per_hr: float


@dataclass
class ScanResult:
    """Power-law fit of pair rate versus crystal misalignment."""

    points: list[tuple[float, float, float]]  # (detuning mdeg, rate, err)
    amplitude: float
    exponent: float
    exponent_err: float
    chi2_per_dof: float
    amplitude_fixed: float
    amplitude_fixed_err: float
    chi2_per_dof_fixed: float
    n_used: int


@dataclass
class EfficiencyResult:
    """Observed rate unfolded to generation rate and conversion efficiency."""

    net_rate_per_hr: float
    observable_rate_per_hr: float
    total_rate_per_hr: float
    efficiency: float
    incident_per_pair: float


# ---------------------------------------------------------------------------
# Stream operations


def _require_sorted(stream: np.ndarray, name: str) -> None:
    t = stream["timestamp_ns"]
    if len(t) > 1 and np.any(np.diff(t.astype(np.int64)) < 0):
        raise AnalysisError(f"{name} is not time-ordered")


def select_candidates(
    stream: np.ndarray, criteria: CoincidenceCriteria
) -> np.ndarray:
    """Keep events inside the single-photon energy window (closed on both
    ends), preserving time order."""
    _require_sorted(stream, "stream")
    lo, hi = criteria.single_energy_window_ev
    e = stream["energy_ev"]
    return stream[(e >= lo) & (e <= hi)]


def find_coincidence_pairs(
    stream1: np.ndarray,
    stream2: np.ndarray,
    criteria: CoincidenceCriteria,
    exclusive: bool = False,
) -> np.ndarray:
    """All cross-detector pairs passing the time and energy-sum windows.

    Sort-merge sliding window over the two time-ordered streams,
    O(n + m + k): a pair qualifies when |t2 - t1| <= max_abs_dt and
    |E1 + E2 - sum_center| <= sum_half_width.  By default one event may
    appear in several pairs; exclusive=True keeps a greedy
    smallest-|dt|-first matching instead.

    Returns a PAIR_DTYPE array with dt = t2 - t1.
    """
    _require_sorted(stream1, "stream1")
    _require_sorted(stream2, "stream2")
    t1 = stream1["timestamp_ns"].astype(np.int64)
    t2 = stream2["timestamp_ns"].astype(np.int64)
    horizon = int(criteria.max_abs_dt_ns)
    lo = np.searchsorted(t2, t1 - horizon, side="left")
    hi = np.searchsorted(t2, t1 + horizon, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=PAIR_DTYPE)
    idx1 = np.repeat(np.arange(len(t1)), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    idx2 = np.arange(total) - offsets + np.repeat(lo, counts)

    e1 = stream1["energy_ev"][idx1].astype(np.int64)
    e2 = stream2["energy_ev"][idx2].astype(np.int64)
    in_sum = (
        np.abs(e1 + e2 - criteria.sum_center_ev) <= criteria.sum_half_width_ev
    )
    idx1, idx2 = idx1[in_sum], idx2[in_sum]

    pairs = np.empty(len(idx1), dtype=PAIR_DTYPE)
    pairs["t1_ns"] = t1[idx1]
    pairs["t2_ns"] = t2[idx2]
    pairs["e1_ev"] = stream1["energy_ev"][idx1]
    pairs["e2_ev"] = stream2["energy_ev"][idx2]
    pairs["dt_ns"] = pairs["t2_ns"] - pairs["t1_ns"]
    if exclusive:
        pairs = _exclusive_subset(pairs, idx1, idx2)
    return pairs


def _exclusive_subset(
    pairs: np.ndarray, idx1: np.ndarray, idx2: np.ndarray
) -> np.ndarray:
    order = np.argsort(np.abs(pairs["dt_ns"]), kind="stable")
    used1: set[int] = set()
    used2: set[int] = set()
    keep = []
    for k in order:
        i, j = int(idx1[k]), int(idx2[k])
        if i in used1 or j in used2:
            continue
        used1.add(i)
        used2.add(j)
        keep.append(k)
    keep.sort()
    return pairs[keep]


def build_correlation_map(
    pairs: np.ndarray,
    criteria: CoincidenceCriteria,
    duration_s: float,
    mean_current: float = 1.0,
) -> CorrelationMap:
    """Histogram accepted pairs over (E1, dt).

    Energy bins are half-open [lo, hi) with the top bin closed; dt bins
    are centered on multiples of dt_bin so quantized time differences
    fall at bin centers.
    """
    if duration_s <= 0:
        raise AnalysisError("duration must be > 0")
    e_lo, e_hi = criteria.single_energy_window_ev
    n_e = int(math.ceil((e_hi - e_lo) / criteria.e_bin_ev))
    e_edges = e_lo + criteria.e_bin_ev * np.arange(n_e + 1, dtype=np.float64)
    half = 0.5 * criteria.dt_bin_ns
    n_dt = 2 * int(criteria.max_abs_dt_ns // criteria.dt_bin_ns) + 1
    dt_edges = -criteria.max_abs_dt_ns - half + criteria.dt_bin_ns * np.arange(
        n_dt + 1, dtype=np.float64
    )
    counts, _, _ = np.histogram2d(
        pairs["e1_ev"].astype(np.float64),
        pairs["dt_ns"].astype(np.float64),
        bins=(e_edges, dt_edges),
    )
    return CorrelationMap(
        e_edges_ev=e_edges,
        dt_edges_ns=dt_edges,
        counts=counts.astype(np.int64),
        duration_s=duration_s,
        mean_current=mean_current,
    )


# ---------------------------------------------------------------------------
# Profile fits


def _gaussian_plus_constant(x, amplitude, center, sigma, baseline):
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2) + baseline


def _moment_seeds(centers: np.ndarray, counts: np.ndarray):
    baseline0 = float(np.median(counts))
    excess = np.clip(counts - baseline0, 0.0, None)
    span = centers[-1] - centers[0]
    if excess.sum() > 0:
        center0 = float(np.sum(centers * excess) / excess.sum())
        var = float(np.sum((centers - center0) ** 2 * excess) / excess.sum())
        sigma0 = math.sqrt(var) if var > 0 else span / 10.0
    else:
        center0 = float(centers[np.argmax(counts)])
        sigma0 = span / 10.0
    bin_width = abs(centers[1] - centers[0])
    sigma0 = min(max(sigma0, bin_width), span)
    amplitude0 = max(float(counts.max() - baseline0), 1e-3)
    return amplitude0, center0, sigma0, baseline0


def _nll_errors(nll, popt: np.ndarray) -> np.ndarray:
    """Parameter errors from the numerical Hessian of the likelihood."""
    n = len(popt)
    steps = np.maximum(np.abs(popt) * 1e-4, 1e-6)
    hessian = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = steps[i]
            ej[j] = steps[j]
            value = (
                nll(popt + ei + ej)
                - nll(popt + ei - ej)
                - nll(popt - ei + ej)
                + nll(popt - ei - ej)
            ) / (4.0 * steps[i] * steps[j])
            hessian[i, j] = hessian[j, i] = value
    try:
        cov = np.linalg.pinv(hessian)
    except np.linalg.LinAlgError:
        return np.full(n, np.inf)
    diag = np.diag(cov)
    return np.where(diag > 0, np.sqrt(np.abs(diag)), np.inf)


def fit_gaussian_profile(
    centers: np.ndarray,
    counts: np.ndarray,
    count_errors: np.ndarray | None = None,
) -> GaussianFit:
    """Gaussian-plus-constant fit of one histogram profile.

    Raw count profiles (non-negative, no explicit errors) are fitted by
    Poisson maximum likelihood, which stays unbiased on sparse
    histograms; profiles with explicit per-bin errors (e.g. after
    sideband subtraction) use weighted least squares.  Seeds come from
    the profile moments.
    """
    centers = np.asarray(centers, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if len(centers) < 5:
        raise AnalysisError("profile too short to fit")
    if np.all(counts == counts[0]):
        raise AnalysisError("degenerate fit: profile has zero variance")
    seeds = _moment_seeds(centers, counts)
    if count_errors is None and np.all(counts >= 0):
        return _fit_poisson_ml(centers, counts, seeds)
    if count_errors is None:
        count_errors = np.ones_like(counts)
    return _fit_weighted_lsq(centers, counts, count_errors, seeds)


def _fit_poisson_ml(centers, counts, seeds) -> GaussianFit:
    from scipy.optimize import minimize

    amplitude0, center0, sigma0, baseline0 = seeds
    span = centers[-1] - centers[0]

    def unpack(p):
        # exponent clamp keeps runaway simplex steps finite
        return (
            math.exp(min(p[0], 50.0)),
            p[1],
            math.exp(min(p[2], 50.0)),
            math.exp(min(p[3], 50.0)),
        )

    def nll(p):
        amplitude, center, sigma, baseline = unpack(p)
        mu = _gaussian_plus_constant(centers, amplitude, center, sigma, baseline)
        mu = np.maximum(mu, 1e-12)
        return float(np.sum(mu - counts * np.log(mu)))

    p0 = np.array(
        [
            math.log(max(amplitude0, 1e-6)),
            center0,
            math.log(sigma0),
            math.log(max(baseline0, 1e-3)),
        ]
    )
    result = minimize(
        nll,
        p0,
        method="Nelder-Mead",
        options={"maxiter": 8000, "xatol": 1e-6, "fatol": 1e-9},
    )
    if not np.all(np.isfinite(result.x)):
        raise AnalysisError("profile fit did not converge")
    amplitude, center, sigma, baseline = unpack(result.x)
    if not (centers[0] - span <= center <= centers[-1] + span):
        raise AnalysisError("profile fit ran away from the data window")

    def nll_natural(q):
        mu = _gaussian_plus_constant(centers, q[0], q[1], max(q[2], 1e-9), q[3])
        mu = np.maximum(mu, 1e-12)
        return float(np.sum(mu - counts * np.log(mu)))

    errs = _nll_errors(nll_natural, np.array([amplitude, center, sigma, baseline]))
    return GaussianFit(
        amplitude=amplitude,
        center=center,
        sigma=sigma,
        baseline=baseline,
        amplitude_err=float(errs[0]),
        center_err=float(errs[1]),
        sigma_err=float(errs[2]),
        baseline_err=float(errs[3]),
    )


def _fit_weighted_lsq(centers, counts, count_errors, seeds) -> GaussianFit:
    sigma = np.maximum(np.asarray(count_errors, dtype=np.float64), 1e-9)
    try:
        popt, pcov = curve_fit(
            _gaussian_plus_constant,
            centers,
            counts,
            p0=seeds,
            sigma=sigma,
            absolute_sigma=True,
            maxfev=20000,
        )
    except RuntimeError as exc:
        raise AnalysisError(f"profile fit did not converge: {exc}") from exc
    errs = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    return GaussianFit(
        amplitude=float(popt[0]),
        center=float(popt[1]),
        sigma=float(abs(popt[2])),
        baseline=float(popt[3]),
        amplitude_err=float(errs[0]),
        center_err=float(errs[1]),
        sigma_err=float(errs[2]),
        baseline_err=float(errs[3]),
    )


def fit_time_profile(corr_map: CorrelationMap) -> GaussianFit:
    """Fit the inter-detector time-difference marginal.

    The marginal already contains only sum-window-passing pairs; the fit
    returns the coincidence peak width, center, amplitude and accidental
    baseline per dt bin.
    """
    marginal = corr_map.dt_marginal
    if marginal.sum() == 0:
        raise AnalysisError("empty dt marginal")
    return fit_gaussian_profile(corr_map.dt_centers_ns, marginal)


def _net_energy_profile(
    corr_map: CorrelationMap, t_half_width_ns: float, sideband_inner_ns: float
) -> tuple[np.ndarray, np.ndarray]:
    """Accidental-subtracted E1 profile and its per-bin errors.

    Columns with |dt| <= t_half_width form the signal region; columns
    with |dt| >= sideband_inner estimate the accidental spectrum, scaled
    by the column-count ratio, and are subtracted.
    """
    dt_c = corr_map.dt_centers_ns
    signal_cols = np.abs(dt_c) <= t_half_width_ns
    sideband_cols = np.abs(dt_c) >= sideband_inner_ns
    if not signal_cols.any() or not sideband_cols.any():
        raise AnalysisError("signal or sideband region is empty")
    if np.any(signal_cols & sideband_cols):
        raise AnalysisError("sidebands overlap the signal region")
    scale = signal_cols.sum() / sideband_cols.sum()
    signal = corr_map.counts[:, signal_cols].sum(axis=1).astype(np.float64)
    sideband = corr_map.counts[:, sideband_cols].sum(axis=1).astype(np.float64)
    profile = signal - scale * sideband
    errors = np.sqrt(np.maximum(signal + scale * scale * sideband, 1.0))
    return profile, errors


def fit_energy_profile(
    corr_map: CorrelationMap,
    t_half_width_ns: float,
    sideband_inner_ns: float,
) -> GaussianFit:
    """Fit the accidental-subtracted E1 profile of the coincidence peak."""
    profile, errors = _net_energy_profile(
        corr_map, t_half_width_ns, sideband_inner_ns
    )
    if profile.sum() <= 0:
        raise AnalysisError("no coincident excess to fit")
    return fit_gaussian_profile(corr_map.e_centers_ev, profile, errors)


def energy_peak_centroid(
    corr_map: CorrelationMap,
    t_half_width_ns: float,
    sideband_inner_ns: float,
) -> float:
    """Centroid (first moment) of the positive coincident excess vs E1.

    More robust than a shape fit for locating the down-converted peak
    when the excess is a broad plateau rather than a clean Gaussian.
    """
    profile, _ = _net_energy_profile(corr_map, t_half_width_ns, sideband_inner_ns)
    weights = np.clip(profile, 0.0, None)
    total = weights.sum()
    if total <= 0:
        raise AnalysisError("no coincident excess")
    return float(np.sum(corr_map.e_centers_ev * weights) / total)


# ---------------------------------------------------------------------------
# Rates


def roi_rate(corr_map: CorrelationMap, roi: RoiSpec) -> RoiResult:
    """Accidental-subtracted pair rate inside the region of interest.

    The sideband estimate uses both dt sides, scaled by the bin-count
    ratio; the net rate is normalized by run duration and mean relative
    beam current, in pairs/hour, with Poisson error propagation from
    both regions.
    """
    if roi.sideband_inner_ns <= roi.t_half_width_ns:
        raise AnalysisError("sidebands overlap the region of interest")
    e_c = corr_map.e_centers_ev
    dt_c = corr_map.dt_centers_ns
    e_rows = np.abs(e_c - roi.e_center_ev) <= roi.e_half_width_ev
    roi_cols = np.abs(dt_c) <= roi.t_half_width_ns
    sb_cols = np.abs(dt_c) >= roi.sideband_inner_ns
    if not e_rows.any() or not roi_cols.any():
        raise AnalysisError("region of interest selects no bins")
    if not sb_cols.any():
        raise AnalysisError("sideband region selects no bins")
    if np.any(roi_cols & sb_cols):
        raise AnalysisError("sidebands overlap the region of interest")
    sub = corr_map.counts[e_rows]
    roi_counts = int(sub[:, roi_cols].sum())
    sb_counts = int(sub[:, sb_cols].sum())
    scale = roi_cols.sum() / sb_cols.sum()
    net_counts = roi_counts - scale * sb_counts
    variance = roi_counts + scale * scale * sb_counts
    hours = corr_map.duration_s / 3600.0 * corr_map.mean_current
    return RoiResult(
        roi_counts=roi_counts,
        sideband_counts=sb_counts,
        sideband_estimate=scale * sb_counts,
        net_rate_per_hr=net_counts / hours,
        net_rate_err_per_hr=math.sqrt(variance) / hours,
    )


def fit_misalignment_scan(
    points: list[tuple[float, float, float]]
) -> ScanResult:
    """Weighted power-law fit of rate versus detuning.

    Fits log(rate) = log(A) + p * log(detuning) by weighted least
    squares, reporting the free-exponent solution and the fixed
    p = -1/2 amplitude fit with chi^2/dof for both.  Points with
    non-positive rates are excluded with a warning.  Detunings are in
    millidegrees; A is the rate at 1 mdeg.
    """
    usable = []
    for detuning_mdeg, rate, err in points:
        if detuning_mdeg <= 0:
            raise AnalysisError("detunings must be > 0")
        if rate <= 0:
            warnings.warn(
                f"excluding non-positive rate at {detuning_mdeg} mdeg from fit",
                stacklevel=2,
            )
            continue
        if err <= 0:
            raise AnalysisError("rate errors must be > 0")
        usable.append((detuning_mdeg, rate, err))
    if len(usable) < 2:
        raise AnalysisError("need at least 2 usable points to fit")

    u = np.log([p[0] for p in usable])
    v = np.log([p[1] for p in usable])
    w = np.array([(p[1] / p[2]) ** 2 for p in usable])  # 1/sigma_logr^2

    s_w = w.sum()
    s_u = (w * u).sum()
    s_v = (w * v).sum()
    s_uu = (w * u * u).sum()
    s_uv = (w * u * v).sum()
    delta = s_w * s_uu - s_u * s_u
    if delta <= 0:
        raise AnalysisError("degenerate scan: detunings are identical")
    intercept = (s_uu * s_v - s_u * s_uv) / delta
    slope = (s_w * s_uv - s_u * s_v) / delta
    slope_err = math.sqrt(s_w / delta)
    resid = v - (intercept + slope * u)
    dof = max(len(usable) - 2, 1)
    chi2 = float((w * resid**2).sum()) / dof

    # Fixed-exponent fit: log(rate) + 0.5 log(detuning) = log(A)
    target = v + 0.5 * u
    a_fixed = (w * target).sum() / s_w
    a_fixed_err = math.sqrt(1.0 / s_w)
    resid_fixed = target - a_fixed
    dof_fixed = max(len(usable) - 1, 1)
    chi2_fixed = float((w * resid_fixed**2).sum()) / dof_fixed

    return ScanResult(
        points=list(points),
        amplitude=math.exp(intercept),
        exponent=slope,
        exponent_err=slope_err,
        chi2_per_dof=chi2,
        amplitude_fixed=math.exp(a_fixed),
        amplitude_fixed_err=a_fixed_err * math.exp(a_fixed),
        chi2_per_dof_fixed=chi2_fixed,
        n_used=len(usable),
    )


def conversion_efficiency(
    net_rate_per_hr: float,
    acceptance: float,
    chain_efficiency: float,
    incident_rate_per_s: float,
) -> EfficiencyResult:
    """Unfold an observed pair rate to the generation rate and efficiency.

    observable = net / acceptance corrects the ring coverage; total =
    observable / chain_efficiency corrects air and detector losses;
    efficiency = total / incident pump rate (per hour).
    """
    if not 0.0 < acceptance <= 1.0:
        raise AnalysisError("acceptance must be in (0, 1]")
    if not 0.0 < chain_efficiency <= 1.0:
        raise AnalysisError("chain efficiency must be in (0, 1]")
    if incident_rate_per_s <= 0:
        raise AnalysisError("incident rate must be > 0")
    observable = net_rate_per_hr / acceptance
    total = observable / chain_efficiency
    incident_per_hr = incident_rate_per_s * 3600.0
    efficiency = total / incident_per_hr
    incident_per_pair = (
        incident_per_hr / net_rate_per_hr if net_rate_per_hr > 0 else math.inf
    )
    return EfficiencyResult(
        net_rate_per_hr=net_rate_per_hr,
        observable_rate_per_hr=observable,
        total_rate_per_hr=total,
        efficiency=efficiency,
        incident_per_pair=incident_per_pair,
    )
