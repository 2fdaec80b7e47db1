"""
Command-line surface: plan, simulate, analyze, scan, report.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import analysis, config as cfg, events, listmode
from .analysis import AnalysisError, CoincidenceCriteria, RoiSpec
from .events import ConfigError
from .listmode import ListModeFormatError
from .physics import (
    DEG,
    PhysicsError,
    emission_angles_exact,
    geometric_acceptance,
    polarization_suppression,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _load_settings(args) -> dict[str, str]:
    layers = []
    if args.config:
        layers.append(cfg.load_config_file(args.config))
    layers.append(cfg.env_overrides(dict(os.environ)))
    settings = cfg.merge_settings(*layers)
    if getattr(args, "seed", None) is not None:
        settings["run.seed"] = str(args.seed)
    return settings


def _criteria_from_args(args) -> CoincidenceCriteria:
    return CoincidenceCriteria(
        single_energy_window_ev=(args.e_min * 1e3, args.e_max * 1e3),
        sum_center_ev=args.sum_center * 1e3,
        sum_half_width_ev=args.sum_half * 1e3,
        max_abs_dt_ns=args.horizon,
        dt_bin_ns=args.dt_bin,
        e_bin_ev=args.e_bin,
    )


def _add_criteria_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--e-min", type=float, default=5.0, help="keV (default 5)")
    parser.add_argument("--e-max", type=float, default=17.0, help="keV (default 17)")
    parser.add_argument("--sum-center", type=float, default=22.0, help="keV")
    parser.add_argument("--sum-half", type=float, default=0.5, help="keV")
    parser.add_argument("--horizon", type=int, default=2000, help="pairing |dt| limit, ns")
    parser.add_argument("--dt-bin", type=int, default=20, help="ns")
    parser.add_argument("--e-bin", type=int, default=100, help="eV")
    parser.add_argument("--roi-e-center", type=float, default=11.0, help="keV")
    parser.add_argument("--roi-e-half", type=float, default=1.0, help="keV")
    parser.add_argument("--roi-sigmas", type=float, default=3.0)
    parser.add_argument("--sideband-sigmas", type=float, default=5.0)
    parser.add_argument(
        "--exclusive", action="store_true", help="nearest-neighbor pairing"
    )


def _pair_acceptance(experiment: events.ExperimentModel) -> float:
    """Coincidence coverage of the degenerate ring: limited by the
    smaller of the two detector arcs (back-to-back emission)."""
    r0 = experiment.degenerate_offset()
    det1, det2 = experiment.positioned_detectors()
    return min(
        geometric_acceptance(r0, det1)[0], geometric_acceptance(r0, det2)[0]
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_plan(args) -> int:
    settings = _load_settings(args)
    run = cfg.build_run_config(settings)
    exp = run.experiment
    if exp.crystal.detuning_rad <= 0:
        print(
            "error: phase matching unreachable at detuning "
            f"{exp.crystal.detuning_rad / DEG * 1e3:.1f} mdeg (need > 0)",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    theta_b = exp.theta_b()
    det1, det2 = exp.positioned_detectors()
    suppression = polarization_suppression(theta_b, exp.beam.polarization_angle_rad)
    print(f"pump energy          : {exp.beam.pump_energy_ev / 1e3:.3f} keV")
    print(f"reflection           : {exp.crystal.reflection}")
    print(f"Bragg angle theta_B  : {theta_b / DEG:.3f} deg")
    print(f"2 theta_B            : {2 * theta_b / DEG:.3f} deg")
    print(f"detuning             : {exp.crystal.detuning_rad / DEG * 1e3:.2f} mdeg")
    for x in (0.25, 0.50, 0.75):
        sol = emission_angles_exact(x, exp.crystal.detuning_rad, theta_b)
        print(
            f"R(x={x:.2f})            : {sol.r_x / DEG:.4f} deg"
            f"   (idler {sol.r_y / DEG:.4f} deg)"
        )
    r0 = exp.degenerate_offset()
    print(
        f"detector angles      : {(2 * theta_b + r0) / DEG:.3f} / "
        f"{(2 * theta_b - r0) / DEG:.3f} deg (2 theta_B +/- R)"
    )
    for i, det in enumerate((det1, det2), start=1):
        ring = det.distance_mm * math.tan(r0)
        acc, resolved = geometric_acceptance(r0, det)
        note = "" if resolved else "  [ring under-resolved]"
        print(
            f"detector {i}           : offset {det.center_angle_offset_rad / DEG:.4f} deg,"
            f" ring radius {ring:.2f} mm, acceptance {acc:.4f}{note}"
        )
    print(f"pair acceptance      : {_pair_acceptance(exp):.4f}")
    print(f"polarization factor  : {suppression:.4f} (chi = "
          f"{exp.beam.polarization_angle_rad / DEG:.1f} deg)")
    window = exp.split_window()
    print(
        f"split window         : x in [{window[0]:.4f}, {window[1]:.4f}]"
        f"  (E1 {window[0] * exp.beam.pump_energy_ev / 1e3:.2f}"
        f"-{window[1] * exp.beam.pump_energy_ev / 1e3:.2f} keV)"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    settings = _load_settings(args)
    run = cfg.build_run_config(settings)
    digest = cfg.config_hash(settings)
    stream1, stream2, manifest = events.simulate_run(run, config_hash=digest)
    merged = listmode.merge_streams(stream1, stream2)
    os.makedirs(args.out, exist_ok=True)
    event_path = os.path.join(args.out, "events.xpdc")
    header = listmode.ListModeHeader(
        clock_tick_ns=run.experiment.response.clock_tick_ns,
        detector_count=2,
        config_hash=digest,
    )
    listmode.write_listmode(event_path, merged, header)
    listmode.write_manifest(
        os.path.join(args.out, "manifest.txt"), manifest.as_dict()
    )
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.canonical_text(settings))
    if args.csv:
        listmode.write_events_csv(os.path.join(args.out, "events.csv"), merged)
    print(
        f"wrote {len(merged)} events to {event_path} "
        f"(pairs generated {manifest.pairs_generated}, "
        f"detected both {manifest.pairs_detected_both})"
    )
    return EXIT_OK


def _analyze_streams(
    stream1: np.ndarray,
    stream2: np.ndarray,
    criteria: CoincidenceCriteria,
    duration_s: float,
    mean_current: float,
    args,
):
    """Shared analyze pipeline; returns (map, time fit, energy fit, roi)."""
    cand1 = analysis.select_candidates(stream1, criteria)
    cand2 = analysis.select_candidates(stream2, criteria)
    pairs = analysis.find_coincidence_pairs(
        cand1, cand2, criteria, exclusive=args.exclusive
    )
    corr_map = analysis.build_correlation_map(
        pairs, criteria, duration_s, mean_current
    )
    time_fit = energy_fit = energy_centroid = None
    if len(pairs):
        try:
            time_fit = analysis.fit_time_profile(corr_map)
        except AnalysisError:
            time_fit = None
    # Default ROI assumes the nominal 212 ns coincidence width; a sane
    # time fit refines it.
    roi = RoiSpec(
        e_center_ev=args.roi_e_center * 1e3,
        e_half_width_ev=args.roi_e_half * 1e3,
    )
    if time_fit is not None:
        fitted = RoiSpec.from_time_fit(
            time_fit,
            e_center_ev=args.roi_e_center * 1e3,
            e_half_width_ev=args.roi_e_half * 1e3,
            roi_sigmas=args.roi_sigmas,
            sideband_sigmas=args.sideband_sigmas,
        )
        if (
            fitted.t_half_width_ns >= criteria.dt_bin_ns
            and fitted.sideband_inner_ns < 0.9 * criteria.max_abs_dt_ns
        ):
            roi = fitted
    roi_result = analysis.roi_rate(corr_map, roi)
    if len(pairs):
        try:
            energy_fit = analysis.fit_energy_profile(
                corr_map, roi.t_half_width_ns, roi.sideband_inner_ns
            )
        except AnalysisError:
            energy_fit = None
        try:
            energy_centroid = analysis.energy_peak_centroid(
                corr_map, roi.t_half_width_ns, roi.sideband_inner_ns
            )
        except AnalysisError:
            energy_centroid = None
    return corr_map, time_fit, energy_fit, energy_centroid, roi_result


def _write_map_csv(path: str, corr_map) -> None:
    lines = [
        f"# duration_s = {corr_map.duration_s}",
        f"# mean_current = {corr_map.mean_current}",
        f"# e_edges_ev = {corr_map.e_edges_ev[0]}:{corr_map.e_edges_ev[-1]}"
        f":{corr_map.e_edges_ev[1] - corr_map.e_edges_ev[0]}",
        f"# dt_edges_ns = {corr_map.dt_edges_ns[0]}:{corr_map.dt_edges_ns[-1]}"
        f":{corr_map.dt_edges_ns[1] - corr_map.dt_edges_ns[0]}",
        "e1_ev,dt_ns,counts",
    ]
    e_centers = corr_map.e_centers_ev
    dt_centers = corr_map.dt_centers_ns
    counts = corr_map.counts
    for i, e in enumerate(e_centers):
        row = counts[i]
        for j in np.nonzero(row)[0]:
            lines.append(f"{e:.1f},{dt_centers[j]:.1f},{int(row[j])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_analyze(args) -> int:
    events_arr, header = listmode.read_listmode(args.events)
    stream1, stream2 = listmode.split_streams(events_arr, header.detector_count)
    duration_s = args.duration
    mean_current = args.mean_current
    manifest_path = args.manifest
    if manifest_path is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.events)), "manifest.txt")
        manifest_path = sibling if os.path.exists(sibling) else None
    if manifest_path and duration_s is None:
        manifest = listmode.read_manifest(manifest_path)
        duration_s = float(manifest.get("duration_s", "0")) or None
        mean_current = float(manifest.get("mean_current", mean_current))
    if duration_s is None:
        span = 0.0
        if len(events_arr):
            span = float(events_arr["timestamp_ns"].max()) / 1e9
        duration_s = max(span, 1e-9)
        print(
            f"warning: no manifest/duration given; using stream span {duration_s:.3f} s",
            file=sys.stderr,
        )
    criteria = _criteria_from_args(args)
    corr_map, time_fit, energy_fit, energy_centroid, roi_result = _analyze_streams(
        stream1, stream2, criteria, duration_s, mean_current, args
    )
    os.makedirs(args.out, exist_ok=True)
    _write_map_csv(os.path.join(args.out, "correlation_map.csv"), corr_map)

    report: dict[str, object] = {
        "events_d1": len(stream1),
        "events_d2": len(stream2),
        "pairs_accepted": int(corr_map.counts.sum()),
        "duration_s": duration_s,
        "mean_current": mean_current,
    }
    if time_fit is not None:
        report.update(
            time_sigma_ns=f"{time_fit.sigma:.2f}",
            time_sigma_err_ns=f"{time_fit.sigma_err:.2f}",
            time_center_ns=f"{time_fit.center:.2f}",
            time_center_err_ns=f"{time_fit.center_err:.2f}",
        )
    if energy_fit is not None:
        report.update(
            peak_e1_ev=f"{energy_fit.center:.1f}",
            peak_e1_err_ev=f"{energy_fit.center_err:.1f}",
            peak_e1_sigma_ev=f"{energy_fit.sigma:.1f}",
        )
    if energy_centroid is not None:
        report["peak_e1_centroid_ev"] = f"{energy_centroid:.1f}"
    if roi_result is not None:
        report.update(
            roi_counts=roi_result.roi_counts,
            sideband_counts=roi_result.sideband_counts,
            sideband_estimate=f"{roi_result.sideband_estimate:.3f}",
            net_rate_per_hr=f"{roi_result.net_rate_per_hr:.3f}",
            net_rate_err_per_hr=f"{roi_result.net_rate_err_per_hr:.3f}",
        )
    listmode.write_manifest(os.path.join(args.out, "analysis_report.txt"), report)
    for key, value in report.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_scan(args) -> int:
    detunings = [float(v) for v in args.detunings.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    if any(d <= 0 for d in detunings):
        print("error: scan detunings must be > 0 mdeg", file=sys.stderr)
        return EXIT_CONFIG
    settings = _load_settings(args)
    os.makedirs(args.out, exist_ok=True)
    points = []
    for detuning in detunings:
        rates = []
        variances = []
        for seed in seeds:
            run_settings = dict(settings)
            run_settings["crystal.detuning"] = f"{detuning} mdeg"
            run_settings["detector1.offset"] = "auto"
            run_settings["detector2.offset"] = "auto"
            run_settings["run.seed"] = str(seed)
            run = cfg.build_run_config(run_settings)
            stream1, stream2, manifest = events.simulate_run(
                run, config_hash=cfg.config_hash(run_settings)
            )
            criteria = _criteria_from_args(args)
            _, _, _, _, roi_result = _analyze_streams(
                stream1,
                stream2,
                criteria,
                run.duration_s,
                run.beam_current_profile.mean,
                args,
            )
            if roi_result is None:
                continue
            rates.append(roi_result.net_rate_per_hr)
            variances.append(roi_result.net_rate_err_per_hr**2)
        if not rates:
            continue
        rate = float(np.mean(rates))
        err = math.sqrt(sum(variances)) / len(rates)
        points.append((detuning, rate, err))
        print(f"detuning {detuning:6.1f} mdeg: net rate {rate:8.2f} +/- {err:.2f} /hr")

    fit = None
    fit_error = ""
    try:
        fit = analysis.fit_misalignment_scan(points)
    except AnalysisError as exc:
        fit_error = str(exc)
        print(f"warning: scan fit failed: {exc}", file=sys.stderr)

    lines = [
        f"# seeds = {args.seeds}",
        f"# duration_s = {cfg.build_run_config(settings).duration_s}",
        "# mean_current = 1.0",
    ]
    if fit is not None:
        lines += [
            f"# exponent = {fit.exponent:.4f}",
            f"# exponent_err = {fit.exponent_err:.4f}",
            f"# amplitude = {fit.amplitude:.4f}",
            f"# chi2_per_dof = {fit.chi2_per_dof:.4f}",
            f"# amplitude_fixed = {fit.amplitude_fixed:.4f}",
            f"# chi2_per_dof_fixed = {fit.chi2_per_dof_fixed:.4f}",
        ]
    else:
        lines.append(f"# fit_error = {fit_error}")
    lines.append("detuning_mdeg,net_rate_per_hr,net_rate_err_per_hr")
    lines += [f"{d},{r:.4f},{e:.4f}" for d, r, e in points]
    path = os.path.join(args.out, "scan_result.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if fit is not None:
        print(
            f"fit: rate = {fit.amplitude:.1f} * detuning^{fit.exponent:.3f} "
            f"(+/- {fit.exponent_err:.3f}), chi2/dof {fit.chi2_per_dof:.2f}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    settings = _load_settings(args)
    run = cfg.build_run_config(settings)
    exp = run.experiment
    net_rate = args.net_rate
    if net_rate is None:
        report_path = os.path.join(args.analysis, "analysis_report.txt")
        report = listmode.read_manifest(report_path)
        if "net_rate_per_hr" not in report:
            print(f"error: no net rate in {report_path}", file=sys.stderr)
            return EXIT_DATA
        net_rate = float(report["net_rate_per_hr"])
    acceptance = args.acceptance or _pair_acceptance(exp)
    if exp.chain.model == "ideal":
        chain_eff = 1.0
    elif exp.chain.model == "constant":
        chain_eff = exp.chain.pair_efficiency
    else:
        half = exp.beam.pump_energy_ev / 2
        chain_eff = exp.chain.photon_efficiency(half) ** 2
    result = analysis.conversion_efficiency(
        net_rate, acceptance, chain_eff, exp.beam.incident_rate_per_s
    )
    print(f"net pair rate        : {result.net_rate_per_hr:.1f} /hr")
    print(f"pair acceptance      : {acceptance:.4f}")
    print(f"chain efficiency     : {chain_eff:.3f}")
    print(f"observable rate      : {result.observable_rate_per_hr:.0f} /hr")
    print(f"total generation     : {result.total_rate_per_hr:.0f} /hr")
    print(f"conversion efficiency: {result.efficiency:.3e}")
    if math.isfinite(result.incident_per_pair):
        print(f"incident per pair    : {result.incident_per_pair:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="xpdc", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", default="xpdc-out", help="output directory")
    common.add_argument("--csv", action="store_true", help="also write CSV event dump")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("plan", parents=[common], help="print the placement report")

    sub.add_parser(
        "simulate", parents=[common], help="simulate one run to a list-mode file"
    )

    p_analyze = sub.add_parser(
        "analyze", parents=[common], help="coincidence analysis of a list-mode file"
    )
    p_analyze.add_argument("events", help="list-mode event file")
    p_analyze.add_argument("--manifest", help="manifest for duration/current")
    p_analyze.add_argument("--duration", type=float, help="run duration, s")
    p_analyze.add_argument("--mean-current", type=float, default=1.0)
    _add_criteria_args(p_analyze)

    p_scan = sub.add_parser(
        "scan", parents=[common], help="simulate and fit a misalignment scan"
    )
    p_scan.add_argument(
        "--detunings", default="5,10,20,30,50", help="comma list, mdeg"
    )
    p_scan.add_argument("--seeds", default="1", help="comma list of seeds")
    _add_criteria_args(p_scan)

    p_report = sub.add_parser(
        "report", parents=[common], help="conversion-efficiency summary"
    )
    p_report.add_argument("--net-rate", type=float, help="net pair rate, /hr")
    p_report.add_argument(
        "--analysis", default="xpdc-out", help="directory with analysis_report.txt"
    )
    p_report.add_argument(
        "--acceptance", type=float, help="override pair acceptance fraction"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "plan": cmd_plan,
        "simulate": cmd_simulate,
        "analyze": cmd_analyze,
        "scan": cmd_scan,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, PhysicsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AnalysisError, ListModeFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
