"""End-to-end experiment pipeline: simulate, track, calibrate, fuse, report.

The runner follows the cross-trajectory protocol: the network is
self-calibrated on one trajectory kind and evaluated (per-frame
one-shot fusion against truth and against track-level fusion) on the
other.  Every stage is deterministic in the scenario seed, and reports
are recomputable from the emitted per-frame CSV.

Output layout, fixed so tools and tests can rely on it:

    <out>/<scenario>/<seed>/
        scenario.json
        tracks/node0.csv, node<i>_in_ref.csv, track_fusion.csv
        calibration/result.json
        fusion/oneshot.csv, fusion/per_frame.csv
        report/report.json
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibration import CalibrationResult, calibrate_pair, result_to_dict, save_result
from .fusion import (
    FusionEstimate,
    FusionObservation,
    ObservationEntry,
    PriorConfig,
    solve,
)
from .geometry import Pose2D, angle_difference
from .scene import (
    ScenarioConfig,
    counterpart_trajectory,
    export_measurements_csv,
    export_truth_csv,
    generate_trajectory,
    load_scenario,
    save_scenario,
    scenario_to_dict,
    synthesize_measurements,
)
from .tracking import (
    EkfConfig,
    Track,
    export_track_csv,
    run_tracker,
    track_level_fusion,
    transform_track,
)

# Seed offset separating the calibration-stage simulation from the
# evaluation stage of the same scenario seed.
CALIBRATION_SEED_OFFSET = 7919

_MODES = ("ml", "bayes", "both")
_BENCHMARKS = ("truth", "trackfusion")


class PipelineError(RuntimeError):
    """A pipeline stage is missing the inputs it needs."""


@dataclass
class PipelineOptions:
    """Knobs for the experiment runner (all declared defaults)."""

    mode: str = "both"
    benchmark: str = "truth"
    out_dir: Path | str = "out"
    write_outputs: bool = True
    cross_trajectory: bool = True
    burn_in_frames: int = 10
    ekf: EkfConfig = field(default_factory=lambda: EkfConfig(process_noise_accel=0.4))
    prior: PriorConfig = field(default_factory=PriorConfig)
    pair_skip: int | None = None
    pair_gap: int = 5
    pair_settle: int = 10
    max_nonconverged_fraction: float = 0.05

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.benchmark not in _BENCHMARKS:
            raise ValueError(f"benchmark must be one of {_BENCHMARKS}, got {self.benchmark!r}")

    @property
    def modes(self) -> tuple[str, ...]:
        return ("ml", "bayes") if self.mode == "both" else (self.mode,)


@dataclass
class ExperimentReport:
    scenario: str
    seed: int
    benchmark: str
    calibration: dict
    rmse: dict
    frames_evaluated: int
    frames_total: int
    nonconverged_fraction: dict
    per_frame_output_path: str
    out_dir: str

    @property
    def position_rmse_bayes(self) -> float | None:
        return self._headline("position_bayes")

    @property
    def velocity_rmse_bayes(self) -> float | None:
        return self._headline("velocity_bayes")

    @property
    def position_rmse_ml(self) -> float | None:
        return self._headline("position_ml")

    @property
    def velocity_rmse_ml(self) -> float | None:
        return self._headline("velocity_ml")

    def _headline(self, key: str) -> float | None:
        return self.rmse[self.benchmark].get(key)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "benchmark": self.benchmark,
            "calibration": self.calibration,
            "rmse": self.rmse,
            "position_rmse_bayes": self.position_rmse_bayes,
            "velocity_rmse_bayes": self.velocity_rmse_bayes,
            "position_rmse_ml": self.position_rmse_ml,
            "velocity_rmse_ml": self.velocity_rmse_ml,
            "frames_evaluated": self.frames_evaluated,
            "frames_total": self.frames_total,
            "nonconverged_fraction": self.nonconverged_fraction,
            "per_frame_output_path": self.per_frame_output_path,
            "out_dir": self.out_dir,
        }


def paired_positions(
    track1: Track, track2: Track, skip: int = 50, gap: int = 5, settle: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Select frame-synchronized position pairs fit for calibration.

    Only frames where BOTH tracks were measurement-updated count
    (coasted predictions are not position estimates); the first `skip`
    pairs are dropped (filter convergence transient), and `settle`
    pairs are dropped after any detection gap longer than `gap` frames
    (re-acquisition transient).
    """
    by1 = track1.by_frame()
    by2 = track2.by_frame()
    good = []
    last = None
    cooldown = 0
    for k in sorted(set(by1) & set(by2)):
        if not (by1[k].updated and by2[k].updated):
            continue
        if last is not None and k - last > gap:
            cooldown = settle
        last = k
        if cooldown > 0:
            cooldown -= 1
            continue
        good.append(k)
    good = good[skip:]
    if len(good) < 2:
        raise PipelineError("fewer than 2 usable track pairs for calibration")
    z1 = np.array([by1[k].position for k in good])
    z2 = np.array([by2[k].position for k in good])
    return z1, z2


def _simulate(config: ScenarioConfig):
    truth = generate_trajectory(
        config.trajectory, config.num_frames, config.frame_duration, config.rng_seed
    )
    frames = synthesize_measurements(truth, config)
    return truth, frames


def _run_trackers(config: ScenarioConfig, frames, options: PipelineOptions) -> list[Track]:
    return [
        run_tracker(frames, i, node, options.ekf, config.noise, config.frame_duration)
        for i, node in enumerate(config.nodes)
    ]


def calibrate_scenario(
    config: ScenarioConfig, options: PipelineOptions | None = None
) -> list[CalibrationResult]:
    """Self-calibration stage: one pairwise result per non-reference node."""
    options = options or PipelineOptions()
    calib_config = calibration_stage_config(config, options)
    _, frames = _simulate(calib_config)
    tracks = _run_trackers(calib_config, frames, options)
    # Short sequences cannot afford the full 50-frame transient skip.
    skip = options.pair_skip
    if skip is None:
        skip = min(50, config.num_frames // 5)
    results = []
    for i in range(1, len(tracks)):
        z1, z2 = paired_positions(
            tracks[0], tracks[i], skip, options.pair_gap, options.pair_settle
        )
        results.append(calibrate_pair(z1, z2))
    return results


def calibration_stage_config(
    config: ScenarioConfig, options: PipelineOptions
) -> ScenarioConfig:
    """The calibration-stage scenario: counterpart trajectory, offset seed."""
    if options.cross_trajectory:
        trajectory = config.calibration_trajectory or counterpart_trajectory(
            config.trajectory, config.num_frames, config.frame_duration
        )
    else:
        trajectory = config.trajectory
    return replace(
        config,
        trajectory=trajectory,
        calibration_trajectory=None,
        rng_seed=config.rng_seed + CALIBRATION_SEED_OFFSET,
    )


def _estimated_poses(calibrations: list[CalibrationResult]) -> list[Pose2D]:
    poses = [Pose2D(0.0, 0.0, 0.0)]
    poses.extend(
        Pose2D(res.p21.real, res.p21.imag, res.phi21) for res in calibrations
    )
    return poses


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_csv_cell(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def run_experiment(
    config: ScenarioConfig | str | Path, options: PipelineOptions | None = None
) -> ExperimentReport:
    """Full pipeline: calibrate, evaluate, fuse per frame, report RMSEs.

    RMSEs are reported against ground truth and against the track-level
    fusion benchmark over the identical frame set: frames past the
    burn-in where every node detected the target.
    """
    if not isinstance(config, ScenarioConfig):
        config = load_scenario(config)
    options = options or PipelineOptions()

    calibrations = calibrate_scenario(config, options)
    node2_true = config.nodes[1]
    cal = calibrations[0]
    calibration_summary = dict(result_to_dict(cal))
    calibration_summary["pos_error_m"] = abs(cal.p21 - complex(node2_true.x, node2_true.y))
    calibration_summary["angle_error_deg"] = abs(
        math.degrees(angle_difference(cal.phi21, node2_true.phi))
    )

    truth, frames = _simulate(config)
    tracks = _run_trackers(config, frames, options)
    est_poses = _estimated_poses(calibrations)
    transformed = [tracks[0]]
    transformed.extend(
        transform_track(tracks[i], calibrations[i - 1].p21, calibrations[i - 1].phi21)
        for i in range(1, len(tracks))
    )
    fused = transformed[0]
    for other in transformed[1:]:
        fused = track_level_fusion(fused, other)
    fused_by_frame = fused.by_frame()
    track_by_frame = [t.by_frame() for t in transformed]

    estimates: dict[str, dict[int, FusionEstimate]] = {m: {} for m in options.modes}
    eval_frames = []
    for frame in frames:
        if any(det is None for det in frame.per_node):
            continue
        if frame.frame_index not in fused_by_frame:
            continue
        if any(frame.frame_index not in by for by in track_by_frame):
            continue
        obs = FusionObservation(tuple(
            ObservationEntry(est_poses[i], det)
            for i, det in enumerate(frame.per_node)
        ))
        for mode in options.modes:
            estimates[mode][frame.frame_index] = solve(
                obs,
                config.noise,
                mode=mode,
                prior=options.prior if mode == "bayes" else None,
            )
        eval_frames.append(frame.frame_index)

    if not eval_frames:
        raise PipelineError("no frames with detections from every node")

    rmse_frames = [k for k in eval_frames if k >= options.burn_in_frames]
    rmse = {"truth": {}, "track_fusion": {}}
    for mode in options.modes:
        for bench_key in ("truth", "track_fusion"):
            pos_sq = []
            vel_sq = []
            for k in rmse_frames:
                est = estimates[mode][k].state
                if bench_key == "truth":
                    ref_pos = (truth[k].x, truth[k].y)
                    ref_vel = (truth[k].vx, truth[k].vy)
                else:
                    point = fused_by_frame[k]
                    ref_pos = (point.position.real, point.position.imag)
                    ref_vel = (point.velocity[0], point.velocity[1])
                pos_sq.append((est.x - ref_pos[0]) ** 2 + (est.y - ref_pos[1]) ** 2)
                vel_sq.append((est.vx - ref_vel[0]) ** 2 + (est.vy - ref_vel[1]) ** 2)
            rmse[bench_key][f"position_{mode}"] = math.sqrt(np.mean(pos_sq))
            rmse[bench_key][f"velocity_{mode}"] = math.sqrt(np.mean(vel_sq))

    nonconverged = {
        mode: np.mean([not estimates[mode][k].converged for k in eval_frames])
        for mode in options.modes
    }

    benchmark_key = "truth" if options.benchmark == "truth" else "track_fusion"
    run_dir = Path(options.out_dir) / config.name / str(config.rng_seed)
    per_frame_path = run_dir / "fusion" / "per_frame.csv"
    report = ExperimentReport(
        scenario=config.name,
        seed=config.rng_seed,
        benchmark=benchmark_key,
        calibration=calibration_summary,
        rmse=rmse,
        frames_evaluated=len(rmse_frames),
        frames_total=config.num_frames,
        nonconverged_fraction={k: float(v) for k, v in nonconverged.items()},
        per_frame_output_path=str(per_frame_path),
        out_dir=str(run_dir),
    )

    if options.write_outputs:
        _write_run_outputs(
            run_dir, config, options, truth, frames, transformed, fused,
            estimates, eval_frames, rmse_frames, cal, report,
        )
    return report


def _write_run_outputs(
    run_dir: Path,
    config: ScenarioConfig,
    options: PipelineOptions,
    truth,
    frames,
    transformed: list[Track],
    fused: Track,
    estimates,
    eval_frames,
    rmse_frames,
    calibration: CalibrationResult,
    report: ExperimentReport,
) -> None:
    for sub in ("tracks", "calibration", "fusion", "report"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    save_scenario(config, run_dir / "scenario.json")
    export_truth_csv(truth, run_dir / "fusion" / "truth.csv")
    export_measurements_csv(frames, run_dir / "fusion" / "measurements.csv")
    export_track_csv(transformed[0], run_dir / "tracks" / "node0.csv")
    for i, track in enumerate(transformed[1:], start=1):
        export_track_csv(track, run_dir / "tracks" / f"node{i}_in_ref.csv")
    export_track_csv(fused, run_dir / "tracks" / "track_fusion.csv")
    save_result(calibration, run_dir / "calibration" / "result.json")

    oneshot_rows = []
    for mode in options.modes:
        for k in eval_frames:
            est = estimates[mode][k]
            cov = est.covariance
            cov_cells = (
                [cov[i, j] for i in range(4) for j in range(i, 4)]
                if cov is not None
                else [math.nan] * 10
            )
            oneshot_rows.append(
                [k, mode, est.state.x, est.state.y, est.state.vx, est.state.vy,
                 est.converged, est.conditioning] + cov_cells
            )
    _write_csv(
        run_dir / "fusion" / "oneshot.csv",
        ["frame", "mode", "x", "y", "vx", "vy", "converged", "cond",
         "c11", "c12", "c13", "c14", "c22", "c23", "c24", "c33", "c34", "c44"],
        oneshot_rows,
    )

    fused_by = fused.by_frame()
    track_by = [t.by_frame() for t in transformed]
    rmse_set = set(rmse_frames)
    header = ["frame"]
    for prefix in ("truth", "ekf1", "ekf2_in_1", "track_fusion"):
        header += [f"{prefix}_{q}" for q in ("x", "y", "vx", "vy")]
    for mode in ("bayes", "ml"):
        if mode in options.modes:
            header += [f"oneshot_{mode}_{q}" for q in ("x", "y", "vx", "vy")]
            header += [f"oneshot_{mode}_converged", f"oneshot_{mode}_cond"]
    header.append("in_rmse_set")
    rows = []
    for k in eval_frames:
        t = truth[k]
        p0 = track_by[0][k]
        p1 = track_by[1][k]
        pf = fused_by[k]
        row = [k, t.x, t.y, t.vx, t.vy,
               p0.position.real, p0.position.imag, p0.velocity[0], p0.velocity[1],
               p1.position.real, p1.position.imag, p1.velocity[0], p1.velocity[1],
               pf.position.real, pf.position.imag, pf.velocity[0], pf.velocity[1]]
        for mode in ("bayes", "ml"):
            if mode in options.modes:
                est = estimates[mode][k]
                row += [est.state.x, est.state.y, est.state.vx, est.state.vy,
                        est.converged, est.conditioning]
        row.append(k in rmse_set)
        rows.append(row)
    _write_csv(run_dir / "fusion" / "per_frame.csv", header, rows)

    (run_dir / "report" / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )


# -- Monte Carlo ---------------------------------------------------------

def _mc_trial(args) -> tuple[int, dict | None, str | None]:
    config_dict, options, trial = args
    from .scene import scenario_from_dict

    config = scenario_from_dict(config_dict)
    config = replace(config, rng_seed=config.rng_seed + trial)
    try:
        report = run_experiment(config, options)
    except Exception as exc:  # noqa: BLE001 - recorded, not silenced
        return trial, None, f"{type(exc).__name__}: {exc}"
    return trial, report.to_dict(), None


def run_monte_carlo(
    config: ScenarioConfig | str | Path,
    trials: int,
    options: PipelineOptions | None = None,
    jobs: int = 1,
) -> dict:
    """Repeat run_experiment at seeds seed+0 .. seed+trials-1 and aggregate.

    Failed trials are recorded and excluded from the aggregates.  The
    aggregate is independent of `jobs` (results are ordered by trial).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not isinstance(config, ScenarioConfig):
        config = load_scenario(config)
    options = options or PipelineOptions()
    mc_options = replace(options, write_outputs=False)
    config_dict = scenario_to_dict(config)
    tasks = [(config_dict, mc_options, t) for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = sorted(pool.map(_mc_trial, tasks), key=lambda r: r[0])
    else:
        results = [_mc_trial(task) for task in tasks]

    reports = [r[1] for r in results if r[1] is not None]
    failures = [
        {"trial": r[0], "seed": config.rng_seed + r[0], "error": r[2]}
        for r in results
        if r[1] is None
    ]

    def collect(path: tuple[str, ...]) -> list[float]:
        values = []
        for rep in reports:
            node = rep
            for key in path:
                node = node.get(key) if isinstance(node, dict) else None
                if node is None:
                    break
            if node is not None:
                values.append(float(node))
        return values

    metric_paths = {
        "calibration_rmse": ("calibration", "rmse"),
        "calibration_pos_error_m": ("calibration", "pos_error_m"),
        "calibration_angle_error_deg": ("calibration", "angle_error_deg"),
    }
    for bench in ("truth", "track_fusion"):
        for mode in options.modes:
            metric_paths[f"position_rmse_{mode}_vs_{bench}"] = ("rmse", bench, f"position_{mode}")
            metric_paths[f"velocity_rmse_{mode}_vs_{bench}"] = ("rmse", bench, f"velocity_{mode}")

    aggregates = {}
    for name, path in metric_paths.items():
        values = collect(path)
        if values:
            aggregates[name] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "min": float(np.min(values)),
                "max": float(np.max(values)),
            }

    summary = {
        "scenario": config.name,
        "base_seed": config.rng_seed,
        "trials": trials,
        "completed": len(reports),
        "failed": len(failures),
        "failures": failures,
        "aggregates": aggregates,
        "reports": reports,
    }
    if options.write_outputs:
        mc_dir = Path(options.out_dir) / config.name / f"mc_seed{config.rng_seed}_t{trials}"
        mc_dir.mkdir(parents=True, exist_ok=True)
        (mc_dir / "aggregate.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
        summary["out_path"] = str(mc_dir / "aggregate.json")
    return summary


# -- Plot data ------------------------------------------------------------

_PLOT_QUANTITIES = ("x", "y", "vx", "vy")


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [l for l in path.read_text().strip().split("\n") if not l.startswith("#")]
    header = lines[0].split(",")
    return header, [l.split(",") for l in lines[1:]]


def emit_plot_data(
    run: ExperimentReport | str | Path, out_dir: str | Path | None = None
) -> dict[str, Path]:
    """Tidy per-quantity CSVs for plotting, from a completed run.

    `run` is an ExperimentReport or its output directory.  Writes
    plot_<q>.csv for q in (x, y, vx, vy) with columns
    frame,truth,ekf1,ekf2_in_1,track_fusion,oneshot_bayes,oneshot_ml,
    plus overlay.csv with the calibrated track overlay.
    """
    run_dir = Path(run.out_dir if isinstance(run, ExperimentReport) else run)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plots"
    per_frame = run_dir / "fusion" / "per_frame.csv"
    if not per_frame.exists():
        raise PipelineError(f"missing per-frame fusion output: {per_frame} (run the 'run' stage)")
    header, rows = _read_csv(per_frame)
    index = {name: i for i, name in enumerate(header)}
    for mode in ("bayes", "ml"):
        if f"oneshot_{mode}_x" not in index:
            raise PipelineError(
                f"per-frame output lacks one-shot {mode} columns; rerun with mode=both"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for q in _PLOT_QUANTITIES:
        path = out_dir / f"plot_{q}.csv"
        out_rows = []
        for row in rows:
            out_rows.append([
                row[index["frame"]],
                row[index[f"truth_{q}"]],
                row[index[f"ekf1_{q}"]],
                row[index[f"ekf2_in_1_{q}"]],
                row[index[f"track_fusion_{q}"]],
                row[index[f"oneshot_bayes_{q}"]],
                row[index[f"oneshot_ml_{q}"]],
            ])
        lines = ["frame,truth,ekf1,ekf2_in_1,track_fusion,oneshot_bayes,oneshot_ml"]
        lines.extend(",".join(r) for r in out_rows)
        path.write_text("\n".join(lines) + "\n")
        written[q] = path

    overlay = out_dir / "overlay.csv"
    lines = ["frame,ekf1_x,ekf1_y,ekf2_in_1_x,ekf2_in_1_y"]
    for row in rows:
        lines.append(",".join([
            row[index["frame"]],
            row[index["ekf1_x"]], row[index["ekf1_y"]],
            row[index["ekf2_in_1_x"]], row[index["ekf2_in_1_y"]],
        ]))
    overlay.write_text("\n".join(lines) + "\n")
    written["overlay"] = overlay
    return written
