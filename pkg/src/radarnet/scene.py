"""Scenario simulation: ground-truth trajectories and noisy detections.

A scenario is an N-node radar network watching a single moving point
target.  Each frame, every node that can see the target (within the
azimuth field of view and the maximum unambiguous range) emits a
detection: the ideal measurement triple plus independent zero-mean
Gaussian noise per modality.

Scenario configs serialize to JSON; angles appear in config files in
degrees (keys carry a _deg suffix) and in radians everywhere in code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    FOV_HALF_ANGLE,
    Pose2D,
    TargetState,
    angle_off_boresight,
    measure,
)

# Table-driven defaults for the desk-scale experiments: 150 ms frames,
# 600-frame sequences, 18.07 m maximum unambiguous range, and noise
# sigmas equal to the range / spatial-frequency / Doppler resolutions.
DEFAULT_FRAME_DURATION = 0.150
DEFAULT_NUM_FRAMES = 600
MAX_UNAMBIGUOUS_RANGE = 18.07
DEFAULT_SIGMA_R = 0.035
DEFAULT_SIGMA_OMEGA = math.pi / 4.0
DEFAULT_SIGMA_V = 0.1807

MAX_HUMAN_SPEED = 3.5

# Seed-stream identifiers so trajectory and measurement noise draws
# are independent for the same scenario seed.
_TRAJECTORY_STREAM = 0
_MEASUREMENT_STREAM = 1


class ConfigError(ValueError):
    """Invalid or incomplete scenario configuration."""


@dataclass(frozen=True)
class NoiseConfig:
    """Per-modality measurement noise standard deviations."""

    sigma_r: float = DEFAULT_SIGMA_R
    sigma_omega: float = DEFAULT_SIGMA_OMEGA
    sigma_v: float = DEFAULT_SIGMA_V

    def __post_init__(self):
        for name in ("sigma_r", "sigma_omega", "sigma_v"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"NoiseConfig.{name} must be > 0")


@dataclass(frozen=True)
class Detection:
    """One node's noisy (range, spatial frequency, radial velocity) triple."""

    range: float
    spatial_freq: float
    radial_vel: float

    def __post_init__(self):
        for name in ("range", "spatial_freq", "radial_vel"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Detection.{name} must be finite")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class TrajectorySpec:
    """Target motion specification.

    kind "straight": constant velocity speed*(cos heading, sin heading).
    kind "random": mean-reverting (Ornstein-Uhlenbeck style) velocity
    walk with correlation time `smoothness` seconds and speed clamped
    to `speed_cap`.
    """

    kind: str
    start: tuple[float, float]
    speed: float = 1.0
    heading: float = 0.0
    speed_cap: float = 1.0
    smoothness: float = 2.0

    def __post_init__(self):
        if self.kind not in ("straight", "random"):
            raise ConfigError(f"unknown trajectory kind: {self.kind!r}")
        limit = self.speed if self.kind == "straight" else self.speed_cap
        if not 0.0 < limit <= MAX_HUMAN_SPEED:
            raise ConfigError(
                f"trajectory speed must be in (0, {MAX_HUMAN_SPEED}] m/s, got {limit}"
            )
        if self.kind == "random" and not self.smoothness > 0.0:
            raise ConfigError("trajectory smoothness must be > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """Full description of one simulated scenario.

    Node 0 is the calibration reference and must be the origin pose.
    `calibration_trajectory`, when set, is the counterpart trajectory
    the experiment runner uses for the self-calibration stage.
    """

    name: str
    nodes: tuple[Pose2D, ...]
    trajectory: TrajectorySpec
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    frame_duration: float = DEFAULT_FRAME_DURATION
    num_frames: int = DEFAULT_NUM_FRAMES
    rng_seed: int = 0
    max_range: float = MAX_UNAMBIGUOUS_RANGE
    fov_half_angle: float = FOV_HALF_ANGLE
    calibration_trajectory: TrajectorySpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if self.num_frames < 2:
            raise ConfigError("num_frames must be >= 2")
        if not self.frame_duration > 0.0:
            raise ConfigError("frame_duration must be > 0")
        if len(self.nodes) < 2:
            raise ConfigError("scenario needs at least 2 nodes")
        ref = self.nodes[0]
        if abs(ref.x) > 1e-12 or abs(ref.y) > 1e-12 or ref.phi > 1e-12:
            raise ConfigError("node 1 must be the origin pose (0, 0, phi=0)")


@dataclass(frozen=True)
class MeasurementFrame:
    """Per-frame detections, one optional entry per node."""

    frame_index: int
    per_node: tuple[Detection | None, ...]


def generate_trajectory(
    spec: TrajectorySpec, num_frames: int, dt: float, seed: int
) -> list[TargetState]:
    """Generate `num_frames` target states, deterministic in `seed`.

    Positions integrate the per-frame velocity with step dt, so frame
    k+1 sits at p[k] + v[k]*dt.
    """
    if num_frames < 2:
        raise ConfigError("num_frames must be >= 2")
    if spec.kind == "straight":
        vx = spec.speed * math.cos(spec.heading)
        vy = spec.speed * math.sin(spec.heading)
        x0, y0 = spec.start
        return [
            TargetState(x0 + k * dt * vx, y0 + k * dt * vy, vx, vy)
            for k in range(num_frames)
        ]

    rng = np.random.default_rng([seed, _TRAJECTORY_STREAM])
    # Mean-reverting velocity walk with a weak critically-damped pull
    # toward the start point, so the target wanders inside a region of
    # a few meters (like a person pacing a marked area) instead of
    # drifting out of every field of view over a 90 s sequence.
    # Stationary per-axis velocity std is sized so the speed cap only
    # clips occasional excursions.
    gamma = 1.0 / spec.smoothness
    spring = 0.25 * gamma * gamma
    sigma_axis = spec.speed_cap / 2.5
    kick = sigma_axis * math.sqrt(2.0 * gamma * dt)
    center = np.array(spec.start, dtype=float)
    pos = center.copy()
    vel = sigma_axis * rng.standard_normal(2)
    states = []
    for _ in range(num_frames):
        speed = math.hypot(vel[0], vel[1])
        if speed > spec.speed_cap:
            vel *= spec.speed_cap / speed
        states.append(TargetState(pos[0], pos[1], vel[0], vel[1]))
        pos = pos + vel * dt
        vel = (
            vel
            - (gamma * vel + spring * (pos - center)) * dt
            + kick * rng.standard_normal(2)
        )
    return states


def is_visible(
    node: Pose2D,
    target: TargetState,
    max_range: float = MAX_UNAMBIGUOUS_RANGE,
    fov_half_angle: float = FOV_HALF_ANGLE,
) -> bool:
    """True iff the target is within the node's range and azimuth FoV."""
    dx = target.x - node.x
    dy = target.y - node.y
    r = math.hypot(dx, dy)
    if r == 0.0 or r > max_range:
        return False
    return abs(angle_off_boresight(node, target)) <= fov_half_angle


def synthesize_measurements(
    truth: list[TargetState], config: ScenarioConfig
) -> list[MeasurementFrame]:
    """Per-node noisy detections for every frame of a truth trajectory.

    Noise draws are independent across frames, nodes, and modalities;
    the spatial frequency is clamped to [-pi, pi] after noise addition.
    Nodes that cannot see the target contribute None.
    """
    if len(truth) != config.num_frames:
        raise ConfigError(
            f"truth length {len(truth)} != num_frames {config.num_frames}"
        )
    rng = np.random.default_rng([config.rng_seed, _MEASUREMENT_STREAM])
    noise = config.noise
    frames = []
    for k, target in enumerate(truth):
        per_node: list[Detection | None] = []
        for node in config.nodes:
            draws = rng.standard_normal(3)
            if not is_visible(node, target, config.max_range, config.fov_half_angle):
                per_node.append(None)
                continue
            ideal = measure(node, target)
            omega = ideal.spatial_freq + noise.sigma_omega * draws[1]
            per_node.append(
                Detection(
                    range=ideal.range + noise.sigma_r * draws[0],
                    spatial_freq=min(math.pi, max(-math.pi, omega)),
                    radial_vel=ideal.radial_vel + noise.sigma_v * draws[2],
                )
            )
        frames.append(MeasurementFrame(frame_index=k, per_node=tuple(per_node)))
    return frames


# Built-in two-node geometries.  Node 0 is always the origin reference.
# C pins node 1 at (0 m, 7 m, 180 deg): the nodes face each other and
# the target region straddles the line between them.  A and B place the
# second node 7 m away with a 150 deg (facing, laterally offset) and a
# 90 deg relative orientation respectively, boresights converging on
# the shared target region; the trajectories below keep the target
# inside the common field of view for the full sequence.
_BUILTIN_NODES = {
    "A": (Pose2D(0.0, 0.0, 0.0), Pose2D(3.5, math.sqrt(49.0 - 3.5**2), math.radians(150.0))),
    "B": (Pose2D(0.0, 0.0, 0.0), Pose2D(7.0 / math.sqrt(2.0), 7.0 / math.sqrt(2.0), math.pi / 2.0)),
    "C": (Pose2D(0.0, 0.0, 0.0), Pose2D(0.0, 7.0, math.pi)),
}

_BUILTIN_TRAJECTORIES = {
    "A": {
        "straight": TrajectorySpec(
            "straight", start=(3.0, 2.2), speed=0.05, heading=math.radians(150.0)
        ),
        "random": TrajectorySpec("random", start=(1.0, 3.2), speed_cap=0.6),
    },
    "B": {
        "straight": TrajectorySpec(
            "straight", start=(2.8, 2.2), speed=0.045, heading=math.radians(135.0)
        ),
        "random": TrajectorySpec("random", start=(0.8, 4.4), speed_cap=0.7, smoothness=2.5),
    },
    "C": {
        "straight": TrajectorySpec(
            "straight", start=(-2.0, 2.6), speed=0.05, heading=math.radians(35.0)
        ),
        "random": TrajectorySpec("random", start=(0.0, 3.5), speed_cap=0.8),
    },
}


def builtin_scenario(name: str, trajectory: str = "straight", seed: int = 0) -> ScenarioConfig:
    """One of the built-in two-node scenarios A, B, or C.

    `trajectory` selects the evaluation trajectory kind; the other kind
    is attached as the calibration counterpart.
    """
    key = name.upper()
    if key not in _BUILTIN_NODES:
        raise ConfigError(f"unknown builtin scenario {name!r}; expected A, B, or C")
    if trajectory not in ("straight", "random"):
        raise ConfigError(f"unknown trajectory kind {trajectory!r}")
    other = "random" if trajectory == "straight" else "straight"
    return ScenarioConfig(
        name=key,
        nodes=_BUILTIN_NODES[key],
        trajectory=_BUILTIN_TRAJECTORIES[key][trajectory],
        rng_seed=seed,
        calibration_trajectory=_BUILTIN_TRAJECTORIES[key][other],
    )


def counterpart_trajectory(
    spec: TrajectorySpec, num_frames: int, dt: float
) -> TrajectorySpec:
    """Derive the opposite-kind trajectory for the calibration stage.

    Used when a config does not declare one explicitly: a straight
    spec's counterpart is a random walk started at the path midpoint;
    a random spec's counterpart is a straight crossing of the start
    point at the same nominal speed.
    """
    if spec.kind == "straight":
        half = 0.5 * spec.speed * num_frames * dt
        mid = (
            spec.start[0] + half * math.cos(spec.heading),
            spec.start[1] + half * math.sin(spec.heading),
        )
        return TrajectorySpec(
            "random", start=mid, speed_cap=min(MAX_HUMAN_SPEED, max(0.5, spec.speed))
        )
    length = min(4.5, 0.6 * spec.speed_cap * num_frames * dt)
    speed = length / (num_frames * dt)
    start = (spec.start[0] - 0.5 * length, spec.start[1])
    return TrajectorySpec("straight", start=start, speed=speed, heading=0.0)


# -- JSON config schema -------------------------------------------------

_REQUIRED_KEYS = ("name", "nodes", "trajectory")


def _trajectory_to_dict(spec: TrajectorySpec) -> dict:
    d: dict = {"kind": spec.kind, "start": list(spec.start)}
    if spec.kind == "straight":
        d["speed"] = spec.speed
        d["heading_deg"] = math.degrees(spec.heading)
    else:
        d["speed_cap"] = spec.speed_cap
        d["smoothness"] = spec.smoothness
    return d


def _trajectory_from_dict(d: dict) -> TrajectorySpec:
    missing = [k for k in ("kind", "start") if k not in d]
    if missing:
        raise ConfigError(f"trajectory section missing keys: {', '.join(missing)}")
    kind = d["kind"]
    start = tuple(float(v) for v in d["start"])
    if kind == "straight":
        return TrajectorySpec(
            kind,
            start=start,
            speed=float(d.get("speed", 1.0)),
            heading=math.radians(float(d.get("heading_deg", 0.0))),
        )
    return TrajectorySpec(
        kind,
        start=start,
        speed_cap=float(d.get("speed_cap", 1.0)),
        smoothness=float(d.get("smoothness", 2.0)),
    )


def scenario_to_dict(config: ScenarioConfig) -> dict:
    d = {
        "name": config.name,
        "seed": config.rng_seed,
        "frame_duration": config.frame_duration,
        "num_frames": config.num_frames,
        "max_range": config.max_range,
        "fov_half_angle_deg": math.degrees(config.fov_half_angle),
        "nodes": [
            {"x": n.x, "y": n.y, "phi_deg": math.degrees(n.phi)} for n in config.nodes
        ],
        "noise": {
            "sigma_r": config.noise.sigma_r,
            "sigma_omega": config.noise.sigma_omega,
            "sigma_v": config.noise.sigma_v,
        },
        "trajectory": _trajectory_to_dict(config.trajectory),
    }
    if config.calibration_trajectory is not None:
        d["calibration_trajectory"] = _trajectory_to_dict(config.calibration_trajectory)
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    missing = [k for k in _REQUIRED_KEYS if k not in d]
    if missing:
        raise ConfigError(f"config missing keys: {', '.join(missing)}")
    nodes = []
    for i, nd in enumerate(d["nodes"]):
        bad = [k for k in ("x", "y", "phi_deg") if k not in nd]
        if bad:
            raise ConfigError(f"nodes[{i}] missing keys: {', '.join(bad)}")
        nodes.append(Pose2D(float(nd["x"]), float(nd["y"]), math.radians(float(nd["phi_deg"]))))
    noise_d = d.get("noise", {})
    noise = NoiseConfig(
        sigma_r=float(noise_d.get("sigma_r", DEFAULT_SIGMA_R)),
        sigma_omega=float(noise_d.get("sigma_omega", DEFAULT_SIGMA_OMEGA)),
        sigma_v=float(noise_d.get("sigma_v", DEFAULT_SIGMA_V)),
    )
    calib = d.get("calibration_trajectory")
    return ScenarioConfig(
        name=str(d["name"]),
        nodes=tuple(nodes),
        trajectory=_trajectory_from_dict(d["trajectory"]),
        noise=noise,
        frame_duration=float(d.get("frame_duration", DEFAULT_FRAME_DURATION)),
        num_frames=int(d.get("num_frames", DEFAULT_NUM_FRAMES)),
        rng_seed=int(d.get("seed", 0)),
        max_range=float(d.get("max_range", MAX_UNAMBIGUOUS_RANGE)),
        fov_half_angle=math.radians(float(d.get("fov_half_angle_deg", math.degrees(FOV_HALF_ANGLE)))),
        calibration_trajectory=None if calib is None else _trajectory_from_dict(calib),
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Load a scenario config from a JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return scenario_from_dict(raw)


def save_scenario(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(config), indent=2, sort_keys=True) + "\n")


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, rng_seed=seed)


def export_measurements_csv(frames: list[MeasurementFrame], path: str | Path) -> None:
    """Write detections as CSV rows frame,node,range,omega,vr."""
    lines = ["frame,node,range,omega,vr"]
    for frame in frames:
        for i, det in enumerate(frame.per_node):
            if det is None:
                continue
            lines.append(
                f"{frame.frame_index},{i},{det.range!r},{det.spatial_freq!r},{det.radial_vel!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def export_truth_csv(truth: list[TargetState], path: str | Path) -> None:
    """Write ground-truth states as CSV rows frame,x,y,vx,vy."""
    lines = ["frame,x,y,vx,vy"]
    for k, s in enumerate(truth):
        lines.append(f"{k},{s.x!r},{s.y!r},{s.vx!r},{s.vy!r}")
    Path(path).write_text("\n".join(lines) + "\n")
