"""Planar geometry and the exact radar measurement model.

Conventions used throughout the package:

- Global frame: right-handed x/y in meters, angles counter-clockwise
  from +x in radians.
- A node's antenna array lies along the unit vector (cos phi, sin phi);
  its boresight (broadside) is that vector rotated by +90 degrees,
  i.e. (-sin phi, cos phi).  A node with phi = 0 has a horizontal
  array and looks along +y.
- Node-local frame: array along local +x, boresight along local +y.
- A target at angle theta off boresight (positive toward the array's
  +x end) has spatial frequency omega = pi * sin(theta) for the
  half-wavelength virtual array assumed here.
- Radial velocity is the projection of the target velocity onto the
  node-to-target line of sight; positive means receding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Azimuth half field of view. Targets more than this far off boresight
# are not detected by the simulator.
FOV_HALF_ANGLE = math.radians(60.0)


def wrap_angle(angle: float) -> float:
    """Normalize an angle to [0, 2*pi)."""
    wrapped = math.fmod(angle, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return wrapped


def angle_difference(a: float, b: float) -> float:
    """Signed wrapped difference a - b, in (-pi, pi]."""
    d = math.fmod(a - b, TWO_PI)
    if d > math.pi:
        d -= TWO_PI
    elif d <= -math.pi:
        d += TWO_PI
    return d


def rotation_matrix(phi: float) -> np.ndarray:
    """Standard 2D counter-clockwise rotation matrix."""
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2D:
    """A radar node's position and array orientation in the global frame.

    phi is normalized to [0, 2*pi) at construction.
    """

    x: float
    y: float
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(float(self.phi)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def array_direction(self) -> np.ndarray:
        """Unit vector along the antenna array."""
        return np.array([math.cos(self.phi), math.sin(self.phi)])

    @property
    def boresight(self) -> np.ndarray:
        """Unit vector along boresight (array direction rotated +90 deg)."""
        return np.array([-math.sin(self.phi), math.cos(self.phi)])


@dataclass(frozen=True)
class TargetState:
    """Instantaneous planar position and velocity of the point target."""

    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "vx", "vy"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"TargetState.{name} must be finite")
            object.__setattr__(self, name, value)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "TargetState":
        x, y, vx, vy = (float(v) for v in theta)
        return cls(x, y, vx, vy)


@dataclass(frozen=True)
class IdealMeasurement:
    """Noise-free (range, spatial frequency, radial velocity) triple."""

    range: float
    spatial_freq: float
    radial_vel: float


def _offset(radar: Pose2D, target: TargetState) -> tuple[float, float, float]:
    """Target offset from the radar and its norm; rejects coincident input."""
    dx = target.x - radar.x
    dy = target.y - radar.y
    r = math.hypot(dx, dy)
    if r == 0.0:
        raise ValueError("target coincides with radar position; range is zero")
    return dx, dy, r


def measure_range(radar: Pose2D, target: TargetState) -> float:
    """Euclidean distance from the radar to the target, in meters."""
    return _offset(radar, target)[2]


def measure_radial_velocity(radar: Pose2D, target: TargetState) -> float:
    """Target velocity projected on the radar-to-target line of sight.

    Positive values mean the target is receding from the radar.
    """
    dx, dy, r = _offset(radar, target)
    return (target.vx * dx + target.vy * dy) / r


def measure_spatial_frequency(radar: Pose2D, target: TargetState) -> float:
    """Spatial frequency pi*sin(theta) of the target, in radians.

    theta is the angle off boresight; the result lies in [-pi, pi].
    """
    dx, dy, r = _offset(radar, target)
    return math.pi * (dx * math.cos(radar.phi) + dy * math.sin(radar.phi)) / r


def measure(radar: Pose2D, target: TargetState) -> IdealMeasurement:
    """All three ideal measurements of a target from one node."""
    dx, dy, r = _offset(radar, target)
    c, s = math.cos(radar.phi), math.sin(radar.phi)
    return IdealMeasurement(
        range=r,
        spatial_freq=math.pi * (dx * c + dy * s) / r,
        radial_vel=(target.vx * dx + target.vy * dy) / r,
    )


def aoa_from_spatial_frequency(omega: float) -> float:
    """Angle off boresight theta = arcsin(omega/pi), in [-pi/2, pi/2]."""
    if abs(omega) > math.pi:
        raise ValueError(f"|spatial frequency| exceeds pi: {omega!r}")
    return math.asin(omega / math.pi)


def angle_off_boresight(radar: Pose2D, target: TargetState) -> float:
    """Angle between boresight and the line of sight, in (-pi, pi].

    |result| > pi/2 means the target is behind the array plane.
    """
    dx, dy, r = _offset(radar, target)
    c, s = math.cos(radar.phi), math.sin(radar.phi)
    along_array = dx * c + dy * s
    along_boresight = -dx * s + dy * c
    return math.atan2(along_array, along_boresight)


def local_to_global(node: Pose2D, local_point) -> np.ndarray:
    """Map node-local coordinates to the global frame.

    Applies the rotation R(phi) followed by the translation to the
    node position.
    """
    p = np.asarray(local_point, dtype=float)
    return rotation_matrix(node.phi) @ p + node.position


def global_to_local(node: Pose2D, global_point) -> np.ndarray:
    """Inverse of local_to_global."""
    p = np.asarray(global_point, dtype=float)
    return rotation_matrix(-node.phi) @ (p - node.position)


def detection_to_local_cartesian(m: IdealMeasurement) -> np.ndarray:
    """Convert a (range, spatial frequency) pair to node-local x/y.

    The point lies at distance `range` from the node, rotated theta =
    arcsin(spatial_freq/pi) off the local +y boresight toward local +x.
    Re-measuring the result from the identity pose reproduces the
    inputs exactly.
    """
    if not m.range > 0.0:
        raise ValueError(f"range must be positive, got {m.range!r}")
    theta = aoa_from_spatial_frequency(m.spatial_freq)
    return np.array([m.range * math.sin(theta), m.range * math.cos(theta)])


def measurement_jacobian(radar: Pose2D, state: TargetState) -> np.ndarray:
    """Jacobian of (range, spatial_freq, radial_vel) w.r.t. (x, y, vx, vy).

    Analytic 3x4 matrix of the exact measurement model at `state`.
    """
    dx, dy, r = _offset(radar, state)
    c, s = math.cos(radar.phi), math.sin(radar.phi)
    r2 = r * r
    r3 = r2 * r
    along_array = dx * c + dy * s
    vel_proj = state.vx * dx + state.vy * dy
    return np.array([
        [dx / r, dy / r, 0.0, 0.0],
        [
            math.pi * (c * r2 - along_array * dx) / r3,
            math.pi * (s * r2 - along_array * dy) / r3,
            0.0,
            0.0,
        ],
        [
            (state.vx * r2 - vel_proj * dx) / r3,
            (state.vy * r2 - vel_proj * dy) / r3,
            dx / r,
            dy / r,
        ],
    ])
