"""One-shot fusion of a single frame's multi-node detections.

Given detections of the same target from N calibrated nodes, the
target state theta = (x, y, vx, vy) is estimated by minimizing the
sigma-normalized sum of squared measurement residuals (ML), optionally
regularized by independent Gaussian priors on each state component
(Bayes / MAP).  The minimization runs a damped Gauss-Newton
(Levenberg-Marquardt) iteration from closed-form position and velocity
initializers.

The posterior covariance is available two ways: the Laplace
approximation (inverse Gauss-Newton Hessian at the optimum) and a
direct second-moment computation of exp(-L/2) over a regular 4D grid
centered on the Bayesian estimate.  L denotes the plain sum of squared
normalized residuals, so exp(-L/2) is the exact (unnormalized)
posterior for the conditional-Gaussian measurement model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (
    FOV_HALF_ANGLE,
    Pose2D,
    TargetState,
    angle_off_boresight,
    measurement_jacobian,
)
from .scene import Detection, NoiseConfig

_GRADIENT_TOL = 1e-8
_STEP_TOL = 1e-10
_MAX_ITERATIONS = 100
_LAMBDA_INIT = 1e-3
_LAMBDA_MIN = 1e-12
_LAMBDA_MAX = 1e12
_MIN_RANGE = 1e-12


@dataclass(frozen=True)
class ObservationEntry:
    node_pose: Pose2D
    detection: Detection


@dataclass(frozen=True)
class FusionObservation:
    """One frame's detections with the (post-calibration) node poses."""

    entries: tuple[ObservationEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if len(self.entries) == 0:
            raise ValueError("observation needs at least one entry")

    @property
    def num_nodes(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PriorConfig:
    """Independent Gaussian priors for the four state components.

    The position prior is taken about the closed-form position
    initializer by default ("initial_estimate"); "origin" centers it at
    (0, 0) instead.  The velocity prior is always about zero.
    """

    sigma_x: float = 3.0
    sigma_y: float = 3.0
    sigma_vx: float = 3.5
    sigma_vy: float = 3.5
    position_prior_center: str = "initial_estimate"

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_vx", "sigma_vy"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"PriorConfig.{name} must be > 0")
        if self.position_prior_center not in ("initial_estimate", "origin"):
            raise ValueError(
                "position_prior_center must be 'initial_estimate' or 'origin'"
            )

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_x, self.sigma_y, self.sigma_vx, self.sigma_vy])


@dataclass
class FusionEstimate:
    """Result of one solve: state, fit diagnostics, optional covariance."""

    state: TargetState
    covariance: np.ndarray | None
    objective_value: float
    iterations: int
    converged: bool
    conditioning: float
    mode: str = "ml"
    prior_center: TargetState | None = None


def initial_position_estimate(obs: FusionObservation) -> np.ndarray:
    """Average of the nodes' detections mapped to the global frame."""
    acc = np.zeros(2)
    for entry in obs.entries:
        det = entry.detection
        theta = math.asin(min(1.0, max(-1.0, det.spatial_freq / math.pi)))
        lx = det.range * math.sin(theta)
        ly = det.range * math.cos(theta)
        c, s = math.cos(entry.node_pose.phi), math.sin(entry.node_pose.phi)
        acc[0] += c * lx - s * ly + entry.node_pose.x
        acc[1] += s * lx + c * ly + entry.node_pose.y
    return acc / obs.num_nodes


def initial_velocity_estimate(obs: FusionObservation) -> np.ndarray:
    """Average of the radial velocities redistributed along each line of sight.

    For a target at angle theta off boresight, the line of sight from
    node i points along the global angle phi_i + pi/2 - theta.
    """
    acc = np.zeros(2)
    for entry in obs.entries:
        det = entry.detection
        if abs(det.spatial_freq) > math.pi:
            raise ValueError(f"|spatial frequency| exceeds pi: {det.spatial_freq!r}")
        theta = math.asin(det.spatial_freq / math.pi)
        los = entry.node_pose.phi + 0.5 * math.pi - theta
        acc[0] += det.radial_vel * math.cos(los)
        acc[1] += det.radial_vel * math.sin(los)
    return acc / obs.num_nodes


class _Residuals:
    """Vectorized residual/Jacobian assembly for one observation.

    Measurement residuals are (measured - predicted)/sigma, stacked as
    the N range rows, then N spatial-frequency rows, then N radial-
    velocity rows; with a prior, four prior rows (theta - center)/sigma
    are appended.
    """

    def __init__(
        self,
        obs: FusionObservation,
        noise: NoiseConfig,
        prior: PriorConfig | None = None,
        prior_center: TargetState | None = None,
    ):
        self.px = np.array([e.node_pose.x for e in obs.entries])
        self.py = np.array([e.node_pose.y for e in obs.entries])
        self.cos_phi = np.array([math.cos(e.node_pose.phi) for e in obs.entries])
        self.sin_phi = np.array([math.sin(e.node_pose.phi) for e in obs.entries])
        self.meas_r = np.array([e.detection.range for e in obs.entries])
        self.meas_w = np.array([e.detection.spatial_freq for e in obs.entries])
        self.meas_v = np.array([e.detection.radial_vel for e in obs.entries])
        self.sigma_r = noise.sigma_r
        self.sigma_w = noise.sigma_omega
        self.sigma_v = noise.sigma_v
        self.n = len(obs.entries)
        if prior is not None and prior_center is None:
            raise ValueError("prior given without a prior center")
        self.prior_sigmas = None if prior is None else prior.sigmas
        self.center = None if prior_center is None else prior_center.as_vector()

    def residuals(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """(residual vector, Jacobian) at theta, or None if infeasible."""
        x, y, vx, vy = theta
        dx = x - self.px
        dy = y - self.py
        r2 = dx * dx + dy * dy
        r = np.sqrt(r2)
        if np.any(r < _MIN_RANGE):
            return None
        along = dx * self.cos_phi + dy * self.sin_phi
        vel_proj = vx * dx + vy * dy
        omega = math.pi * along / r
        vel = vel_proj / r
        res = np.concatenate([
            (self.meas_r - r) / self.sigma_r,
            (self.meas_w - omega) / self.sigma_w,
            (self.meas_v - vel) / self.sigma_v,
        ])
        r3 = r2 * r
        zeros = np.zeros(self.n)
        jac_r = np.stack([dx / r, dy / r, zeros, zeros], axis=1)
        jac_w = np.stack([
            math.pi * (self.cos_phi * r2 - along * dx) / r3,
            math.pi * (self.sin_phi * r2 - along * dy) / r3,
            zeros,
            zeros,
        ], axis=1)
        jac_v = np.stack([
            (vx * r2 - vel_proj * dx) / r3,
            (vy * r2 - vel_proj * dy) / r3,
            dx / r,
            dy / r,
        ], axis=1)
        jac = np.concatenate([
            -jac_r / self.sigma_r,
            -jac_w / self.sigma_w,
            -jac_v / self.sigma_v,
        ])
        if self.prior_sigmas is not None:
            res = np.concatenate([res, (theta - self.center) / self.prior_sigmas])
            jac = np.concatenate([jac, np.diag(1.0 / self.prior_sigmas)])
        return res, jac

    def value_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Objective values for an (M, 4) batch; +inf where infeasible."""
        x = thetas[:, 0:1]
        y = thetas[:, 1:2]
        vx = thetas[:, 2:3]
        vy = thetas[:, 3:4]
        dx = x - self.px
        dy = y - self.py
        r2 = dx * dx + dy * dy
        bad = np.any(r2 < _MIN_RANGE * _MIN_RANGE, axis=1)
        r = np.sqrt(np.maximum(r2, _MIN_RANGE * _MIN_RANGE))
        omega = math.pi * (dx * self.cos_phi + dy * self.sin_phi) / r
        vel = (vx * dx + vy * dy) / r
        value = (
            np.sum(((self.meas_r - r) / self.sigma_r) ** 2, axis=1)
            + np.sum(((self.meas_w - omega) / self.sigma_w) ** 2, axis=1)
            + np.sum(((self.meas_v - vel) / self.sigma_v) ** 2, axis=1)
        )
        if self.prior_sigmas is not None:
            value = value + np.sum(((thetas - self.center) / self.prior_sigmas) ** 2, axis=1)
        value[bad] = np.inf
        return value


def ml_objective(
    theta: TargetState, obs: FusionObservation, noise: NoiseConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted least-squares objective, residual vector, and Jacobian.

    The value is sum_i [(R_i-r_i)^2/sr^2 + (W_i-w_i)^2/sw^2 +
    (V_i-v_i)^2/sv^2]; residuals are sigma-normalized and the Jacobian
    is the analytic 3N x 4 derivative of the residual vector.
    """
    model = _Residuals(obs, noise)
    out = model.residuals(theta.as_vector())
    if out is None:
        raise ValueError("state yields (near-)zero range to a node")
    res, jac = out
    return float(res @ res), res, jac


def bayes_objective(
    theta: TargetState,
    obs: FusionObservation,
    noise: NoiseConfig,
    prior: PriorConfig,
    prior_center: TargetState,
) -> tuple[float, np.ndarray, np.ndarray]:
    """ML objective plus four normalized prior residual rows."""
    model = _Residuals(obs, noise, prior, prior_center)
    out = model.residuals(theta.as_vector())
    if out is None:
        raise ValueError("state yields (near-)zero range to a node")
    res, jac = out
    return float(res @ res), res, jac


def _resolve_prior_center(obs: FusionObservation, prior: PriorConfig) -> TargetState:
    if prior.position_prior_center == "origin":
        return TargetState(0.0, 0.0, 0.0, 0.0)
    pos = initial_position_estimate(obs)
    return TargetState(pos[0], pos[1], 0.0, 0.0)


def _range_circle_intersections(obs: FusionObservation) -> list[np.ndarray]:
    """Intersections of the first two nodes' range circles.

    The two measured ranges pin the position to (at most) two mirror
    candidates across the inter-node chord; the coarse angle
    measurements do not always disambiguate them, so the solver seeds
    from both and keeps the better fit.
    """
    if len(obs.entries) < 2:
        return []
    e1, e2 = obs.entries[0], obs.entries[1]
    p1 = np.array([e1.node_pose.x, e1.node_pose.y])
    p2 = np.array([e2.node_pose.x, e2.node_pose.y])
    r1 = e1.detection.range
    r2 = e2.detection.range
    d = float(np.linalg.norm(p2 - p1))
    if d == 0.0 or d > r1 + r2 or d < abs(r1 - r2):
        return []
    along = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d)
    height_sq = r1 * r1 - along * along
    if height_sq < 0.0:
        return []
    height = math.sqrt(height_sq)
    unit = (p2 - p1) / d
    perp = np.array([-unit[1], unit[0]])
    base = p1 + along * unit
    if height == 0.0:
        return [base]
    return [base + height * perp, base - height * perp]


# Candidate starts farther off boresight than this cannot have produced
# a detection; the margin absorbs angle noise on edge-of-FoV targets.
_VISIBILITY_MARGIN = math.radians(15.0)


def _start_is_visible(obs: FusionObservation, position: np.ndarray) -> bool:
    """True when every detecting node could actually see this position."""
    state = TargetState(position[0], position[1], 0.0, 0.0)
    limit = FOV_HALF_ANGLE + _VISIBILITY_MARGIN
    for entry in obs.entries:
        node = entry.node_pose
        if position[0] == node.x and position[1] == node.y:
            return False
        if abs(angle_off_boresight(node, state)) > limit:
            return False
    return True


def solve(
    obs: FusionObservation,
    noise: NoiseConfig,
    mode: str = "bayes",
    prior: PriorConfig | None = None,
) -> FusionEstimate:
    """Levenberg-Marquardt minimization of the ML or Bayes objective.

    Seeded from the closed-form position/velocity initializers (plus
    the range-circle intersection candidates, FoV-filtered); stops when
    the objective gradient infinity-norm falls below 1e-8, a step is
    shorter than 1e-10, or after 100 iterations.  Steps that leave the
    feasible region (zero range to a node) are treated as rejections
    and raise the damping.
    """
    mode = mode.lower()
    if mode not in ("ml", "bayes"):
        raise ValueError(f"mode must be 'ml' or 'bayes', got {mode!r}")
    if mode == "bayes" and prior is None:
        raise ValueError("bayes mode requires a PriorConfig")
    if obs.num_nodes < 2:
        warnings.warn(
            "single-node observation: vector velocity is unobservable",
            stacklevel=2,
        )
    prior_center = _resolve_prior_center(obs, prior) if mode == "bayes" else None
    model = _Residuals(
        obs, noise, prior if mode == "bayes" else None, prior_center
    )

    # Candidate starts: the closed-form initializer, plus the two
    # range-circle intersections (the precise ranges admit a mirror
    # solution the coarse angles may fail to rule out).  Candidates no
    # detecting node could actually see are dropped first: the
    # detection event itself excludes them.  The best-scoring feasible
    # candidate seeds the iteration.
    pos0 = initial_position_estimate(obs)
    vel0 = initial_velocity_estimate(obs)
    positions = [pos0] + _range_circle_intersections(obs)
    visible = [p for p in positions if _start_is_visible(obs, p)]
    starts = [np.array([p[0], p[1], vel0[0], vel0[1]]) for p in (visible or positions)]
    theta = res = jac = None
    value = np.inf
    for start in starts:
        out = model.residuals(start)
        if out is None:
            continue
        start_value = float(out[0] @ out[0])
        if start_value < value:
            theta, (res, jac), value = start, out, start_value
    if theta is None:
        raise ValueError("initial estimate coincides with a node position")

    lam = _LAMBDA_INIT
    converged = False
    iterations = 0
    for iterations in range(1, _MAX_ITERATIONS + 1):
        gradient = 2.0 * (jac.T @ res)
        if np.max(np.abs(gradient)) < _GRADIENT_TOL:
            converged = True
            break
        hessian = jac.T @ jac
        try:
            step = np.linalg.solve(hessian + lam * np.eye(4), -(jac.T @ res))
        except np.linalg.LinAlgError:
            lam = min(lam * 10.0, _LAMBDA_MAX)
            continue
        if float(np.linalg.norm(step)) < _STEP_TOL:
            converged = True
            break
        candidate = theta + step
        cand_out = model.residuals(candidate)
        cand_value = float(cand_out[0] @ cand_out[0]) if cand_out is not None else np.inf
        if not cand_value < value:
            lam = min(lam * 10.0, _LAMBDA_MAX)
            if lam >= _LAMBDA_MAX:
                break
            continue
        theta = candidate
        res, jac = cand_out
        value = cand_value
        lam = max(lam / 10.0, _LAMBDA_MIN)

    hessian = jac.T @ jac
    singular_values = np.linalg.svd(hessian, compute_uv=False)
    smax = float(singular_values[0])
    conditioning = float(singular_values[-1] / smax) if smax > 0.0 else 0.0
    covariance = None
    if conditioning > 1e-14:
        covariance = np.linalg.inv(hessian)
        covariance = 0.5 * (covariance + covariance.T)
    return FusionEstimate(
        state=TargetState.from_vector(theta),
        covariance=covariance,
        objective_value=value,
        iterations=iterations,
        converged=converged,
        conditioning=conditioning,
        mode=mode,
        prior_center=prior_center,
    )


def laplace_covariance(
    obs: FusionObservation,
    noise: NoiseConfig,
    prior: PriorConfig,
    center: TargetState,
    prior_center: TargetState | None = None,
) -> np.ndarray:
    """Gaussian (Laplace) posterior covariance: inverse of J'J at `center`."""
    if prior_center is None:
        prior_center = _resolve_prior_center(obs, prior)
    _, _, jac = bayes_objective(center, obs, noise, prior, prior_center)
    cov = np.linalg.inv(jac.T @ jac)
    return 0.5 * (cov + cov.T)


def grid_covariance(
    value_fn,
    center: np.ndarray,
    sigmas: np.ndarray,
    half_width_sigmas: float = 3.0,
    points_per_dim: int = 15,
) -> np.ndarray:
    """Second-moment covariance of exp(-L/2) on a regular 4D grid.

    `value_fn` maps an (M, 4) batch of states to the M objective values
    L (sum of squared normalized residuals).  The grid spans
    center +/- half_width_sigmas * sigmas per dimension and the density
    is normalized over the grid before taking moments about the grid
    mean.
    """
    if points_per_dim < 5 or points_per_dim % 2 == 0:
        raise ValueError("points_per_dim must be odd and >= 5")
    axes = [
        center[d] + np.linspace(-1.0, 1.0, points_per_dim) * half_width_sigmas * sigmas[d]
        for d in range(4)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    thetas = np.stack([m.ravel() for m in mesh], axis=1)
    values = np.asarray(value_fn(thetas), dtype=float)
    finite = np.isfinite(values)
    if not np.any(finite):
        raise ArithmeticError(
            "posterior density underflowed everywhere on the grid; "
            "widen the noise/prior sigmas or shrink the grid"
        )
    weights = np.zeros_like(values)
    weights[finite] = np.exp(-0.5 * (values[finite] - np.min(values[finite])))
    total = float(np.sum(weights))
    if total <= 0.0:
        raise ArithmeticError(
            "posterior density underflowed everywhere on the grid; "
            "widen the noise/prior sigmas or shrink the grid"
        )
    weights /= total
    mean = weights @ thetas
    centered = thetas - mean
    cov = (centered * weights[:, None]).T @ centered
    return 0.5 * (cov + cov.T)


def posterior_covariance_grid(
    obs: FusionObservation,
    noise: NoiseConfig,
    prior: PriorConfig,
    center: FusionEstimate,
    half_width_sigmas: float = 3.0,
    points_per_dim: int = 15,
) -> np.ndarray:
    """Grid-based posterior covariance centered on the Bayesian estimate.

    Grid half-widths default to 3 posterior sigmas per dimension, taken
    from the Laplace approximation at the center.
    """
    prior_center = (
        center.prior_center
        if center.prior_center is not None
        else _resolve_prior_center(obs, prior)
    )
    model = _Residuals(obs, noise, prior, prior_center)
    laplace = laplace_covariance(obs, noise, prior, center.state, prior_center)
    sigmas = np.sqrt(np.maximum(np.diag(laplace), 0.0))
    # Guard against a collapsed Laplace direction producing a zero-width axis.
    sigmas = np.maximum(sigmas, 1e-9 * np.max(sigmas))
    return grid_covariance(
        model.value_batch,
        center.state.as_vector(),
        sigmas,
        half_width_sigmas=half_width_sigmas,
        points_per_dim=points_per_dim,
    )
