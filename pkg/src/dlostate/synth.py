# Copyright 2026 The dlostate authors
"""Synthetic deformable-linear-object frames.

A rope is a chain of particles relaxed with position-based dynamics:
neighbour distance constraints keep it quasi-inextensible and
second-neighbour distance constraints resist bending. Both ends follow
smooth random trajectories. Frames are produced by resampling the
centerline into arclength-uniform nodes and rendering the camera-facing
half of the rope surface as a point cloud.
"""

from __future__ import annotations

import logging
import math

from typing import Any, Final

import attr
import numpy as np

from scipy.spatial import distance
from scipy.spatial.transform import Rotation

from dlostate.errors import ContractError, SimulationError, UnusableFrameError


logger = logging.getLogger(__name__)

MIN_POINTS: Final[int] = 32
MAX_OCCLUSION: Final[float] = 0.8


def _positive(instance: Any, attribute: attr.Attribute, value: float) -> None:
    if not value > 0:
        raise ContractError(f"`{attribute.name}` must be > 0, got {value}")


@attr.s(frozen=True)
class RopeSpec:
    """Physical description of a rope.

    :param float length: rest length in meters.
    :param float radius: cross-section radius in meters.
    :param float stiffness: bending stiffness in ``[0, 1]``.
    :param int particles: number of simulated particles.
    """

    length: float = attr.ib(validator=_positive)
    radius: float = attr.ib(validator=_positive)
    stiffness: float = attr.ib(default=0.1)
    particles: int = attr.ib(default=64)

    @stiffness.validator
    def _check_stiffness(self, attribute: str, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"`stiffness` must be in [0, 1], got {value}")

    @particles.validator
    def _check_particles(self, attribute: str, value: int) -> None:
        if value < 2:
            raise ContractError(f"`particles` must be >= 2, got {value}")

    @property
    def rest_spacing(self) -> float:
        return self.length / (self.particles - 1)

    def check_nodes(self, nodes: int) -> None:
        """Require at least two particles per node."""
        if self.particles < 2 * nodes:
            raise ContractError(
                f"{self.particles} particles cannot carry {nodes} nodes "
                "(need at least 2 per node)"
            )


@attr.s(frozen=True)
class RopeState:
    """Ordered particle positions of shape ``(P, 3)`` in meters."""

    positions: np.ndarray = attr.ib(
        converter=lambda a: np.asarray(a, dtype=np.float64), eq=False
    )

    def max_strain(self, spec: RopeSpec) -> float:
        """Largest relative deviation of a segment from its rest length."""
        lengths = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return float(np.max(np.abs(lengths / spec.rest_spacing - 1.0)))

    def arclength(self) -> float:
        return float(
            np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1))
        )


@attr.s(frozen=True)
class SimConfig:
    """Position-based dynamics settings.

    :param float gravity: downward acceleration along ``-z`` (m/s^2).
    :param float frame_dt: simulated seconds between recorded frames.
    :param int substeps: integration steps per frame.
    :param int iterations: Jacobi constraint sweeps per substep.
    :param float relaxation: over-relaxation factor of the Jacobi solver.
    :param float damping: velocity retained after each substep.
    :param int keyframe_every: frames between endpoint waypoints.
    :param int warmup_frames: frames simulated before recording starts.
    :param float max_strain: relative stretch above which a frame is
        rejected and its endpoint targets resampled.
    :param int max_retries: resampling attempts before giving up.
    """

    gravity: float = attr.ib(default=9.81)
    frame_dt: float = attr.ib(default=1.0)
    substeps: int = attr.ib(default=60)
    iterations: int = attr.ib(default=30)
    relaxation: float = attr.ib(default=1.5)
    damping: float = attr.ib(default=0.9)
    keyframe_every: int = attr.ib(default=3)
    warmup_frames: int = attr.ib(default=2)
    max_strain: float = attr.ib(default=0.2)
    max_retries: int = attr.ib(default=5)


@attr.s
class Frame:
    """One training/evaluation sample.

    :param numpy.ndarray points: point cloud ``(N, 3)`` in meters.
    :param numpy.ndarray nodes: ground-truth node sequence ``(M, 3)``.
    :param numpy.ndarray occluded: ``(M,)`` booleans, node has no point
        within the voting radius.
    :param dict meta: seed, rope spec, camera, occlusion ratio, ...
    """

    points: np.ndarray = attr.ib(eq=False)
    nodes: np.ndarray = attr.ib(eq=False)
    occluded: np.ndarray = attr.ib(eq=False)
    meta: dict[str, Any] = attr.ib(factory=dict)

    def with_mask(self, radius: float) -> Frame:
        """Recompute the occlusion mask against the current cloud."""
        mask = occlusion_mask(self.points, self.nodes, radius)
        return attr.evolve(self, occluded=mask)


#####
# Simulation
#####
def _stretch_pairs(count: int, hop: int) -> tuple[np.ndarray, np.ndarray]:
    first = np.arange(count - hop)
    return first, first + hop


def _jacobi_pass(
    positions: np.ndarray,
    inv_mass: np.ndarray,
    pairs: tuple[np.ndarray, np.ndarray],
    rest: float,
    stiffness: float,
    relaxation: float,
) -> None:
    """One averaged Jacobi sweep over distance constraints, in place."""
    first, second = pairs
    if first.size == 0:
        return
    delta = positions[second] - positions[first]
    length = np.linalg.norm(delta, axis=1)
    safe = np.where(length > 0, length, 1.0)
    weight = inv_mass[first] + inv_mass[second]
    active = (weight > 0) & (length > 0)
    safe_weight = np.where(weight > 0, weight, 1.0)
    scale = np.where(
        active, stiffness * (length - rest) / (safe * safe_weight), 0.0
    )
    correction = scale[:, None] * delta
    update = np.zeros_like(positions)
    counts = np.zeros(len(positions))
    np.add.at(update, first, inv_mass[first, None] * correction)
    np.add.at(update, second, -inv_mass[second, None] * correction)
    np.add.at(counts, first, active)
    np.add.at(counts, second, active)
    positions += relaxation * update / np.maximum(counts, 1.0)[:, None]


def relax(
    positions: np.ndarray,
    velocities: np.ndarray,
    spec: RopeSpec,
    start: tuple[np.ndarray, np.ndarray],
    end: tuple[np.ndarray, np.ndarray],
    sim: SimConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the rope by one frame while its ends move ``start -> end``.

    Endpoints have zero inverse mass and are moved linearly across the
    substeps. Inputs are not modified.

    :return: new ``(positions, velocities)``.
    """
    x = np.array(positions, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    count = len(x)
    inv_mass = np.ones(count)
    inv_mass[[0, -1]] = 0.0
    h = sim.frame_dt / sim.substeps
    gravity = np.array([0.0, 0.0, -sim.gravity])
    stretch = _stretch_pairs(count, 1)
    bend = _stretch_pairs(count, 2)
    # per-sweep stiffness so the converged bend is iteration-independent
    bend_k = 1.0 - (1.0 - spec.stiffness) ** (1.0 / sim.iterations)
    a0, b0 = (np.asarray(p, dtype=np.float64) for p in start)
    a1, b1 = (np.asarray(p, dtype=np.float64) for p in end)

    for step in range(sim.substeps):
        frac = (step + 1) / sim.substeps
        v += h * gravity * inv_mass[:, None]
        p = x + h * v
        p[0] = a0 + frac * (a1 - a0)
        p[-1] = b0 + frac * (b1 - b0)
        for _ in range(sim.iterations):
            _jacobi_pass(
                p, inv_mass, stretch, spec.rest_spacing, 1.0, sim.relaxation
            )
            if bend_k > 0:
                _jacobi_pass(
                    p,
                    inv_mass,
                    bend,
                    2.0 * spec.rest_spacing,
                    bend_k,
                    sim.relaxation,
                )
        v = (p - x) / h * sim.damping
        x = p
    return x, v


def straight_rope(
    spec: RopeSpec,
    origin: np.ndarray | None = None,
    direction: np.ndarray | None = None,
) -> RopeState:
    """A straight rope starting at ``origin`` along ``direction``."""
    origin = np.zeros(3) if origin is None else np.asarray(origin, float)
    if direction is None:
        direction = np.array([1.0, 0.0, 0.0])
    direction = np.asarray(direction, float) / np.linalg.norm(direction)
    steps = np.linspace(0.0, spec.length, spec.particles)
    return RopeState(origin + steps[:, None] * direction)


def _sample_endpoints(
    spec: RopeSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random endpoint pair no further apart than 0.95 L."""
    centre = rng.uniform(-0.25, 0.25, size=3) * spec.length
    centre[2] = rng.uniform(0.0, 0.3) * spec.length
    direction = rng.normal(size=3)
    direction[2] *= 0.5
    direction /= np.linalg.norm(direction)
    half = 0.5 * rng.uniform(0.25, 0.95) * spec.length
    return centre - half * direction, centre + half * direction


def _smoothstep(t: float) -> float:
    return t * t * (3.0 - 2.0 * t)


def simulate_sequence(
    spec: RopeSpec,
    seed: int | np.random.SeedSequence | list[int],
    frames: int,
    sim: SimConfig | None = None,
) -> list[RopeState]:
    """Simulate ``frames`` rope shapes while both ends wander smoothly.

    Endpoint waypoints are drawn every ``sim.keyframe_every`` frames and
    blended with a smoothstep. A frame whose relaxation leaves a segment
    stretched beyond ``sim.max_strain`` is rejected and retried with a new
    waypoint.

    :raise ContractError: if ``frames < 1``.
    :raise SimulationError: if a frame cannot be relaxed after
        ``sim.max_retries`` resamples.
    """
    if frames < 1:
        raise ContractError(f"frames must be >= 1, got {frames}")
    sim = sim or SimConfig()
    rng = np.random.default_rng(seed)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.cos(heading), math.sin(heading), 0.0])
    rope = straight_rope(spec, -0.5 * spec.length * direction, direction)
    x = rope.positions
    v = np.zeros_like(x)

    key_from = (x[0].copy(), x[-1].copy())
    key_to = _sample_endpoints(spec, rng)
    current = key_from
    states: list[RopeState] = []
    total = frames + sim.warmup_frames
    for index in range(total):
        phase = (index % sim.keyframe_every + 1) / sim.keyframe_every
        target = tuple(
            k0 + _smoothstep(phase) * (k1 - k0)
            for k0, k1 in zip(key_from, key_to)
        )
        for attempt in range(sim.max_retries + 1):
            new_x, new_v = relax(x, v, spec, current, target, sim)
            strain = RopeState(new_x).max_strain(spec)
            if np.all(np.isfinite(new_x)) and strain <= sim.max_strain:
                break
            logger.warning(
                "Frame %d rejected (strain %.3f); resampling endpoints "
                "(attempt %d)",
                index,
                strain,
                attempt + 1,
            )
            key_to = _sample_endpoints(spec, rng)
            target = tuple(
                k0 + _smoothstep(phase) * (k1 - k0)
                for k0, k1 in zip(key_from, key_to)
            )
        else:
            raise SimulationError(
                f"rope relaxation did not converge at frame {index}"
            )
        x, v, current = new_x, new_v, target
        if phase >= 1.0:
            key_from, key_to = key_to, _sample_endpoints(spec, rng)
        if index >= sim.warmup_frames:
            states.append(RopeState(x.copy()))
    return states


#####
# Nodes
#####
def polyline_nodes(polyline: np.ndarray, count: int) -> np.ndarray:
    """``count`` points at equal arclength along a polyline, ends included.

    :raise ContractError: if ``count < 2`` or the polyline has zero length.
    """
    if count < 2:
        raise ContractError(f"need at least 2 nodes, got {count}")
    polyline = np.asarray(polyline, dtype=np.float64)
    lengths = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    if cumulative[-1] <= 0.0:
        raise ContractError("cannot resample a zero-length centerline")
    targets = np.linspace(0.0, cumulative[-1], count)
    return np.stack(
        [np.interp(targets, cumulative, polyline[:, k]) for k in range(3)],
        axis=1,
    )


def resample_nodes(state: RopeState, count: int) -> np.ndarray:
    """Node sequence of ``count`` arclength-uniform centerline points."""
    return polyline_nodes(state.positions, count)


def project_arclength(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Arclength of the nearest location on ``polyline`` for each point."""
    starts = polyline[:-1]
    seg = np.diff(polyline, axis=0)
    seg_len2 = np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-300)
    rel = points[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum("nsk,sk->ns", rel, seg) / seg_len2, 0.0, 1.0)
    closest = starts[None] + t[..., None] * seg[None]
    dist2 = np.sum((points[:, None, :] - closest) ** 2, axis=2)
    best = np.argmin(dist2, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(np.sqrt(seg_len2))])
    rows = np.arange(len(points))
    return cumulative[best] + t[rows, best] * np.sqrt(seg_len2[best])


def occlusion_mask(
    points: np.ndarray, nodes: np.ndarray, radius: float
) -> np.ndarray:
    """``True`` for nodes with no point strictly closer than ``radius``."""
    if len(points) == 0:
        return np.ones(len(nodes), dtype=bool)
    nearest = distance.cdist(nodes, points).min(axis=1)
    return nearest >= radius


#####
# Rendering
#####
def random_camera(
    rng: np.random.Generator, max_tilt: float = math.radians(60.0)
) -> np.ndarray:
    """Unit direction towards a camera in a cone around ``+z``."""
    tilt = rng.uniform(0.0, max_tilt)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    return np.array(
        [
            math.sin(tilt) * math.cos(heading),
            math.sin(tilt) * math.sin(heading),
            math.cos(tilt),
        ]
    )


def render_cloud(
    state: RopeState,
    spec: RopeSpec,
    density: float,
    seed: int | np.random.SeedSequence | list[int],
    camera: np.ndarray | None = None,
) -> np.ndarray:
    """Sample the camera-facing half cylinder around the centerline.

    :param float density: points per meter of rope.
    :param camera: unit direction from the rope towards the camera;
        defaults to ``+z``.
    :return: ``(n, 3)`` array with ``n = round(density * arclength)``.
    """
    if not density > 0:
        raise ContractError(f"density must be > 0, got {density}")
    rng = np.random.default_rng(seed)
    cam = np.array([0.0, 0.0, 1.0]) if camera is None else np.asarray(camera)
    cam = cam / np.linalg.norm(cam)

    positions = state.positions
    seg = np.diff(positions, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    count = max(1, int(round(density * lengths.sum())))
    chosen = rng.choice(len(lengths), size=count, p=lengths / lengths.sum())
    t = rng.random(count)
    theta = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, size=count)

    tangent = seg[chosen] / lengths[chosen, None]
    centre = positions[chosen] + t[:, None] * seg[chosen]
    facing = cam - (tangent @ cam)[:, None] * tangent
    facing_len = np.linalg.norm(facing, axis=1)
    # rope segment pointing at the camera: any perpendicular is visible
    degenerate = facing_len < 1e-9
    if np.any(degenerate):
        axis = np.eye(3)[np.argmin(np.abs(tangent[degenerate]), axis=1)]
        facing[degenerate] = np.cross(tangent[degenerate], axis)
        facing_len[degenerate] = np.linalg.norm(facing[degenerate], axis=1)
    normal = facing / facing_len[:, None]
    binormal = np.cross(tangent, normal)
    offset = (
        np.cos(theta)[:, None] * normal + np.sin(theta)[:, None] * binormal
    )
    return centre + spec.radius * offset


#####
# Augmentation
#####
@attr.s(frozen=True)
class AugmentConfig:
    """Training-time perturbations.

    :param float jitter: standard deviation of Gaussian point noise (m).
    :param bool rotate: apply a uniform random rotation.
    :param float occlusion: fraction of rope arclength hidden.
    :param int max_windows: contiguous hidden windows drawn (1..n).
    :param int min_points: fewest points a usable frame may keep.
    """

    jitter: float = attr.ib(default=0.0)
    rotate: bool = attr.ib(default=False)
    occlusion: float = attr.ib(default=0.0)
    max_windows: int = attr.ib(default=3)
    min_points: int = attr.ib(default=MIN_POINTS)

    @occlusion.validator
    def _check_occlusion(self, attribute: str, value: float) -> None:
        if not 0.0 <= value <= MAX_OCCLUSION:
            raise ContractError(
                f"occlusion ratio must be in [0, {MAX_OCCLUSION}], got {value}"
            )

    @jitter.validator
    def _check_jitter(self, attribute: str, value: float) -> None:
        if value < 0:
            raise ContractError(f"jitter must be >= 0, got {value}")


def occlusion_windows(
    total: float,
    ratio: float,
    rng: np.random.Generator,
    max_windows: int = 3,
) -> list[tuple[float, float]]:
    """Disjoint arclength windows whose lengths sum to ``ratio * total``."""
    if ratio <= 0.0:
        return []
    count = int(rng.integers(1, max_windows + 1))
    hidden = ratio * total
    parts = rng.dirichlet(np.ones(count)) * hidden
    gaps = rng.dirichlet(np.ones(count + 1)) * (total - hidden)
    windows = []
    cursor = gaps[0]
    for part, gap in zip(parts, gaps[1:]):
        windows.append((float(cursor), float(cursor + part)))
        cursor += part + gap
    return windows


def augment(
    frame: Frame, cfg: AugmentConfig, rng: np.random.Generator
) -> Frame:
    """Occlude, jitter and rotate a frame; returns a new frame.

    Points are hidden when their nearest arclength along the ground-truth
    node polyline falls in one of the occlusion windows. Rotation is about
    the cloud centroid and applies to points and nodes jointly.

    :raise UnusableFrameError: if fewer than ``cfg.min_points`` remain.
    """
    points = np.array(frame.points, dtype=np.float64)
    nodes = np.array(frame.nodes, dtype=np.float64)
    meta = dict(frame.meta)

    if cfg.occlusion > 0:
        arclength = project_arclength(points, nodes)
        total = float(
            np.sum(np.linalg.norm(np.diff(nodes, axis=0), axis=1))
        )
        windows = occlusion_windows(total, cfg.occlusion, rng, cfg.max_windows)
        hidden = np.zeros(len(points), dtype=bool)
        for lo, hi in windows:
            hidden |= (arclength >= lo) & (arclength < hi)
        points = points[~hidden]
        meta["occlusion_windows"] = windows
    meta["occlusion_ratio"] = cfg.occlusion

    if len(points) < cfg.min_points:
        raise UnusableFrameError(
            f"only {len(points)} points left after occlusion "
            f"(need {cfg.min_points})"
        )
    if cfg.jitter > 0:
        points = points + rng.normal(scale=cfg.jitter, size=points.shape)
    if cfg.rotate:
        rotation = Rotation.random(random_state=rng)
        pivot = points.mean(axis=0)
        points = rotation.apply(points - pivot) + pivot
        nodes = rotation.apply(nodes - pivot) + pivot
    return attr.evolve(frame, points=points, nodes=nodes, meta=meta)


#####
# Sampling
#####
def lexicographic_start(points: np.ndarray) -> int:
    """Index of the lexicographically smallest point (x, then y, then z)."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def fps_indices(
    points: np.ndarray, count: int, start: int | None = None
) -> np.ndarray:
    """Greedy farthest-point sampling of ``count`` distinct indices."""
    if start is None:
        start = lexicographic_start(points)
    chosen = np.empty(count, dtype=np.intp)
    chosen[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    dist[start] = -1.0
    for k in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
        dist[chosen[: k + 1]] = -1.0
    return chosen


def fps_sample(
    cloud: np.ndarray, count: int, seed: int | None = None
) -> np.ndarray:
    """Fix a cloud to exactly ``count`` points.

    Larger clouds are reduced by farthest-point sampling (starting point
    drawn from ``seed``, or the lexicographic minimum when ``seed`` is
    ``None``); smaller clouds keep every point and are topped up by
    sampling with replacement.

    :raise ContractError: if the cloud is empty.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        raise ContractError("cannot sample from an empty point cloud")
    rng = np.random.default_rng(0 if seed is None else seed)
    if len(cloud) >= count:
        start = None if seed is None else int(rng.integers(len(cloud)))
        return cloud[fps_indices(cloud, count, start)]
    extra = rng.choice(len(cloud), size=count - len(cloud), replace=True)
    return cloud[np.concatenate([np.arange(len(cloud)), extra])]


def normalize(
    points: np.ndarray, scale: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Centre a cloud on its centroid and divide by ``scale``.

    :return: ``(normalized points, centroid)``.
    """
    centroid = points.mean(axis=0)
    return (points - centroid) / scale, centroid
