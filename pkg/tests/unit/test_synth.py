# Copyright 2026 The dlostate authors
"""Unit tests for dlostate/synth.py module"""

import numpy as np
import pytest

from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dlostate import synth
from dlostate.errors import ContractError, UnusableFrameError


SPEC = synth.RopeSpec(length=1.0, radius=0.01, stiffness=0.2, particles=32)


def straight_frame(density=2000.0, nodes=16, seed=0):
    state = synth.straight_rope(SPEC)
    points = synth.render_cloud(state, SPEC, density, seed)
    gt = synth.resample_nodes(state, nodes)
    return synth.Frame(points, gt, np.zeros(nodes, dtype=bool))


@pytest.mark.parametrize(
    "kwargs",
    (
        {"length": 0.0, "radius": 0.01},
        {"length": 1.0, "radius": -0.01},
        {"length": 1.0, "radius": 0.01, "stiffness": 1.5},
        {"length": 1.0, "radius": 0.01, "particles": 1},
    ),
)
def test_rope_spec_rejects(kwargs):
    with pytest.raises(ContractError):
        synth.RopeSpec(**kwargs)


def test_rope_spec_check_nodes():
    SPEC.check_nodes(16)
    with pytest.raises(ContractError, match="17 nodes"):
        SPEC.check_nodes(17)


#####
# Simulation
#####
def test_straight_rope_stays_in_equilibrium():
    """Ends held at distance L without gravity leave the rope straight."""
    state = synth.straight_rope(SPEC)
    x = state.positions
    ends = (x[0], x[-1])
    sim = synth.SimConfig(gravity=0.0, substeps=10, iterations=10)

    new_x, new_v = synth.relax(x, np.zeros_like(x), SPEC, ends, ends, sim)

    np.testing.assert_allclose(x, new_x, atol=1e-3 * SPEC.length)
    np.testing.assert_allclose(0.0, new_v, atol=1e-9)


def test_relax_does_not_modify_inputs():
    x = synth.straight_rope(SPEC).positions
    before = x.copy()
    v = np.zeros_like(x)
    ends = (x[0], x[-1])
    target = (x[0] + [0.1, 0.0, 0.0], x[-1])
    synth.relax(x, v, SPEC, ends, target, synth.SimConfig(substeps=2))

    np.testing.assert_array_equal(before, x)
    np.testing.assert_array_equal(0.0, v)


def test_simulate_sequence_frames_and_strain():
    states = synth.simulate_sequence(SPEC, 3, frames=4)

    assert 4 == len(states)
    for state in states:
        assert (SPEC.particles, 3) == state.positions.shape
        assert state.max_strain(SPEC) <= synth.SimConfig().max_strain


def test_simulate_sequence_deterministic():
    first = synth.simulate_sequence(SPEC, [7, 1], frames=2)
    second = synth.simulate_sequence(SPEC, [7, 1], frames=2)

    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.positions, b.positions)


def test_simulate_sequence_needs_a_frame():
    with pytest.raises(ContractError, match="frames"):
        synth.simulate_sequence(SPEC, 0, frames=0)


#####
# Nodes
#####
def test_resample_straight_rope():
    state = synth.RopeState(
        np.stack([np.linspace(0, 1, 11), np.zeros(11), np.zeros(11)], axis=1)
    )
    nodes = synth.resample_nodes(state, 5)

    np.testing.assert_allclose([0.0, 0.25, 0.5, 0.75, 1.0], nodes[:, 0])
    np.testing.assert_allclose(0.0, nodes[:, 1:])


def test_resample_two_nodes_are_endpoints():
    state = synth.straight_rope(SPEC, direction=[0.0, 1.0, 1.0])
    nodes = synth.resample_nodes(state, 2)

    np.testing.assert_allclose(state.positions[[0, -1]], nodes, atol=1e-12)


def test_resample_semicircle():
    """Three nodes on a half circle: both ends plus the apex."""
    theta = np.linspace(0.0, np.pi, 2001)
    arc = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], 1)
    nodes = synth.polyline_nodes(arc, 3)

    np.testing.assert_allclose([0.0, 1.0, 0.0], nodes[1], atol=1e-6)
    chords = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    assert chords[0] == pytest.approx(chords[1], rel=1e-6)


def test_resample_is_uniform_on_simulated_rope():
    state = synth.simulate_sequence(SPEC, 11, frames=1)[0]
    nodes = synth.resample_nodes(state, 12)
    along = synth.project_arclength(nodes, state.positions)
    gaps = np.diff(along)

    np.testing.assert_allclose(state.arclength(), along[-1])
    assert np.std(gaps) / np.mean(gaps) < 0.01


@pytest.mark.parametrize("count", (0, 1))
def test_resample_needs_two_nodes(count):
    with pytest.raises(ContractError, match="at least 2"):
        synth.polyline_nodes(np.eye(3), count)


def test_resample_zero_length():
    with pytest.raises(ContractError, match="zero-length"):
        synth.polyline_nodes(np.zeros((4, 3)), 3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_resample_rigid_motion_equivariance(seed):
    rng = np.random.default_rng(seed)
    polyline = np.cumsum(rng.normal(size=(9, 3)), axis=0)
    rotation = Rotation.random(random_state=rng)
    shift = rng.normal(size=3)

    moved = synth.polyline_nodes(rotation.apply(polyline) + shift, 6)
    expected = rotation.apply(synth.polyline_nodes(polyline, 6)) + shift

    np.testing.assert_allclose(expected, moved, atol=1e-9)


def test_project_arclength_straight():
    polyline = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    points = np.array([[0.3, 0.1, 0.0], [1.1, 0.5, 0.0], [-1.0, 0.0, 0.0]])

    np.testing.assert_allclose(
        [0.3, 1.5, 0.0], synth.project_arclength(points, polyline)
    )


def test_occlusion_mask():
    nodes = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    points = np.array([[0.0, 0.01, 0.0], [1.0, 0.5, 0.0]])

    np.testing.assert_array_equal(
        [False, True], synth.occlusion_mask(points, nodes, 0.02)
    )
    np.testing.assert_array_equal(
        [True, True], synth.occlusion_mask(np.empty((0, 3)), nodes, 0.02)
    )


def test_frame_with_mask_matches_cloud():
    frame = straight_frame().with_mask(0.02)
    nearest = np.min(
        np.linalg.norm(frame.nodes[:, None] - frame.points[None], axis=2),
        axis=1,
    )

    np.testing.assert_array_equal(nearest >= 0.02, frame.occluded)


#####
# Rendering
#####
def test_render_cloud_half_cylinder():
    """Straight rope on the x-axis seen from +z: points sit on the
    upper half of the cylinder."""
    state = synth.straight_rope(SPEC)
    points = synth.render_cloud(state, SPEC, 500.0, seed=4)

    assert round(500.0 * SPEC.length) == len(points)
    assert np.all(points[:, 2] >= -1e-12)
    np.testing.assert_allclose(
        SPEC.radius, np.hypot(points[:, 1], points[:, 2]), atol=1e-9
    )


def test_render_cloud_thin_rope_on_centerline():
    spec = synth.RopeSpec(length=1.0, radius=1e-12, particles=8)
    state = synth.straight_rope(spec, direction=[0.0, 1.0, 0.0])
    points = synth.render_cloud(state, spec, 100.0, seed=0)

    np.testing.assert_allclose(0.0, points[:, [0, 2]], atol=1e-9)


def test_render_cloud_camera_along_rope():
    """A camera looking down the rope axis still gets surface points."""
    state = synth.straight_rope(SPEC)
    points = synth.render_cloud(
        state, SPEC, 200.0, seed=1, camera=np.array([1.0, 0.0, 0.0])
    )

    assert np.all(np.isfinite(points))
    np.testing.assert_allclose(
        SPEC.radius, np.hypot(points[:, 1], points[:, 2]), atol=1e-9
    )


def test_render_cloud_density():
    state = synth.straight_rope(SPEC)
    with pytest.raises(ContractError, match="density"):
        synth.render_cloud(state, SPEC, 0.0, seed=0)


def test_random_camera_is_unit_and_upward():
    rng = np.random.default_rng(2)
    for _ in range(20):
        camera = synth.random_camera(rng)
        assert np.linalg.norm(camera) == pytest.approx(1.0)
        assert camera[2] >= 0.5 - 1e-12


#####
# Augmentation
#####
def test_occlusion_windows():
    rng = np.random.default_rng(5)
    for _ in range(20):
        windows = synth.occlusion_windows(2.0, 0.3, rng)
        assert 1 <= len(windows) <= 3
        assert sum(hi - lo for lo, hi in windows) == pytest.approx(0.6)
        for (_, hi), (lo, _) in zip(windows, windows[1:]):
            assert hi <= lo
        assert windows[0][0] >= 0.0
        assert windows[-1][1] <= 2.0 + 1e-12


def test_occlusion_windows_zero_ratio():
    assert [] == synth.occlusion_windows(1.0, 0.0, np.random.default_rng(0))


def test_augment_identity():
    frame = straight_frame()
    out = synth.augment(frame, synth.AugmentConfig(), np.random.default_rng(0))

    np.testing.assert_array_equal(frame.points, out.points)
    np.testing.assert_array_equal(frame.nodes, out.nodes)
    assert 0.0 == out.meta["occlusion_ratio"]


def test_augment_occlusion_removes_ratio():
    frame = straight_frame(density=5000.0)
    cfg = synth.AugmentConfig(occlusion=0.4)
    out = synth.augment(frame, cfg, np.random.default_rng(3))

    kept = len(out.points) / len(frame.points)
    assert kept == pytest.approx(0.6, abs=0.05)
    assert out.meta["occlusion_windows"]


def test_augment_jitter_and_rotation():
    """Rotation moves points and nodes together."""
    frame = straight_frame(density=300.0)
    cfg = synth.AugmentConfig(rotate=True)
    out = synth.augment(frame, cfg, np.random.default_rng(9))

    before = np.linalg.norm(frame.points[:5, None] - frame.nodes[None], axis=2)
    after = np.linalg.norm(out.points[:5, None] - out.nodes[None], axis=2)
    np.testing.assert_allclose(before, after, atol=1e-12)

    jittered = synth.augment(
        frame, synth.AugmentConfig(jitter=0.001), np.random.default_rng(9)
    )
    assert not np.array_equal(frame.points, jittered.points)
    np.testing.assert_array_equal(frame.nodes, jittered.nodes)


def test_augment_unusable_frame():
    frame = straight_frame(density=40.0)
    cfg = synth.AugmentConfig(occlusion=0.8)

    with pytest.raises(UnusableFrameError, match="need 32"):
        synth.augment(frame, cfg, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", ({"occlusion": 0.9}, {"jitter": -1.0}))
def test_augment_config_rejects(kwargs):
    with pytest.raises(ContractError):
        synth.AugmentConfig(**kwargs)


#####
# Sampling
#####
def test_fps_collinear_farthest_pair():
    points = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])

    assert [0, 2] == list(synth.fps_indices(points, 2, start=0))


def test_fps_indices_distinct():
    points = np.random.default_rng(1).normal(size=(100, 3))
    chosen = synth.fps_indices(points, 40)

    assert 40 == len(set(chosen.tolist()))
    assert synth.lexicographic_start(points) == chosen[0]


def test_fps_sample_full_size_is_permutation():
    cloud = np.random.default_rng(2).normal(size=(20, 3))
    sampled = synth.fps_sample(cloud, 20, seed=3)

    key = np.lexsort(cloud.T)
    np.testing.assert_array_equal(
        cloud[key], sampled[np.lexsort(sampled.T)]
    )


def test_fps_sample_spreads_points():
    """The greedy subset is better spread than typical random subsets."""
    rng = np.random.default_rng(4)
    cloud = rng.uniform(size=(100, 3))

    def min_gap(points):
        gaps = np.linalg.norm(points[:, None] - points[None], axis=2)
        return gaps[np.triu_indices(len(points), 1)].min()

    sampled = min_gap(synth.fps_sample(cloud, 10))
    random = [
        min_gap(cloud[rng.choice(100, 10, replace=False)]) for _ in range(50)
    ]
    assert sampled > np.median(random)


def test_fps_sample_tops_up_small_clouds():
    cloud = np.arange(15.0).reshape(5, 3)
    sampled = synth.fps_sample(cloud, 12, seed=0)

    assert (12, 3) == sampled.shape
    np.testing.assert_array_equal(cloud, sampled[:5])


def test_fps_sample_empty():
    with pytest.raises(ContractError, match="empty"):
        synth.fps_sample(np.empty((0, 3)), 4)


def test_normalize():
    points = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    normalized, centroid = synth.normalize(points, scale=2.0)

    np.testing.assert_array_equal([2.0, 2.0, 2.0], centroid)
    np.testing.assert_array_equal([[-0.5, 0, 0.5], [0.5, 0, -0.5]], normalized)
