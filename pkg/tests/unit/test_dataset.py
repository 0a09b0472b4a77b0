# Copyright 2026 The dlostate authors
"""Unit tests for dlostate/dataset.py module"""

import os

import numpy as np
import pytest

from dlostate import config, dataset, formats, synth, utils
from dlostate.errors import DataFormatError, UnusableFrameError


TINY = config.RunConfig(
    sequences=3,
    frames=2,
    nodes=4,
    points=32,
    particles=16,
    density=100.0,
    seed=2,
)


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("data"))
    return dataset.generate_dataset(TINY, root)


def tree_bytes(root):
    contents = {}
    for directory, _, files in os.walk(root):
        for name in files:
            path = os.path.join(directory, name)
            with open(path, "rb") as f:
                contents[os.path.relpath(path, root)] = f.read()
    return contents


@pytest.mark.parametrize(
    "count,fraction,held_out",
    ((100, 0.2, 20), (10, 0.01, 1), (2, 0.9, 1), (1, 0.5, 0)),
)
def test_split_sequences_sizes(count, fraction, held_out):
    train, val = dataset.split_sequences(count, fraction, seed=0)

    assert held_out == len(val)
    assert not set(train) & set(val)
    assert list(range(count)) == sorted(train + val)
    assert train == sorted(train)


def test_split_sequences_seeded():
    assert dataset.split_sequences(50, 0.2, 1) == dataset.split_sequences(
        50, 0.2, 1
    )
    assert dataset.split_sequences(50, 0.2, 1) != dataset.split_sequences(
        50, 0.2, 2
    )


def test_rope_spec_within_ranges():
    rng = np.random.default_rng(0)
    for _ in range(20):
        spec = dataset.rope_spec(TINY, rng)
        assert TINY.length_min <= spec.length <= TINY.length_max
        assert TINY.radius_min <= spec.radius <= TINY.radius_max
        assert TINY.stiffness_min <= spec.stiffness <= TINY.stiffness_max
        assert TINY.particles == spec.particles


def test_generate_sequence():
    frames = dataset.generate_sequence(TINY, 1)

    assert 2 == len(frames)
    for number, frame in enumerate(frames):
        assert (4, 3) == frame.nodes.shape
        assert frame.points.shape[0] > 0
        assert 1 == frame.meta["sequence"]
        assert number == frame.meta["frame"]
        assert 0.0 == frame.meta["occlusion_ratio"]


def test_generate_sequence_independent_of_order():
    later = dataset.generate_sequence(TINY, 2)
    dataset.generate_sequence(TINY, 0)
    again = dataset.generate_sequence(TINY, 2)

    for a, b in zip(later, again):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.nodes, b.nodes)


def test_frame_name():
    assert "seq0003_frame012.dlof" == dataset.frame_name(3, 12)


def test_generate_dataset_layout(generated):
    root = generated.root

    assert 4 == len(generated.splits["train"])
    assert 2 == len(generated.splits["val"])
    for split in dataset.SPLITS:
        for path in generated.paths(split):
            assert os.path.isfile(path)
            assert f"{os.sep}{split}{os.sep}" in path
    manifest = dataset.read_manifest(root)
    assert config.config_hash(TINY) == manifest["config_hash"]
    assert {"train": 4, "val": 2} == manifest["frames"]
    assert [2, 0] == manifest["sequence_seeds"]["0"]
    assert TINY.to_dict() == manifest["config"]


def test_generate_dataset_deterministic(generated, tmp_path):
    again = dataset.generate_dataset(TINY, str(tmp_path))

    assert tree_bytes(generated.root) == tree_bytes(again.root)


@pytest.mark.slow
def test_generate_dataset_parallel_identical(generated, tmp_path):
    conf = config.RunConfig(**{**TINY.to_dict(), "workers": 2})
    parallel = dataset.generate_dataset(conf, str(tmp_path))

    serial = tree_bytes(generated.root)
    serial.pop("manifest.json")
    other = tree_bytes(parallel.root)
    other.pop("manifest.json")
    assert serial == other


def test_open_dataset(generated):
    index = dataset.open_dataset(generated.root)

    assert generated.splits == index.splits
    frames = index.load("val")
    assert 2 == len(frames)
    assert isinstance(frames[0], synth.Frame)


def test_open_dataset_missing_index(tmp_path):
    with pytest.raises(DataFormatError, match="missing"):
        dataset.open_dataset(str(tmp_path))


def test_open_dataset_malformed_index(tmp_path):
    utils.write_json(str(tmp_path / dataset.INDEX_FILE), [1, 2])

    with pytest.raises(DataFormatError, match="malformed"):
        dataset.open_dataset(str(tmp_path))


def test_open_dataset_missing_frame(tmp_path):
    utils.write_json(
        str(tmp_path / dataset.INDEX_FILE), {"train": ["train/gone.dlof"]}
    )

    with pytest.raises(DataFormatError, match="is missing"):
        dataset.open_dataset(str(tmp_path))


def test_unknown_split(generated):
    with pytest.raises(DataFormatError, match="no split 'test'"):
        generated.paths("test")


def straight_frame(density=400.0):
    spec = synth.RopeSpec(length=1.0, radius=0.01, particles=16)
    state = synth.straight_rope(spec)
    points = synth.render_cloud(state, spec, density, seed=0)
    nodes = synth.resample_nodes(state, 4)
    return synth.Frame(points, nodes, np.zeros(4, dtype=bool))


def test_prepare_frame_fixes_point_count():
    frame = straight_frame()

    prepared = dataset.prepare_frame(frame, 64, 0.02)

    assert (64, 3) == prepared.points.shape
    np.testing.assert_array_equal(frame.nodes, prepared.nodes)
    np.testing.assert_array_equal(
        synth.occlusion_mask(prepared.points, prepared.nodes, 0.02),
        prepared.occluded,
    )


def test_prepare_frame_tops_up_small_clouds():
    frame = straight_frame(density=40.0)

    prepared = dataset.prepare_frame(frame, 64, 0.02)

    assert (64, 3) == prepared.points.shape


def test_prepare_frame_occludes():
    frame = straight_frame()
    augment = synth.AugmentConfig(occlusion=0.5, max_windows=1)

    prepared = dataset.prepare_frame(
        frame, 64, 0.02, augment, np.random.default_rng(0)
    )

    assert prepared.occluded.any()


def test_prepare_frame_unusable():
    frame = straight_frame(density=40.0)
    augment = synth.AugmentConfig(occlusion=0.8)

    with pytest.raises(UnusableFrameError):
        dataset.prepare_frame(
            frame, 64, 0.02, augment, np.random.default_rng(0)
        )


def test_round_trip_through_files(generated):
    path = generated.paths("train")[0]
    frame = formats.read_frame(path)

    assert 4 == len(frame.nodes)
    assert "simulation_seed" in frame.meta
