# Copyright 2026 The dlostate authors
"""Unit tests for dlostate/train.py module"""

import math
import os

import numpy as np
import pytest

from dlostate import config, dataset, model, synth, train, utils
from dlostate.errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    TrainingDiverged,
)


TOY = config.RunConfig(
    preset="toy",
    nodes=4,
    points=32,
    particles=16,
    batch_size=2,
    epochs=2,
    seed=0,
)


def arc_frame(seed, nodes=4):
    rng = np.random.default_rng(seed)
    theta = np.linspace(0.0, rng.uniform(0.5, 1.5), 16)
    bend = 0.8 / theta[-1]
    positions = np.stack(
        [bend * np.sin(theta), bend * (1 - np.cos(theta)), np.zeros(16)],
        axis=1,
    )
    state = synth.RopeState(positions)
    spec = synth.RopeSpec(length=0.8, radius=0.01, particles=16)
    points = synth.render_cloud(state, spec, 200.0, seed)
    frame = synth.Frame(
        points, synth.resample_nodes(state, nodes), np.zeros(nodes, bool)
    )
    return frame.with_mask(TOY.radius)


@pytest.fixture(scope="module")
def frames():
    return [arc_frame(seed) for seed in range(5)]


def test_needs_training_frames():
    with pytest.raises(DataFormatError, match="no training frames"):
        train.Trainer(TOY, [])


def test_sample_is_normalized(frames):
    trainer = train.Trainer(TOY, frames[:1], augment=False)
    cloud, nodes = trainer.sample(frames[0], np.random.default_rng(0))

    assert (32, 3) == cloud.shape
    assert (4, 3) == nodes.shape
    np.testing.assert_allclose(0.0, cloud.mean(axis=0), atol=1e-12)


def test_sample_without_augment_is_fixed(frames):
    trainer = train.Trainer(TOY, frames[:1], augment=False)
    first, _ = trainer.sample(frames[0], np.random.default_rng(0))
    second, _ = trainer.sample(frames[0], np.random.default_rng(1))

    np.testing.assert_array_equal(first, second)


def test_train_epoch_record(frames):
    trainer = train.Trainer(TOY, frames[:3])
    record = trainer.train_epoch()

    assert 0 == record.epoch
    assert TOY.lr == record.lr
    assert math.isfinite(record.loss_total)
    assert record.loss_total == pytest.approx(
        TOY.w_reg * record.loss_reg + TOY.w_vot * record.loss_vot
    )
    assert 2 == trainer.state.step


def test_train_epoch_updates_params(frames):
    trainer = train.Trainer(TOY, frames[:2])
    before = {n: t.data.copy() for n, t in trainer.params.items()}

    trainer.train_epoch()

    changed = [
        n
        for n, t in trainer.params.items()
        if not np.array_equal(before[n], t.data)
    ]
    assert changed


def test_diverged_names_batch_seed(frames):
    trainer = train.Trainer(TOY, frames[:2])
    trainer.params["regression.0.weight"].data[:] = np.nan

    with pytest.raises(TrainingDiverged, match="batch seed"):
        trainer.train_epoch()


def test_validate(frames):
    trainer = train.Trainer(TOY, frames[:2], frames[2:4])
    reg, vot = trainer.validate()

    assert reg > 0.0
    assert vot > 0.0
    assert (None, None) == train.Trainer(TOY, frames[:2]).validate()


def test_run_writes_outputs(frames, tmp_path):
    out = str(tmp_path / "run" / "model.ckpt")
    log = str(tmp_path / "run" / "log.jsonl")
    trainer = train.Trainer(TOY, frames[:2], frames[2:3])

    records = trainer.run(out, log)

    assert [0, 1] == [r.epoch for r in records]
    assert records[0].best
    assert os.path.isfile(out)
    assert os.path.isfile(out + train.LAST_SUFFIX)
    lines = utils.read_json_lines(log)
    assert [0, 1] == [line["epoch"] for line in lines]
    assert {"loss_total", "val_error_vot", "best"} <= set(lines[0])
    params, network, metadata = model.load_model(out)
    assert trainer.network == network
    assert config.config_hash(TOY) == metadata["config_hash"]


def test_resume_matches_uninterrupted(frames, tmp_path):
    """Stopping after one epoch and resuming reproduces the full run."""
    straight = train.Trainer(TOY, frames[:3])
    expected = straight.run(str(tmp_path / "a.ckpt"), str(tmp_path / "a.log"))

    one_epoch = config.RunConfig(**{**TOY.to_dict(), "epochs": 1})
    out = str(tmp_path / "b.ckpt")
    log = str(tmp_path / "b.log")
    train.Trainer(one_epoch, frames[:3]).run(out, log)
    resumed = train.Trainer(TOY, frames[:3]).run(out, log, resume=True)

    assert [1] == [r.epoch for r in resumed]
    assert expected[1].loss_total == resumed[0].loss_total
    for name, tensor in straight.params.items():
        np.testing.assert_array_equal(
            tensor.data,
            model.load_model(out + train.LAST_SUFFIX)[0][name].data,
        )
    assert 2 == len(utils.read_json_lines(log))


def test_resume_needs_last_state(frames, tmp_path):
    out = str(tmp_path / "model.ckpt")
    trainer = train.Trainer(TOY, frames[:1])
    trainer.save_best(out + train.LAST_SUFFIX)

    with pytest.raises(CheckpointError, match="not a last-state"):
        trainer.resume(out + train.LAST_SUFFIX)


def test_save_last_keeps_moments(frames, tmp_path):
    path = str(tmp_path / "model.ckpt.last")
    trainer = train.Trainer(TOY, frames[:2])
    trainer.train_epoch()
    trainer.save_last(path)

    _, _, metadata = model.load_model(path)

    assert 1 == metadata["adam_step"]
    names = set(metadata["arrays"])
    assert {"adam.m.regression.0.weight", "adam.v.regression.0.weight"} <= (
        names
    )


def test_train_rejects_node_mismatch(tmp_path):
    data = str(tmp_path / "data")
    conf = config.RunConfig(
        sequences=2, frames=1, nodes=4, points=32, particles=16, density=80.0
    )
    dataset.generate_dataset(conf, data)
    mismatched = config.RunConfig(**{**TOY.to_dict(), "nodes": 5})

    with pytest.raises(ConfigError, match="nodes"):
        train.train(mismatched, data, str(tmp_path / "model.ckpt"))
