# Copyright 2026 The dlostate authors
"""End-to-end runs: generate, train, evaluate and infer on a toy network.

Skipped unless ``--runslow`` is given.
"""

import os

import pytest

from click import testing

from dlostate import cli, dataset, formats, model, utils


pytestmark = pytest.mark.slow

TOY = [
    "--nodes",
    "4",
    "--points",
    "32",
    "--particles",
    "16",
    "--seed",
    "1",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    checkpoint = str(root / "model.ckpt")
    runner = testing.CliRunner()

    result = runner.invoke(
        cli.main,
        ["gen-data", "-o", data, "--sequences", "3", "--frames", "2"] + TOY,
    )
    assert 0 == result.exit_code, result.output
    result = runner.invoke(
        cli.main,
        [
            "train",
            "-d",
            data,
            "-o",
            checkpoint,
            "--preset",
            "toy",
            "--epochs",
            "30",
            "--batch-size",
            "1",
            "--overfit",
            "1",
            "--decay-every",
            "100",
        ]
        + TOY,
    )
    assert 0 == result.exit_code, result.output
    return data, checkpoint


def test_short_run_logs_every_epoch(trained):
    _, checkpoint = trained
    records = utils.read_json_lines(checkpoint + ".jsonl")

    assert 30 == len(records)
    assert records[-1]["loss_total"] < records[0]["loss_total"]
    assert all(r["val_error_vot"] is None for r in records)


@pytest.fixture(scope="module")
def memorized(tmp_path_factory):
    """Ten fixed frames fitted for 500 full-batch steps."""
    root = tmp_path_factory.mktemp("overfit")
    data = str(root / "data")
    checkpoint = str(root / "model.ckpt")
    runner = testing.CliRunner()

    result = runner.invoke(
        cli.main,
        ["gen-data", "-o", data, "--sequences", "6", "--frames", "2"] + TOY,
    )
    assert 0 == result.exit_code, result.output
    assert 10 == len(dataset.open_dataset(data).paths("train"))
    result = runner.invoke(
        cli.main,
        [
            "train",
            "-d",
            data,
            "-o",
            checkpoint,
            "--preset",
            "toy",
            "--epochs",
            "500",
            "--batch-size",
            "10",
            "--overfit",
            "10",
            "--weight-decay",
            "0",
            "--decay-every",
            "150",
            "-q",
        ]
        + TOY,
    )
    assert 0 == result.exit_code, result.output
    return utils.read_json_lines(checkpoint + ".jsonl")


def test_overfit_memorizes_frames(memorized):
    first, last = memorized[0], memorized[-1]

    assert 500 == len(memorized)
    assert last["loss_total"] < 0.01 * first["loss_total"]
    assert last["loss_reg"] * 100 <= first["loss_reg"]
    assert last["loss_vot"] * 100 <= first["loss_vot"]


def test_checkpoint_describes_network(trained):
    _, checkpoint = trained
    _, network, metadata = model.load_model(checkpoint)

    assert 4 == network.nodes
    assert 32 == network.encoder.points
    assert metadata["epoch"] < 30
    assert os.path.isfile(checkpoint + ".last")


def test_eval_with_checkpoint(trained, tmp_path):
    data, checkpoint = trained
    out = str(tmp_path / "results")

    result = testing.CliRunner().invoke(
        cli.main,
        [
            "eval",
            "-d",
            data,
            "--checkpoint",
            checkpoint,
            "--ratios",
            "0,0.2",
            "--out",
            out,
            "--no-color",
        ],
    )

    assert 0 == result.exit_code, result.output
    assert 3 * 2 * 2 == len(
        utils.read_json_lines(os.path.join(out, "frames.jsonl"))
    )


def test_infer_with_checkpoint(trained, tmp_path):
    data, checkpoint = trained
    frame_path = dataset.open_dataset(data).paths("val")[0]
    prefix = str(tmp_path / "estimate")

    result = testing.CliRunner().invoke(
        cli.main,
        ["infer", frame_path, "--checkpoint", checkpoint, "-o", prefix],
    )

    assert 0 == result.exit_code, result.output
    assert (4, 3) == formats.read_nodes(prefix + ".fused.dlon").shape


def test_resume_continues_log(trained, tmp_path):
    data, checkpoint = trained
    runner = testing.CliRunner()
    args = [
        "train",
        "-d",
        data,
        "-o",
        checkpoint,
        "--preset",
        "toy",
        "--batch-size",
        "1",
        "--overfit",
        "1",
        "--decay-every",
        "100",
        "--resume",
    ] + TOY

    result = runner.invoke(cli.main, args + ["--epochs", "32"])

    assert 0 == result.exit_code, result.output
    records = utils.read_json_lines(checkpoint + ".jsonl")
    assert list(range(32)) == [r["epoch"] for r in records]
