# Copyright 2026 The dlostate authors
"""Functional tests for the CLI and the modules behind each command."""

import csv
import os

import numpy as np
import pytest

from click import testing

from dlostate import cli, config, dataset, formats, utils


TINY_DATA = [
    "--sequences",
    "2",
    "--frames",
    "1",
    "--nodes",
    "4",
    "--points",
    "32",
    "--particles",
    "16",
    "--density",
    "80",
]


@pytest.fixture
def runner():
    """Click fixture runner"""
    return testing.CliRunner()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("data"))
    conf = config.RunConfig(
        sequences=2,
        frames=2,
        nodes=4,
        points=32,
        particles=16,
        density=150.0,
        seed=3,
    )
    dataset.generate_dataset(conf, root)
    return root


def straight_nodes(count=6):
    return np.stack(
        [np.linspace(0.0, 1.0, count), np.zeros(count), np.zeros(count)],
        axis=1,
    )


def test_version(runner):
    result = runner.invoke(cli.main, ["--version"])

    assert 0 == result.exit_code
    assert "dlostate, version" in result.output


def test_help_lists_commands(runner):
    result = runner.invoke(cli.main, ["--help"])

    assert 0 == result.exit_code
    for command in ("gen-data", "train", "eval", "infer", "fuse", "gradcheck"):
        assert command in result.output


#####
# gen-data
#####
def test_gen_data(runner, tmp_path):
    out = str(tmp_path / "data")

    result = runner.invoke(cli.main, ["gen-data", "-o", out] + TINY_DATA)

    assert 0 == result.exit_code, result.output
    assert "Wrote 1 train and 1 val frames" in result.output
    manifest = dataset.read_manifest(out)
    assert 4 == manifest["config"]["nodes"]
    assert 16 == manifest["config"]["particles"]


def test_gen_data_config_file(runner, tmp_path):
    """Options given on the command line win over the config file."""
    conf_file = tmp_path / "run.toml"
    conf_file.write_text(
        "[tool.dlostate]\nsequences = 2\nframes = 1\nnodes = 3\n"
        "particles = 16\nseed = 9\n"
    )
    out = str(tmp_path / "data")

    result = runner.invoke(
        cli.main,
        ["gen-data", "-c", str(conf_file), "-o", out, "--nodes", "4"],
    )

    assert 0 == result.exit_code, result.output
    manifest = dataset.read_manifest(out)
    assert 4 == manifest["config"]["nodes"]
    assert 9 == manifest["seed"]


def test_gen_data_quiet(runner, tmp_path):
    out = str(tmp_path / "data")

    result = runner.invoke(cli.main, ["gen-data", "-q", "-o", out] + TINY_DATA)

    assert 0 == result.exit_code
    assert "" == result.output


def test_unknown_config_key(runner, tmp_path):
    conf_file = tmp_path / "run.toml"
    conf_file.write_text("nodez = 4\n")

    result = runner.invoke(
        cli.main,
        ["gen-data", "-c", str(conf_file), "-o", str(tmp_path / "d")],
    )

    assert 2 == result.exit_code
    assert "unknown key(s)" in result.output
    assert "nodez" in result.output


def test_config_error_category(runner, tmp_path):
    """Cross-field config errors exit with the config category."""
    result = runner.invoke(
        cli.main,
        ["gen-data", "-o", str(tmp_path / "d"), "--nodes", "40"],
    )

    assert 4 == result.exit_code
    assert "E: config: `particles` (64) must be at least twice" in (
        result.output
    )


def test_out_of_range_option(runner, tmp_path):
    result = runner.invoke(
        cli.main,
        ["gen-data", "-o", str(tmp_path / "d"), "--val-fraction", "1.5"],
    )

    assert 4 == result.exit_code
    assert "val_fraction" in result.output


#####
# eval
#####
def test_eval_gt_replay(runner, data_dir, tmp_path):
    out = str(tmp_path / "results")

    result = runner.invoke(
        cli.main,
        [
            "eval",
            "--gt-replay",
            "-d",
            data_dir,
            "--ratios",
            "0,0.2",
            "--out",
            out,
            "--no-color",
        ],
    )

    assert 0 == result.exit_code, result.output
    assert "Occlusion sweep (errors in mm)" in result.output
    assert "RESULT:" in result.output
    with open(os.path.join(out, "table.csv")) as f:
        header = next(csv.reader(f))
    assert ["method", "metric", "ratio=0", "ratio=0.2"] == header
    records = utils.read_json_lines(os.path.join(out, "frames.jsonl"))
    assert 3 * 2 * 2 == len(records)
    assert {"regression", "voting", "fusion"} == {
        r["method"] for r in records
    }
    assert records[0]["frame"].startswith("seq")
    assert os.path.isfile(os.path.join(out, "long.csv"))


def test_eval_threshold_sweep(runner, data_dir, tmp_path):
    out = str(tmp_path / "results")

    result = runner.invoke(
        cli.main,
        [
            "eval",
            "--gt-replay",
            "-d",
            data_dir,
            "--sweep",
            "threshold",
            "--ratios",
            "0.1,0.5,0.9",
            "--out",
            out,
            "-q",
        ],
    )

    assert 0 == result.exit_code
    assert "" == result.output
    records = utils.read_json_lines(os.path.join(out, "frames.jsonl"))
    assert {0.1, 0.5, 0.9} == {r["threshold"] for r in records}


def test_eval_needs_checkpoint(runner, data_dir):
    result = runner.invoke(cli.main, ["eval", "-d", data_dir])

    assert 2 == result.exit_code
    assert "--checkpoint" in result.output


def test_eval_bad_ratios(runner, data_dir):
    result = runner.invoke(
        cli.main, ["eval", "--gt-replay", "-d", data_dir, "--ratios", "a,b"]
    )

    assert 2 == result.exit_code
    assert "comma-separated numbers" in result.output


def test_eval_missing_checkpoint_file(runner, data_dir, tmp_path):
    result = runner.invoke(
        cli.main,
        [
            "eval",
            "-d",
            data_dir,
            "--checkpoint",
            str(tmp_path / "missing.ckpt"),
        ],
    )

    assert 6 == result.exit_code
    assert "E: checkpoint:" in result.output


#####
# infer
#####
def test_infer_gt_replay(runner, data_dir, tmp_path):
    frame_path = dataset.open_dataset(data_dir).paths("train")[0]
    prefix = str(tmp_path / "estimate")

    result = runner.invoke(
        cli.main,
        ["infer", frame_path, "--gt-replay", "-o", prefix, "--points", "32"],
    )

    assert 0 == result.exit_code, result.output
    for tag in ("reg", "vot", "fused"):
        nodes = formats.read_nodes(f"{prefix}.{tag}.dlon")
        assert (4, 3) == nodes.shape
        text = formats.read_xyz(f"{prefix}.{tag}.xyz")
        np.testing.assert_array_equal(nodes, text)
        with open(f"{prefix}.{tag}.xyz") as f:
            assert f"# method: {tag}\n" == f.readline()
    visibility = formats.read_visibility(f"{prefix}.dlov")
    assert (4,) == visibility.shape
    frame = formats.read_frame(frame_path)
    np.testing.assert_array_equal(
        frame.nodes, formats.read_nodes(f"{prefix}.reg.dlon")
    )


def test_infer_gt_replay_needs_frame(runner, tmp_path):
    cloud = tmp_path / "cloud.xyz"
    points = np.random.default_rng(0).normal(size=(40, 3))
    formats.write_xyz(str(cloud), points)

    result = runner.invoke(
        cli.main, ["infer", str(cloud), "--gt-replay", "-o", str(tmp_path)]
    )

    assert 3 == result.exit_code
    assert "E: contract: `--gt-replay` needs a frame record" in result.output


def test_infer_too_few_points(runner, tmp_path):
    cloud = tmp_path / "cloud.xyz"
    formats.write_xyz(str(cloud), np.zeros((5, 3)))

    result = runner.invoke(
        cli.main, ["infer", str(cloud), "--gt-replay", "-o", str(tmp_path)]
    )

    assert 7 == result.exit_code
    assert "E: unusable-frame:" in result.output


def test_infer_bad_xyz(runner, tmp_path):
    cloud = tmp_path / "cloud.xyz"
    cloud.write_text("0 0 0\n1 2\n")

    result = runner.invoke(
        cli.main, ["infer", str(cloud), "--gt-replay", "-o", str(tmp_path)]
    )

    assert 5 == result.exit_code
    assert "E: data-format:" in result.output


#####
# fuse
#####
def write_branches(tmp_path, regression, voting, visibility):
    paths = [
        str(tmp_path / "reg.dlon"),
        str(tmp_path / "vot.dlon"),
        str(tmp_path / "vis.dlov"),
    ]
    formats.write_nodes(paths[0], regression)
    formats.write_nodes(paths[1], voting)
    formats.write_visibility(paths[2], visibility)
    return paths


def test_fuse(runner, tmp_path):
    reg = straight_nodes()
    vot = reg + np.array([0.0, 0.01, 0.0])
    paths = write_branches(tmp_path, reg, vot, np.ones(6))
    out = str(tmp_path / "fused.dlon")

    result = runner.invoke(
        cli.main, ["fuse"] + paths + ["-o", out, "--beta", "0.2"]
    )

    assert 0 == result.exit_code, result.output
    fused = formats.read_nodes(out)
    np.testing.assert_allclose(vot, fused, atol=1e-6)
    text = (tmp_path / "fused.xyz").read_text()
    assert text.startswith("# method: fused\n# fallback: False\n")


def test_fuse_fallback_reported(runner, tmp_path):
    reg = straight_nodes()
    paths = write_branches(tmp_path, reg, reg + 0.1, np.zeros(6))
    out = str(tmp_path / "fused.dlon")

    result = runner.invoke(
        cli.main, ["fuse"] + paths + ["-o", out, "--beta", "0.2"]
    )

    assert 0 == result.exit_code
    assert "Fusion fell back to regression" in result.output
    np.testing.assert_array_equal(reg, formats.read_nodes(out))


def test_fuse_threshold_option(runner, tmp_path):
    """Lowering the threshold admits nodes of middling visibility."""
    reg = straight_nodes()
    paths = write_branches(tmp_path, reg, reg + 0.01, np.full(6, 0.3))
    out = str(tmp_path / "fused.dlon")

    result = runner.invoke(
        cli.main,
        ["fuse"] + paths + ["-o", out, "--threshold", "0.2", "--beta", "0.2"],
    )

    assert 0 == result.exit_code
    assert "fell back" not in result.output


def test_fuse_shape_mismatch(runner, tmp_path):
    paths = write_branches(
        tmp_path, straight_nodes(6), straight_nodes(5), np.ones(6)
    )

    result = runner.invoke(
        cli.main, ["fuse"] + paths + ["-o", str(tmp_path / "out.dlon")]
    )

    assert 3 == result.exit_code
    assert "E: contract:" in result.output


def test_fuse_wrong_file_kind(runner, tmp_path):
    nodes = straight_nodes()
    paths = write_branches(tmp_path, nodes, nodes, np.ones(1))
    paths[0], paths[2] = paths[2], paths[0]

    result = runner.invoke(
        cli.main, ["fuse"] + paths + ["-o", str(tmp_path / "out.dlon")]
    )

    assert 5 == result.exit_code
    assert "expected magic" in result.output


#####
# gradcheck
#####
def test_gradcheck(runner, tmp_path):
    output = str(tmp_path / "report.txt")

    result = runner.invoke(cli.main, ["gradcheck", "--output", output])

    assert 0 == result.exit_code, result.output
    with open(output) as f:
        text = f.read()
    assert "network" in text
    assert "RESULT: PASSED" in text


def test_gradcheck_corrupt(runner):
    result = runner.invoke(
        cli.main, ["gradcheck", "--corrupt", "sigmoid", "--no-color"]
    )

    assert 1 == result.exit_code
    assert "failed: sigmoid" in result.output


def test_gradcheck_quiet(runner):
    result = runner.invoke(cli.main, ["gradcheck", "-q"])

    assert 0 == result.exit_code
    assert "" == result.output
