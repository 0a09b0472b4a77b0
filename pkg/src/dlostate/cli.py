# Copyright 2026 The dlostate authors
"""CLI entrypoint into `dlostate`."""

from __future__ import annotations

import functools
import os
import sys

from typing import Any, Callable, Sequence

import attr
import click
import colorama
import numpy as np

from dlostate import __version__ as version
from dlostate import config as dlo_config
from dlostate import (
    dataset,
    evaluate,
    formats,
    fusion,
    gradcheck,
    model,
    synth,
    train,
    utils,
)
from dlostate.errors import (
    ContractError,
    DloStateError,
    OutputError,
    UnusableFrameError,
)


CONTEXT_SETTINGS = {"help_option_names": ["-h", "--help"]}


#####
# Option helpers
#####
def _config_option_type(field: attr.Attribute) -> Any:
    if field.name == "preset":
        return click.Choice(dlo_config.PRESETS)
    if field.name == "dtype":
        return click.Choice(dlo_config.DTYPES)
    return type(field.default)


def config_options(*groups: str) -> Callable[[Callable], Callable]:
    """Add one option per RunConfig field in ``groups``."""

    def decorator(f: Callable) -> Callable:
        for field in reversed(dlo_config.fields_in(*groups)):
            flag = field.name.replace("_", "-")
            if isinstance(field.default, bool):
                decls = [f"--{flag}/--no-{flag}"]
            else:
                decls = [f"--{flag}"]
            f = click.option(
                *decls,
                field.name,
                type=_config_option_type(field),
                default=field.default,
                show_default=True,
                help=field.metadata["help"],
            )(f)
        return f

    return decorator


def common_options(f: Callable) -> Callable:
    """Verbosity, quiet, color and config-file options."""
    f = click.option(
        "-c",
        "--config",
        type=click.Path(
            exists=False, file_okay=True, dir_okay=False, readable=True
        ),
        is_eager=True,
        expose_value=False,
        callback=dlo_config.read_config_file,
        help=(
            "Read configuration from a TOML file (top level or "
            "`[tool.dlostate]`) or a `.cfg` file (`[dlostate]` section)."
        ),
    )(f)
    f = click.option(
        "--color/--no-color",
        is_flag=True,
        default=True,
        show_default=True,
        envvar="DLOSTATE_COLOR",
        help="Toggle color output on/off when printing to stdout.",
    )(f)
    f = click.option(
        "-q",
        "--quiet",
        is_flag=True,
        default=False,
        show_default=True,
        help="Do not print output",
    )(f)
    f = click.option(
        "-v",
        "--verbose",
        default=0,
        count=True,
        show_default=False,
        help=(
            "Level of verbosity. `-v` logs progress to stderr, `-vv` adds "
            "debug detail and fuller result tables."
        ),
    )(f)
    return f


def handle_errors(f: Callable) -> Callable:
    """Report package errors as ``E: <category>: <message>`` and exit."""

    @functools.wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return f(*args, **kwargs)
        except DloStateError as e:
            click.echo(f"E: {e.category}: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def _setup(verbose: int, quiet: bool) -> None:
    utils.configure_logging(verbose, quiet)
    if not quiet:
        colorama.init()  # needed for Windows


def _run_config(options: dict[str, Any]) -> dlo_config.RunConfig:
    return dlo_config.build_run_config(
        click.get_current_context(silent=True), options
    )


def _parse_floats(
    ctx: click.Context, param: click.Parameter, value: str | None
) -> tuple[float, ...] | None:
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(
            f"expected comma-separated numbers, got {value!r}"
        ) from None


def _makedirs(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create {path}: {e}") from e


def write_estimate(
    prefix: str,
    tag: str,
    nodes: np.ndarray,
    header: dict[str, Any],
) -> list[str]:
    """Write one node sequence as ``<prefix>.<tag>.dlon`` and ``.xyz``."""
    binary = f"{prefix}.{tag}.dlon"
    text = f"{prefix}.{tag}.xyz"
    try:
        formats.write_nodes(binary, nodes)
        formats.write_xyz(text, nodes, {"method": tag, **header})
    except OSError as e:
        raise OutputError(f"cannot write {binary}: {e}") from e
    return [binary, text]


#####
# Commands
#####
@click.group(context_settings=CONTEXT_SETTINGS)
@click.version_option(version, prog_name="dlostate")
def main() -> None:
    """Occlusion-robust state estimation of deformable linear objects.

    \f
    # below the "\f" is ignored when running ``dlostate --help``
    """


@main.command("gen-data", context_settings=CONTEXT_SETTINGS)
@click.option(
    "-o",
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, dir_okay=True, writable=True),
    help="Directory to write the dataset to.",
)
@config_options("data", "vote", "run")
@common_options
@handle_errors
def gen_data(
    out_dir: str, verbose: int, quiet: bool, color: bool, **options: Any
) -> None:
    """Simulate ropes and write a train/val dataset."""
    _setup(verbose, quiet)
    conf = _run_config(options)
    index = dataset.generate_dataset(conf, out_dir)
    if not quiet:
        click.echo(
            f"Wrote {len(index.splits['train'])} train and "
            f"{len(index.splits['val'])} val frames to {out_dir} "
            f"(config {dlo_config.config_hash(conf)[:12]})"
        )


@main.command("train", context_settings=CONTEXT_SETTINGS)
@click.option(
    "-d",
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, dir_okay=True),
    help="Dataset directory written by `gen-data`.",
)
@click.option(
    "-o",
    "--out",
    "out_path",
    required=True,
    type=click.Path(dir_okay=False, writable=True),
    help="Checkpoint to write (best validation epoch).",
)
@click.option(
    "--log",
    "log_path",
    default=None,
    type=click.Path(dir_okay=False, writable=True),
    help="JSON-lines training log.  [default: <out>.jsonl]",
)
@click.option(
    "--resume",
    is_flag=True,
    default=False,
    help="Continue from `<out>.last` with its optimizer state.",
)
@click.option(
    "--overfit",
    type=click.IntRange(min=1),
    default=None,
    metavar="K",
    help="Fit the first K training frames without augmentation.",
)
@config_options("data", "model", "train", "augment", "vote", "run")
@common_options
@handle_errors
def train_cmd(
    data_dir: str,
    out_path: str,
    log_path: str | None,
    resume: bool,
    overfit: int | None,
    verbose: int,
    quiet: bool,
    color: bool,
    **options: Any,
) -> None:
    """Train the regression and voting branches."""
    _setup(verbose, quiet)
    conf = _run_config(options)
    records = train.train(
        conf, data_dir, out_path, log_path, resume=resume, overfit=overfit
    )
    if quiet or not records:
        return
    last = records[-1]
    best = [r for r in records if r.best]
    message = (
        f"Trained to epoch {last.epoch}: loss {last.loss_total:.4g} "
        f"(reg {last.loss_reg:.4g}, vot {last.loss_vot:.4g})"
    )
    if best and best[-1].val_error_vot is not None:
        message += (
            f"; best val voting error "
            f"{utils.millimeters(best[-1].val_error_vot)} mm"
        )
    click.echo(message)
    click.echo(f"Checkpoint written to {out_path}")


@main.command("eval", context_settings=CONTEXT_SETTINGS)
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Trained checkpoint. Not needed with `--gt-replay`.",
)
@click.option(
    "-d",
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, dir_okay=True),
    help="Dataset directory written by `gen-data`.",
)
@click.option(
    "--split",
    type=click.Choice(dataset.SPLITS),
    default="val",
    show_default=True,
    help="Dataset split to evaluate.",
)
@click.option(
    "--sweep",
    type=click.Choice(sorted(evaluate.SWEEP_PARAMETERS)),
    default="occlusion",
    show_default=True,
    help="Which setting to vary.",
)
@click.option(
    "--ratios",
    callback=_parse_floats,
    default=None,
    metavar="LIST",
    help=(
        "Comma-separated occlusion ratios, thresholds or jitters to sweep. "
        "[default: the sweep's standard settings]"
    ),
)
@click.option(
    "--ratio",
    type=click.FloatRange(0.0, synth.MAX_OCCLUSION),
    default=0.2,
    show_default=True,
    help="Occlusion ratio held fixed by the threshold and noise sweeps.",
)
@click.option(
    "--out",
    "out_dir",
    default=None,
    type=click.Path(file_okay=False, dir_okay=True, writable=True),
    help="Directory for frames.jsonl, table.csv and long.csv.",
)
@click.option(
    "--strict",
    is_flag=True,
    default=False,
    help="Exit non-zero when a trend check fails.",
)
@click.option(
    "--gt-replay",
    is_flag=True,
    default=False,
    help="Feed exact voting fields instead of running the network.",
)
@click.option(
    "--output",
    default=None,
    metavar="FILE",
    help="Write the summary to a given FILE.  [default: stdout]",
)
@config_options("data", "vote", "fuse", "run")
@common_options
@handle_errors
def eval_cmd(
    checkpoint: str | None,
    data_dir: str,
    split: str,
    sweep: str,
    ratios: Sequence[float] | None,
    ratio: float,
    out_dir: str | None,
    strict: bool,
    gt_replay: bool,
    output: str | None,
    verbose: int,
    quiet: bool,
    color: bool,
    **options: Any,
) -> None:
    """Score regression, voting and fusion over a sweep."""
    _setup(verbose, quiet)
    conf = _run_config(options)
    params = network = None
    if not gt_replay:
        if checkpoint is None:
            raise click.UsageError(
                "`--checkpoint` is required unless `--gt-replay` is given."
            )
        params, network, _ = model.load_model(checkpoint)
        conf = attr.evolve(
            conf, points=network.encoder.points, nodes=network.nodes
        )
    frames = dataset.open_dataset(data_dir).load(split)
    if not gt_replay and frames and len(frames[0].nodes) != conf.nodes:
        raise ContractError(
            f"frames have {len(frames[0].nodes)} nodes, estimator has "
            f"{conf.nodes}"
        )
    evaluator = evaluate.Evaluator(conf, frames, params, network, gt_replay)
    if sweep == "occlusion":
        results = evaluator.occlusion_sweep(
            ratios or evaluate.OCCLUSION_RATIOS, strict
        )
    elif sweep == "threshold":
        results = evaluator.threshold_sweep(
            ratio, ratios or evaluate.THRESHOLDS, strict
        )
    else:
        results = evaluator.noise_sweep(
            ratio, ratios or evaluate.JITTERS, strict
        )

    if out_dir is not None:
        _makedirs(out_dir)
        try:
            evaluator.write_frame_records(
                results, os.path.join(out_dir, "frames.jsonl")
            )
            evaluator.write_table(results, os.path.join(out_dir, "table.csv"))
            evaluator.write_long_csv(
                results, os.path.join(out_dir, "long.csv")
            )
        except OSError as e:
            raise OutputError(f"cannot write results: {e}") from e

    if not quiet:
        evaluator.print_results(results, output, verbose + 1, color)

    sys.exit(results.ret_code)


@main.command("infer", context_settings=CONTEXT_SETTINGS)
@click.argument(
    "cloud_path",
    metavar="CLOUD",
    type=click.Path(exists=True, dir_okay=False, readable=True),
)
@click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Trained checkpoint. Not needed with `--gt-replay`.",
)
@click.option(
    "-o",
    "--out-prefix",
    required=True,
    metavar="PREFIX",
    help="Outputs go to PREFIX.{reg,vot,fused}.{dlon,xyz} and PREFIX.dlov.",
)
@click.option(
    "--gt-replay",
    is_flag=True,
    default=False,
    help="Use the exact voting field of a frame record's nodes.",
)
@config_options("data", "vote", "fuse")
@common_options
@handle_errors
def infer(
    cloud_path: str,
    checkpoint: str | None,
    out_prefix: str,
    gt_replay: bool,
    verbose: int,
    quiet: bool,
    color: bool,
    **options: Any,
) -> None:
    """Estimate the node sequence of a stored point cloud.

    CLOUD is a frame record (``.dlof``) or an XYZ text file.
    """
    _setup(verbose, quiet)
    conf = _run_config(options)
    points, frame = formats.read_cloud(cloud_path)
    if len(points) < synth.MIN_POINTS:
        raise UnusableFrameError(
            f"{cloud_path}: {len(points)} points, need at least "
            f"{synth.MIN_POINTS}"
        )
    if gt_replay:
        if frame is None:
            raise ContractError("`--gt-replay` needs a frame record (.dlof)")
        cloud = synth.fps_sample(points, conf.points)
        outputs = model.replay_ground_truth(
            cloud, frame.nodes, conf.radius, conf.effective_top_k
        )
    else:
        if checkpoint is None:
            raise click.UsageError(
                "`--checkpoint` is required unless `--gt-replay` is given."
            )
        params, network, _ = model.load_model(checkpoint)
        conf = attr.evolve(conf, points=network.encoder.points)
        cloud = synth.fps_sample(points, conf.points)
        outputs = model.estimate(
            cloud, params, network, conf.radius, conf.effective_top_k
        )
    fused = fusion.fuse(
        outputs.regression,
        outputs.voting,
        outputs.visibility,
        conf.fusion_config(),
    )
    header = {"source": os.path.basename(cloud_path), "points": len(cloud)}
    written: list[str] = []
    written += write_estimate(out_prefix, "reg", outputs.regression, header)
    written += write_estimate(out_prefix, "vot", outputs.voting, header)
    written += write_estimate(
        out_prefix,
        "fused",
        fused.nodes,
        {**header, "fallback": fused.fallback},
    )
    visibility_path = f"{out_prefix}.dlov"
    try:
        formats.write_visibility(visibility_path, outputs.visibility)
    except OSError as e:
        raise OutputError(f"cannot write {visibility_path}: {e}") from e
    written.append(visibility_path)
    if not quiet:
        if fused.fallback:
            click.echo(f"Fusion fell back to regression: {fused.reason}")
        click.echo(
            f"{len(fused.selected)} of {len(fused.nodes)} nodes visible "
            f"at threshold {conf.threshold:g}"
        )
        for path in written:
            click.echo(f"Wrote {path}")


@main.command("fuse", context_settings=CONTEXT_SETTINGS)
@click.argument(
    "regression_path",
    metavar="REG",
    type=click.Path(exists=True, dir_okay=False),
)
@click.argument(
    "voting_path",
    metavar="VOT",
    type=click.Path(exists=True, dir_okay=False),
)
@click.argument(
    "visibility_path",
    metavar="VIS",
    type=click.Path(exists=True, dir_okay=False),
)
@click.option(
    "-o",
    "--out",
    "out_path",
    required=True,
    type=click.Path(dir_okay=False, writable=True),
    help="Fused node file (`.dlon`); an `.xyz` copy is written next to it.",
)
@config_options("fuse")
@common_options
@handle_errors
def fuse_cmd(
    regression_path: str,
    voting_path: str,
    visibility_path: str,
    out_path: str,
    verbose: int,
    quiet: bool,
    color: bool,
    **options: Any,
) -> None:
    """Fuse stored regression and voting estimates.

    REG and VOT are node files (``.dlon``), VIS a visibility file
    (``.dlov``).
    """
    _setup(verbose, quiet)
    conf = _run_config(options)
    regression = formats.read_nodes(regression_path)
    voting = formats.read_nodes(voting_path)
    visibility = formats.read_visibility(visibility_path)
    result = fusion.fuse(regression, voting, visibility, conf.fusion_config())
    text_path = os.path.splitext(out_path)[0] + ".xyz"
    try:
        formats.write_nodes(out_path, result.nodes)
        formats.write_xyz(
            text_path,
            result.nodes,
            {"method": "fused", "fallback": result.fallback},
        )
    except OSError as e:
        raise OutputError(f"cannot write {out_path}: {e}") from e
    if not quiet:
        if result.fallback:
            click.echo(f"Fusion fell back to regression: {result.reason}")
        click.echo(f"Wrote {out_path} and {text_path}")


@main.command("gradcheck", context_settings=CONTEXT_SETTINGS)
@click.option(
    "--seed",
    type=int,
    default=0,
    show_default=True,
    help="Seed for the random inputs and parameters.",
)
@click.option(
    "--corrupt",
    type=click.Choice(gradcheck.LAYERS),
    default=None,
    hidden=True,
)
@click.option(
    "--output",
    default=None,
    metavar="FILE",
    help="Write the report to a given FILE.  [default: stdout]",
)
@click.option(
    "-v",
    "--verbose",
    default=0,
    count=True,
    help="Level of verbosity.",
)
@click.option(
    "-q",
    "--quiet",
    is_flag=True,
    default=False,
    show_default=True,
    help="Do not print output",
)
@click.option(
    "--color/--no-color",
    is_flag=True,
    default=True,
    show_default=True,
    envvar="DLOSTATE_COLOR",
    help="Toggle color output on/off when printing to stdout.",
)
@handle_errors
def gradcheck_cmd(
    seed: int,
    corrupt: str | None,
    output: str | None,
    verbose: int,
    quiet: bool,
    color: bool,
) -> None:
    """Compare reverse-mode gradients with finite differences."""
    _setup(verbose, quiet)
    report = gradcheck.run_gradcheck(seed, corrupt=corrupt)
    if not quiet:
        gradcheck.print_report(report, output, color)
    sys.exit(report.ret_code)
