# Copyright 2026 The dlostate authors
"""
Configuration-related helpers.
"""

from __future__ import annotations

import configparser
import hashlib
import json

from typing import Any, Callable, Final, Mapping

import attr
import click

from dlostate import encoder, fusion, heads, model, numkit, synth
from dlostate.errors import ConfigError


try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type: ignore


SECTION: Final[str] = "dlostate"
PRESETS: Final[tuple[str, ...]] = encoder.EncoderConfig.PRESETS
DTYPES: Final[tuple[str, ...]] = ("float64", "float32")


def _option(
    default: Any,
    group: str,
    help: str,
    check: Callable[[Any], bool] | None = None,
    rule: str = "",
) -> Any:
    """An attrs field carrying its CLI group, help text and range check."""

    def _validate(
        instance: Any, attribute: attr.Attribute, value: Any
    ) -> None:
        if check is not None and not check(value):
            raise ConfigError(
                f"`{attribute.name}` must be {rule}, got {value!r}"
            )

    return attr.ib(
        default=default,
        validator=_validate,
        metadata={"group": group, "help": help},
    )


def _positive(value: float) -> bool:
    return value > 0


def _non_negative(value: float) -> bool:
    return value >= 0


def _unit_open(value: float) -> bool:
    return 0 < value < 1


def _at_least(bound: int) -> Callable[[int], bool]:
    return lambda value: value >= bound


def _at_most(bound: float) -> Callable[[float], bool]:
    return lambda value: value <= bound


@attr.s
class RunConfig:
    """Every tunable of data generation, training, evaluation and fusion.

    Fields are grouped (``data``, ``model``, ``train``, ``augment``,
    ``vote``, ``fuse``, ``run``); each subcommand exposes the groups it
    uses as options, and a config file may set any of them.
    """

    # data
    sequences: int = _option(
        100, "data", "Simulated sequences.", _at_least(1), ">= 1"
    )
    frames: int = _option(
        25, "data", "Frames per sequence.", _at_least(1), ">= 1"
    )
    nodes: int = _option(
        16, "data", "Nodes per rope (M).", _at_least(3), ">= 3"
    )
    points: int = _option(
        256, "data", "Points per network input (N).", _at_least(32), ">= 32"
    )
    density: float = _option(
        600.0, "data", "Rendered points per meter of rope.", _positive, "> 0"
    )
    length_min: float = _option(
        0.6, "data", "Shortest rope (m).", _positive, "> 0"
    )
    length_max: float = _option(
        1.2, "data", "Longest rope (m).", _positive, "> 0"
    )
    radius_min: float = _option(
        0.005, "data", "Thinnest rope radius (m).", _positive, "> 0"
    )
    radius_max: float = _option(
        0.015, "data", "Thickest rope radius (m).", _positive, "> 0"
    )
    stiffness_min: float = _option(
        0.05, "data", "Lowest bending stiffness.", _non_negative, ">= 0"
    )
    stiffness_max: float = _option(
        0.3, "data", "Highest bending stiffness.", _at_most(1.0), "<= 1"
    )
    particles: int = _option(
        64, "data", "Simulated particles per rope.", _at_least(4), ">= 4"
    )
    val_fraction: float = _option(
        0.2, "data", "Fraction of sequences held out.", _unit_open, "in (0, 1)"
    )
    random_camera: bool = _option(
        True, "data", "Randomize the camera direction per frame."
    )

    # model
    preset: str = _option(
        "desk",
        "model",
        "Encoder preset.",
        lambda v: v in PRESETS,
        f"one of {', '.join(PRESETS)}",
    )
    dtype: str = _option(
        "float64",
        "model",
        "Parameter dtype.",
        lambda v: v in DTYPES,
        "float64 or float32",
    )
    scale: float = _option(
        1.0, "model", "Input normalization scale (m).", _positive, "> 0"
    )

    # train
    lr: float = _option(
        0.01, "train", "Initial learning rate.", _positive, "> 0"
    )
    batch_size: int = _option(
        32, "train", "Samples per optimizer step.", _at_least(1), ">= 1"
    )
    epochs: int = _option(
        60, "train", "Training epochs.", _at_least(1), ">= 1"
    )
    decay_every: int = _option(
        6,
        "train",
        "Epochs between learning-rate decays.",
        _at_least(1),
        ">= 1",
    )
    decay_ratio: float = _option(
        0.5,
        "train",
        "Learning-rate decay factor.",
        lambda v: 0 < v <= 1,
        "in (0, 1]",
    )
    weight_decay: float = _option(
        5e-4, "train", "Decoupled weight decay.", _non_negative, ">= 0"
    )
    w_reg: float = _option(
        1.0, "train", "Regression loss weight.", _non_negative, ">= 0"
    )
    w_vot: float = _option(
        1.0, "train", "Voting loss weight.", _non_negative, ">= 0"
    )

    # augment
    jitter: float = _option(
        0.002, "augment", "Gaussian point jitter (m).", _non_negative, ">= 0"
    )
    rotate: bool = _option(
        True, "augment", "Random rotation of training frames."
    )
    max_occlusion: float = _option(
        0.4,
        "augment",
        "Largest training occlusion ratio.",
        lambda v: 0 <= v <= synth.MAX_OCCLUSION,
        f"in [0, {synth.MAX_OCCLUSION}]",
    )
    occlusion_prob: float = _option(
        0.5,
        "augment",
        "Probability a training frame is occluded.",
        lambda v: 0 <= v <= 1,
        "in [0, 1]",
    )

    # vote
    radius: float = _option(
        heads.DEFAULT_RADIUS,
        "vote",
        "Voting neighbourhood radius r.",
        _positive,
        "> 0",
    )
    top_k: int = _option(
        heads.DEFAULT_TOP_K,
        "vote",
        "Candidates per node K (capped at N/4).",
        _at_least(1),
        ">= 1",
    )

    # fuse
    threshold: float = _option(
        0.5, "fuse", "Visibility threshold T.", _unit_open, "in (0, 1)"
    )
    smoothness: float = _option(
        0.25, "fuse", "Regularization weight lambda.", _positive, "> 0"
    )
    beta: float = _option(
        0.5, "fuse", "Gaussian kernel width beta.", _positive, "> 0"
    )
    max_iterations: int = _option(
        50, "fuse", "Fusion iteration cap.", _at_least(1), ">= 1"
    )
    tolerance: float = _option(
        1e-8,
        "fuse",
        "Fusion convergence tolerance on sigma^2.",
        _positive,
        "> 0",
    )
    min_visible: int = _option(
        3,
        "fuse",
        "Fewest visible nodes that allow fusion.",
        _at_least(1),
        ">= 1",
    )

    # run
    seed: int = _option(
        0, "run", "Master random seed.", _non_negative, ">= 0"
    )
    workers: int = _option(
        1,
        "run",
        "Worker processes for data generation.",
        _at_least(1),
        ">= 1",
    )

    def __attrs_post_init__(self) -> None:
        for low, high in (
            ("length_min", "length_max"),
            ("radius_min", "radius_max"),
            ("stiffness_min", "stiffness_max"),
        ):
            if getattr(self, low) > getattr(self, high):
                raise ConfigError(f"`{low}` must not exceed `{high}`")
        if self.particles < 2 * self.nodes:
            raise ConfigError(
                f"`particles` ({self.particles}) must be at least twice "
                f"`nodes` ({self.nodes})"
            )

    @property
    def effective_top_k(self) -> int:
        return heads.default_top_k(self.points, self.top_k)

    def network_config(self) -> model.NetworkConfig:
        return model.NetworkConfig.preset(
            self.preset, self.nodes, self.points, self.dtype
        )

    def fusion_config(self) -> fusion.FusionConfig:
        return fusion.FusionConfig(
            threshold=self.threshold,
            smoothness=self.smoothness,
            beta=self.beta,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
            min_visible=self.min_visible,
        )

    def adam_state(self) -> numkit.AdamState:
        return numkit.AdamState(
            lr=self.lr,
            weight_decay=self.weight_decay,
            decay_every=self.decay_every,
            decay_ratio=self.decay_ratio,
        )

    def to_dict(self) -> dict[str, Any]:
        return attr.asdict(self)


def fields_in(*groups: str) -> list[attr.Attribute]:
    """RunConfig fields belonging to ``groups``, in declaration order."""
    return [f for f in attr.fields(RunConfig) if f.metadata["group"] in groups]


FIELD_NAMES: Final[frozenset[str]] = frozenset(
    f.name for f in attr.fields(RunConfig)
)


def config_hash(conf: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(conf.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _normalize_keys(raw: Mapping[str, Any]) -> dict[str, Any]:
    return {
        k.replace("--", "").replace("-", "_"): v for k, v in raw.items()
    }


def _check_keys(config: Mapping[str, Any], path: str) -> None:
    unknown = sorted(set(config) - FIELD_NAMES)
    if unknown:
        raise click.BadParameter(
            f"unknown key(s) in {path}: {', '.join(unknown)}",
            param_hint="'-c' / '--config'",
        )


def coerce_value(name: str, value: Any) -> Any:
    """Convert a raw config value to the type of the field's default."""
    default = attr.fields_dict(RunConfig)[name].default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "yes", "on", "1"):
            return True
        if text in ("false", "no", "off", "0"):
            return False
        raise click.BadParameter(f"`{name}` expects a boolean, got {value!r}")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise click.BadParameter(
            f"`{name}` expects {type(default).__name__}, got {value!r}"
        ) from None


def parse_toml(path_config: str) -> dict[str, Any]:
    """Parse a TOML config file.

    Keys may sit at the top level or in a ``[tool.dlostate]`` table.

    :raise OSError: an I/O-related error when opening the file.
    :raise tomllib.TOMLDecodeError: unable to parse the file.
    """
    with open(path_config, "rb") as f:
        document = tomllib.load(f)
    table = document.get("tool", {}).get(SECTION)
    if table is None:
        table = {k: v for k, v in document.items() if k != "tool"}
    return _normalize_keys(table)


def parse_cfg(path_config: str) -> dict[str, Any]:
    """Parse an INI-style config file with a ``[dlostate]`` section.

    :raise configparser.Error: unable to parse the file.
    """
    cfg = configparser.ConfigParser()
    with open(path_config, encoding="utf-8") as f:
        cfg.read_file(f)
    try:
        section = cfg[SECTION]
    except KeyError:
        return {}
    return _normalize_keys(dict(section.items()))


def load_config_file(path: str) -> dict[str, Any]:
    """Read, validate and coerce a config file into RunConfig keywords."""
    try:
        if path.endswith(".toml"):
            raw = parse_toml(path)
        else:
            raw = parse_cfg(path)
    except (tomllib.TOMLDecodeError, configparser.Error, OSError) as e:
        raise click.FileError(
            filename=path, hint=f"Error reading configuration file: {e}"
        )
    _check_keys(raw, path)
    return {k: coerce_value(k, v) for k, v in raw.items()}


def read_config_file(
    ctx: click.Context, param: click.Parameter, value: str | None
) -> str | None:
    """Inject config file values into ``ctx``.

    These override option defaults, but still respect option values
    provided via the CLI. Values for fields that the current command has
    no option for are kept in ``ctx.meta`` for :func:`build_run_config`.

    :raise click.FileError: if the file is not parseable or not available.
    :raise click.BadParameter: if the file names an unknown key.
    """
    if not value:
        return None
    config = load_config_file(value)
    if ctx.default_map is None:
        ctx.default_map = {}
    ctx.default_map.update(config)
    ctx.meta[f"{SECTION}.file_config"] = config
    return value


def build_run_config(
    ctx: click.Context | None, options: Mapping[str, Any]
) -> RunConfig:
    """Combine config-file values and command options into a RunConfig."""
    values: dict[str, Any] = {}
    if ctx is not None:
        values.update(ctx.meta.get(f"{SECTION}.file_config", {}))
    values.update({k: v for k, v in options.items() if k in FIELD_NAMES})
    return RunConfig(**values)
