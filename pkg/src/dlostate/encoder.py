# Copyright 2026 The dlostate authors
"""Hierarchical point-set encoder.

Set-abstraction levels repeatedly downsample the cloud with farthest point
sampling, group neighbours with a ball query and pool a shared MLP over
each group. Feature-propagation levels walk back up, interpolating coarse
features onto finer points and mixing them with the skip features of that
level. The result is one feature row per input point.
"""

from __future__ import annotations

import logging

from typing import Any, Final, Mapping

import attr
import numpy as np

from scipy.spatial import distance

from dlostate import numkit, synth
from dlostate.errors import ContractError
from dlostate.numkit import Params, Tensor


logger = logging.getLogger(__name__)

INTERPOLATION_NEIGHBOURS: Final[int] = 3
MIN_SQUARED_DISTANCE: Final[float] = 1e-10
# the raw input feature of every point is its own (normalized) coordinate
INPUT_CHANNELS: Final[int] = 3


def _as_int_tuple(value: Any) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


def _as_float_tuple(value: Any) -> tuple[float, ...]:
    return tuple(float(v) for v in value)


def _as_width_table(value: Any) -> tuple[tuple[int, ...], ...]:
    return tuple(_as_int_tuple(row) for row in value)


@attr.s(frozen=True)
class EncoderConfig:
    """Shape of the encoder.

    :param int points: number of input points ``N``.
    :param tuple centroids: centroid count of every abstraction level.
    :param tuple radii: ball-query radius of every level (normalized units).
    :param tuple groups: maximum group size of every level.
    :param tuple sa_widths: MLP output widths of every abstraction level.
    :param tuple fp_widths: MLP output widths of every propagation level,
        coarsest first; the last width is the output channel count.
    """

    PRESETS: Final = ("desk", "paper", "toy")

    points: int = attr.ib()
    centroids: tuple[int, ...] = attr.ib(converter=_as_int_tuple)
    radii: tuple[float, ...] = attr.ib(converter=_as_float_tuple)
    groups: tuple[int, ...] = attr.ib(converter=_as_int_tuple)
    sa_widths: tuple[tuple[int, ...], ...] = attr.ib(converter=_as_width_table)
    fp_widths: tuple[tuple[int, ...], ...] = attr.ib(converter=_as_width_table)

    @centroids.validator
    def _check_centroids(self, attribute: str, value: tuple[int, ...]) -> None:
        if not value:
            raise ContractError("encoder needs at least one abstraction level")
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ContractError(
                f"centroid counts must be strictly decreasing, got {value}"
            )
        if value[0] > self.points:
            raise ContractError(
                f"first level has {value[0]} centroids but only "
                f"{self.points} input points"
            )
        if value[-1] < 1:
            raise ContractError("every level needs at least one centroid")

    def __attrs_post_init__(self) -> None:
        levels = len(self.centroids)
        for name in ("radii", "groups", "sa_widths", "fp_widths"):
            if len(getattr(self, name)) != levels:
                raise ContractError(
                    f"`{name}` has {len(getattr(self, name))} entries, "
                    f"expected one per level ({levels})"
                )
        if any(r <= 0 for r in self.radii):
            raise ContractError(f"radii must be > 0, got {self.radii}")
        if any(g < 1 for g in self.groups):
            raise ContractError(f"group sizes must be >= 1, got {self.groups}")
        for name in ("sa_widths", "fp_widths"):
            if any(not row for row in getattr(self, name)):
                raise ContractError(f"every `{name}` entry needs a width")

    @property
    def levels(self) -> int:
        return len(self.centroids)

    @property
    def out_channels(self) -> int:
        return self.fp_widths[-1][-1]

    @classmethod
    def preset(cls, name: str, points: int | None = None) -> EncoderConfig:
        """Build a named preset; ``points`` overrides the preset's ``N``.

        When ``points`` is smaller than the preset's first centroid count,
        the first level keeps every point.
        """
        if name == "desk":
            cfg: dict[str, Any] = dict(
                points=256,
                centroids=(256, 64, 16, 8),
                radii=(0.05, 0.1, 0.2, 0.4),
                groups=(16, 16, 16, 16),
                sa_widths=(
                    (16, 16, 32),
                    (32, 32, 64),
                    (64, 64, 128),
                    (128, 128, 128),
                ),
                fp_widths=((128, 128), (128, 64), (64, 64), (128, 128)),
            )
        elif name == "paper":
            cfg = dict(
                points=1024,
                centroids=(1024, 256, 64, 16),
                radii=(0.05, 0.1, 0.2, 0.4),
                groups=(32, 32, 32, 32),
                sa_widths=(
                    (32, 32, 64),
                    (64, 64, 128),
                    (128, 128, 256),
                    (256, 256, 512),
                ),
                fp_widths=((256, 256), (256, 256), (512, 512), (1024, 1024)),
            )
        elif name == "toy":
            cfg = dict(
                points=32,
                centroids=(16, 8, 4, 2),
                radii=(0.2, 0.4, 0.8, 1.6),
                groups=(4, 4, 4, 2),
                sa_widths=((8,), (8,), (8,), (8,)),
                fp_widths=((8,), (8,), (8,), (8,)),
            )
        else:
            raise ContractError(
                f"unknown encoder preset {name!r}; "
                f"valid presets: {', '.join(cls.PRESETS)}"
            )
        if points is not None:
            first = min(cfg["centroids"][0], points)
            cfg["centroids"] = (first,) + tuple(
                c for c in cfg["centroids"][1:] if c < first
            )
            depth = len(cfg["centroids"])
            for key in ("radii", "groups", "sa_widths"):
                cfg[key] = cfg[key][:depth]
            cfg["fp_widths"] = cfg["fp_widths"][-depth:]
            cfg["points"] = points
        return cls(**cfg)


@attr.s
class PointFeatures:
    """Per-point features; row ``i`` belongs to input point ``i``."""

    points: np.ndarray = attr.ib(eq=False)
    features: Tensor = attr.ib(eq=False)


def _sa_input_width(cfg: EncoderConfig, level: int) -> int:
    below = INPUT_CHANNELS if level == 0 else cfg.sa_widths[level - 1][-1]
    return 3 + below


def _fp_input_width(cfg: EncoderConfig, step: int) -> int:
    coarse_level = cfg.levels - 1 - step
    if step == 0:
        coarse = cfg.sa_widths[-1][-1]
    else:
        coarse = cfg.fp_widths[step - 1][-1]
    if coarse_level == 0:
        skip = INPUT_CHANNELS
    else:
        skip = cfg.sa_widths[coarse_level - 1][-1]
    return coarse + skip


def init_encoder_params(
    cfg: EncoderConfig, rng: np.random.Generator, dtype: str = "float64"
) -> Params:
    """Initial weights for every abstraction and propagation MLP."""
    params: Params = {}
    for level, widths in enumerate(cfg.sa_widths):
        params.update(
            numkit.init_linear_stack(
                rng,
                f"encoder.sa{level}",
                (_sa_input_width(cfg, level),) + widths,
                dtype,
            )
        )
    for step, widths in enumerate(cfg.fp_widths):
        params.update(
            numkit.init_linear_stack(
                rng,
                f"encoder.fp{step}",
                (_fp_input_width(cfg, step),) + widths,
                dtype,
            )
        )
    return params


def ball_query(
    points: np.ndarray, centres: np.ndarray, radius: float, group: int
) -> np.ndarray:
    """Indices of up to ``group`` points strictly within ``radius``.

    :param centres: indices into ``points`` of the group centres.
    :return: ``(len(centres), group)`` indices, nearest first (ties by
        index). Underfull groups are padded with the nearest point, which
        is the centre itself unless it has exact duplicates.

    Truncation keeps the ``group`` nearest members rather than the lowest
    indices, so groups do not change when the cloud is permuted. When a
    ball holds at most ``group`` points the membership equals the
    index-ordered query padded with the centre, and max pooling gives the
    same feature.
    """
    centre_xyz = points[centres]
    dist2 = distance.cdist(centre_xyz, points, "sqeuclidean")
    order = np.argsort(dist2, axis=1, kind="stable")[:, :group]
    inside = np.take_along_axis(dist2, order, axis=1) < radius * radius
    nearest = order[:, :1]
    order = np.where(inside, order, nearest)
    if order.shape[1] < group:
        pad = np.repeat(nearest, group - order.shape[1], axis=1)
        order = np.concatenate([order, pad], axis=1)
    return order


def set_abstraction(
    points: np.ndarray,
    features: Tensor,
    centroids: int,
    radius: float,
    group: int,
    params: Mapping[str, Tensor],
    prefix: str,
) -> tuple[np.ndarray, Tensor]:
    """Downsample, group and pool one level.

    :return: ``(centroid coordinates, centroid features)``.
    """
    centres = synth.fps_indices(points, centroids)
    groups = ball_query(points, centres, radius, group)
    centre_xyz = points[centres]
    relative = points[groups] - centre_xyz[:, None, :]
    relative = relative.astype(features.data.dtype)
    grouped = numkit.concat(
        [numkit.as_tensor(relative), numkit.gather(features, groups)], axis=-1
    )
    mixed = numkit.linear_stack(grouped, params, prefix)
    return centre_xyz, numkit.max_pool_over_set(mixed, axis=-2)


def interpolation_weights(
    fine: np.ndarray,
    coarse: np.ndarray,
    neighbours: int = INTERPOLATION_NEIGHBOURS,
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse squared-distance weights over the nearest coarse points.

    :return: ``(indices, weights)``, both ``(len(fine), k)`` where ``k`` is
        ``neighbours`` or the coarse count if smaller. Rows of ``weights``
        sum to one.
    """
    k = min(neighbours, len(coarse))
    dist2 = distance.cdist(fine, coarse, "sqeuclidean")
    index = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    nearest = np.take_along_axis(dist2, index, axis=1)
    inverse = 1.0 / np.maximum(nearest, MIN_SQUARED_DISTANCE)
    return index, inverse / inverse.sum(axis=1, keepdims=True)


def interpolation_matrix(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Dense ``(len(fine), len(coarse))`` interpolation operator."""
    index, weights = interpolation_weights(fine, coarse)
    matrix = np.zeros((len(fine), len(coarse)))
    np.put_along_axis(matrix, index, weights, axis=1)
    return matrix


def feature_propagation(
    coarse_points: np.ndarray,
    coarse_features: Tensor,
    fine_points: np.ndarray,
    skip_features: Tensor | None,
    params: Mapping[str, Tensor],
    prefix: str,
) -> Tensor:
    """Interpolate coarse features onto fine points and mix with skips."""
    matrix = interpolation_matrix(fine_points, coarse_points)
    matrix = matrix.astype(coarse_features.data.dtype)
    interpolated = numkit.matmul(matrix, coarse_features)
    if skip_features is not None:
        interpolated = numkit.concat([interpolated, skip_features], axis=-1)
    return numkit.linear_stack(interpolated, params, prefix)


def encode(
    cloud: np.ndarray, params: Mapping[str, Tensor], cfg: EncoderConfig
) -> PointFeatures:
    """Run every abstraction level, then propagate back to all points.

    :raise ContractError: if the cloud does not hold ``cfg.points`` rows.
    """
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape != (cfg.points, 3):
        raise ContractError(
            f"encoder expects a ({cfg.points}, 3) cloud, got {cloud.shape}"
        )
    dtype = numkit.params_dtype(params)
    xyz = [cloud.astype(np.float64)]
    feats = [numkit.as_tensor(cloud.astype(dtype))]
    for level in range(cfg.levels):
        centre_xyz, centre_feats = set_abstraction(
            xyz[-1],
            feats[-1],
            cfg.centroids[level],
            cfg.radii[level],
            cfg.groups[level],
            params,
            f"encoder.sa{level}",
        )
        xyz.append(centre_xyz)
        feats.append(centre_feats)
        logger.debug(
            "set abstraction %d: %s -> %s",
            level,
            xyz[-2].shape,
            centre_feats.shape,
        )

    current = feats[-1]
    for step in range(cfg.levels):
        fine = cfg.levels - 1 - step
        current = feature_propagation(
            xyz[fine + 1],
            current,
            xyz[fine],
            feats[fine],
            params,
            f"encoder.fp{step}",
        )
    return PointFeatures(points=cloud, features=current)
