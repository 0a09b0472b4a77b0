# Copyright 2026 The dlostate authors
"""Regression and voting branches, their targets and losses."""

from __future__ import annotations

from typing import Final, Mapping, Sequence

import attr
import numpy as np

from scipy.spatial import distance

from dlostate import numkit
from dlostate.encoder import PointFeatures
from dlostate.errors import ContractError
from dlostate.numkit import Params, Tensor


DEFAULT_RADIUS: Final[float] = 0.02
DEFAULT_TOP_K: Final[int] = 64


@attr.s
class VotingField:
    """Heatmap ``H`` ``(N, M)`` and unit offsets ``U`` ``(N, M, 3)``."""

    heat: np.ndarray = attr.ib(eq=False)
    offsets: np.ndarray = attr.ib(eq=False)

    def reversed(self) -> VotingField:
        """The same field for the node sequence read back to front."""
        return VotingField(self.heat[:, ::-1], self.offsets[:, ::-1])


@attr.s
class HeadOutputs:
    """Tracked outputs of both branches in the normalized frame."""

    nodes: Tensor = attr.ib(eq=False)
    heat: Tensor = attr.ib(eq=False)
    offsets: Tensor = attr.ib(eq=False)


@attr.s
class LossTerms:
    """Scalar losses of one sample.

    :param bool flipped: the reversed ground-truth order gave the lower
        total loss.
    """

    regression: Tensor = attr.ib()
    voting: Tensor = attr.ib()
    total: Tensor = attr.ib()
    flipped: bool = attr.ib(default=False)


def default_top_k(points: int, k: int = DEFAULT_TOP_K) -> int:
    """Candidate count used by voting, capped at a quarter of the cloud."""
    return max(1, min(k, points // 4))


def gt_voting_field(
    cloud: np.ndarray, nodes: np.ndarray, radius: float
) -> VotingField:
    """Ground-truth heatmap and unit offsets for every point/node pair.

    Pairs further than ``radius`` apart get ``H = 0`` and ``U = 0``. A
    point lying exactly on a node gets ``H = 1`` and ``U = 0``.
    """
    if not radius > 0:
        raise ContractError(f"voting radius must be > 0, got {radius}")
    cloud = np.asarray(cloud, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.float64)
    dist = distance.cdist(cloud, nodes)
    inside = dist < radius
    heat = np.where(inside, 1.0 - dist / radius, 0.0)
    delta = nodes[None, :, :] - cloud[:, None, :]
    usable = inside & (dist > 0)
    safe = np.where(usable, dist, 1.0)
    offsets = np.where(usable[..., None], delta / safe[..., None], 0.0)
    return VotingField(heat, offsets)


def init_head_params(
    rng: np.random.Generator,
    channels: int,
    nodes: int,
    regression_widths: Sequence[int],
    voting_widths: Sequence[int],
    dtype: str = "float64",
) -> Params:
    """Weights of the regression decoder and the two voting heads."""
    params: Params = {}
    params.update(
        numkit.init_linear_stack(
            rng,
            "regression",
            (channels, *regression_widths, 3 * nodes),
            dtype,
        )
    )
    params.update(
        numkit.init_linear_stack(
            rng, "voting.heat", (channels, *voting_widths, nodes), dtype
        )
    )
    params.update(
        numkit.init_linear_stack(
            rng, "voting.offset", (channels, *voting_widths, 3 * nodes), dtype
        )
    )
    return params


def regression_forward(
    features: PointFeatures, params: Mapping[str, Tensor], nodes: int
) -> Tensor:
    """Pool the point features and decode ``(nodes, 3)`` coordinates.

    Coordinates are in the frame of the encoder input; callers undo any
    normalization.
    """
    pooled = numkit.max_pool_over_set(features.features, axis=-2)
    pooled = numkit.reshape(pooled, (1, pooled.shape[-1]))
    decoded = numkit.linear_stack(
        pooled, params, "regression", final_relu=False
    )
    return numkit.reshape(decoded, (nodes, 3))


def voting_forward(
    features: PointFeatures, params: Mapping[str, Tensor], nodes: int
) -> tuple[Tensor, Tensor]:
    """Per-point heat ``(N, M)`` in ``(0, 1)`` and offsets ``(N, M, 3)``."""
    feats = features.features
    heat = numkit.sigmoid(
        numkit.linear_stack(feats, params, "voting.heat", final_relu=False)
    )
    raw = numkit.linear_stack(feats, params, "voting.offset", final_relu=False)
    raw = numkit.reshape(raw, (feats.shape[0], nodes, 3))
    return heat, numkit.l2_normalize_rows(raw)


def vote(
    cloud: np.ndarray,
    heat: np.ndarray,
    offsets: np.ndarray,
    radius: float,
    top_k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate per-point node candidates.

    Each point ``i`` proposes ``x_i + r (1 - H_ij) U_ij`` for node ``j``.
    The ``top_k`` points with the largest ``H_ij`` (ties by index) are
    averaged with ``H`` as weights. A node whose selected weights are all
    zero gets the plain mean of its candidates.

    :return: ``(nodes (M, 3), visibility (M,))`` where visibility is the
        largest heatmap value of each node.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    count = len(cloud)
    if heat.shape[0] != count or offsets.shape[:2] != heat.shape:
        raise ContractError(
            f"vote: cloud {cloud.shape}, heat {heat.shape} and offsets "
            f"{offsets.shape} do not conform"
        )
    if not 1 <= top_k <= count:
        raise ContractError(f"top_k must be in [1, {count}], got {top_k}")

    reach = radius * (1.0 - heat)
    candidates = cloud[:, None, :] + reach[..., None] * offsets
    best = np.argsort(-heat, axis=0, kind="stable")[:top_k]
    columns = np.arange(heat.shape[1])
    weights = heat[best, columns]
    chosen = candidates[best, columns]
    mass = weights.sum(axis=0)
    safe = np.where(mass > 0, mass, 1.0)
    weighted = np.einsum("km,kmd->md", weights, chosen) / safe[:, None]
    nodes = np.where((mass > 0)[:, None], weighted, chosen.mean(axis=0))
    visibility = heat.max(axis=0)
    return nodes, visibility


def _loss_terms(
    outputs: HeadOutputs,
    nodes: np.ndarray,
    field: VotingField,
    w_reg: float,
    w_vot: float,
) -> tuple[Tensor, Tensor, Tensor]:
    dtype = outputs.nodes.data.dtype
    l_reg = numkit.mse(outputs.nodes, nodes.astype(dtype))
    # offset error is summed over xyz and averaged over N*M pairs
    l_vot = numkit.add(
        numkit.mse(outputs.heat, field.heat.astype(dtype)),
        numkit.mul(
            numkit.mse(outputs.offsets, field.offsets.astype(dtype)), 3.0
        ),
    )
    total = numkit.add(numkit.mul(l_reg, w_reg), numkit.mul(l_vot, w_vot))
    return l_reg, l_vot, total


def losses(
    outputs: HeadOutputs,
    nodes: np.ndarray,
    field: VotingField,
    w_reg: float = 1.0,
    w_vot: float = 1.0,
    symmetric: bool = True,
) -> LossTerms:
    """Regression, voting and weighted total losses of one sample.

    With ``symmetric`` the ground truth is also scored back to front and
    the order with the lower total is used for both branches.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    if outputs.nodes.shape != nodes.shape:
        raise ContractError(
            f"losses: predicted nodes {outputs.nodes.shape} vs "
            f"ground truth {nodes.shape}"
        )
    forward = _loss_terms(outputs, nodes, field, w_reg, w_vot)
    if not symmetric:
        return LossTerms(*forward)
    backward = _loss_terms(
        outputs, nodes[::-1].copy(), field.reversed(), w_reg, w_vot
    )
    if backward[2].item() < forward[2].item():
        return LossTerms(*backward, flipped=True)
    return LossTerms(*forward)
