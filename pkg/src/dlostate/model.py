# Copyright 2026 The dlostate authors
"""The full estimator: encoder plus regression and voting heads."""

from __future__ import annotations

import logging

from typing import Any, Final, Mapping

import attr
import numpy as np

from dlostate import encoder, heads, numkit, synth
from dlostate.errors import CheckpointError, ContractError
from dlostate.numkit import Params, Tensor


logger = logging.getLogger(__name__)

HEAD_WIDTHS: Final[dict[str, tuple[tuple[int, ...], tuple[int, ...]]]] = {
    "desk": ((128, 128), (64,)),
    "paper": ((512, 256), (256,)),
    "toy": ((8,), (8,)),
}


@attr.s(frozen=True)
class NetworkConfig:
    """Everything needed to rebuild a network from a checkpoint.

    :param EncoderConfig encoder: encoder shape.
    :param int nodes: node count ``M``.
    :param tuple regression_widths: hidden widths of the regression decoder.
    :param tuple voting_widths: hidden widths of both voting heads.
    :param float scale: divisor applied after centring the input cloud.
    :param str dtype: parameter dtype, ``float64`` or ``float32``.
    """

    encoder: encoder.EncoderConfig = attr.ib()
    nodes: int = attr.ib()
    regression_widths: tuple[int, ...] = attr.ib(converter=tuple)
    voting_widths: tuple[int, ...] = attr.ib(converter=tuple)
    scale: float = attr.ib(default=1.0)
    dtype: str = attr.ib(default="float64")

    @nodes.validator
    def _check_nodes(self, attribute: str, value: int) -> None:
        if value < 2:
            raise ContractError(f"`nodes` must be >= 2, got {value}")

    @dtype.validator
    def _check_dtype(self, attribute: str, value: str) -> None:
        if value not in ("float32", "float64"):
            raise ContractError(
                f"`dtype` must be float32 or float64, got {value!r}"
            )

    @classmethod
    def preset(
        cls,
        name: str,
        nodes: int,
        points: int | None = None,
        dtype: str = "float64",
    ) -> NetworkConfig:
        enc = encoder.EncoderConfig.preset(name, points)
        regression_widths, voting_widths = HEAD_WIDTHS[name]
        return cls(enc, nodes, regression_widths, voting_widths, dtype=dtype)

    def to_dict(self) -> dict[str, Any]:
        return attr.asdict(self, retain_collection_types=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NetworkConfig:
        data = dict(data)
        data["encoder"] = encoder.EncoderConfig(**data["encoder"])
        return cls(**data)


@attr.s
class BranchOutputs:
    """World-frame outputs of both branches for one cloud.

    :param numpy.ndarray regression: ``(M, 3)`` regression nodes.
    :param numpy.ndarray voting: ``(M, 3)`` voted nodes.
    :param numpy.ndarray heat: ``(N, M)`` predicted heatmap.
    :param numpy.ndarray visibility: ``(M,)`` largest heat per node.
    """

    regression: np.ndarray = attr.ib(eq=False)
    voting: np.ndarray = attr.ib(eq=False)
    heat: np.ndarray = attr.ib(eq=False)
    visibility: np.ndarray = attr.ib(eq=False)

    def __attrs_post_init__(self) -> None:
        for name in ("regression", "voting", "visibility"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"non-finite values in {name} output")


def init_params(cfg: NetworkConfig, seed: int) -> Params:
    """Fresh parameters drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = encoder.init_encoder_params(cfg.encoder, rng, cfg.dtype)
    params.update(
        heads.init_head_params(
            rng,
            cfg.encoder.out_channels,
            cfg.nodes,
            cfg.regression_widths,
            cfg.voting_widths,
            cfg.dtype,
        )
    )
    return params


def forward(
    cloud: np.ndarray, params: Mapping[str, Tensor], cfg: NetworkConfig
) -> heads.HeadOutputs:
    """Run both branches on an already normalized cloud."""
    features = encoder.encode(cloud, params, cfg.encoder)
    nodes = heads.regression_forward(features, params, cfg.nodes)
    heat, offsets = heads.voting_forward(features, params, cfg.nodes)
    return heads.HeadOutputs(nodes, heat, offsets)


def estimate(
    cloud: np.ndarray,
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    radius: float = heads.DEFAULT_RADIUS,
    top_k: int | None = None,
) -> BranchOutputs:
    """Normalize a cloud of exactly ``N`` points and run both branches.

    Voting happens in the normalized frame so that ``radius`` is measured
    in the same units the heads were trained with.
    """
    normalized, centroid = synth.normalize(np.asarray(cloud), cfg.scale)
    top_k = top_k or heads.default_top_k(len(normalized))
    outputs = forward(normalized, params, cfg)
    voted, visibility = heads.vote(
        normalized,
        outputs.heat.numpy(),
        outputs.offsets.numpy(),
        radius,
        top_k,
    )
    regression = outputs.nodes.numpy().astype(np.float64)
    return BranchOutputs(
        regression=regression * cfg.scale + centroid,
        voting=voted * cfg.scale + centroid,
        heat=outputs.heat.numpy().astype(np.float64),
        visibility=visibility,
    )


def replay_ground_truth(
    cloud: np.ndarray,
    nodes: np.ndarray,
    radius: float = heads.DEFAULT_RADIUS,
    top_k: int | None = None,
) -> BranchOutputs:
    """Branch outputs built from the exact voting field of ``nodes``.

    Used to exercise voting and fusion without a trained network; the
    regression branch is replaced by the ground truth itself.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    field = heads.gt_voting_field(cloud, nodes, radius)
    top_k = top_k or heads.default_top_k(len(cloud))
    voted, visibility = heads.vote(
        cloud, field.heat, field.offsets, radius, top_k
    )
    return BranchOutputs(
        regression=np.array(nodes, dtype=np.float64),
        voting=voted,
        heat=field.heat,
        visibility=visibility,
    )


def save_model(
    path: str,
    params: Mapping[str, Tensor],
    cfg: NetworkConfig,
    extra: Mapping[str, Any] | None = None,
    arrays: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write parameters plus the network config (and optional extras)."""
    payload = {name: tensor.numpy() for name, tensor in params.items()}
    payload.update(arrays or {})
    metadata = {"network": cfg.to_dict(), **(extra or {})}
    numkit.save_checkpoint(path, payload, metadata)


def load_model(
    path: str, expected: NetworkConfig | None = None
) -> tuple[Params, NetworkConfig, dict[str, Any]]:
    """Read a checkpoint written by :func:`save_model`.

    :return: ``(params, network config, metadata)``. Arrays whose names
        are not parameters of the network are left in
        ``metadata["arrays"]``.
    :raise CheckpointError: if the checkpoint lacks a network config, a
        parameter is missing or has the wrong shape, or the config differs
        from ``expected``.
    """
    arrays, metadata = numkit.load_checkpoint(path)
    if "network" not in metadata:
        raise CheckpointError(f"{path}: no network configuration recorded")
    try:
        cfg = NetworkConfig.from_dict(metadata["network"])
    except (TypeError, KeyError, ContractError) as e:
        raise CheckpointError(f"{path}: bad network configuration: {e}") from e
    if expected is not None and expected != cfg:
        raise CheckpointError(
            f"{path}: checkpoint network {cfg} does not match {expected}"
        )
    template = init_params(cfg, seed=0)
    params: Params = {}
    for name, tensor in template.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        value = arrays.pop(name)
        if value.shape != tensor.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {value.shape}, "
                f"expected {tensor.shape}"
            )
        params[name] = numkit.Tensor(
            value.astype(cfg.dtype), requires_grad=True, name=name
        )
    metadata["arrays"] = arrays
    logger.debug("Loaded %d parameters from %s", len(params), path)
    return params, cfg, metadata
