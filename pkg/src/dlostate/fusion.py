# Copyright 2026 The dlostate authors
"""Fuse the regression and voting branches with a non-rigid fit.

Nodes the voting branch can see are used as targets for a Gaussian-RBF
displacement field anchored at the matching regression nodes. The
correspondence between the two node sets is fixed to the identity, so
the usual expectation step disappears and every iteration is one
symmetric positive-definite solve followed by a variance update. The
fitted field is then applied to the whole regression sequence, which
fills occluded stretches with a shape that follows the visible ones.
"""

from __future__ import annotations

import logging

from typing import Final

import attr
import numpy as np

from scipy import linalg
from scipy.spatial import distance

from dlostate.errors import ContractError, FusionFallback


logger = logging.getLogger(__name__)

DIMENSIONS: Final[int] = 3


@attr.s(frozen=True)
class FusionConfig:
    """Fusion settings.

    :param float threshold: a node takes part in the fit when its
        visibility is at least this value.
    :param float smoothness: regularization weight ``λ``.
    :param float beta: Gaussian kernel width. A width of many node spacings
        makes the kernel nearly singular, so the weights ``W`` grow large
        and ``σ²`` can sink to ``variance_floor``; a few spacings keeps the
        fit well posed.
    :param int max_iterations: iteration cap of the fit.
    :param float tolerance: stop once ``σ²`` changes by less than this.
    :param int min_visible: fewest visible nodes that allow a fit.
    :param float variance_floor: lower clamp on ``σ²``.
    :param int retries: extra attempts, each with ten times the diagonal
        loading, when a factorization fails.
    """

    threshold: float = attr.ib(default=0.5)
    smoothness: float = attr.ib(default=0.25)
    beta: float = attr.ib(default=0.5)
    max_iterations: int = attr.ib(default=50)
    tolerance: float = attr.ib(default=1e-8)
    min_visible: int = attr.ib(default=3)
    variance_floor: float = attr.ib(default=1e-10)
    retries: int = attr.ib(default=3)

    @threshold.validator
    def _check_threshold(self, attribute: str, value: float) -> None:
        if not 0.0 < value < 1.0:
            raise ContractError(f"`threshold` must be in (0, 1), got {value}")

    @smoothness.validator
    def _check_smoothness(self, attribute: str, value: float) -> None:
        if not value > 0:
            raise ContractError(f"`smoothness` must be > 0, got {value}")

    @beta.validator
    def _check_beta(self, attribute: str, value: float) -> None:
        if not value > 0:
            raise ContractError(f"`beta` must be > 0, got {value}")

    @max_iterations.validator
    def _check_iterations(self, attribute: str, value: int) -> None:
        if value < 1:
            raise ContractError(f"`max_iterations` must be >= 1, got {value}")


@attr.s
class FusionTransform:
    """A fitted displacement field.

    :param numpy.ndarray controls: ``(S, 3)`` regression nodes the field
        is anchored at.
    :param numpy.ndarray weights: ``(S, 3)`` kernel coefficients ``W``.
    :param float beta: kernel width.
    :param float variance: final ``σ²``.
    :param int iterations: iterations performed.
    """

    controls: np.ndarray = attr.ib(eq=False)
    weights: np.ndarray = attr.ib(eq=False)
    beta: float = attr.ib()
    variance: float = attr.ib()
    iterations: int = attr.ib(default=0)


@attr.s
class FusionResult:
    """Fused node sequence plus how it was obtained.

    :param bool fallback: the regression nodes were returned unchanged.
    :param str reason: why fusion fell back, empty otherwise.
    """

    nodes: np.ndarray = attr.ib(eq=False)
    selected: np.ndarray = attr.ib(eq=False)
    fallback: bool = attr.ib(default=False)
    reason: str = attr.ib(default="")
    transform: FusionTransform | None = attr.ib(default=None, repr=False)


def select_visible(
    regression: np.ndarray,
    voting: np.ndarray,
    visibility: np.ndarray,
    threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nodes whose visibility is at least ``threshold``.

    :return: ``(regression subset, voting subset, indices)``.
    """
    visibility = np.asarray(visibility, dtype=np.float64)
    regression = np.asarray(regression, dtype=np.float64)
    voting = np.asarray(voting, dtype=np.float64)
    if not (
        regression.shape == voting.shape
        and regression.ndim == 2
        and visibility.shape == (len(regression),)
    ):
        raise ContractError(
            f"select_visible: regression {regression.shape}, voting "
            f"{voting.shape} and visibility {visibility.shape} do not conform"
        )
    if np.any((visibility < 0) | (visibility > 1)):
        raise ContractError("visibility values must lie in [0, 1]")
    index = np.flatnonzero(visibility >= threshold)
    return regression[index], voting[index], index


def gaussian_kernel(a: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    """``G_ij = exp(-|a_i - b_j|^2 / (2 beta^2))``."""
    if not beta > 0:
        raise ContractError(f"kernel width must be > 0, got {beta}")
    dist2 = distance.cdist(
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
        "sqeuclidean",
    )
    return np.exp(-dist2 / (2.0 * beta * beta))


def _solve(
    kernel: np.ndarray, loading: float, rhs: np.ndarray, retries: int
) -> np.ndarray:
    """Cholesky solve of ``(G + loading I) W = rhs``.

    The loading grows tenfold after each failed factorization.
    """
    eye = np.eye(len(kernel))
    for attempt in range(retries + 1):
        try:
            factor = linalg.cho_factor(kernel + loading * eye, lower=True)
            weights = linalg.cho_solve(factor, rhs)
        except linalg.LinAlgError:
            weights = None
        if weights is not None and np.all(np.isfinite(weights)):
            return weights
        logger.debug(
            "Factorization failed with loading %.3g (attempt %d)",
            loading,
            attempt + 1,
        )
        loading *= 10.0
    raise FusionFallback(
        f"kernel system stayed singular after {retries} retries"
    )


def fit_transform(
    controls: np.ndarray, targets: np.ndarray, cfg: FusionConfig
) -> FusionTransform:
    """Fit the displacement field that carries ``controls`` to ``targets``.

    Alternates ``(G + λσ² I) W = targets - controls`` with
    ``σ² = |targets - (controls + G W)|² / D`` until ``σ²`` settles.

    :raise FusionFallback: if fewer than ``cfg.min_visible`` pairs are
        given or the linear system cannot be solved.
    """
    controls = np.asarray(controls, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if controls.shape != targets.shape:
        raise ContractError(
            f"fit_transform: controls {controls.shape} and targets "
            f"{targets.shape} differ"
        )
    if len(controls) < cfg.min_visible:
        raise FusionFallback(
            f"only {len(controls)} visible nodes (need {cfg.min_visible})"
        )
    kernel = gaussian_kernel(controls, controls, cfg.beta)
    rhs = targets - controls
    variance = max(
        float(np.mean(np.sum(rhs * rhs, axis=1))) / DIMENSIONS,
        cfg.variance_floor,
    )
    weights = np.zeros_like(rhs)
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        weights = _solve(
            kernel, cfg.smoothness * variance, rhs, cfg.retries
        )
        residual = targets - (controls + kernel @ weights)
        updated = max(
            float(np.sum(residual * residual)) / DIMENSIONS,
            cfg.variance_floor,
        )
        change = abs(updated - variance)
        variance = updated
        if change < cfg.tolerance:
            break
    logger.debug(
        "Fusion fit: %d controls, %d iterations, sigma^2 %.3g",
        len(controls),
        iterations,
        variance,
    )
    return FusionTransform(
        controls=controls,
        weights=weights,
        beta=cfg.beta,
        variance=variance,
        iterations=iterations,
    )


def apply_transform(
    nodes: np.ndarray, transform: FusionTransform
) -> np.ndarray:
    """Displace every node by the fitted field."""
    nodes = np.asarray(nodes, dtype=np.float64)
    cross = gaussian_kernel(nodes, transform.controls, transform.beta)
    return nodes + cross @ transform.weights


def fuse(
    regression: np.ndarray,
    voting: np.ndarray,
    visibility: np.ndarray,
    cfg: FusionConfig | None = None,
) -> FusionResult:
    """Select visible nodes, fit the field and apply it to all nodes.

    Falls back to the regression nodes (``fallback=True``) when too few
    nodes are visible or the fit fails.
    """
    cfg = cfg or FusionConfig()
    regression = np.asarray(regression, dtype=np.float64)
    voting = np.asarray(voting, dtype=np.float64)
    if not (np.all(np.isfinite(regression)) and np.all(np.isfinite(voting))):
        raise ContractError("fuse: branch outputs must be finite")
    controls, targets, index = select_visible(
        regression, voting, visibility, cfg.threshold
    )
    try:
        transform = fit_transform(controls, targets, cfg)
    except FusionFallback as e:
        logger.info("Fusion fell back to regression: %s", e)
        return FusionResult(
            nodes=regression.copy(),
            selected=index,
            fallback=True,
            reason=str(e),
        )
    return FusionResult(
        nodes=apply_transform(regression, transform),
        selected=index,
        transform=transform,
    )
