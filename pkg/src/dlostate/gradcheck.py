# Copyright 2026 The dlostate authors
"""Finite-difference verification of every differentiable layer."""

from __future__ import annotations

import logging

from typing import Callable, Final, Sequence

import attr
import numpy as np

from dlostate import encoder, heads, model, numkit, synth, utils
from dlostate.numkit import Tensor


logger = logging.getLogger(__name__)

TOLERANCE: Final[float] = 1e-4
STEP: Final[float] = 1e-5
TOY_NODES: Final[int] = 4
TOY_RADIUS: Final[float] = 0.3

Case = tuple[Callable[[], Tensor], list[Tensor]]


@attr.s
class LayerCheck:
    """Outcome for one layer.

    :param str layer: layer name.
    :param float max_error: largest relative error over its inputs.
    :param int values: number of scalar inputs perturbed.
    """

    layer: str = attr.ib()
    max_error: float = attr.ib()
    values: int = attr.ib()
    tolerance: float = attr.ib(default=TOLERANCE)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@attr.s
class GradcheckReport:
    checks: list[LayerCheck] = attr.ib(factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.checks), default=0.0)

    @property
    def failed(self) -> list[str]:
        return [c.layer for c in self.checks if not c.passed]

    @property
    def ret_code(self) -> int:
        return 0 if self.passed else 1


def _leaf(array: np.ndarray, name: str) -> Tensor:
    values = np.array(array, dtype=np.float64)
    return Tensor(values, requires_grad=True, name=name)


def _away_from_zero(
    rng: np.random.Generator, shape: Sequence[int]
) -> np.ndarray:
    """Normal samples pushed clear of the ReLU kink."""
    values = rng.normal(size=shape)
    return values + np.sign(values) * 0.1


def _toy_cloud(rng: np.random.Generator, count: int) -> np.ndarray:
    cloud = rng.uniform(-0.5, 0.5, size=(count, 3))
    return synth.normalize(cloud)[0]


def layer_cases(seed: int) -> dict[str, Callable[[], Case]]:
    """Builders of ``(loss closure, leaves)`` for every layer."""
    rng = np.random.default_rng(seed)

    def matmul() -> Case:
        a = _leaf(rng.normal(size=(2, 4, 3)), "a")
        b = _leaf(rng.normal(size=(3, 5)), "b")
        w = rng.normal(size=(2, 4, 5))
        return lambda: numkit.total(numkit.mul(numkit.matmul(a, b), w)), [a, b]

    def add() -> Case:
        a = _leaf(rng.normal(size=(4, 3)), "a")
        b = _leaf(rng.normal(size=(3,)), "b")
        w = rng.normal(size=(4, 3))
        return lambda: numkit.total(numkit.mul(numkit.add(a, b), w)), [a, b]

    def mul() -> Case:
        a = _leaf(rng.normal(size=(4, 3)), "a")
        b = _leaf(rng.normal(size=(4, 1)), "b")
        w = rng.normal(size=(4, 3))
        return lambda: numkit.total(numkit.mul(numkit.mul(a, b), w)), [a, b]

    def relu() -> Case:
        x = _leaf(_away_from_zero(rng, (5, 4)), "x")
        w = rng.normal(size=(5, 4))
        return lambda: numkit.total(numkit.mul(numkit.relu(x), w)), [x]

    def sigmoid() -> Case:
        x = _leaf(rng.normal(size=(5, 4)), "x")
        w = rng.normal(size=(5, 4))
        return lambda: numkit.total(numkit.mul(numkit.sigmoid(x), w)), [x]

    def l2_normalize_rows() -> Case:
        x = _leaf(rng.normal(size=(2, 5, 3)), "x")
        w = rng.normal(size=(2, 5, 3))
        return (
            lambda: numkit.total(numkit.mul(numkit.l2_normalize_rows(x), w)),
            [x],
        )

    def max_pool_over_set() -> Case:
        x = _leaf(rng.normal(size=(3, 6, 4)), "x")
        w = rng.normal(size=(3, 4))
        return (
            lambda: numkit.total(numkit.mul(numkit.max_pool_over_set(x), w)),
            [x],
        )

    def mse() -> Case:
        a = _leaf(rng.normal(size=(4, 3)), "a")
        b = _leaf(rng.normal(size=(4, 3)), "b")
        return lambda: numkit.mse(a, b), [a, b]

    def gather() -> Case:
        x = _leaf(rng.normal(size=(6, 4)), "x")
        index = np.array([[0, 2], [2, 5], [1, 1]])
        w = rng.normal(size=(3, 2, 4))
        return (
            lambda: numkit.total(numkit.mul(numkit.gather(x, index), w)),
            [x],
        )

    def concat() -> Case:
        a = _leaf(rng.normal(size=(4, 2)), "a")
        b = _leaf(rng.normal(size=(4, 3)), "b")
        w = rng.normal(size=(4, 5))
        return (
            lambda: numkit.total(numkit.mul(numkit.concat([a, b]), w)),
            [a, b],
        )

    def reshape() -> Case:
        x = _leaf(rng.normal(size=(4, 6)), "x")
        w = rng.normal(size=(3, 8))
        return (
            lambda: numkit.total(numkit.mul(numkit.reshape(x, (3, 8)), w)),
            [x],
        )

    def total() -> Case:
        x = _leaf(rng.normal(size=(3, 4)), "x")
        return lambda: numkit.mul(numkit.total(numkit.mul(x, x)), 0.5), [x]

    def mean() -> Case:
        x = _leaf(rng.normal(size=(3, 4)), "x")
        return lambda: numkit.mean(numkit.mul(x, x)), [x]

    def set_abstraction() -> Case:
        cloud = _toy_cloud(rng, 32)
        features = _leaf(rng.normal(size=(32, 5)), "features")
        params = numkit.init_linear_stack(rng, "sa", (8, 8, 6))
        w = rng.normal(size=(8, 6))

        def loss() -> Tensor:
            _, pooled = encoder.set_abstraction(
                cloud, features, 8, 0.5, 6, params, "sa"
            )
            return numkit.total(numkit.mul(pooled, w))

        return loss, [features, *params.values()]

    def feature_propagation() -> Case:
        fine = _toy_cloud(rng, 16)
        coarse = fine[synth.fps_indices(fine, 5)]
        coarse_features = _leaf(rng.normal(size=(5, 4)), "coarse")
        skip = _leaf(rng.normal(size=(16, 3)), "skip")
        params = numkit.init_linear_stack(rng, "fp", (7, 6))
        w = rng.normal(size=(16, 6))

        def loss() -> Tensor:
            out = encoder.feature_propagation(
                coarse, coarse_features, fine, skip, params, "fp"
            )
            return numkit.total(numkit.mul(out, w))

        return loss, [coarse_features, skip, *params.values()]

    def regression_head() -> Case:
        cloud = _toy_cloud(rng, 16)
        features = _leaf(rng.normal(size=(16, 6)), "features")
        params = heads.init_head_params(rng, 6, TOY_NODES, (5,), (5,))
        head = {k: v for k, v in params.items() if k.startswith("regression")}
        target = rng.normal(size=(TOY_NODES, 3))

        def loss() -> Tensor:
            nodes = heads.regression_forward(
                encoder.PointFeatures(cloud, features), head, TOY_NODES
            )
            return numkit.mse(nodes, target)

        return loss, [features, *head.values()]

    def voting_head() -> Case:
        cloud = _toy_cloud(rng, 16)
        features = _leaf(rng.normal(size=(16, 6)), "features")
        params = heads.init_head_params(rng, 6, TOY_NODES, (5,), (5,))
        head = {k: v for k, v in params.items() if k.startswith("voting")}
        w_heat = rng.normal(size=(16, TOY_NODES))
        w_offset = rng.normal(size=(16, TOY_NODES, 3))

        def loss() -> Tensor:
            heat, offsets = heads.voting_forward(
                encoder.PointFeatures(cloud, features), head, TOY_NODES
            )
            return numkit.add(
                numkit.total(numkit.mul(heat, w_heat)),
                numkit.total(numkit.mul(offsets, w_offset)),
            )

        return loss, [features, *head.values()]

    def network() -> Case:
        cfg = model.NetworkConfig.preset("toy", TOY_NODES)
        params = model.init_params(cfg, int(rng.integers(2**31)))
        cloud = _toy_cloud(rng, cfg.encoder.points)
        nodes = synth.polyline_nodes(
            np.array([[-0.4, -0.1, 0.0], [0.0, 0.2, 0.1], [0.4, -0.1, 0.0]]),
            TOY_NODES,
        )
        field = heads.gt_voting_field(cloud, nodes, TOY_RADIUS)

        def loss() -> Tensor:
            outputs = model.forward(cloud, params, cfg)
            return heads.losses(outputs, nodes, field, symmetric=False).total

        return loss, list(params.values())

    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "relu": relu,
        "sigmoid": sigmoid,
        "l2_normalize_rows": l2_normalize_rows,
        "max_pool_over_set": max_pool_over_set,
        "mse": mse,
        "gather": gather,
        "concat": concat,
        "reshape": reshape,
        "sum": total,
        "mean": mean,
        "set_abstraction": set_abstraction,
        "feature_propagation": feature_propagation,
        "regression_head": regression_head,
        "voting_head": voting_head,
        "network": network,
    }


LAYERS: Final[tuple[str, ...]] = tuple(layer_cases(0))


def check_layer(
    name: str,
    case: Case,
    tolerance: float = TOLERANCE,
    corrupt: bool = False,
) -> LayerCheck:
    """Compare reverse-mode and central-difference gradients of a case.

    With ``corrupt`` the analytic gradient is deliberately distorted so
    that the check fails.
    """
    build, leaves = case
    for leaf in leaves:
        leaf.zero_grad()
    numkit.backward(build())
    worst = 0.0
    values = 0
    for leaf in leaves:
        analytic = (
            np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        )
        if corrupt:
            analytic = 2.0 * analytic + 1e-3
        numeric = numkit.numeric_gradient(
            lambda: build().item(), leaf.data, STEP
        )
        worst = max(worst, numkit.relative_error(analytic, numeric))
        values += leaf.size
    logger.debug("gradcheck %s: max relative error %.3g", name, worst)
    return LayerCheck(name, worst, values, tolerance)


def run_gradcheck(
    seed: int = 0,
    tolerance: float = TOLERANCE,
    corrupt: str | None = None,
    layers: Sequence[str] | None = None,
) -> GradcheckReport:
    """Check every layer (or the named subset) in 64-bit arithmetic."""
    cases = layer_cases(seed)
    report = GradcheckReport()
    for name in layers or cases:
        report.checks.append(
            check_layer(name, cases[name](), tolerance, corrupt == name)
        )
    return report


def print_report(
    report: GradcheckReport, output: str | None = None, color: bool = True
) -> None:
    with utils.smart_open(output, "w") as f:
        formatter = utils.OutputFormatter(color=color, file=f)
        table = [["Layer", "Values", "Max rel. error", "Status"]]
        table.append(formatter.TABLE_SEPARATOR)
        for check in report.checks:
            table.append(
                [
                    check.layer,
                    str(check.values),
                    f"{check.max_error:.2e}",
                    "PASSED" if check.passed else "FAILED",
                ]
            )
        formatter.print_table(
            "Gradient check",
            table,
            table_type="status",
            colalign=("left", "right", "right", "right"),
        )
        message = f"max relative error {report.max_error:.2e}"
        if report.failed:
            message += f"; failed: {', '.join(report.failed)}"
        formatter.print_status(report.passed, message)
