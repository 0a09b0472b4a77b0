# Copyright 2026 The dlostate authors
"""Measure and report node-estimation accuracy under occlusion."""

from __future__ import annotations

import csv
import logging

from typing import Any, Final, Iterable, Mapping, NamedTuple, Sequence

import attr
import numpy as np
import tabulate

from dlostate import dataset, fusion, model, synth, utils
from dlostate.config import RunConfig
from dlostate.errors import ContractError, UnusableFrameError
from dlostate.numkit import Tensor


tabulate.PRESERVE_WHITESPACE = True

logger = logging.getLogger(__name__)

METHODS: Final[tuple[str, ...]] = ("regression", "voting", "fusion")
OCCLUSION_RATIOS: Final[tuple[float, ...]] = (0.0, 0.1, 0.2, 0.4)
THRESHOLDS: Final[tuple[float, ...]] = (
    0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95,
)
JITTERS: Final[tuple[float, ...]] = (0.0, 0.001, 0.002, 0.004)
# Slack on error orderings that tie, in meters.
TIE_TOLERANCE: Final[float] = 1e-9
SWEEP_PARAMETERS: Final[dict[str, str]] = {
    "occlusion": "ratio",
    "threshold": "threshold",
    "noise": "jitter",
}


class NodeErrors(NamedTuple):
    all: float
    unoccluded: float | None
    occluded: float | None


def aligned_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-node distances under the better of the two node orders.

    Entry ``j`` belongs to ground-truth node ``j``; ties keep the forward
    order.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ContractError(
            f"node_error: prediction {pred.shape} and ground truth "
            f"{gt.shape} differ"
        )
    forward = np.linalg.norm(pred - gt, axis=1)
    backward = np.linalg.norm(pred[::-1] - gt, axis=1)
    return backward if backward.mean() < forward.mean() else forward


def _mean_or_none(values: np.ndarray) -> float | None:
    return float(values.mean()) if values.size else None


def node_error(
    pred: np.ndarray, gt: np.ndarray, occluded: np.ndarray
) -> NodeErrors:
    """Mean node error over all, unoccluded and occluded nodes.

    A subset without nodes is reported as ``None``.
    """
    errors = aligned_errors(pred, gt)
    mask = np.asarray(occluded, dtype=bool)
    if mask.shape != errors.shape:
        raise ContractError(
            f"node_error: mask {mask.shape} does not match {errors.shape}"
        )
    return NodeErrors(
        float(errors.mean()),
        _mean_or_none(errors[~mask]),
        _mean_or_none(errors[mask]),
    )


def uniformity(nodes: np.ndarray) -> float:
    """Population standard deviation of adjacent node spacing.

    :raise ContractError: with fewer than three nodes.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.ndim != 2 or len(nodes) < 3:
        raise ContractError(
            f"uniformity needs at least 3 nodes, got {nodes.shape}"
        )
    spacing = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    return float(np.std(spacing))


def polyline_length(nodes: np.ndarray) -> float:
    nodes = np.asarray(nodes, dtype=np.float64)
    return float(np.linalg.norm(np.diff(nodes, axis=0), axis=1).sum())


@attr.s
class FrameResult:
    """Accuracy of one method on one frame.

    :param str method: ``regression``, ``voting`` or ``fusion``.
    :param str frame: frame identifier.
    :param float setting: the swept value (occlusion ratio, threshold or
        jitter).
    :param numpy.ndarray errors: per-node distances (m), order-aligned.
    :param numpy.ndarray occluded: per-node occlusion mask.
    :param float uniformity: adjacent spacing std of the estimate (m).
    :param float ratio: occlusion ratio the frame was evaluated at.
    :param bool fallback: fusion returned the regression nodes.
    :param float length: ground-truth rope length along the nodes (m).
    """

    method: str = attr.ib()
    frame: str = attr.ib()
    setting: float = attr.ib()
    errors: np.ndarray = attr.ib(eq=False, repr=False)
    occluded: np.ndarray = attr.ib(eq=False, repr=False)
    uniformity: float = attr.ib(default=0.0)
    ratio: float = attr.ib(default=0.0)
    fallback: bool = attr.ib(default=False)
    length: float = attr.ib(default=0.0)

    @property
    def mean_all(self) -> float:
        return float(self.errors.mean())

    @property
    def mean_unoccluded(self) -> float | None:
        return _mean_or_none(self.errors[~self.occluded])

    @property
    def mean_occluded(self) -> float | None:
        return _mean_or_none(self.errors[self.occluded])

    def to_record(self, sweep: str) -> dict[str, Any]:
        return {
            "sweep": sweep,
            "method": self.method,
            "frame": self.frame,
            SWEEP_PARAMETERS[sweep]: self.setting,
            "ratio": self.ratio,
            "errors": [float(e) for e in self.errors],
            "occluded": [bool(o) for o in self.occluded],
            "mean_all": self.mean_all,
            "mean_unoccluded": self.mean_unoccluded,
            "mean_occluded": self.mean_occluded,
            "uniformity": self.uniformity,
            "fallback": self.fallback,
            "length": self.length,
        }


@attr.s
class BaseSummary:
    """Frame-averaged accuracy.

    :attr int frames: number of frames.
    :attr float all: mean all-node error (m).
    :attr float unoccluded: mean over frames with visible nodes.
    :attr float occluded: mean over frames with occluded nodes, ``None``
        when no frame has any.
    :attr float uniformity: mean uniformity (m).
    :attr float length: mean ground-truth rope length (m).
    """

    frames: int = attr.ib(init=False, default=0)
    all: float = attr.ib(init=False, default=0.0)
    unoccluded: float | None = attr.ib(init=False, default=None)
    occluded: float | None = attr.ib(init=False, default=None)
    uniformity: float = attr.ib(init=False, default=0.0)
    length: float = attr.ib(init=False, default=0.0)


@attr.s
class SummaryRow(BaseSummary):
    """Accuracy of one method at one sweep setting."""

    method: str = attr.ib(default="")
    setting: float = attr.ib(default=0.0)
    frame_results: list[FrameResult] = attr.ib(factory=list, repr=False)

    def combine(self) -> None:
        """Average each metric over the frames that define it."""
        results = self.frame_results
        self.frames = len(results)
        if not results:
            return
        self.all = float(np.mean([r.mean_all for r in results]))
        self.uniformity = float(np.mean([r.uniformity for r in results]))
        self.length = float(np.mean([r.length for r in results]))
        for name in ("unoccluded", "occluded"):
            values = [getattr(r, f"mean_{name}") for r in results]
            present = np.array([v for v in values if v is not None])
            setattr(self, name, _mean_or_none(present))


@attr.s
class TrendCheck:
    name: str = attr.ib()
    passed: bool = attr.ib()
    detail: str = attr.ib(default="")


@attr.s
class SweepResults:
    """All frame results of a sweep and their per-setting summaries.

    :attr int ret_code: ``1`` when a trend check failed under ``strict``.
    """

    sweep: str = attr.ib()
    frame_results: list[FrameResult] = attr.ib(factory=list, repr=False)
    skipped: int = attr.ib(default=0)
    rows: list[SummaryRow] = attr.ib(init=False, factory=list)
    checks: list[TrendCheck] = attr.ib(init=False, factory=list)
    ret_code: int = attr.ib(init=False, default=0, repr=False)

    @property
    def settings(self) -> list[float]:
        return sorted({r.setting for r in self.frame_results})

    @property
    def methods(self) -> list[str]:
        present = {r.method for r in self.frame_results}
        return [m for m in METHODS if m in present]

    def combine(self) -> None:
        """Group frame results by method and setting, in sorted order."""
        grouped: dict[tuple[str, float], list[FrameResult]] = {}
        for result in self.frame_results:
            grouped.setdefault((result.method, result.setting), []).append(
                result
            )
        self.rows = []
        for method in self.methods:
            for setting in self.settings:
                if (method, setting) not in grouped:
                    continue
                row = SummaryRow(
                    method=method,
                    setting=setting,
                    frame_results=grouped[(method, setting)],
                )
                row.combine()
                self.rows.append(row)

    def lookup(self, method: str, setting: float) -> SummaryRow | None:
        for row in self.rows:
            if row.method == method and np.isclose(row.setting, setting):
                return row
        return None


#####
# Trend checks
#####
def _mm_pair(first: float, second: float) -> str:
    return f"{utils.millimeters(first)} vs {utils.millimeters(second)} mm"


def _spread(values: list[float]) -> float:
    return (max(values) - min(values)) / max(min(values), 1e-12)


def _check_occlusion(results: SweepResults) -> list[TrendCheck]:
    checks = []
    clean = results.lookup("voting", 0.0)
    if clean is not None and clean.length > 0:
        share = clean.all / clean.length
        checks.append(
            TrendCheck(
                "voting error < 15% of rope length",
                share < 0.15,
                f"{share:.1%} of {utils.millimeters(clean.length)} mm",
            )
        )
    for ratio in (0.2, 0.4):
        fused = results.lookup("fusion", ratio)
        voted = results.lookup("voting", ratio)
        regressed = results.lookup("regression", ratio)
        if fused and voted:
            checks.append(
                TrendCheck(
                    f"fusion <= voting at {ratio:.0%}",
                    fused.all <= voted.all + TIE_TOLERANCE,
                    _mm_pair(fused.all, voted.all),
                )
            )
        if (
            voted
            and regressed
            and voted.unoccluded is not None
            and regressed.unoccluded is not None
        ):
            checks.append(
                TrendCheck(
                    f"voting unoccluded <= regression at {ratio:.0%}",
                    voted.unoccluded
                    <= regressed.unoccluded + TIE_TOLERANCE,
                    _mm_pair(voted.unoccluded, regressed.unoccluded),
                )
            )
        if (
            fused
            and voted
            and fused.occluded is not None
            and voted.occluded is not None
        ):
            checks.append(
                TrendCheck(
                    f"fusion occluded <= 0.5x voting at {ratio:.0%}",
                    fused.occluded
                    <= 0.5 * voted.occluded + TIE_TOLERANCE,
                    _mm_pair(fused.occluded, voted.occluded),
                )
            )
        if voted and voted.occluded is not None and voted.unoccluded:
            checks.append(
                TrendCheck(
                    f"voting occluded >= 3x unoccluded at {ratio:.0%}",
                    voted.occluded >= 3.0 * voted.unoccluded,
                    _mm_pair(voted.occluded, voted.unoccluded),
                )
            )
    regression = [
        row
        for row in results.rows
        if row.method == "regression" and row.setting <= 0.4 + 1e-9
    ]
    if len(regression) >= 2:
        spread = _spread([row.all for row in regression])
        checks.append(
            TrendCheck(
                "regression stable across occlusion",
                spread < 0.3,
                f"spread {spread:.0%}",
            )
        )
        spread = _spread([row.uniformity for row in regression])
        checks.append(
            TrendCheck(
                "regression uniformity stable across occlusion",
                spread < 0.5,
                f"spread {spread:.0%}",
            )
        )
    return checks


def _check_threshold(results: SweepResults, chosen: float) -> list[TrendCheck]:
    settings = results.settings
    best = results.lookup("fusion", chosen)
    if best is None or len(settings) < 3:
        return []
    low = results.lookup("fusion", settings[0])
    high = results.lookup("fusion", settings[-1])
    assert low is not None and high is not None
    return [
        TrendCheck(
            f"T={chosen:g} beats both extremes",
            best.all < low.all and best.all < high.all,
            f"{utils.millimeters(low.all)} / {utils.millimeters(best.all)} / "
            f"{utils.millimeters(high.all)} mm",
        )
    ]


def _check_noise(results: SweepResults) -> list[TrendCheck]:
    settings = results.settings
    clean = results.lookup("fusion", settings[0]) if settings else None
    noisy = results.lookup("fusion", settings[-1]) if settings else None
    if clean is None or noisy is None or len(settings) < 2:
        return []
    growth = noisy.all / max(clean.all, 1e-12)
    return [
        TrendCheck(
            "fusion error growth under jitter < 2x",
            growth < 2.0,
            f"x{growth:.2f}",
        )
    ]


#####
# Evaluation
#####
class Evaluator:
    """Run both branches and fusion over frames and score them.

    :param RunConfig conf: voting, fusion and seed settings.
    :param list frames: stored frames to evaluate.
    :param dict params: network parameters; ``None`` with ``gt_replay``.
    :param NetworkConfig network: network shape.
    :param bool gt_replay: feed exact voting fields instead of the network.
    """

    def __init__(
        self,
        conf: RunConfig,
        frames: Sequence[synth.Frame],
        params: Mapping[str, Tensor] | None = None,
        network: model.NetworkConfig | None = None,
        gt_replay: bool = False,
    ):
        if not gt_replay and (params is None or network is None):
            raise ContractError("evaluation needs a network or gt_replay")
        self.config = conf
        self.frames = list(frames)
        self.params = params
        self.network = network
        self.gt_replay = gt_replay
        self.output_formatter: utils.OutputFormatter

    @staticmethod
    def frame_id(frame: synth.Frame, index: int) -> str:
        meta = frame.meta
        if "sequence" in meta and "frame" in meta:
            return f"seq{meta['sequence']:04d}_frame{meta['frame']:03d}"
        return f"frame{index:05d}"

    def prepare(self, index: int, ratio: float, jitter: float) -> synth.Frame:
        """Occlude and jitter frame ``index`` reproducibly."""
        rng = np.random.default_rng(
            [
                self.config.seed,
                index,
                int(round(ratio * 1e4)),
                int(round(jitter * 1e7)),
            ]
        )
        augment = synth.AugmentConfig(jitter=jitter, occlusion=ratio)
        return dataset.prepare_frame(
            self.frames[index],
            self.config.points,
            self.config.radius,
            augment=augment,
            rng=rng,
        )

    def branches(self, frame: synth.Frame) -> model.BranchOutputs:
        top_k = self.config.effective_top_k
        if self.gt_replay:
            return model.replay_ground_truth(
                frame.points, frame.nodes, self.config.radius, top_k
            )
        assert self.params is not None and self.network is not None
        return model.estimate(
            frame.points,
            self.params,
            self.network,
            self.config.radius,
            top_k,
        )

    def _score(
        self,
        method: str,
        nodes: np.ndarray,
        frame: synth.Frame,
        name: str,
        setting: float,
        ratio: float,
        fallback: bool = False,
    ) -> FrameResult:
        return FrameResult(
            method=method,
            frame=name,
            setting=setting,
            errors=aligned_errors(nodes, frame.nodes),
            occluded=np.asarray(frame.occluded, dtype=bool),
            uniformity=uniformity(nodes),
            ratio=ratio,
            fallback=fallback,
            length=polyline_length(frame.nodes),
        )

    def _evaluate(
        self,
        ratio: float,
        jitter: float,
        setting: float,
        thresholds: Iterable[float] | None = None,
    ) -> tuple[list[FrameResult], int]:
        results: list[FrameResult] = []
        skipped = 0
        fusion_cfg = self.config.fusion_config()
        for index in range(len(self.frames)):
            try:
                frame = self.prepare(index, ratio, jitter)
            except UnusableFrameError as e:
                logger.warning("Skipping frame %d: %s", index, e)
                skipped += 1
                continue
            name = self.frame_id(frame, index)
            outputs = self.branches(frame)
            if thresholds is None:
                fused = fusion.fuse(
                    outputs.regression,
                    outputs.voting,
                    outputs.visibility,
                    fusion_cfg,
                )
                results.append(
                    self._score(
                        "regression",
                        outputs.regression,
                        frame,
                        name,
                        setting,
                        ratio,
                    )
                )
                results.append(
                    self._score(
                        "voting", outputs.voting, frame, name, setting, ratio
                    )
                )
                results.append(
                    self._score(
                        "fusion",
                        fused.nodes,
                        frame,
                        name,
                        setting,
                        ratio,
                        fused.fallback,
                    )
                )
                continue
            for threshold in thresholds:
                fused = fusion.fuse(
                    outputs.regression,
                    outputs.voting,
                    outputs.visibility,
                    attr.evolve(fusion_cfg, threshold=threshold),
                )
                results.append(
                    self._score(
                        "fusion",
                        fused.nodes,
                        frame,
                        name,
                        threshold,
                        ratio,
                        fused.fallback,
                    )
                )
        return results, skipped

    def _finish(
        self, results: SweepResults, checks: list[TrendCheck], strict: bool
    ) -> SweepResults:
        results.combine()
        results.checks = checks
        if strict and any(not c.passed for c in checks):
            results.ret_code = 1
        return results

    def occlusion_sweep(
        self, ratios: Sequence[float] = OCCLUSION_RATIOS, strict: bool = False
    ) -> SweepResults:
        """All three methods at every occlusion ratio."""
        results = SweepResults(sweep="occlusion")
        for ratio in ratios:
            frames, skipped = self._evaluate(ratio, 0.0, ratio)
            results.frame_results.extend(frames)
            results.skipped += skipped
            logger.info("Occlusion %.2f: %d frames", ratio, len(frames) // 3)
        results.combine()
        return self._finish(results, _check_occlusion(results), strict)

    def threshold_sweep(
        self,
        ratio: float = 0.2,
        thresholds: Sequence[float] = THRESHOLDS,
        strict: bool = False,
    ) -> SweepResults:
        """Fusion at every visibility threshold, branches computed once."""
        results = SweepResults(sweep="threshold")
        frames, skipped = self._evaluate(ratio, 0.0, 0.0, thresholds)
        results.frame_results.extend(frames)
        results.skipped += skipped
        results.combine()
        checks = _check_threshold(results, self.config.threshold)
        return self._finish(results, checks, strict)

    def noise_sweep(
        self,
        ratio: float = 0.2,
        jitters: Sequence[float] = JITTERS,
        strict: bool = False,
    ) -> SweepResults:
        """All three methods at every jitter level."""
        results = SweepResults(sweep="noise")
        for jitter in jitters:
            frames, skipped = self._evaluate(ratio, jitter, jitter)
            results.frame_results.extend(frames)
            results.skipped += skipped
        results.combine()
        return self._finish(results, _check_noise(results), strict)

    #####
    # Output
    #####
    @staticmethod
    def write_frame_records(results: SweepResults, path: str) -> None:
        with utils.JsonLinesWriter(path) as writer:
            for result in results.frame_results:
                writer.write(result.to_record(results.sweep))

    @staticmethod
    def write_table(results: SweepResults, path: str) -> None:
        """Methods x metrics by sweep setting, in millimeters.

        Header: ``method,metric,<setting>...``; absent values are ``-``.
        """
        parameter = SWEEP_PARAMETERS[results.sweep]
        settings = results.settings
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                ["method", "metric"]
                + [f"{parameter}={s:g}" for s in settings]
            )
            for method in results.methods:
                for metric in ("all", "unoccluded", "occluded", "uniformity"):
                    row = [method, metric]
                    for setting in settings:
                        summary = results.lookup(method, setting)
                        value = getattr(summary, metric) if summary else None
                        row.append(utils.millimeters(value))
                    writer.writerow(row)

    @staticmethod
    def write_long_csv(results: SweepResults, path: str) -> None:
        """One row per method and setting, for plotting."""
        parameter = SWEEP_PARAMETERS[results.sweep]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                [
                    "sweep",
                    "method",
                    parameter,
                    "frames",
                    "all_mm",
                    "unoccluded_mm",
                    "occluded_mm",
                    "uniformity_mm",
                ]
            )
            for row in results.rows:
                writer.writerow(
                    [
                        results.sweep,
                        row.method,
                        f"{row.setting:g}",
                        row.frames,
                        utils.millimeters(row.all),
                        utils.millimeters(row.unoccluded),
                        utils.millimeters(row.occluded),
                        utils.millimeters(row.uniformity),
                    ]
                )

    def _create_summary_table(self, results: SweepResults) -> list[list[str]]:
        parameter = SWEEP_PARAMETERS[results.sweep]
        table: list[list[str]] = [
            [
                "Method",
                parameter.capitalize(),
                "All",
                "Unocc.",
                "Occ.",
                "Unif.",
            ]
        ]
        table.append(self.output_formatter.TABLE_SEPARATOR)
        previous = None
        for row in results.rows:
            if previous is not None and row.method != previous:
                table.append(self.output_formatter.TABLE_SEPARATOR)
            previous = row.method
            table.append(
                [
                    row.method,
                    f"{row.setting:g}",
                    utils.millimeters(row.all),
                    utils.millimeters(row.unoccluded),
                    utils.millimeters(row.occluded),
                    utils.millimeters(row.uniformity),
                ]
            )
        return table

    def _create_checks_table(self, results: SweepResults) -> list[list[str]]:
        table = [["Check", "Detail", "Status"]]
        table.append(self.output_formatter.TABLE_SEPARATOR)
        for check in results.checks:
            status = "PASSED" if check.passed else "FAILED"
            table.append([check.name, check.detail, status])
        return table

    def print_results(
        self,
        results: SweepResults,
        output: str | None,
        verbosity: int,
        color: bool = True,
    ) -> None:
        """Print results to a given output stream.

        :param SweepResults results: combined sweep results.
        :param output: filename to output results; ``None`` means stdout.
        :param int verbosity: ``0`` prints the result line only, ``1``
            adds the summary table, ``2`` adds the trend checks.
        """
        with utils.smart_open(output, "w") as f:
            self.output_formatter = utils.OutputFormatter(color=color, file=f)
            if verbosity > 0:
                self.output_formatter.tw.sep(
                    "=",
                    f"{results.sweep.capitalize()} sweep (errors in mm)",
                    fullwidth=self.output_formatter.TERMINAL_WIDTH,
                )
                self.output_formatter.print_table(
                    "Summary",
                    self._create_summary_table(results),
                    colalign=("left",) + ("right",) * 5,
                )
            if verbosity > 1 and results.checks:
                self.output_formatter.print_table(
                    "Trend checks",
                    self._create_checks_table(results),
                    table_type="status",
                    colalign=("left", "left", "right"),
                )
            failed = sum(1 for c in results.checks if not c.passed)
            message = (
                f"{len(results.frame_results)} results, "
                f"{results.skipped} frames skipped, "
                f"{failed} of {len(results.checks)} checks failed"
            )
            self.output_formatter.print_status(failed == 0, message)
