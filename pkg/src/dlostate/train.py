# Copyright 2026 The dlostate authors
"""Training loop for the two-branch estimator.

Each epoch draws its own random stream from ``(seed, epoch)``, so a run
resumed from the last-state checkpoint continues exactly as an
uninterrupted one would. Gradients of a mini-batch are accumulated
sample by sample in a fixed order and averaged before the Adam step.
"""

from __future__ import annotations

import logging
import math
import os

from typing import Any, Final, Mapping, Sequence

import attr
import numpy as np

from dlostate import dataset, evaluate, heads, model, numkit, synth, utils
from dlostate.config import RunConfig, config_hash
from dlostate.errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    OutputError,
    TrainingDiverged,
    UnusableFrameError,
)
from dlostate.numkit import Params


logger = logging.getLogger(__name__)

LAST_SUFFIX: Final[str] = ".last"
MOMENT_PREFIXES: Final[tuple[str, str]] = ("adam.m.", "adam.v.")


@attr.s
class EpochRecord:
    """One line of the training log."""

    epoch: int = attr.ib()
    lr: float = attr.ib()
    loss_reg: float = attr.ib()
    loss_vot: float = attr.ib()
    loss_total: float = attr.ib()
    val_error_reg: float | None = attr.ib(default=None)
    val_error_vot: float | None = attr.ib(default=None)
    best: bool = attr.ib(default=False)


def _param_norms(params: Mapping[str, numkit.Tensor]) -> dict[str, float]:
    return {
        name: float(np.linalg.norm(t.data)) for name, t in params.items()
    }


def _as_tensors(arrays: Mapping[str, np.ndarray]) -> Params:
    return {
        name: numkit.Tensor(value, requires_grad=True, name=name)
        for name, value in arrays.items()
    }


class Trainer:
    """Fit network parameters to a dataset.

    :param RunConfig conf: run configuration.
    :param list train_frames: frames to fit.
    :param list val_frames: held-out frames scored after every epoch.
    :param bool augment: apply occlusion, jitter and rotation.
    """

    def __init__(
        self,
        conf: RunConfig,
        train_frames: Sequence[synth.Frame],
        val_frames: Sequence[synth.Frame] = (),
        augment: bool = True,
    ):
        if not train_frames:
            raise DataFormatError("dataset has no training frames")
        self.config = conf
        self.network = conf.network_config()
        self.train_frames = list(train_frames)
        self.val_frames = list(val_frames)
        self.augment = augment
        self.params = model.init_params(self.network, conf.seed)
        self.state = conf.adam_state()
        self.epoch = 0
        self.best: float | None = None

    def _augment_config(
        self, rng: np.random.Generator
    ) -> synth.AugmentConfig:
        conf = self.config
        if not self.augment:
            return synth.AugmentConfig()
        occlusion = 0.0
        if conf.max_occlusion > 0 and rng.random() < conf.occlusion_prob:
            occlusion = float(rng.uniform(0.0, conf.max_occlusion))
        return synth.AugmentConfig(
            jitter=conf.jitter, rotate=conf.rotate, occlusion=occlusion
        )

    def sample(
        self, frame: synth.Frame, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Augmented, sampled and normalized ``(cloud, nodes)``."""
        conf = self.config
        aug = self._augment_config(rng)
        fps_seed = int(rng.integers(2**32)) if self.augment else None
        try:
            prepared = dataset.prepare_frame(
                frame, conf.points, conf.radius, aug, rng, fps_seed
            )
        except UnusableFrameError as e:
            logger.debug("Dropping occlusion for one sample: %s", e)
            prepared = dataset.prepare_frame(
                frame,
                conf.points,
                conf.radius,
                attr.evolve(aug, occlusion=0.0),
                rng,
                fps_seed,
            )
        cloud, centroid = synth.normalize(prepared.points, self.network.scale)
        nodes = (prepared.nodes - centroid) / self.network.scale
        return cloud, nodes

    def sample_loss(
        self, cloud: np.ndarray, nodes: np.ndarray
    ) -> heads.LossTerms:
        outputs = model.forward(cloud, self.params, self.network)
        field = heads.gt_voting_field(cloud, nodes, self.config.radius)
        return heads.losses(
            outputs, nodes, field, self.config.w_reg, self.config.w_vot
        )

    def _step(self, grads: dict[str, np.ndarray], count: int) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        averaged = {name: g / count for name, g in grads.items()}
        new_arrays, self.state = numkit.adam_step(
            arrays, averaged, self.state, self.epoch
        )
        self.params = _as_tensors(new_arrays)

    def train_epoch(self) -> EpochRecord:
        """One pass over the training frames; returns mean losses."""
        conf = self.config
        rng = np.random.default_rng([conf.seed, self.epoch])
        order = rng.permutation(len(self.train_frames))
        totals = np.zeros(3)
        for start in range(0, len(order), conf.batch_size):
            batch = order[start : start + conf.batch_size]
            batch_seed = int(rng.integers(2**32))
            batch_rng = np.random.default_rng(batch_seed)
            grads: dict[str, np.ndarray] = {}
            for index in batch:
                cloud, nodes = self.sample(self.train_frames[index], batch_rng)
                for tensor in self.params.values():
                    tensor.zero_grad()
                terms = self.sample_loss(cloud, nodes)
                value = terms.total.item()
                if not math.isfinite(value):
                    norms = _param_norms(self.params)
                    worst = max(norms, key=lambda k: norms[k])
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {self.epoch}, batch seed "
                        f"{batch_seed}; largest parameter norm "
                        f"{worst}={norms[worst]:.3g}"
                    )
                numkit.backward(terms.total)
                for name, tensor in self.params.items():
                    grad = tensor.grad
                    if grad is None:
                        grad = np.zeros_like(tensor.data)
                    grads[name] = grads[name] + grad if name in grads else grad
                totals += [
                    terms.regression.item(),
                    terms.voting.item(),
                    value,
                ]
            self._step(grads, len(batch))
        means = totals / len(order)
        return EpochRecord(
            epoch=self.epoch,
            lr=self.state.lr_at(self.epoch),
            loss_reg=float(means[0]),
            loss_vot=float(means[1]),
            loss_total=float(means[2]),
        )

    def validate(self) -> tuple[float | None, float | None]:
        """Mean all-node error of regression and voting on val frames."""
        if not self.val_frames:
            return None, None
        reg, vot = [], []
        for frame in self.val_frames:
            prepared = dataset.prepare_frame(
                frame, self.config.points, self.config.radius
            )
            outputs = model.estimate(
                prepared.points,
                self.params,
                self.network,
                self.config.radius,
                self.config.effective_top_k,
            )
            reg.append(
                evaluate.aligned_errors(outputs.regression, frame.nodes)
            )
            vot.append(evaluate.aligned_errors(outputs.voting, frame.nodes))
        return float(np.mean(reg)), float(np.mean(vot))

    #####
    # Checkpoints
    #####
    def _metadata(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "epoch": self.epoch,
            "best": self.best,
        }

    def save_best(self, path: str) -> None:
        model.save_model(path, self.params, self.network, self._metadata())

    def save_last(self, path: str) -> None:
        arrays: dict[str, np.ndarray] = {}
        for prefix, moments in zip(
            MOMENT_PREFIXES, (self.state.m, self.state.v)
        ):
            arrays.update({prefix + k: v for k, v in moments.items()})
        extra = self._metadata()
        extra["adam_step"] = self.state.step
        model.save_model(path, self.params, self.network, extra, arrays)

    def resume(self, path: str) -> None:
        """Restore parameters, optimizer moments and epoch counter."""
        params, network, metadata = model.load_model(path, self.network)
        arrays = metadata["arrays"]
        moments: list[dict[str, np.ndarray]] = [{}, {}]
        for name, value in arrays.items():
            for slot, prefix in enumerate(MOMENT_PREFIXES):
                if name.startswith(prefix):
                    moments[slot][name[len(prefix) :]] = value
        if "adam_step" not in metadata:
            raise CheckpointError(f"{path}: not a last-state checkpoint")
        self.params = params
        self.state = attr.evolve(
            self.state,
            step=int(metadata["adam_step"]),
            m=moments[0],
            v=moments[1],
        )
        self.epoch = int(metadata["epoch"]) + 1
        self.best = metadata.get("best")
        logger.info("Resumed from %s at epoch %d", path, self.epoch)

    def run(
        self, out_path: str, log_path: str, resume: bool = False
    ) -> list[EpochRecord]:
        """Train until ``config.epochs``, checkpointing as it goes.

        Writes the best-validation parameters to ``out_path`` and the full
        training state to ``out_path + ".last"``. Without validation frames
        the training loss picks the best epoch.
        """
        last_path = out_path + LAST_SUFFIX
        if resume:
            self.resume(last_path)
        directory = os.path.dirname(os.path.abspath(out_path))
        try:
            os.makedirs(directory, exist_ok=True)
            log = utils.JsonLinesWriter(log_path, "a" if resume else "w")
        except OSError as e:
            raise OutputError(f"cannot write training output: {e}") from e
        records = []
        with log:
            while self.epoch < self.config.epochs:
                record = self.train_epoch()
                record.val_error_reg, record.val_error_vot = self.validate()
                score = record.val_error_vot
                if score is None:
                    score = record.loss_total
                if self.best is None or score < self.best:
                    self.best = score
                    record.best = True
                    self.save_best(out_path)
                self.save_last(last_path)
                log.write(attr.asdict(record))
                logger.info(
                    "Epoch %d: loss %.4g (reg %.4g, vot %.4g), val %s",
                    record.epoch,
                    record.loss_total,
                    record.loss_reg,
                    record.loss_vot,
                    record.val_error_vot,
                )
                records.append(record)
                self.epoch += 1
        return records


def train(
    conf: RunConfig,
    data_dir: str,
    out_path: str,
    log_path: str | None = None,
    resume: bool = False,
    overfit: int | None = None,
) -> list[EpochRecord]:
    """Train on a generated dataset.

    With ``overfit`` only the first ``overfit`` training frames are used,
    without augmentation or validation.
    """
    index = dataset.open_dataset(data_dir)
    train_frames = index.load("train")
    val_frames = index.load("val") if "val" in index.splits else []
    if train_frames and len(train_frames[0].nodes) != conf.nodes:
        raise ConfigError(
            f"dataset has {len(train_frames[0].nodes)} nodes per frame but "
            f"`nodes` is {conf.nodes}"
        )
    augment = True
    if overfit is not None:
        train_frames, val_frames, augment = train_frames[:overfit], [], False
    trainer = Trainer(conf, train_frames, val_frames, augment=augment)
    return trainer.run(out_path, log_path or out_path + ".jsonl", resume)
