# Copyright 2026 The dlostate authors
"""Synthetic dataset generation and loading.

A dataset directory holds::

    manifest.json      effective config, its hash, per-sequence seeds
    index.json         frame files per split
    train/*.dlof       frame records (see :mod:`dlostate.formats`)
    val/*.dlof

Every sequence draws from its own random stream seeded by
``(seed, sequence index)``, so sequences can be generated in any order
or in parallel and the result is byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os

from typing import Any, Final, Iterator

import attr
import numpy as np

from dlostate import __version__, formats, synth, utils
from dlostate.config import RunConfig, config_hash
from dlostate.errors import DataFormatError, OutputError


logger = logging.getLogger(__name__)

SPLITS: Final[tuple[str, ...]] = ("train", "val")
INDEX_FILE: Final[str] = "index.json"
MANIFEST_FILE: Final[str] = "manifest.json"
SPLIT_STREAM: Final[int] = 0x5EED


def rope_spec(cfg: RunConfig, rng: np.random.Generator) -> synth.RopeSpec:
    """Draw rope properties uniformly from the configured ranges."""
    return synth.RopeSpec(
        length=float(rng.uniform(cfg.length_min, cfg.length_max)),
        radius=float(rng.uniform(cfg.radius_min, cfg.radius_max)),
        stiffness=float(rng.uniform(cfg.stiffness_min, cfg.stiffness_max)),
        particles=cfg.particles,
    )


def split_sequences(
    count: int, val_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Shuffle sequence indices and hold out ``val_fraction`` of them.

    At least one sequence is held out whenever there are two or more.
    """
    rng = np.random.default_rng([seed, SPLIT_STREAM])
    order = rng.permutation(count)
    held_out = int(round(count * val_fraction))
    if count >= 2:
        held_out = min(max(held_out, 1), count - 1)
    else:
        held_out = 0
    val = sorted(int(i) for i in order[:held_out])
    train = sorted(int(i) for i in order[held_out:])
    return train, val


def generate_sequence(cfg: RunConfig, index: int) -> list[synth.Frame]:
    """Simulate and render every frame of one sequence."""
    rng = np.random.default_rng([cfg.seed, index])
    spec = rope_spec(cfg, rng)
    spec.check_nodes(cfg.nodes)
    sim_seed = int(rng.integers(2**32))
    states = synth.simulate_sequence(spec, sim_seed, cfg.frames)
    frames = []
    for number, state in enumerate(states):
        nodes = synth.resample_nodes(state, cfg.nodes)
        if cfg.random_camera:
            camera = synth.random_camera(rng)
        else:
            camera = np.array([0.0, 0.0, 1.0])
        render_seed = int(rng.integers(2**32))
        points = synth.render_cloud(
            state, spec, cfg.density, render_seed, camera
        )
        meta: dict[str, Any] = {
            "sequence": index,
            "frame": number,
            "seed": cfg.seed,
            "simulation_seed": sim_seed,
            "render_seed": render_seed,
            "rope": attr.asdict(spec),
            "camera": [float(c) for c in camera],
            "occlusion_ratio": 0.0,
        }
        frames.append(
            synth.Frame(
                points=points,
                nodes=nodes,
                occluded=synth.occlusion_mask(points, nodes, cfg.radius),
                meta=meta,
            )
        )
    logger.debug("Sequence %d: %d frames", index, len(frames))
    return frames


def frame_name(sequence: int, frame: int) -> str:
    return f"seq{sequence:04d}_frame{frame:03d}.dlof"


def _generate(args: tuple[RunConfig, int]) -> list[bytes]:
    cfg, index = args
    return [formats.encode_frame(f) for f in generate_sequence(cfg, index)]


def _makedirs(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create {path}: {e}") from e


@attr.s
class DatasetIndex:
    """Relative frame paths per split, plus the dataset root."""

    root: str = attr.ib()
    splits: dict[str, list[str]] = attr.ib(factory=dict)

    def paths(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DataFormatError(
                f"{self.root}: no split {split!r} in {INDEX_FILE}"
            )
        return [os.path.join(self.root, p) for p in self.splits[split]]

    def frames(self, split: str) -> Iterator[synth.Frame]:
        for path in self.paths(split):
            yield formats.read_frame(path)

    def load(self, split: str) -> list[synth.Frame]:
        return list(self.frames(split))


def generate_dataset(cfg: RunConfig, out_dir: str) -> DatasetIndex:
    """Write a full dataset to ``out_dir``.

    :raise OutputError: if ``out_dir`` cannot be written.
    """
    train_ids, val_ids = split_sequences(
        cfg.sequences, cfg.val_fraction, cfg.seed
    )
    membership = {i: "train" for i in train_ids}
    membership.update({i: "val" for i in val_ids})
    for split in SPLITS:
        _makedirs(os.path.join(out_dir, split))

    jobs = [(cfg, index) for index in range(cfg.sequences)]
    if cfg.workers > 1:
        executor = concurrent.futures.ProcessPoolExecutor(cfg.workers)
        with executor:
            encoded = list(executor.map(_generate, jobs))
    else:
        encoded = [_generate(job) for job in jobs]

    index = DatasetIndex(root=out_dir, splits={s: [] for s in SPLITS})
    try:
        for sequence, records in enumerate(encoded):
            split = membership[sequence]
            for number, record in enumerate(records):
                relative = os.path.join(split, frame_name(sequence, number))
                with open(os.path.join(out_dir, relative), "wb") as f:
                    f.write(record)
                index.splits[split].append(relative)
            logger.info(
                "Wrote sequence %d (%s, %d frames)",
                sequence,
                split,
                len(records),
            )
        utils.write_json(os.path.join(out_dir, INDEX_FILE), index.splits)
        utils.write_json(
            os.path.join(out_dir, MANIFEST_FILE),
            {
                "version": __version__,
                "config": cfg.to_dict(),
                "config_hash": config_hash(cfg),
                "seed": cfg.seed,
                "sequence_seeds": {
                    str(i): [cfg.seed, i] for i in range(cfg.sequences)
                },
                "splits": {
                    "train": train_ids,
                    "val": val_ids,
                },
                "frames": {s: len(index.splits[s]) for s in SPLITS},
            },
        )
    except OSError as e:
        raise OutputError(f"cannot write dataset to {out_dir}: {e}") from e
    return index


def _read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataFormatError(f"missing {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e


def open_dataset(root: str) -> DatasetIndex:
    """Read a dataset index, checking that every listed frame exists.

    :raise DataFormatError: if the index or a frame file is missing.
    """
    splits = _read_json(os.path.join(root, INDEX_FILE))
    if not isinstance(splits, dict):
        raise DataFormatError(f"{root}: malformed {INDEX_FILE}")
    index = DatasetIndex(root=root, splits=splits)
    for split in splits:
        for path in index.paths(split):
            if not os.path.isfile(path):
                raise DataFormatError(f"{root}: frame {path} is missing")
    return index


def read_manifest(root: str) -> dict[str, Any]:
    return dict(_read_json(os.path.join(root, MANIFEST_FILE)))


def prepare_frame(
    frame: synth.Frame,
    points: int,
    radius: float,
    augment: synth.AugmentConfig | None = None,
    rng: np.random.Generator | None = None,
    fps_seed: int | None = None,
) -> synth.Frame:
    """Augment a stored frame and fix its cloud to ``points`` rows.

    The occlusion mask is recomputed against the final cloud.

    :raise UnusableFrameError: if augmentation leaves too few points.
    """
    if augment is not None:
        frame = synth.augment(frame, augment, rng or np.random.default_rng())
    cloud = synth.fps_sample(frame.points, points, fps_seed)
    return attr.evolve(frame, points=cloud).with_mask(radius)
