"""Raw IDX files to a prepared semi-supervised split, driven by a RunConfig."""

from __future__ import annotations

import os

import numpy as np

from .config import RunConfig
from .data import (
    SemiSplit,
    TaskGeometry,
    apply_shift,
    binarize_static,
    downsample,
    load_idx,
    load_idx_labels,
    make_semi_split,
    split_task,
)


def _load(cfg: RunConfig, images: str, labels: str, seed_offset: int):
    data = load_idx(cfg.data_path(images))
    label_path = cfg.data_path(labels)
    if os.path.exists(label_path):
        data.labels = load_idx_labels(label_path)
        if len(data.labels) != len(data):
            raise ValueError(f"{label_path}: {len(data.labels)} labels for {len(data)} images")
    data = downsample(data, cfg.downsample)
    if cfg.binarize:
        data = binarize_static(data, cfg.data_seed + seed_offset)
    if cfg.shift_mode is not None:
        geom = TaskGeometry.make("topdown", data.height, data.width)
        data = apply_shift(data, geom, cfg.shift_mode, cfg.data_seed + seed_offset)
    return data


def build_split(cfg: RunConfig) -> tuple[SemiSplit, dict]:
    """Load, downsample, binarize, (shift), split by task masks and sub-sample n_l pairs."""
    train = _load(cfg, cfg.train_images, cfg.train_labels, 0)
    test = _load(cfg, cfg.test_images, cfg.test_labels, 1)
    geom = TaskGeometry.make(cfg.geometry_task, train.height, train.width)
    split = make_semi_split(split_task(train, geom), cfg.n_l, cfg.data_seed, cfg.val_size,
                            None if cfg.n_u < 0 else cfg.n_u)
    test_split = split_task(test, geom)
    if cfg.n_test > 0:
        test_split = test_split.subset(np.arange(min(cfg.n_test, len(test_split))))
    split.test = test_split
    header = {"task": cfg.task, "n_l": cfg.n_l, "data_seed": cfg.data_seed, "downsample": cfg.downsample,
              "height": train.height, "width": train.width}
    return split, header
