"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. Unknown keys are errors. Lists are
comma-separated. ``dump_config`` writes every field, so dumping and parsing
again yields the same configuration.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .data import SHIFT_TASKS, TASKS

MODES = ("conditional", "pretrain-then-conditional", "hybrid", "hybrid-factored")
ALL_TASKS = TASKS + tuple(SHIFT_TASKS)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "quadrant2"
    mode: str = "hybrid"
    n_l: int = 50000
    n_u: int = -1  # -1: every remaining training pair
    val_size: int = 10000
    n_test: int = 0  # 0: the full test set
    downsample: int = 1
    binarize: bool = True
    latent_dim: int = 50
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    decoder: str = "bernoulli"
    decoder_var: float = 0.1
    alpha: float = 0.5
    lam: float | None = None  # None: 0.1 for shift tasks, 1e-2 otherwise
    iw_eval: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    patience: int = 20
    max_epochs: int = 500
    pretrain_max_epochs: int = 500
    tie_init: bool = True
    eval_batch: int = 500
    export_count: int = 10
    data_dir: str = ""
    train_images: str = "train-images-idx3-ubyte.gz"
    train_labels: str = "train-labels-idx1-ubyte.gz"
    test_images: str = "t10k-images-idx3-ubyte.gz"
    test_labels: str = "t10k-labels-idx1-ubyte.gz"
    cache: str = "runs/cache.bin"
    checkpoint_dir: str = "runs/checkpoints"
    log_dir: str = "runs/logs"

    def __post_init__(self):
        if self.lam is None:
            self.lam = 0.1 if self.task in SHIFT_TASKS else 1e-2
        self.validate()

    def validate(self):
        if self.task not in ALL_TASKS:
            raise ConfigError(f"task must be one of {ALL_TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.decoder not in ("bernoulli", "gaussian"):
            raise ConfigError(f"decoder must be 'bernoulli' or 'gaussian', got {self.decoder!r}")
        if self.n_l < 1 or self.iw_eval < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("n_l, iw_eval, batch_size and latent_dim must be positive")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")

    @property
    def inference(self) -> str:
        return "factored" if self.mode == "hybrid-factored" else "standard"

    @property
    def geometry_task(self) -> str:
        return "topdown" if self.task in SHIFT_TASKS else self.task

    @property
    def shift_mode(self) -> str | None:
        return SHIFT_TASKS.get(self.task)

    def data_path(self, name: str) -> str:
        root = self.data_dir or os.environ.get("BCDE_DATA_DIR", "data")
        return os.path.join(root, name)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


# config-file key -> dataclass attribute, where they differ
_ALIASES = {"lambda": "lam"}


def _field_types():
    hints = {
        "task": str, "mode": str, "activation": str, "decoder": str, "data_dir": str,
        "train_images": str, "train_labels": str, "test_images": str, "test_labels": str,
        "cache": str, "checkpoint_dir": str, "log_dir": str,
        "binarize": bool, "tie_init": bool,
        "hidden": "ints", "seeds": "ints",
        "decoder_var": float, "alpha": float, "lam": float, "lr": float,
        "beta1": float, "beta2": float, "adam_eps": float,
    }
    return {f.name: hints.get(f.name, int) for f in fields(RunConfig)}


def _convert(key: str, kind, raw: str):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_config_text(text: str) -> RunConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        attr = _ALIASES.get(key, key)
        if attr not in types or key in _ALIASES.values():
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if attr in values:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        values[attr] = _convert(key, types[attr], raw)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def dump_config(cfg: RunConfig) -> str:
    inverse = {v: k for k, v in _ALIASES.items()}
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{inverse.get(f.name, f.name)} = {v}")
    return "\n".join(lines) + "\n"
