"""``bcde prepare|train|eval|diag|export --config <path>``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 diagnostic failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diagnostics
from .config import ConfigError, RunConfig, dump_config, load_config
from .container import FormatError
from .data import DataFormatError, TaskGeometry, load_split_cache, reassemble, save_split_cache, write_pgm
from .distributions import BernoulliParams
from .pipeline import build_split
from .trainer import evaluate, load_checkpoint, train

log = logging.getLogger("bcde")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIAG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo_config(cfg: RunConfig, directory: str, name: str = "effective_config.txt") -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, name), "w") as fh:
        fh.write(dump_config(cfg))


def _load_cache(cfg: RunConfig):
    if not os.path.exists(cfg.cache):
        raise DataError(f"prepared-split cache {cfg.cache} not found; run 'bcde prepare' first")
    split, header = load_split_cache(cfg.cache)
    for key in ("task", "n_l", "data_seed", "downsample"):
        if header[key] != getattr(cfg, key):
            raise ConfigError(f"cache {cfg.cache} has {key}={header[key]!r}, config says {getattr(cfg, key)!r}")
    return split, header


def _seed_dir(cfg: RunConfig, seed: int) -> str:
    return os.path.join(cfg.checkpoint_dir, f"seed{seed}")


def _metrics_record(result, epochs, seed) -> dict:
    return {f"test_bound_iw{result.K}": result.loss, "stderr": result.stderr, "epochs": epochs, "seed": seed}


def _write_json(path, record) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(record) + "\n")


def cmd_prepare(cfg: RunConfig, args) -> int:
    split, header = build_split(cfg)
    os.makedirs(os.path.dirname(cfg.cache) or ".", exist_ok=True)
    save_split_cache(cfg.cache, split, header)
    _echo_config(cfg, os.path.dirname(cfg.cache) or ".", os.path.basename(cfg.cache) + ".config.txt")
    geom = TaskGeometry.make(cfg.geometry_task, header["height"], header["width"])
    print(f"prepared {cfg.task} ({header['height']}x{header['width']}, x_dim={geom.x_dim}, y_dim={geom.y_dim}): "
          f"labeled={split.n_l} unlabeled_x={split.n_u} unlabeled_y={split.n_u} "
          f"validation={len(split.validation)} test={len(split.test)} -> {cfg.cache}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    split, _ = _load_cache(cfg)
    os.makedirs(cfg.log_dir, exist_ok=True)
    _echo_config(cfg, cfg.log_dir)
    results = []
    for seed in cfg.seeds:
        out = _seed_dir(cfg, seed)
        _echo_config(cfg, out)
        res = train(cfg, split, seed, out_dir=out, resume=args.resume,
                    log_path=os.path.join(cfg.log_dir, f"train_log_seed{seed}.csv"))
        ev = evaluate(res.bcde, split.test, cfg.iw_eval, seed, cfg.eval_batch)
        record = _metrics_record(ev, res.epochs, seed)
        _write_json(os.path.join(cfg.log_dir, f"metrics_seed{seed}.json"), record)
        print(json.dumps(record))
        results.append(res)
    if len(results) > 1:
        ev = evaluate([r.bcde for r in results], split.test, cfg.iw_eval, 0, cfg.eval_batch)
        print(f"{cfg.mode}: test loss (IW={cfg.iw_eval}) {ev.loss:.4f} +- {ev.stderr:.4f} over {len(results)} seeds")
    return EXIT_OK


def _checkpoint_paths(cfg: RunConfig, args) -> list[str]:
    if args.checkpoint:
        return [args.checkpoint]
    return [os.path.join(_seed_dir(cfg, s), "best.ckpt") for s in cfg.seeds]


def _load_models(paths, split):
    models = []
    for path in paths:
        if not os.path.exists(path):
            raise DataError(f"checkpoint {path} not found")
        ck = load_checkpoint(path)
        if (ck.model_cfg.x_dim, ck.model_cfg.y_dim) != (split.test.x.shape[1], split.test.y.shape[1]):
            raise ConfigError(f"checkpoint {path} has x_dim={ck.model_cfg.x_dim}, y_dim={ck.model_cfg.y_dim}; "
                              f"the prepared task has {split.test.x.shape[1]}, {split.test.y.shape[1]}")
        models.append(ck)
    return models


def cmd_eval(cfg: RunConfig, args) -> int:
    split, _ = _load_cache(cfg)
    cks = _load_models(_checkpoint_paths(cfg, args), split)
    seed = cks[0].model_cfg.seed
    ev = evaluate([c.bcde for c in cks], split.test, cfg.iw_eval, seed, cfg.eval_batch)
    epochs = int(max(c.trainer.get("best_epoch", 0) for c in cks))
    record = _metrics_record(ev, epochs, seed)
    os.makedirs(cfg.log_dir, exist_ok=True)
    _write_json(os.path.join(cfg.log_dir, "metrics.json"), record)
    _echo_config(cfg, cfg.log_dir)
    print(json.dumps(record))
    return EXIT_OK


def cmd_diag(cfg: RunConfig, args) -> int:
    results = diagnostics.run_all(cfg.seeds[0])
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_DIAG if failed else EXIT_OK


def _sample_y(head, rng, greedy: bool):
    if isinstance(head, BernoulliParams):
        p = head.mean
        return (p > 0.5).astype(float) if greedy else (rng.random(p.shape) < p).astype(float)
    mean = head.mean.data
    return mean if greedy else mean + np.sqrt(head.var) * rng.standard_normal(mean.shape)


def _export_samples(cfg, ck, split, header, out_dir) -> str:
    geom = TaskGeometry.make(cfg.geometry_task, header["height"], header["width"])
    rng = np.random.default_rng([cfg.data_seed, 0xE4])
    pick = np.sort(rng.choice(len(split.test), size=min(cfg.export_count, len(split.test)), replace=False))
    x, y = split.test.x[pick], split.test.y[pick]
    prior = ck.bcde.p_z_given_x(None, x)
    mean, std = prior.mean.data, np.exp(0.5 * prior.log_var.data)
    rows = [reassemble(x, y, geom)]
    for _ in range(3):
        z = mean + std * rng.standard_normal(mean.shape)
        rows.append(reassemble(0.5 * x, _sample_y(ck.bcde.p_y_given_z(None, z), rng, False), geom))
    rows.append(reassemble(0.5 * x, _sample_y(ck.bcde.p_y_given_z(None, mean), rng, True), geom))
    h, w = geom.shape
    grid = np.ones((len(rows) * (h + 1) - 1, len(pick) * (w + 1) - 1))
    for r, imgs in enumerate(rows):
        for c, img in enumerate(imgs):
            grid[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = np.clip(img, 0, 1)
    path = os.path.join(out_dir, "samples.pgm")
    write_pgm(path, grid)
    return path


def _export_latents(cfg, ck, split, out_dir) -> str:
    test = split.test
    prior = ck.bcde.p_z_given_x(None, test.x)
    mu = prior.mean.data
    path = os.path.join(out_dir, "latents.csv")
    shifts = test.shifts if cfg.shift_mode is not None else None
    with open(path, "w") as fh:
        fh.write(",".join(["index", "label", "shift"] + [f"mu_{j + 1}" for j in range(mu.shape[1])]) + "\n")
        for i in range(len(test)):
            label = "" if test.labels is None else str(int(test.labels[i]))
            shift = "" if shifts is None else str(int(shifts[i]))
            fh.write(",".join([str(i), label, shift] + [repr(float(v)) for v in mu[i]]) + "\n")
    return path


def cmd_export(cfg: RunConfig, args) -> int:
    split, header = _load_cache(cfg)
    (ck,) = _load_models(_checkpoint_paths(cfg, args)[:1], split)
    out_dir = os.path.join(cfg.log_dir, "export")
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    if args.what == "samples":
        path = _export_samples(cfg, ck, split, header, out_dir)
    else:
        path = _export_latents(cfg, ck, split, out_dir)
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "diag": cmd_diag, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bcde", description="Bottleneck conditional density estimation experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat 'key = value' run configuration")
    p.add_argument("--checkpoint", help="checkpoint for eval/export (default: best.ckpt of each seed)")
    p.add_argument("--resume", action="store_true", help="continue training from last.ckpt")
    p.add_argument("--what", choices=("samples", "latents"), default="samples", help="export target")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bcde: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"bcde: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError, FormatError, OSError, ValueError) as exc:
        print(f"bcde: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
