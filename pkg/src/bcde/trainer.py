"""Adam training loops, early stopping, evaluation and checkpoints.

Every random draw is derived from (seed, epoch, step), so a run is a pure
function of its configuration and data, and a resumed run continues exactly
where an uninterrupted one would have been.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .container import decode_str, encode_str, read_container, write_container
from .data import SemiSplit, TaskSplit, minibatches, steps_per_epoch
from .model import BcdeModel, BjdeModel, ModelConfig, TyingRegistry, build_models, copy_tied
from .objectives import (
    HybridConfig,
    NoiseStream,
    conditional_objective,
    hybrid_objective,
    iw_bound,
    marginal_objective,
)
from .tensor import Parameter, Tape, backward

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "mode", "train_objective", "val_bound_iw1", "seconds"]
_PHASES = {"pretrain": 0, "main": 1}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, grads: dict[str, np.ndarray], params: dict[str, Parameter]):
    """One bias-corrected Adam descent step on ``params``; missing gradients count as zero.

    Parameter arrays are replaced rather than modified in place.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    bjde: BjdeModel
    bcde: BcdeModel
    registry: TyingRegistry
    model_cfg: ModelConfig
    adam: AdamState | None = None
    trainer: dict[str, float] = field(default_factory=dict)


def save_checkpoint(path, bjde, bcde, model_cfg: ModelConfig, adam: AdamState | None = None, trainer=None):
    arrays = {
        "meta/inference": encode_str(model_cfg.inference),
        "meta/dims": np.array([model_cfg.x_dim, model_cfg.y_dim, model_cfg.latent_dim], dtype=np.float64),
        "meta/hidden": np.array(model_cfg.hidden, dtype=np.float64),
        "meta/activation": encode_str(model_cfg.activation),
        "meta/decoders": encode_str(f"{model_cfg.x_decoder},{model_cfg.y_decoder}"),
        "meta/decoder_var": np.array([model_cfg.decoder_var]),
        "meta/seed": np.array([model_cfg.seed], dtype=np.float64),
    }
    for p in list(bjde.params.values()) + list(bcde.params.values()):
        arrays[p.name] = p.data
    if adam is not None:
        arrays["adam/hyper"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
        arrays["adam/step"] = np.array([adam.step], dtype=np.float64)
        for name in adam.m:
            arrays[f"adam/m/{name}"] = adam.m[name]
            arrays[f"adam/v/{name}"] = adam.v[name]
    for k, v in (trainer or {}).items():
        arrays[f"trainer/{k}"] = np.array([v], dtype=np.float64)
    write_container(path, arrays)


def load_checkpoint(path) -> Checkpoint:
    a = read_container(path)
    try:
        x_dim, y_dim, latent = (int(v) for v in a["meta/dims"])
        x_dec, y_dec = decode_str(a["meta/decoders"]).split(",")
        cfg = ModelConfig(
            x_dim=x_dim,
            y_dim=y_dim,
            latent_dim=latent,
            hidden=tuple(int(v) for v in a["meta/hidden"]),
            activation=decode_str(a["meta/activation"]),
            inference=decode_str(a["meta/inference"]),
            x_decoder=x_dec,
            y_decoder=y_dec,
            decoder_var=float(a["meta/decoder_var"][0]),
            tie_init=False,
            seed=int(a["meta/seed"][0]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: not a model checkpoint (missing {exc})") from None
    bjde, bcde, registry = build_models(cfg)
    for p in list(bjde.params.values()) + list(bcde.params.values()):
        if p.name not in a:
            raise ValueError(f"{path}: checkpoint lacks parameter {p.name}")
        if a[p.name].shape != p.shape:
            raise ValueError(f"{path}: {p.name} has shape {a[p.name].shape}, model expects {p.shape}")
        p.data = a[p.name].copy()
    adam = None
    if "adam/step" in a:
        lr, b1, b2, eps = a["adam/hyper"]
        adam = AdamState(lr, b1, b2, eps, int(a["adam/step"][0]))
        for k, v in a.items():
            if k.startswith("adam/m/"):
                name = k[len("adam/m/"):]
                adam.m[name] = v.copy()
                adam.v[name] = a[f"adam/v/{name}"].copy()
    trainer = {k[len("trainer/"):]: float(v[0]) for k, v in a.items() if k.startswith("trainer/")}
    return Checkpoint(bjde, bcde, registry, cfg, adam, trainer)


# -- evaluation --------------------------------------------------------------------


def iw_bound_dataset(bcde: BcdeModel, split: TaskSplit, K: int, seed: int, batch: int = 500) -> np.ndarray:
    """Per-example IW-K bounds over a split, with noise fixed by ``seed``."""
    out = np.empty(len(split))
    for i, lo in enumerate(range(0, len(split), batch)):
        xs, ys = split.x[lo : lo + batch], split.y[lo : lo + batch]
        rng = np.random.default_rng([seed, K, i, 0xE7A1])
        out[lo : lo + len(xs)] = iw_bound(bcde, xs, ys, K, rng=rng)
    return out


@dataclass
class EvalResult:
    loss: float  # mean negative IW-K bound, nats
    stderr: float
    K: int
    per_model: list[float]


def evaluate(models, test: TaskSplit, K: int, seed: int = 0, batch: int = 500) -> EvalResult:
    """Mean negative IW-K bound on ``test``.

    ``models`` is one BCDE or a list of replicate BCDEs. With replicates the
    standard error is taken across them; with a single model it is the
    standard error of the per-example mean.
    """
    if not len(test):
        raise ValueError("evaluate: empty test set")
    if K < 1:
        raise ValueError("evaluate: K must be at least 1")
    models = models if isinstance(models, (list, tuple)) else [models]
    per_model, per_example = [], None
    for bcde in models:
        losses = -iw_bound_dataset(bcde, test, K, seed, batch)
        per_model.append(float(losses.mean()))
        per_example = losses
    if len(models) > 1:
        stderr = float(np.std(per_model, ddof=1) / np.sqrt(len(models)))
    else:
        stderr = float(np.std(per_example, ddof=1) / np.sqrt(len(per_example))) if len(per_example) > 1 else 0.0
    return EvalResult(float(np.mean(per_model)), stderr, K, per_model)


# -- training ----------------------------------------------------------------------


def model_config_for(cfg: RunConfig, x_dim: int, y_dim: int, seed: int) -> ModelConfig:
    return ModelConfig(
        x_dim=x_dim,
        y_dim=y_dim,
        latent_dim=cfg.latent_dim,
        hidden=tuple(cfg.hidden),
        activation=cfg.activation,
        inference=cfg.inference,
        x_decoder=cfg.decoder,
        y_decoder=cfg.decoder,
        decoder_var=cfg.decoder_var,
        tie_init=cfg.tie_init,
        seed=seed,
    )


@dataclass
class LogRow:
    epoch: int
    mode: str
    train_objective: float
    val_bound_iw1: float
    seconds: float


@dataclass
class TrainResult:
    bjde: BjdeModel
    bcde: BcdeModel
    registry: TyingRegistry
    model_cfg: ModelConfig
    rows: list[LogRow]
    best_epoch: int
    best_val: float
    epochs: int
    best_checkpoint: str | None = None

    def validation_curve(self, mode: str | None = None) -> np.ndarray:
        return np.array([r.val_bound_iw1 for r in self.rows if mode is None or r.mode == mode])


def _validation_bound(bcde, split: SemiSplit, seed: int, batch: int) -> float:
    return float(iw_bound_dataset(bcde, split.validation, 1, seed, batch).mean())


def _pretrain_validation(bjde, split: SemiSplit, seed: int) -> float:
    v = split.validation
    noise = NoiseStream(seed, 0xFA11)
    est = marginal_objective(bjde, v.x, v.y, noise, Tape())
    return est.value / len(v)


def _write_log(path, rows):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.mode, repr(r.train_objective), repr(r.val_bound_iw1), f"{r.seconds:.3f}"])


def read_log(path) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            LogRow(int(r["epoch"]), r["mode"], float(r["train_objective"]), float(r["val_bound_iw1"]), float(r["seconds"]))
            for r in reader
        ]


def _pool(a, b):
    if a is None or not len(a):
        return b
    return np.concatenate([a, b]) if len(b) else a


def _pretrain_batches(split: SemiSplit, batch: int, seed: int, epoch: int):
    xs = _pool(split.unlabeled_x, split.labeled.x)
    ys = _pool(split.unlabeled_y, split.labeled.y)
    steps = steps_per_epoch(len(xs), batch)
    px = np.random.default_rng([seed, epoch, 0x9E1]).permutation(len(xs))
    py = np.random.default_rng([seed, epoch, 0x9E2]).permutation(len(ys))
    for j in range(steps):
        yield xs[px[j * batch : (j + 1) * batch]], ys[py[j * batch : (j + 1) * batch]], len(xs), len(ys)


def train(
    cfg: RunConfig,
    split: SemiSplit,
    seed: int,
    out_dir: str | None = None,
    resume: bool = False,
    max_epochs: int | None = None,
    log_path: str | None = None,
) -> TrainResult:
    """Train one replicate in ``cfg.mode`` and return the best-validation BCDE.

    Minibatch sums are rescaled to unbiased estimates of the dataset-level
    sums divided by the number of training pairs, so ``train_objective`` is
    in nats per pair and ``lam`` weighs the tying penalty against per-pair
    bounds.

    When ``out_dir`` is given, ``best.ckpt`` (best validation bound),
    ``last.ckpt`` (for ``resume``) and ``train_log.csv`` (or ``log_path``)
    are written there.
    """
    if split.n_l < 1:
        raise ValueError("train: the labeled set is empty")
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    x_dim, y_dim = split.labeled.x.shape[1], split.labeled.y.shape[1]
    mcfg = model_config_for(cfg, x_dim, y_dim, seed)
    bjde, bcde, registry = build_models(mcfg)
    if cfg.mode == "hybrid-factored" and registry.mode != "factored":
        raise ValueError("hybrid-factored mode needs factored models")
    hybrid = HybridConfig(cfg.alpha, cfg.lam)
    n_l, n_u = split.n_l, split.n_u
    # data terms are averaged per training pair; the tying penalty is not
    per_pair = 1.0 / (n_l + n_u)

    def fresh_adam():
        return AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    adam = fresh_adam()
    rows: list[LogRow] = []
    state = {"epoch": 0, "best_val": -np.inf, "best_epoch": 0, "bad": 0,
             "phase": _PHASES["pretrain"] if cfg.mode == "pretrain-then-conditional" else _PHASES["main"],
             "main_start": 0}
    paths = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        paths = {k: os.path.join(out_dir, f) for k, f in
                 (("best", "best.ckpt"), ("last", "last.ckpt"), ("log", "train_log.csv"))}
        if log_path is not None:
            paths["log"] = log_path
    if resume and paths and os.path.exists(paths["last"]):
        ck = load_checkpoint(paths["last"])
        for name, p in {**bjde.params, **bcde.params}.items():
            p.data = {**ck.bjde.params, **ck.bcde.params}[name].data
        adam = ck.adam or fresh_adam()
        state.update({k: ck.trainer[k] for k in ("epoch", "best_val", "best_epoch", "bad", "phase", "main_start")})
        state = {k: (int(v) if k != "best_val" else v) for k, v in state.items()}
        if os.path.exists(paths["log"]):
            rows = [r for r in read_log(paths["log"]) if r.epoch <= state["epoch"]]
        log.info("resuming seed %d after epoch %d", seed, state["epoch"])

    def checkpoint(kind):
        if paths:
            save_checkpoint(paths[kind], bjde, bcde, mcfg, adam, state)

    if cfg.mode == "conditional" or cfg.mode == "pretrain-then-conditional":
        main_params = bcde.params
    else:
        main_params = {**bjde.params, **bcde.params}

    # phase 0: fit J_x + J_y on all available x's and y's, then hand off tied networks
    while state["phase"] == _PHASES["pretrain"]:
        epoch = state["epoch"] + 1
        if epoch > cfg.pretrain_max_epochs:
            break
        t0 = time.perf_counter()
        total, steps = 0.0, 0
        for j, (xb, yb, nx, ny) in enumerate(_pretrain_batches(split, cfg.batch_size, seed, epoch)):
            tape = Tape()
            est = marginal_objective(bjde, xb, yb, NoiseStream(seed, epoch, j, 0), tape,
                                     weights=(nx * per_pair / len(xb), ny * per_pair / len(yb)))
            grads = backward(tape, est.total)
            adam_step(adam, {k: -g for k, g in grads.items()}, bjde.params)
            total += est.value
            steps += 1
        val = _pretrain_validation(bjde, split, seed)
        state["epoch"] = epoch
        rows.append(LogRow(epoch, "pretrain", total / steps, val, time.perf_counter() - t0))
        if val > state["best_val"]:
            state.update(best_val=val, best_epoch=epoch, bad=0)
            if paths:
                save_checkpoint(os.path.join(out_dir, "pretrain.ckpt"), bjde, bcde, mcfg)
        else:
            state["bad"] += 1
        _write_log(paths.get("log"), rows)
        checkpoint("last")
        if state["bad"] >= cfg.patience:
            break
    if state["phase"] == _PHASES["pretrain"]:
        if paths and os.path.exists(os.path.join(out_dir, "pretrain.ckpt")):
            best = load_checkpoint(os.path.join(out_dir, "pretrain.ckpt"))
            for name, p in bjde.params.items():
                p.data = best.bjde.params[name].data
        copy_tied(registry, src=bjde, dst=bcde, networks=["p_z_given_x", "p_y_given_z", "lhat_y"])
        adam = fresh_adam()
        state.update(phase=_PHASES["main"], best_val=-np.inf, best_epoch=state["epoch"], bad=0,
                     main_start=state["epoch"])
        log.info("seed %d: pre-training finished after epoch %d", seed, state["epoch"])

    mode_tag = "conditional" if cfg.mode == "pretrain-then-conditional" else cfg.mode
    last_epoch = state["main_start"] + max_epochs
    while state["epoch"] < last_epoch and state["bad"] < cfg.patience:
        epoch = state["epoch"] + 1
        t0 = time.perf_counter()
        total, steps = 0.0, 0
        for j, b in enumerate(minibatches(split, cfg.batch_size, seed, epoch)):
            tape = Tape()
            noise = NoiseStream(seed, epoch, j, 1)
            w_l = n_l * per_pair / len(b.x_l)
            if mode_tag == "conditional":
                est = conditional_objective(bcde, b.x_l, b.y_l, noise, tape, weight=w_l)
            else:
                w_u = n_u * per_pair / len(b.x_u) if b.x_u is not None else 0.0
                est = hybrid_objective(bjde, bcde, registry, b.x_l, b.y_l, b.x_u, b.y_u, hybrid, noise, tape,
                                       weights=(w_l, w_u))
            grads = backward(tape, est.total)
            adam_step(adam, {k: -g for k, g in grads.items() if k in main_params}, main_params)
            total += est.value
            steps += 1
        val = _validation_bound(bcde, split, seed, cfg.eval_batch)
        state["epoch"] = epoch
        rows.append(LogRow(epoch, mode_tag, total / steps, val, time.perf_counter() - t0))
        if val > state["best_val"]:
            state.update(best_val=val, best_epoch=epoch, bad=0)
            checkpoint("best")
        else:
            state["bad"] += 1
        _write_log(paths.get("log"), rows)
        checkpoint("last")
        log.debug("seed %d epoch %d val %.4f", seed, epoch, val)

    if paths and os.path.exists(paths["best"]):
        best = load_checkpoint(paths["best"])
        bjde, bcde = best.bjde, best.bcde
    result = TrainResult(bjde, bcde, registry, mcfg, rows, int(state["best_epoch"]), float(state["best_val"]),
                         int(state["epoch"]), paths.get("best"))
    return result
