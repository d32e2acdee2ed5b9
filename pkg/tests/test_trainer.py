import os

import numpy as np
import pytest

from bcde.config import RunConfig
from bcde.container import FormatError
from bcde.data import TaskSplit, make_semi_split
from bcde.tensor import Parameter
from bcde.trainer import (
    LOG_HEADER,
    AdamState,
    adam_step,
    evaluate,
    iw_bound_dataset,
    load_checkpoint,
    read_log,
    save_checkpoint,
    train,
)


def _toy_split(n=240, n_l=40, val=40, seed=0):
    # two prototype images; x is the left half, y the right half
    rng = np.random.default_rng(seed)
    proto = (rng.random((2, 16)) < 0.5).astype(float)
    k = rng.integers(0, 2, size=n)
    flip = rng.random((n, 16)) < 0.05
    img = np.abs(proto[k] - flip)
    samples = TaskSplit(img[:, :8], img[:, 8:], labels=k)
    split = make_semi_split(samples, n_l, seed, val, n_u=120)
    split.test = samples.subset(np.arange(40))
    return split


def _cfg(**kw):
    base = dict(task="quadrant2", mode="hybrid", n_l=40, val_size=40, latent_dim=2, hidden=(8,),
                batch_size=16, patience=3, max_epochs=6, pretrain_max_epochs=3, eval_batch=50, lr=1e-2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def split():
    return _toy_split()


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = Parameter("p", np.array([1.0, -2.0]))
    state = AdamState()
    adam_step(state, {"p": np.zeros(2)}, {"p": p})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_matches_scalar_recurrence():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.999, 1e-8, 0.37
    p = Parameter("p", np.array([0.5]))
    state = AdamState(lr, b1, b2, eps)
    theta, m, v = 0.5, 0.0, 0.0
    for t in range(1, 26):
        adam_step(state, {"p": np.array([g])}, {"p": p})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert abs(p.data[0] - theta) < 1e-14


def test_adam_missing_gradient_counts_as_zero_and_symmetry():
    a, b = Parameter("a", np.ones(3)), Parameter("b", np.ones(3))
    c = Parameter("c", np.ones(3))
    state = AdamState()
    for _ in range(5):
        adam_step(state, {"a": np.full(3, 0.2), "b": np.full(3, 0.2)}, {"a": a, "b": b, "c": c})
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(c.data, np.ones(3))


def test_adam_shape_mismatch():
    p = Parameter("p", np.ones(3))
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"p": np.ones(2)}, {"p": p})


def test_adam_skips_frozen_parameters():
    p = Parameter("p", np.ones(2), trainable=False)
    adam_step(AdamState(), {"p": np.ones(2)}, {"p": p})
    np.testing.assert_array_equal(p.data, np.ones(2))


# -- training ------------------------------------------------------------------


def test_training_is_deterministic(tmp_path, split):
    a = train(_cfg(), split, 0, out_dir=str(tmp_path / "a"))
    b = train(_cfg(), split, 0, out_dir=str(tmp_path / "b"))
    assert [(r.epoch, r.train_objective, r.val_bound_iw1) for r in a.rows] == \
           [(r.epoch, r.train_objective, r.val_bound_iw1) for r in b.rows]
    with open(tmp_path / "a" / "best.ckpt", "rb") as fa, open(tmp_path / "b" / "best.ckpt", "rb") as fb:
        assert fa.read() == fb.read()


def test_log_format_and_best_checkpoint(tmp_path, split):
    res = train(_cfg(), split, 1, out_dir=str(tmp_path))
    with open(tmp_path / "train_log.csv") as fh:
        assert fh.readline().strip() == ",".join(LOG_HEADER)
    rows = read_log(tmp_path / "train_log.csv")
    assert len(rows) == res.epochs
    vals = [r.val_bound_iw1 for r in rows]
    assert res.best_val == max(vals)
    # the returned model is the best-validation one
    again = iw_bound_dataset(res.bcde, split.validation, 1, 1, 50).mean()
    assert abs(again - res.best_val) < 1e-12


def test_early_stopping_with_patience(tmp_path, split):
    res = train(_cfg(patience=1, max_epochs=40, lr=5e-2), split, 2)
    assert res.epochs < 40
    assert res.epochs - res.best_epoch == 1


def test_conditional_mode_leaves_joint_model_untouched(split):
    from bcde.model import build_models
    from bcde.trainer import model_config_for

    cfg = _cfg(mode="conditional", lam=0.0)
    fresh, _, _ = build_models(model_config_for(cfg, 8, 8, 3))
    res = train(cfg, split, 3)
    for k, p in res.bjde.params.items():
        np.testing.assert_array_equal(p.data, fresh.params[k].data)


def test_pretrain_mode_logs_both_phases(split):
    res = train(_cfg(mode="pretrain-then-conditional"), split, 4)
    modes = [r.mode for r in res.rows]
    assert modes[0] == "pretrain" and modes[-1] == "conditional"
    assert modes.count("pretrain") <= 3


def test_hybrid_factored_mode(split):
    res = train(_cfg(mode="hybrid-factored"), split, 5)
    assert res.registry.mode == "factored"
    assert "bcde/lhat_y/prec/weight" in res.bcde.params


def test_strong_tying_shrinks_distance(split):
    weak = train(_cfg(lam=1e-3), split, 6)
    strong = train(_cfg(lam=1e3), split, 6)
    assert strong.registry.distance(strong.bjde, strong.bcde) * 10 < weak.registry.distance(weak.bjde, weak.bcde)


def test_resume_matches_uninterrupted_run(tmp_path, split):
    full = train(_cfg(max_epochs=5, patience=10), split, 7, out_dir=str(tmp_path / "full"))
    train(_cfg(max_epochs=2, patience=10), split, 7, out_dir=str(tmp_path / "part"))
    resumed = train(_cfg(max_epochs=5, patience=10), split, 7, out_dir=str(tmp_path / "part"), resume=True)
    assert [r.val_bound_iw1 for r in resumed.rows] == [r.val_bound_iw1 for r in full.rows]
    for k, p in full.bcde.params.items():
        np.testing.assert_array_equal(p.data, resumed.bcde.params[k].data)


def test_empty_labeled_set_rejected(split):
    empty = make_semi_split(_toy_split().labeled, 1, 0, 0)
    empty.labeled = empty.labeled.subset(np.arange(0))
    with pytest.raises(ValueError):
        train(_cfg(), empty, 0)


# -- evaluation and checkpoints --------------------------------------------------


def test_evaluate_ordering_and_determinism(split):
    res = train(_cfg(), split, 8)
    e1 = evaluate(res.bcde, split.test, 1, seed=3)
    e100 = evaluate(res.bcde, split.test, 100, seed=3)
    assert e1.loss >= e100.loss
    again = evaluate(res.bcde, split.test, 100, seed=3)
    assert again.loss == e100.loss and again.stderr == e100.stderr


def test_evaluate_stderr_across_replicates(split):
    a, b = train(_cfg(), split, 9), train(_cfg(), split, 10)
    ev = evaluate([a.bcde, b.bcde], split.test, 5, seed=0)
    m = np.array(ev.per_model)
    assert ev.loss == pytest.approx(m.mean())
    assert ev.stderr == pytest.approx(m.std(ddof=1) / np.sqrt(2))


def test_evaluate_errors(split):
    res = train(_cfg(max_epochs=1), split, 0)
    with pytest.raises(ValueError):
        evaluate(res.bcde, split.test.subset(np.arange(0)), 10)
    with pytest.raises(ValueError):
        evaluate(res.bcde, split.test, 0)


@pytest.mark.parametrize("inference_mode", ["hybrid", "hybrid-factored"])
def test_checkpoint_round_trip(tmp_path, split, inference_mode):
    res = train(_cfg(mode=inference_mode, max_epochs=2), split, 11)
    path = str(tmp_path / "m.ckpt")
    state = AdamState(step=3)
    state.m["x"], state.v["x"] = np.ones(2), np.full(2, 2.0)
    save_checkpoint(path, res.bjde, res.bcde, res.model_cfg, state, {"epoch": 2})
    ck = load_checkpoint(path)
    for k, p in {**res.bjde.params, **res.bcde.params}.items():
        np.testing.assert_array_equal(p.data, {**ck.bjde.params, **ck.bcde.params}[k].data)
    assert ck.adam.step == 3 and ck.trainer["epoch"] == 2.0
    np.testing.assert_array_equal(ck.adam.v["x"], [2.0, 2.0])
    a = evaluate(res.bcde, split.test, 10, seed=1).loss
    b = evaluate(ck.bcde, split.test, 10, seed=1).loss
    assert a == b


def test_checkpoint_corruption(tmp_path, split):
    res = train(_cfg(max_epochs=1), split, 12)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, res.bjde, res.bcde, res.model_cfg)
    raw = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(b"XXXX2" + raw[5:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
    with open(path, "wb") as fh:
        fh.write(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    assert not os.path.exists(path + ".tmp")
