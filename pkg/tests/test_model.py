import numpy as np
import pytest

from bcde.distributions import BernoulliParams, DiagGaussianParams, FixedVarGaussianParams
from bcde.model import (
    TIED_NETWORKS,
    Mlp,
    MlpSpec,
    ModelConfig,
    TyingRegistry,
    bcde_recognition,
    bjde_recognition,
    build_models,
    copy_tied,
    tying_penalty,
)
from bcde.tensor import Tape, backward

from conftest import tiny_models


def test_standard_network_sets():
    bjde, bcde, reg = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,)))
    assert set(bjde.nets) == {"q_z_given_x", "q_z_given_y", "q_z_given_xy", "p_x_given_z", "p_y_given_z"}
    assert set(bcde.nets) == {"p_z_given_x", "q_z_given_xy", "p_y_given_z"}
    assert reg.network_pairs == TIED_NETWORKS["standard"]


def test_factored_network_sets_and_names():
    bjde, bcde, reg = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,), inference="factored"))
    assert "lhat_y" in bjde.nets and "lhat_y" in bcde.nets
    assert "q_z_given_xy" not in bcde.nets and "q_z_given_y" not in bjde.nets
    assert any(name.startswith("bcde/lhat_y/") for name in bcde.params)
    assert ("bcde/lhat_y/prec/weight", "bjde/lhat_y/prec/weight") in reg.pairs


def test_table_correspondence():
    assert dict(TIED_NETWORKS["standard"]) == {
        "q_z_given_xy": "q_z_given_xy", "p_z_given_x": "q_z_given_x", "p_y_given_z": "p_y_given_z"}
    assert dict(TIED_NETWORKS["factored"]) == {
        "lhat_y": "lhat_y", "p_z_given_x": "q_z_given_x", "p_y_given_z": "p_y_given_z"}


def test_bcde_decoder_sees_only_latent():
    _, bcde, _ = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,)))
    assert bcde.p_y_given_z.spec.input_dim == 3


def test_head_kinds(rng):
    x = rng.normal(size=(2, 3))
    for head, cls in (("diag-gaussian", DiagGaussianParams), ("bernoulli", BernoulliParams),
                      ("fixed-var-gaussian", FixedVarGaussianParams)):
        out = Mlp("n", MlpSpec(3, (4,), head, 2), rng)(None, x)
        assert isinstance(out, cls)
    nat = Mlp("n", MlpSpec(3, (4,), "natural-gaussian", 2), rng)(None, x)
    assert np.all(nat.prec.data >= 0)


def test_bad_specs():
    with pytest.raises(ValueError):
        MlpSpec(3, (4,), "poisson", 2)
    with pytest.raises(ValueError):
        MlpSpec(0, (4,), "bernoulli", 2)
    with pytest.raises(ValueError):
        build_models(ModelConfig(x_dim=3, y_dim=2, inference="bogus"))


def test_tie_init_copies_and_penalty_zero():
    bjde, bcde, reg = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,), tie_init=True))
    assert reg.distance(bjde, bcde) == 0.0
    assert tying_penalty(reg, bjde, bcde, 1.0).item() == 0.0


def test_penalty_value_and_gradient(rng):
    bjde, bcde, reg = tiny_models(0)
    lam = 0.3
    want = 0.5 * lam * sum(np.sum((bcde.params[c].data - bjde.params[j].data) ** 2) for c, j in reg.pairs)
    tape = Tape()
    pen = tying_penalty(reg, bjde, bcde, lam, tape)
    assert abs(pen.item() - want) < 1e-12
    g = backward(tape, pen)
    c, j = reg.pairs[0]
    np.testing.assert_allclose(g[c], lam * (bcde.params[c].data - bjde.params[j].data))
    np.testing.assert_allclose(g[j], -g[c])
    with pytest.raises(ValueError):
        tying_penalty(reg, bjde, bcde, -1.0)


def test_registry_rejects_mismatched_structure():
    bjde, _, _ = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,)))
    _, bcde, _ = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(7,)))
    with pytest.raises(ValueError):
        TyingRegistry.for_models(bjde, bcde)


def test_copy_tied_subset():
    bjde, bcde, reg = tiny_models(1)
    before = {k: p.data.copy() for k, p in bcde.params.items()}
    copy_tied(reg, bjde, bcde, networks=["p_y_given_z"])
    for c, j in reg.pairs:
        if c.startswith("bcde/p_y_given_z/"):
            np.testing.assert_array_equal(bcde.params[c].data, bjde.params[j].data)
        else:
            np.testing.assert_array_equal(bcde.params[c].data, before[c])


def test_seeded_construction_is_deterministic():
    a = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,), seed=7))
    b = build_models(ModelConfig(x_dim=6, y_dim=4, latent_dim=3, hidden=(5,), seed=7))
    for k, p in a[0].params.items():
        np.testing.assert_array_equal(p.data, b[0].params[k].data)


@pytest.mark.parametrize("inference", ["standard", "factored"])
def test_recognition_shapes(inference, rng):
    bjde, bcde, _ = tiny_models(2, inference)
    x, y = rng.random((4, 3)), rng.random((4, 2))
    for q in (bjde_recognition(bjde, None, x=x), bjde_recognition(bjde, None, y=y),
              bjde_recognition(bjde, None, x, y), bcde_recognition(bcde, None, x, y)):
        assert q.mean.shape == (4, 2)
    with pytest.raises(ValueError):
        bjde_recognition(bjde, None)
