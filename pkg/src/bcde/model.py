"""BJDE and BCDE network collections and the soft-tying registry.

The joint model (BJDE) generates x and y independently from a shared latent
z ~ N(0, I). The conditional model (BCDE) routes x -> z -> y; its decoder
sees only z. In ``factored`` inference the x,y recognition model is replaced
by a Gaussian likelihood factor for y that is merged with q(z|x) (or with the
prior) in natural-parameter space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .distributions import (
    BernoulliParams,
    DiagGaussianParams,
    FixedVarGaussianParams,
    GaussianNatParams,
    merge_precision_weighted,
    to_natural,
)
from .tensor import Parameter, Tape, Tensor, concat, relu, softplus, tanh, watch

HEAD_OUTPUTS = {
    "diag-gaussian": ("mean", "log_var"),
    "natural-gaussian": ("prec", "pwm"),
    "bernoulli": ("logit",),
    "fixed-var-gaussian": ("mean",),
}
ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    head: str
    output_dim: int
    activation: str = "relu"
    decoder_var: float = 0.1

    def __post_init__(self):
        if self.head not in HEAD_OUTPUTS:
            raise ValueError(f"unknown head kind {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"layer sizes must be positive: {self}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Multilayer perceptron with a distribution-valued head."""

    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator):
        self.name = name
        self.spec = spec
        self.layers: list[tuple[Parameter, Parameter]] = []
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden_widths):
            w = Parameter(f"{name}/layer{i}/weight", glorot(rng, fan_in, width))
            b = Parameter(f"{name}/layer{i}/bias", np.zeros(width))
            self.layers.append((w, b))
            fan_in = width
        self.heads: dict[str, tuple[Parameter, Parameter]] = {}
        for out in HEAD_OUTPUTS[spec.head]:
            w = Parameter(f"{name}/{out}/weight", glorot(rng, fan_in, spec.output_dim))
            b = Parameter(f"{name}/{out}/bias", np.zeros(spec.output_dim))
            self.heads[out] = (w, b)

    @property
    def params(self) -> list[Parameter]:
        out = [p for pair in self.layers for p in pair]
        out.extend(p for pair in self.heads.values() for p in pair)
        return out

    def features(self, tape: Tape | None, x) -> Tensor:
        act = ACTIVATIONS[self.spec.activation]
        h = x
        for w, b in self.layers:
            h = act(h @ watch(tape, w) + watch(tape, b))
        return h

    def __call__(self, tape: Tape | None, x):
        h = self.features(tape, x)
        out = {k: h @ watch(tape, w) + watch(tape, b) for k, (w, b) in self.heads.items()}
        head = self.spec.head
        if head == "diag-gaussian":
            return DiagGaussianParams(out["mean"], out["log_var"]).clamped()
        if head == "natural-gaussian":
            # softplus keeps the precision nonnegative, so the factor is bounded
            return GaussianNatParams(softplus(out["prec"]), out["pwm"])
        if head == "bernoulli":
            return BernoulliParams(out["logit"])
        return FixedVarGaussianParams(out["mean"], self.spec.decoder_var)


@dataclass
class ModelConfig:
    x_dim: int
    y_dim: int
    latent_dim: int = 50
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    inference: str = "standard"
    x_decoder: str = "bernoulli"
    y_decoder: str = "bernoulli"
    decoder_var: float = 0.1
    tie_init: bool = True
    seed: int = 0


class _NetworkCollection:
    prefix = ""

    def __init__(self, inference: str, nets: dict[str, Mlp]):
        self.inference = inference
        self.nets = nets

    def __getattr__(self, key):
        nets = self.__dict__.get("nets", {})
        if key in nets:
            return nets[key]
        raise AttributeError(key)

    def __contains__(self, key) -> bool:
        return key in self.nets

    @property
    def params(self) -> dict[str, Parameter]:
        return {p.name: p for net in self.nets.values() for p in net.params}

    @property
    def latent_dim(self) -> int:
        return self._latent_dim

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())


class BjdeModel(_NetworkCollection):
    prefix = "bjde"

    def __init__(self, inference, nets, latent_dim):
        super().__init__(inference, nets)
        self._latent_dim = latent_dim
        expected = {"q_z_given_x", "p_x_given_z", "p_y_given_z"}
        expected |= {"lhat_y"} if inference == "factored" else {"q_z_given_xy", "q_z_given_y"}
        if set(nets) != expected:
            raise ValueError(f"BJDE ({inference}) needs networks {sorted(expected)}, got {sorted(nets)}")


class BcdeModel(_NetworkCollection):
    prefix = "bcde"

    def __init__(self, inference, nets, latent_dim):
        super().__init__(inference, nets)
        self._latent_dim = latent_dim
        expected = {"p_z_given_x", "p_y_given_z"}
        expected |= {"lhat_y"} if inference == "factored" else {"q_z_given_xy"}
        if set(nets) != expected:
            raise ValueError(f"BCDE ({inference}) needs networks {sorted(expected)}, got {sorted(nets)}")
        if nets["p_y_given_z"].spec.input_dim != latent_dim:
            raise ValueError("the BCDE decoder must read only the latent z")


# BCDE network -> BJDE network it is softly tied to
TIED_NETWORKS = {
    "standard": (
        ("q_z_given_xy", "q_z_given_xy"),
        ("p_z_given_x", "q_z_given_x"),
        ("p_y_given_z", "p_y_given_z"),
    ),
    "factored": (
        ("lhat_y", "lhat_y"),
        ("p_z_given_x", "q_z_given_x"),
        ("p_y_given_z", "p_y_given_z"),
    ),
}


@dataclass
class TyingRegistry:
    """Parameter-level correspondence between BCDE (gamma) and BJDE (gamma') networks."""

    mode: str
    network_pairs: tuple[tuple[str, str], ...]
    pairs: list[tuple[str, str]] = field(default_factory=list)

    @classmethod
    def for_models(cls, bjde: BjdeModel, bcde: BcdeModel) -> TyingRegistry:
        if bjde.inference != bcde.inference:
            raise ValueError("BJDE and BCDE use different inference modes")
        mode = bcde.inference
        reg = cls(mode, TIED_NETWORKS[mode])
        for cnet, jnet in reg.network_pairs:
            cparams, jparams = bcde.nets[cnet].params, bjde.nets[jnet].params
            if len(cparams) != len(jparams):
                raise ValueError(f"tied networks {cnet} / {jnet} differ in structure")
            for cp, jp in zip(cparams, jparams):
                if cp.shape != jp.shape:
                    raise ValueError(f"tied parameters {cp.name} {cp.shape} / {jp.name} {jp.shape}")
                reg.pairs.append((cp.name, jp.name))
        return reg

    def distance(self, bjde: BjdeModel, bcde: BcdeModel) -> float:
        """Sum of squared differences over all tied parameters."""
        cp, jp = bcde.params, bjde.params
        return float(sum(np.sum((cp[c].data - jp[j].data) ** 2) for c, j in self.pairs))


def _nets(prefix, names_specs, rng_seed):
    nets = {}
    for i, (key, spec) in enumerate(names_specs):
        nets[key] = Mlp(f"{prefix}/{key}", spec, np.random.default_rng([rng_seed, i]))
    return nets


def build_models(cfg: ModelConfig) -> tuple[BjdeModel, BcdeModel, TyingRegistry]:
    if cfg.inference not in TIED_NETWORKS:
        raise ValueError(f"inference must be 'standard' or 'factored', got {cfg.inference!r}")
    if min(cfg.x_dim, cfg.y_dim, cfg.latent_dim) < 1:
        raise ValueError(f"inconsistent dimensions x={cfg.x_dim} y={cfg.y_dim} z={cfg.latent_dim}")
    hid = tuple(cfg.hidden)
    d = cfg.latent_dim

    def spec(n_in, head, n_out):
        return MlpSpec(n_in, hid, head, n_out, cfg.activation, cfg.decoder_var)

    x_dec = "bernoulli" if cfg.x_decoder == "bernoulli" else "fixed-var-gaussian"
    y_dec = "bernoulli" if cfg.y_decoder == "bernoulli" else "fixed-var-gaussian"
    joint = [
        ("q_z_given_x", spec(cfg.x_dim, "diag-gaussian", d)),
        ("p_x_given_z", spec(d, x_dec, cfg.x_dim)),
        ("p_y_given_z", spec(d, y_dec, cfg.y_dim)),
    ]
    cond = [
        ("p_z_given_x", spec(cfg.x_dim, "diag-gaussian", d)),
        ("p_y_given_z", spec(d, y_dec, cfg.y_dim)),
    ]
    if cfg.inference == "standard":
        joint += [
            ("q_z_given_xy", spec(cfg.x_dim + cfg.y_dim, "diag-gaussian", d)),
            ("q_z_given_y", spec(cfg.y_dim, "diag-gaussian", d)),
        ]
        cond.append(("q_z_given_xy", spec(cfg.x_dim + cfg.y_dim, "diag-gaussian", d)))
    else:
        joint.append(("lhat_y", spec(cfg.y_dim, "natural-gaussian", d)))
        cond.append(("lhat_y", spec(cfg.y_dim, "natural-gaussian", d)))

    bjde = BjdeModel(cfg.inference, _nets("bjde", joint, [cfg.seed, 0]), d)
    bcde = BcdeModel(cfg.inference, _nets("bcde", cond, [cfg.seed, 1]), d)
    registry = TyingRegistry.for_models(bjde, bcde)
    if cfg.tie_init:
        copy_tied(registry, src=bjde, dst=bcde)
    return bjde, bcde, registry


def copy_tied(registry: TyingRegistry, src: BjdeModel, dst: BcdeModel, networks=None) -> None:
    """Copy BJDE values into their BCDE counterparts (optionally only some networks)."""
    sp, dp = src.params, dst.params
    allowed = None if networks is None else {f"bcde/{n}/" for n in networks}
    for c, j in registry.pairs:
        if allowed is None or any(c.startswith(a) for a in allowed):
            dp[c].data = sp[j].data.copy()


def tying_penalty(
    registry: TyingRegistry, bjde: BjdeModel, bcde: BcdeModel, lam: float, tape: Tape | None = None
) -> Tensor:
    """(lam / 2) * sum of squared distances between tied parameters."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    cp, jp = bcde.params, bjde.params
    total = Tensor(0.0)
    for c, j in registry.pairs:
        if cp[c].shape != jp[j].shape:
            raise ValueError(f"shape mismatch in tied pair {c} / {j}")
        diff = watch(tape, cp[c]) - watch(tape, jp[j])
        total = total + (diff * diff).sum()
    return (0.5 * lam) * total


def _unit_prior_natural(shape) -> GaussianNatParams:
    return GaussianNatParams(np.ones(shape), np.zeros(shape))


def bcde_recognition(bcde: BcdeModel, tape: Tape | None, x, y) -> DiagGaussianParams:
    """q(z|x,y) of the conditional model."""
    if bcde.inference == "standard":
        return bcde.q_z_given_xy(tape, concat([x, y], axis=-1))
    prior = bcde.p_z_given_x(tape, x)
    return merge_precision_weighted([to_natural(prior), bcde.lhat_y(tape, y)])


def bjde_recognition(bjde: BjdeModel, tape: Tape | None, x=None, y=None) -> DiagGaussianParams:
    """q'(z|x), q'(z|y) or q'(z|x,y) of the joint model, depending on what is observed."""
    if x is None and y is None:
        raise ValueError("bjde_recognition needs x, y or both")
    if y is None:
        return bjde.q_z_given_x(tape, x)
    if bjde.inference == "standard":
        if x is None:
            return bjde.q_z_given_y(tape, y)
        return bjde.q_z_given_xy(tape, concat([x, y], axis=-1))
    lhat = bjde.lhat_y(tape, y)
    if x is None:
        return merge_precision_weighted([_unit_prior_natural(lhat.prec.shape), lhat])
    return merge_precision_weighted([to_natural(bjde.q_z_given_x(tape, x)), lhat])
