"""Variational bounds for the joint and conditional models and their hybrid blend.

Per-example bounds are returned as tensors of shape (n,); dataset-level
objectives are sums over examples. KL terms against Gaussian priors are
analytic unless ``analytic_kl=False`` asks for the single-sample log-ratio
form ``ln p(z) - ln q(z)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .distributions import (
    BernoulliParams,
    DiagGaussianParams,
    FixedVarGaussianParams,
    kl_diag_gaussians,
    log_prob_bernoulli,
    log_prob_fixed_var,
    log_prob_gaussian,
    merge_precision_weighted,
    sample_reparam,
    standard_normal,
    to_natural,
)
from .model import BcdeModel, BjdeModel, TyingRegistry, bjde_recognition, tying_penalty
from .tensor import Tape, Tensor, concat


@dataclass
class ObjectiveEstimate:
    """A scalar objective on a tape; ``parts`` holds named component values."""

    total: Tensor
    tape: Tape | None
    per_example: Tensor | None = None
    parts: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


@dataclass(frozen=True)
class HybridConfig:
    alpha: float = 0.5
    lam: float = 1e-2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


class NoiseStream:
    """Standard-normal draws keyed by term name, reproducible for a fixed seed.

    Keying by name (rather than by call order) lets objectives that include or
    omit terms still see identical noise on the terms they share.
    """

    def __init__(self, *seed: int):
        self.seed = tuple(int(s) for s in seed)

    def normal(self, key: str, shape) -> np.ndarray:
        rng = np.random.default_rng([*self.seed, zlib.crc32(key.encode())])
        return rng.standard_normal(shape)


def log_likelihood(head, target) -> Tensor:
    if isinstance(head, BernoulliParams):
        return log_prob_bernoulli(head, target)
    if isinstance(head, FixedVarGaussianParams):
        return log_prob_fixed_var(head, target)
    raise TypeError(f"not an observation model: {type(head).__name__}")


def _check_eps(eps, n, d, what):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n, d):
        raise ValueError(f"{what}: noise shape {eps.shape}, expected {(n, d)}")
    return eps


def _rows(a) -> int:
    return a.shape[0] if isinstance(a, (np.ndarray, Tensor)) else len(a)


def _estimate(per: Tensor, tape) -> ObjectiveEstimate:
    return ObjectiveEstimate(per.sum(), tape, per)


def bcde_posterior_and_prior(bcde: BcdeModel, tape, x, y) -> tuple[DiagGaussianParams, DiagGaussianParams]:
    prior = bcde.p_z_given_x(tape, x)
    if bcde.inference == "standard":
        q = bcde.q_z_given_xy(tape, concat([x, y], axis=-1))
    else:
        q = merge_precision_weighted([to_natural(prior), bcde.lhat_y(tape, y)])
    return q, prior


def elbo_conditional(bcde: BcdeModel, x, y, eps, tape: Tape | None = None, analytic_kl: bool = True):
    """C(x, y) = E_q[ln p(y|z)] - KL(q(z|x,y) || p(z|x)), one sample per example."""
    tape = Tape() if tape is None else tape
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    eps = _check_eps(eps, len(x), bcde.latent_dim, "elbo_conditional")
    q, prior = bcde_posterior_and_prior(bcde, tape, x, y)
    z = sample_reparam(q, eps)
    rec = log_likelihood(bcde.p_y_given_z(tape, z), y)
    if analytic_kl:
        per = rec - kl_diag_gaussians(q, prior)
    else:
        per = log_prob_gaussian(prior, z) + rec - log_prob_gaussian(q, z)
    return _estimate(per, tape)


def _joint_bound(q, z, recs, tape, analytic_kl):
    rec = recs[0]
    for r in recs[1:]:
        rec = rec + r
    if analytic_kl:
        return rec - kl_diag_gaussians(q, standard_normal(q.mean.shape))
    return log_prob_gaussian(standard_normal(q.mean.shape), z) + rec - log_prob_gaussian(q, z)


def elbo_joint_xy(bjde: BjdeModel, x, y, eps, tape: Tape | None = None, analytic_kl: bool = True):
    """J_xy(x, y): bound on ln p(x, y) with q'(z|x,y)."""
    tape = Tape() if tape is None else tape
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    eps = _check_eps(eps, len(x), bjde.latent_dim, "elbo_joint_xy")
    q = bjde_recognition(bjde, tape, x, y)
    z = sample_reparam(q, eps)
    recs = [log_likelihood(bjde.p_x_given_z(tape, z), x), log_likelihood(bjde.p_y_given_z(tape, z), y)]
    return _estimate(_joint_bound(q, z, recs, tape, analytic_kl), tape)


def elbo_marginal_x(bjde: BjdeModel, x, eps, tape: Tape | None = None, analytic_kl: bool = True):
    """J_x(x): bound on ln p(x) with q'(z|x)."""
    tape = Tape() if tape is None else tape
    x = np.asarray(x, dtype=np.float64)
    eps = _check_eps(eps, len(x), bjde.latent_dim, "elbo_marginal_x")
    q = bjde_recognition(bjde, tape, x=x)
    z = sample_reparam(q, eps)
    recs = [log_likelihood(bjde.p_x_given_z(tape, z), x)]
    return _estimate(_joint_bound(q, z, recs, tape, analytic_kl), tape)


def elbo_marginal_y(bjde: BjdeModel, y, eps, tape: Tape | None = None, analytic_kl: bool = True):
    """J_y(y): bound on ln p(y) with q'(z|y) (prior-merged likelihood factor when factored)."""
    tape = Tape() if tape is None else tape
    y = np.asarray(y, dtype=np.float64)
    eps = _check_eps(eps, len(y), bjde.latent_dim, "elbo_marginal_y")
    q = bjde_recognition(bjde, tape, y=y)
    z = sample_reparam(q, eps)
    recs = [log_likelihood(bjde.p_y_given_z(tape, z), y)]
    return _estimate(_joint_bound(q, z, recs, tape, analytic_kl), tape)


class _Accumulator:
    def __init__(self, tape):
        self.tape = tape
        self.total = Tensor(0.0)
        self.parts: dict[str, float] = {}

    def add(self, name, weight, est_or_tensor):
        t = est_or_tensor.total if isinstance(est_or_tensor, ObjectiveEstimate) else est_or_tensor
        self.parts[name] = t.item()
        self.total = self.total + weight * t if weight != 1.0 else self.total + t

    def result(self):
        return ObjectiveEstimate(self.total, self.tape, None, self.parts)


def joint_objective(bjde: BjdeModel, X_u, Y_u, X_l, Y_l, noise: NoiseStream, tape: Tape | None = None):
    """J_x(X_u) + J_y(Y_u) + J_xy(X_l, Y_l); empty sets contribute zero."""
    tape = Tape() if tape is None else tape
    acc = _Accumulator(tape)
    d = bjde.latent_dim
    if X_u is not None and _rows(X_u):
        acc.add("jx_u", 1.0, elbo_marginal_x(bjde, X_u, noise.normal("x_u", (_rows(X_u), d)), tape))
    if Y_u is not None and _rows(Y_u):
        acc.add("jy_u", 1.0, elbo_marginal_y(bjde, Y_u, noise.normal("y_u", (_rows(Y_u), d)), tape))
    if X_l is not None and _rows(X_l):
        acc.add("jxy_l", 1.0, elbo_joint_xy(bjde, X_l, Y_l, noise.normal("xy_l", (_rows(X_l), d)), tape))
    return acc.result()


def hybrid_objective(
    bjde: BjdeModel,
    bcde: BcdeModel,
    registry: TyingRegistry,
    X_l,
    Y_l,
    X_u,
    Y_u,
    cfg: HybridConfig,
    noise: NoiseStream,
    tape: Tape | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
) -> ObjectiveEstimate:
    """Blended objective H with the constant of the parameter prior dropped.

    H = -penalty + J_x(X_u) + J_y(Y_u)
        + alpha * J_xy(X_l, Y_l) + (1 - alpha) * [J_x(X_l) + C(X_l, Y_l)]

    ``weights = (w_l, w_u)`` rescale the labeled and unlabeled sums, which
    turns minibatch sums into unbiased estimates of the dataset-level sums.
    Terms with zero weight are skipped.
    """
    tape = Tape() if tape is None else tape
    w_l, w_u = weights
    d = bjde.latent_dim
    acc = _Accumulator(tape)
    acc.add("penalty", -1.0, tying_penalty(registry, bjde, bcde, cfg.lam, tape))
    if X_u is not None and _rows(X_u):
        acc.add("jx_u", w_u, elbo_marginal_x(bjde, X_u, noise.normal("x_u", (_rows(X_u), d)), tape))
    if Y_u is not None and _rows(Y_u):
        acc.add("jy_u", w_u, elbo_marginal_y(bjde, Y_u, noise.normal("y_u", (_rows(Y_u), d)), tape))
    n_l = _rows(X_l)
    if n_l:
        if cfg.alpha > 0:
            eps = noise.normal("xy_l", (n_l, d))
            acc.add("jxy_l", w_l * cfg.alpha, elbo_joint_xy(bjde, X_l, Y_l, eps, tape))
        if cfg.alpha < 1:
            rest = w_l * (1.0 - cfg.alpha)
            acc.add("jx_l", rest, elbo_marginal_x(bjde, X_l, noise.normal("x_l", (n_l, d)), tape))
            acc.add("c_l", rest, elbo_conditional(bcde, X_l, Y_l, noise.normal("c_l", (n_l, d)), tape))
    return acc.result()


def factorized_hybrid_objective(
    bjde, bcde, registry, X_l, Y_l, X_u, Y_u, lam: float, noise: NoiseStream, tape: Tape | None = None
) -> ObjectiveEstimate:
    """-penalty + J_x(X_u) + J_y(Y_u) + J_x(X_l) + C(X_l, Y_l): labeled pairs split as p(x) p(y|x)."""
    tape = Tape() if tape is None else tape
    d = bjde.latent_dim
    total = -tying_penalty(registry, bjde, bcde, lam, tape)
    if _rows(X_u):
        total = total + elbo_marginal_x(bjde, X_u, noise.normal("x_u", (_rows(X_u), d)), tape).total
    if _rows(Y_u):
        total = total + elbo_marginal_y(bjde, Y_u, noise.normal("y_u", (_rows(Y_u), d)), tape).total
    n_l = _rows(X_l)
    if n_l:
        total = total + elbo_marginal_x(bjde, X_l, noise.normal("x_l", (n_l, d)), tape).total
        total = total + elbo_conditional(bcde, X_l, Y_l, noise.normal("c_l", (n_l, d)), tape).total
    return ObjectiveEstimate(total, tape)


def conditional_objective(bcde, X_l, Y_l, noise: NoiseStream, tape=None, weight: float = 1.0):
    """weight * C(X_l, Y_l): the purely conditional training objective."""
    tape = Tape() if tape is None else tape
    est = elbo_conditional(bcde, X_l, Y_l, noise.normal("c_l", (_rows(X_l), bcde.latent_dim)), tape)
    acc = _Accumulator(tape)
    acc.add("c_l", weight, est)
    return acc.result()


def marginal_objective(bjde, X, Y, noise: NoiseStream, tape=None, weights=(1.0, 1.0)):
    """w_x * J_x(X) + w_y * J_y(Y): separate pre-training of the joint model on unpaired data."""
    tape = Tape() if tape is None else tape
    acc = _Accumulator(tape)
    d = bjde.latent_dim
    if X is not None and _rows(X):
        acc.add("jx", weights[0], elbo_marginal_x(bjde, X, noise.normal("x_u", (_rows(X), d)), tape))
    if Y is not None and _rows(Y):
        acc.add("jy", weights[1], elbo_marginal_y(bjde, Y, noise.normal("y_u", (_rows(Y), d)), tape))
    return acc.result()


def iw_log_weights(bcde: BcdeModel, x, y, eps) -> np.ndarray:
    """ln p(z_k|x) + ln p(y|z_k) - ln q(z_k|x,y) for eps of shape (K, n, d); returns (K, n)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    k, n, d = eps.shape
    if n != len(x) or d != bcde.latent_dim:
        raise ValueError(f"iw_bound: noise shape {eps.shape} does not fit batch {len(x)} / latent {bcde.latent_dim}")
    q, prior = bcde_posterior_and_prior(bcde, None, x, y)
    qm, qlv = q.mean.data, q.log_var.data
    pm, plv = prior.mean.data, prior.log_var.data
    out = np.empty((k, n))
    # chunk the K axis so that at most ~20k rows go through the decoder at once
    step = max(1, 20000 // max(n, 1))
    for lo in range(0, k, step):
        e = eps[lo : lo + step]
        kk = len(e)
        z = qm + np.exp(0.5 * qlv) * e
        flat = z.reshape(kk * n, d)
        rec = log_likelihood(bcde.p_y_given_z(None, flat), np.tile(y, (kk, 1))).data.reshape(kk, n)
        lp = log_prob_gaussian(DiagGaussianParams(pm, plv), z).data
        lq = log_prob_gaussian(DiagGaussianParams(qm, qlv), z).data
        out[lo : lo + kk] = lp + rec - lq
    return out


def iw_bound(bcde: BcdeModel, x, y, K: int, eps=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Importance-weighted bound on ln p(y|x) with K samples, per example.

    Noise is taken from ``eps`` (shape (K, n, d)) or drawn from ``rng``.
    """
    if K < 1:
        raise ValueError(f"iw_bound: K must be at least 1, got {K}")
    n = len(x)
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal((K, n, bcde.latent_dim))
    elif np.shape(eps)[0] != K:
        raise ValueError(f"iw_bound: got {np.shape(eps)[0]} noise samples for K={K}")
    return _kernels.logmeanexp(iw_log_weights(bcde, x, y, eps))
