"""Self-checks: gradient checks, closed-form and quadrature oracles, algebraic identities.

The oracles here are computed by routes that avoid the library code they
check. A frozen model with a one-dimensional latent and affine Gaussian
networks makes every marginal a one-dimensional integral, which Gauss-Hermite
quadrature evaluates to near machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import distributions
from .distributions import DiagGaussianParams, GaussianNatParams, merge_precision_weighted
from .model import ModelConfig, build_models
from .objectives import (
    HybridConfig,
    NoiseStream,
    elbo_conditional,
    elbo_joint_xy,
    elbo_marginal_x,
    elbo_marginal_y,
    factorized_hybrid_objective,
    hybrid_objective,
)
from .tensor import grad_check

GH_NODES = 64


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


# -- closed-form and quadrature oracles ------------------------------------------


def conjugate_posterior(prior_mean, prior_var, lik_prec, lik_pwm):
    """Gaussian prior times Gaussian likelihood factor, in mean/variance (gain) form.

    The factor is exp(pwm * z - prec * z**2 / 2), i.e. an observation of z
    with value pwm / prec and noise variance 1 / prec. Zero precision leaves
    the prior unchanged.
    """
    prior_mean, prior_var = np.asarray(prior_mean, float), np.asarray(prior_var, float)
    lik_prec, lik_pwm = np.asarray(lik_prec, float), np.asarray(lik_pwm, float)
    informative = lik_prec > 0
    safe = np.where(informative, lik_prec, 1.0)
    obs = lik_pwm / safe
    gain = np.where(informative, prior_var * safe / (1.0 + prior_var * safe), 0.0)
    mean = prior_mean + gain * np.where(informative, obs - prior_mean, 0.0)
    var = (1.0 - gain) * prior_var
    return mean, var


def kl_monte_carlo(mq, vq, mp, vp, n: int, rng: np.random.Generator):
    """Sample estimate of KL(N(mq, vq) || N(mp, vp)) for 1-D arrays of pairs; returns (mean, stderr)."""
    z = mq + np.sqrt(vq) * rng.standard_normal((n, len(mq)))
    lq = -0.5 * (np.log(2 * np.pi * vq) + (z - mq) ** 2 / vq)
    lp = -0.5 * (np.log(2 * np.pi * vp) + (z - mp) ** 2 / vp)
    d = lq - lp
    return d.mean(axis=0), d.std(axis=0, ddof=1) / math.sqrt(n)


def _normal_logpdf(v, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (v - mean) ** 2 / var)


def _gh_log_integral(log_f, mean, var, nodes: int = GH_NODES):
    """ln of E[f(z)] for z ~ N(mean, var), with f given as its log; vectorized over leading axes."""
    t, w = np.polynomial.hermite.hermgauss(nodes)
    z = np.asarray(mean)[..., None] + np.sqrt(2.0 * np.asarray(var))[..., None] * t
    a = log_f(z) + np.log(w) - 0.5 * math.log(math.pi)
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


@dataclass
class LinearGaussianOracle:
    """Frozen 1-D-latent models with affine networks, and their exact marginals.

    Coefficients are read off the networks once; quadrature uses only these
    numbers and closed-form densities.
    """

    bjde: object
    bcde: object
    decoder_var: float

    @staticmethod
    def _affine(net, out):
        w, b = net.heads[out]
        return float(w.data[0, 0]), float(b.data[0])

    def _dec(self, net, z):
        a, b = self._affine(net, "mean")
        return a * z + b

    def log_px(self, x):
        x = np.asarray(x, float).reshape(-1)
        dec = self.bjde.nets["p_x_given_z"]
        return _gh_log_integral(lambda z: _normal_logpdf(x[:, None], self._dec(dec, z), self.decoder_var),
                                np.zeros_like(x), np.ones_like(x))

    def log_pxy(self, x, y):
        x, y = np.asarray(x, float).reshape(-1), np.asarray(y, float).reshape(-1)
        dx, dy = self.bjde.nets["p_x_given_z"], self.bjde.nets["p_y_given_z"]

        def log_f(z):
            return (_normal_logpdf(x[:, None], self._dec(dx, z), self.decoder_var)
                    + _normal_logpdf(y[:, None], self._dec(dy, z), self.decoder_var))

        return _gh_log_integral(log_f, np.zeros_like(x), np.ones_like(x))

    def log_py_given_x(self, x, y):
        x, y = np.asarray(x, float).reshape(-1), np.asarray(y, float).reshape(-1)
        prior = self.bcde.nets["p_z_given_x"]
        am, bm = self._affine(prior, "mean")
        av, bv = self._affine(prior, "log_var")
        dy = self.bcde.nets["p_y_given_z"]
        return _gh_log_integral(lambda z: _normal_logpdf(y[:, None], self._dec(dy, z), self.decoder_var),
                                am * x + bm, np.exp(av * x + bv))


def frozen_linear_gaussian(seed: int = 0, inference: str = "standard", decoder_var: float = 0.5):
    """1-D x, y and z; every network affine with coefficients drawn from ``seed``.

    Log-variance slopes are kept small so no head reaches the clamp.
    """
    cfg = ModelConfig(x_dim=1, y_dim=1, latent_dim=1, hidden=(), inference=inference, x_decoder="gaussian",
                      y_decoder="gaussian", decoder_var=decoder_var, tie_init=False, seed=seed)
    bjde, bcde, _ = build_models(cfg)
    rng = np.random.default_rng([seed, 0x1D])
    for p in list(bjde.params.values()) + list(bcde.params.values()):
        scale = 0.2 if "log_var" in p.name else 1.0
        p.data = scale * rng.uniform(-1.0, 1.0, size=p.shape)
    return LinearGaussianOracle(bjde, bcde, decoder_var)


def set_near_posterior(oracle: LinearGaussianOracle, mean_shift: float = 0.05, var_scale: float = 1.3) -> None:
    """Make the BCDE's q(z|x,y) the exact posterior, shifted and over-dispersed.

    Fixes the prior's log-variance slope at zero first, so that the exact
    posterior has constant variance and a mean affine in (x, y).
    """
    prior = oracle.bcde.nets["p_z_given_x"]
    prior.heads["log_var"][0].data = np.zeros((1, 1))
    am, bm = oracle._affine(prior, "mean")
    v = math.exp(oracle._affine(prior, "log_var")[1])
    a, b = oracle._affine(oracle.bcde.nets["p_y_given_z"], "mean")
    s = oracle.decoder_var
    prec = 1.0 / v + a * a / s
    w_mean, b_mean = oracle.bcde.nets["q_z_given_xy"].heads["mean"]
    w_mean.data = np.array([[am / v / prec], [a / s / prec]])
    b_mean.data = np.array([(bm / v - a * b / s) / prec + mean_shift])
    w_lv, b_lv = oracle.bcde.nets["q_z_given_xy"].heads["log_var"]
    w_lv.data = np.zeros((2, 1))
    b_lv.data = np.array([math.log(var_scale / prec)])


# -- checks ----------------------------------------------------------------------


def check_kl_nonnegative(seed: int = 0, n: int = 2000) -> CheckResult:
    rng = np.random.default_rng([seed, 0x41])
    shape = (n, 3)
    q = DiagGaussianParams(rng.normal(size=shape), rng.uniform(-3, 3, size=shape))
    p = DiagGaussianParams(rng.normal(size=shape), rng.uniform(-3, 3, size=shape))
    kl = distributions.kl_diag_gaussians(q, p).data
    self_kl = distributions.kl_diag_gaussians(q, q).data
    ok = bool(np.all(kl >= -1e-12) and np.all(np.abs(self_kl) <= 1e-12))
    return CheckResult("kl-nonnegativity", ok, f"min KL {kl.min():.3e}, max |KL(q||q)| {np.abs(self_kl).max():.1e}")


def check_conjugate_merge(seed: int = 0, n: int = 1000) -> CheckResult:
    rng = np.random.default_rng([seed, 0x4D])
    pm, pv = rng.normal(size=n), np.exp(rng.uniform(-3, 3, size=n))
    lp = np.exp(rng.uniform(-4, 4, size=n))
    lp[: n // 10] = 0.0
    pwm = rng.normal(size=n) * lp
    got = merge_precision_weighted(
        [GaussianNatParams(1.0 / pv, pm / pv), GaussianNatParams(lp, pwm)]
    )
    mean, var = conjugate_posterior(pm, pv, lp, pwm)
    err = max(np.abs(got.mean.data - mean).max(), np.abs(np.exp(got.log_var.data) - var).max())
    return CheckResult("conjugate-merge", bool(err <= 1e-10), f"max abs error {err:.2e} over {n} pairs")


def check_quadrature_bounds(seed: int = 0, draws: int = 20000, n_points: int = 4) -> CheckResult:
    """Monte Carlo means of J_x, C, J_xy stay below quadrature log-likelihoods (within 3 stderr)."""
    oracle = frozen_linear_gaussian(seed)
    rng = np.random.default_rng([seed, 0x51])
    x = rng.normal(size=(n_points, 1))
    y = rng.normal(size=(n_points, 1))
    worst = -np.inf
    for name, fn, truth in (
        ("J_x", lambda e, xi, yi: elbo_marginal_x(oracle.bjde, xi, e), oracle.log_px(x)),
        ("C", lambda e, xi, yi: elbo_conditional(oracle.bcde, xi, yi, e), oracle.log_py_given_x(x, y)),
        ("J_xy", lambda e, xi, yi: elbo_joint_xy(oracle.bjde, xi, yi, e), oracle.log_pxy(x, y)),
    ):
        for i in range(n_points):
            xi = np.repeat(x[i : i + 1], draws, axis=0)
            yi = np.repeat(y[i : i + 1], draws, axis=0)
            vals = fn(rng.standard_normal((draws, 1)), xi, yi).per_example.data
            se = vals.std(ddof=1) / math.sqrt(draws)
            worst = max(worst, (vals.mean() - truth[i]) / se)
            if vals.mean() > truth[i] + 3 * se:
                return CheckResult("quadrature-elbo", False, f"{name} exceeds ln-likelihood at point {i}")
    return CheckResult("quadrature-elbo", True, f"largest (bound - truth) / stderr {worst:.2f}")


def _tiny_models(seed: int, inference: str):
    cfg = ModelConfig(x_dim=3, y_dim=2, latent_dim=2, hidden=(4,), activation="tanh", inference=inference,
                      tie_init=False, seed=seed)
    bjde, bcde, registry = build_models(cfg)
    rng = np.random.default_rng([seed, 0x7E])
    for p in list(bjde.params.values()) + list(bcde.params.values()):
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    x = (rng.random((5, 3)) < 0.5).astype(float)
    y = (rng.random((5, 2)) < 0.5).astype(float)
    return bjde, bcde, registry, x, y


def check_alpha_linearity(seed: int = 0) -> CheckResult:
    """H(alpha) is affine in alpha and H(0) equals the factorized objective."""
    worst = 0.0
    for inference in ("standard", "factored"):
        bjde, bcde, registry, x, y = _tiny_models(seed, inference)
        xu, yu = x[::-1].copy(), y[1:].copy()
        noise = NoiseStream(seed, 3)
        h = {a: hybrid_objective(bjde, bcde, registry, x, y, xu, yu, HybridConfig(a, 0.3), noise).value
             for a in (0.0, 0.3, 1.0)}
        worst = max(worst, abs(h[0.3] - (0.7 * h[0.0] + 0.3 * h[1.0])) / max(1.0, abs(h[0.3])))
        ref = factorized_hybrid_objective(bjde, bcde, registry, x, y, xu, yu, 0.3, noise).value
        worst = max(worst, abs(h[0.0] - ref) / max(1.0, abs(ref)))
    return CheckResult("alpha-linearity", worst <= 1e-10, f"max relative deviation {worst:.1e}")


def network_grad_checks(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """Gradient check of every network head (through a fixed random projection) and every objective."""
    out = []
    for inference in ("standard", "factored"):
        bjde, bcde, registry, x, y = _tiny_models(seed, inference)
        rng = np.random.default_rng([seed, 0x6C])
        for model in (bjde, bcde):
            for key, net in model.nets.items():
                inp = {"q_z_given_xy": np.hstack([x, y]), "q_z_given_x": x, "p_z_given_x": x,
                       "q_z_given_y": y, "lhat_y": y}.get(key, rng.normal(size=(5, model.latent_dim)))
                proj = {k: rng.normal(size=(5, net.spec.output_dim)) for k in ("a", "b")}

                def f(tape, net=net, inp=inp, proj=proj):
                    head = net(tape, inp)
                    fields = [v for v in vars(head).values() if hasattr(v, "data") and hasattr(v, "shape")]
                    total = (fields[0] * proj["a"]).sum()
                    if len(fields) > 1:
                        total = total + (fields[1] * proj["b"]).sum()
                    return total

                rep = grad_check(f, net.params, tol=tol)
                out.append(CheckResult(f"grad[{inference}] {net.name}", rep.ok, f"max rel error {rep.worst:.1e}"))
        noise = NoiseStream(seed, 9)
        d = bjde.latent_dim
        xu, yu = x[::-1].copy(), y[1:].copy()
        objectives = {
            "C": (lambda t: elbo_conditional(bcde, x, y, noise.normal("c", (5, d)), t).total, bcde.params),
            "J_x": (lambda t: elbo_marginal_x(bjde, x, noise.normal("x", (5, d)), t).total, bjde.params),
            "J_y": (lambda t: elbo_marginal_y(bjde, y, noise.normal("y", (5, d)), t).total, bjde.params),
            "J_xy": (lambda t: elbo_joint_xy(bjde, x, y, noise.normal("xy", (5, d)), t).total, bjde.params),
            "H": (lambda t: hybrid_objective(bjde, bcde, registry, x, y, xu, yu, HybridConfig(0.5, 0.7), noise,
                                             t).total, {**bjde.params, **bcde.params}),
        }
        for name, (f, params) in objectives.items():
            rep = grad_check(f, list(params.values()), tol=tol)
            out.append(CheckResult(f"grad[{inference}] objective {name}", rep.ok, f"max rel error {rep.worst:.1e}"))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    results = network_grad_checks(seed)
    results.append(check_conjugate_merge(seed))
    results.append(check_quadrature_bounds(seed))
    results.append(check_alpha_linearity(seed))
    results.append(check_kl_nonnegative(seed))
    return results
