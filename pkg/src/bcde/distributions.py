"""Gaussian and Bernoulli densities on tensors.

All functions treat the last axis as the event dimension and sum over it, so a
batch of shape (n, d) yields per-row values of shape (n,). Parameters may be
tape-attached tensors; results are differentiable through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .tensor import Tensor, ShapeError, apply_primitive, as_tensor, exp, log, softplus, square

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_BOUNDS = (-8.0, 8.0)


@dataclass
class DiagGaussianParams:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean, self.log_var = as_tensor(self.mean), as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    def clamped(self, lo=LOG_VAR_BOUNDS[0], hi=LOG_VAR_BOUNDS[1]) -> DiagGaussianParams:
        return DiagGaussianParams(self.mean, apply_primitive("clip", [self.log_var], lo=lo, hi=hi))


@dataclass
class BernoulliParams:
    logit: Tensor

    def __post_init__(self):
        self.logit = as_tensor(self.logit)

    @property
    def mean(self) -> np.ndarray:
        return _kernels.sigmoid(self.logit.data)


@dataclass
class GaussianNatParams:
    """Diagonal Gaussian factor in natural form: precision and precision-weighted mean."""

    prec: Tensor
    pwm: Tensor

    def __post_init__(self):
        self.prec, self.pwm = as_tensor(self.prec), as_tensor(self.pwm)
        if self.prec.shape != self.pwm.shape:
            raise ShapeError(f"prec {self.prec.shape} and pwm {self.pwm.shape} differ")
        if np.any(self.prec.data < 0):
            raise ValueError("precision must be nonnegative")


@dataclass
class FixedVarGaussianParams:
    mean: Tensor
    var: float = 0.1

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")


def _check_dims(op, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{op}: dimension mismatch {a.shape} vs {b.shape}")


def standard_normal(shape) -> DiagGaussianParams:
    return DiagGaussianParams(np.zeros(shape), np.zeros(shape))


def sample_reparam(g: DiagGaussianParams, eps) -> Tensor:
    """z = mean + exp(log_var / 2) * eps."""
    eps = np.asarray(eps, dtype=np.float64)
    _check_dims("sample_reparam", g.mean, eps)
    return g.mean + exp(0.5 * g.log_var) * eps


def log_prob_gaussian(g: DiagGaussianParams, z) -> Tensor:
    z = as_tensor(z)
    _check_dims("log_prob_gaussian", g.mean, z)
    quad = square(z - g.mean) * exp(-g.log_var)
    return (-0.5 * LOG_2PI - 0.5 * g.log_var - 0.5 * quad).sum(axes=-1)


def log_prob_fixed_var(g: FixedVarGaussianParams, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    _check_dims("log_prob_fixed_var", g.mean, y)
    const = -0.5 * (LOG_2PI + math.log(g.var))
    return (const - (0.5 / g.var) * square(g.mean - y)).sum(axes=-1)


def log_prob_bernoulli(b: BernoulliParams, y) -> Tensor:
    """sum(y * logit - softplus(logit)); y may be fractional in [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    _check_dims("log_prob_bernoulli", b.logit, y)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("log_prob_bernoulli: targets must lie in [0, 1]")
    return (b.logit * y - softplus(b.logit)).sum(axes=-1)


def kl_diag_gaussians(q: DiagGaussianParams, p: DiagGaussianParams) -> Tensor:
    """Analytic KL(q || p) between diagonal Gaussians."""
    _check_dims("kl_diag_gaussians", q.mean, p.mean)
    ratio = (exp(q.log_var) + square(q.mean - p.mean)) * exp(-p.log_var)
    return (0.5 * (p.log_var - q.log_var + ratio - 1.0)).sum(axes=-1)


def to_natural(g: DiagGaussianParams) -> GaussianNatParams:
    prec = exp(-g.log_var)
    return GaussianNatParams(prec, prec * g.mean)


def merge_precision_weighted(terms: Sequence[GaussianNatParams]) -> DiagGaussianParams:
    """Multiply Gaussian factors by adding their natural parameters."""
    if not terms:
        raise ValueError("merge_precision_weighted: no terms")
    prec, pwm = terms[0].prec, terms[0].pwm
    for t in terms[1:]:
        _check_dims("merge_precision_weighted", prec, t.prec)
        prec = prec + t.prec
        pwm = pwm + t.pwm
    if np.any(prec.data <= 0):
        raise ValueError("merge_precision_weighted: total precision is zero in some dimension")
    log_var = -log(prec)
    return DiagGaussianParams(pwm * exp(log_var), log_var)
