"""Conditional mean and scale models for gap times.

A model maps the history of a subject (previous gaps and the centered
covariate known at the start of every gap) to the conditional mean
``mu_ij`` and the scale ``V_ij`` of the next gap, so that

    E[Y_ij | past] = mu_ij(theta),   var[Y_ij | past] = sigma^2 V_ij(theta)^2.

Everything is evaluated on padded ``(n_subjects, n_events)`` arrays so that
a whole dataset can be processed with a handful of numpy operations. Entry
``(i, j)`` may only read ``gaps[i, :j]`` and ``covariates[i, :j + 1]``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ContractError, ModelDomainError

PARAM_NAMES = ("gamma0", "gamma1", "rho", "sigma2")


@dataclass(frozen=True)
class Parameters:
    """Regression vector ``theta = (gamma0, gamma1, rho)`` plus overdispersion."""

    gamma0: float
    gamma1: float
    rho: float
    sigma2: float = 1.0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ModelDomainError(f"sigma2 must be >= 0, got {self.sigma2}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.gamma0, self.gamma1, self.rho], dtype=float)

    @property
    def eta(self) -> np.ndarray:
        return np.array([self.gamma0, self.gamma1, self.rho, self.sigma2], dtype=float)

    @classmethod
    def from_theta(cls, theta, sigma2: float = 1.0) -> "Parameters":
        g0, g1, rho = (float(v) for v in theta)
        return cls(g0, g1, rho, float(sigma2))

    def replace(self, **kw) -> "Parameters":
        d = {k: getattr(self, k) for k in PARAM_NAMES}
        d.update(kw)
        return Parameters(**d)


@dataclass(frozen=True)
class History:
    """Past of one subject before gap ``j``.

    ``prior_gaps`` holds ``Y_1 .. Y_{j-1}``; ``covariates`` holds the centered
    covariate at the start of gaps ``1 .. j``.
    """

    prior_gaps: tuple = ()
    covariates: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "prior_gaps", tuple(float(v) for v in self.prior_gaps))
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))

    @property
    def j(self) -> int:
        return len(self.prior_gaps) + 1

    def check(self, j: int | None = None) -> int:
        if len(self.covariates) != len(self.prior_gaps) + 1:
            raise ContractError(
                f"history has {len(self.prior_gaps)} gaps but {len(self.covariates)} covariates; "
                "expected one more covariate than gaps"
            )
        if j is not None and j != self.j:
            raise ContractError(f"history is for event {self.j}, not {j}")
        return self.j


class ModelEval(NamedTuple):
    mean: np.ndarray  # (n, m)
    sd: np.ndarray  # (n, m)
    dmean: np.ndarray  # (n, m, p)
    dsd: np.ndarray  # (n, m, p)
    d2mean: np.ndarray | None  # (n, m, p, p)


# ---------------------------------------------------------------------------
# f_j(rho) = rho / (rho (j - 1) + 1 - rho)


def _f_denominator(j, rho):
    return rho * (np.asarray(j) - 2.0) + 1.0


def f_rho(j: int, rho: float) -> float:
    """Serial-dependence weight ``rho / (1 + rho (j - 2))``."""
    den = rho * (j - 2) + 1.0
    if den == 0.0:
        raise ModelDomainError(f"f_j(rho) undefined: zero denominator at j={j}, rho={rho}")
    return rho / den


def f_rho_derivative(j: int, rho: float) -> float:
    den = rho * (j - 2) + 1.0
    if den == 0.0:
        raise ModelDomainError(f"f_j(rho) undefined: zero denominator at j={j}, rho={rho}")
    return 1.0 / (den * den)


def _f_arrays(j, rho):
    """f_j, its first and second rho-derivatives for an array of event indices."""
    den = _f_denominator(j, rho)
    if np.any(den == 0.0):
        bad = int(np.asarray(j).ravel()[np.flatnonzero(np.ravel(den == 0.0))[0]])
        raise ModelDomainError(f"f_j(rho) undefined: zero denominator at j={bad}, rho={rho}")
    f = rho / den
    fd = 1.0 / den**2
    fdd = -2.0 * (np.asarray(j) - 2.0) / den**3
    return f, fd, fdd


# ---------------------------------------------------------------------------


class ModelSpec(ABC):
    """Interface for conditional gap-time models.

    Subclasses implement :meth:`evaluate`. Providing ``d2mean`` there enables
    the analytic Newton Jacobian; otherwise callers fall back to finite
    differences.
    """

    n_params = 3
    intercept_offset = 0.0
    has_hessian = False

    @abstractmethod
    def evaluate(self, gaps, covariates, theta, hessian: bool = False) -> ModelEval:
        """Mean, scale and derivatives at every padded position."""

    def moments(self, prior_gaps: Sequence[float], covariates: Sequence[float], theta) -> tuple:
        """(mean, sd) of the next gap given a single history.

        The default goes through :meth:`evaluate`; subclasses may override
        with a cheaper scalar path (the simulator calls this once per gap).
        """
        j = len(prior_gaps) + 1
        g = np.zeros((1, j))
        g[0, : j - 1] = prior_gaps
        ev = self.evaluate(g, np.asarray(covariates, dtype=float).reshape(1, j), theta)
        return float(ev.mean[0, -1]), float(ev.sd[0, -1])

    def _single(self, history: History, j: int | None, theta, hessian=False) -> ModelEval:
        j = history.check(j)
        g = np.zeros((1, j))
        g[0, : j - 1] = history.prior_gaps
        x = np.asarray(history.covariates, dtype=float).reshape(1, j)
        return self.evaluate(g, x, np.asarray(theta, dtype=float), hessian=hessian)


def _as_theta(theta) -> np.ndarray:
    if isinstance(theta, Parameters):
        return theta.theta
    return np.asarray(theta, dtype=float)


class MurphyModel(ModelSpec):
    """History-adjusted linear mean with ``V_j = |1 + f_j(rho)|^(1/2)``.

    ``mu_1 = c + g0 + g1 x_1`` and, for ``j >= 2``,
    ``mu_j = c + g0 + g1 x_j + f_j(rho) * sum_{l<j} (Y_l - c - g0 - g1 x_l)``
    with ``c = intercept_offset`` (0 or 28 in the usual parameterizations).
    """

    has_hessian = True

    def __init__(self, intercept_offset: float = 0.0):
        self.intercept_offset = float(intercept_offset)

    def __repr__(self):
        return f"{type(self).__name__}(intercept_offset={self.intercept_offset:g})"

    def _mean_parts(self, gaps, covariates, theta, hessian):
        g0, g1, rho = theta
        gaps = np.asarray(gaps, dtype=float)
        covariates = np.asarray(covariates, dtype=float)
        if gaps.shape != covariates.shape:
            raise ContractError(f"gaps {gaps.shape} and covariates {covariates.shape} differ in shape")
        n, m = gaps.shape
        j = np.arange(1, m + 1, dtype=float)
        f, fd, fdd = _f_arrays(j, rho)
        base = self.intercept_offset + g0
        # prefix sums over l < j
        cum_y = np.zeros((n, m))
        cum_x = np.zeros((n, m))
        if m > 1:
            cum_y[:, 1:] = np.cumsum(gaps[:, :-1], axis=1)
            cum_x[:, 1:] = np.cumsum(covariates[:, :-1], axis=1)
        resid_sum = cum_y - (j - 1.0) * base - g1 * cum_x
        mean = base + g1 * covariates + f * resid_sum
        dmean = np.empty((n, m, 3))
        dmean[..., 0] = 1.0 - (j - 1.0) * f
        dmean[..., 1] = covariates - f * cum_x
        dmean[..., 2] = fd * resid_sum
        d2 = None
        if hessian:
            d2 = np.zeros((n, m, 3, 3))
            d2[..., 0, 2] = d2[..., 2, 0] = -(j - 1.0) * fd
            d2[..., 1, 2] = d2[..., 2, 1] = -fd * cum_x
            d2[..., 2, 2] = fdd * resid_sum
        return mean, dmean, d2, f, fd

    def evaluate(self, gaps, covariates, theta, hessian: bool = False) -> ModelEval:
        theta = _as_theta(theta)
        mean, dmean, d2, f, fd = self._mean_parts(gaps, covariates, theta, hessian)
        one_f = 1.0 + f
        sd_row = np.sqrt(np.abs(one_f))
        with np.errstate(divide="ignore", invalid="ignore"):
            # V = 0 only at rho = -1/(j-1); callers reject it as non-positive scale
            dsd_row = np.sign(one_f) * fd / (2.0 * sd_row)
        sd = np.broadcast_to(sd_row, mean.shape).copy()
        dsd = np.zeros(dmean.shape)
        dsd[..., 2] = dsd_row
        return ModelEval(mean, sd, dmean, dsd, d2)

    def moments(self, prior_gaps, covariates, theta):
        g0, g1, rho = _as_theta(theta)
        j = len(prior_gaps) + 1
        base = self.intercept_offset + g0
        f = f_rho(j, rho)
        mean = base + g1 * covariates[j - 1]
        if j > 1:
            resid = 0.0
            for y, x in zip(prior_gaps, covariates):
                resid += y - base - g1 * x
            mean += f * resid
        return mean, math.sqrt(abs(1.0 + f))


class MurphyAbsMeanModel(MurphyModel):
    """Same mean as :class:`MurphyModel` with scale ``V_ij = |mu_ij|``."""

    def evaluate(self, gaps, covariates, theta, hessian: bool = False) -> ModelEval:
        theta = _as_theta(theta)
        mean, dmean, d2, _, _ = self._mean_parts(gaps, covariates, theta, hessian)
        sd = np.abs(mean)
        dsd = np.sign(mean)[..., None] * dmean
        return ModelEval(mean, sd, dmean, dsd, d2)

    def moments(self, prior_gaps, covariates, theta):
        mean, _ = MurphyModel.moments(self, prior_gaps, covariates, theta)
        return mean, abs(mean)


# ---------------------------------------------------------------------------
# Scalar conveniences operating on a single History.


def conditional_mean(model: ModelSpec, history: History, j: int, theta) -> float:
    return float(model._single(history, j, _as_theta(theta)).mean[0, -1])


def conditional_sd(model: ModelSpec, j: int, theta, history: History | None = None) -> float:
    """Scale of gap ``j``. For :class:`MurphyModel` it does not depend on the history."""
    if history is None:
        history = History([0.0] * (j - 1), [0.0] * j)
    return float(model._single(history, j, _as_theta(theta)).sd[0, -1])


def mean_gradient(model: ModelSpec, history: History, j: int, theta) -> np.ndarray:
    return model._single(history, j, _as_theta(theta)).dmean[0, -1].copy()


def sd_gradient(model: ModelSpec, j: int, theta, history: History | None = None) -> np.ndarray:
    if history is None:
        history = History([0.0] * (j - 1), [0.0] * j)
    return model._single(history, j, _as_theta(theta)).dsd[0, -1].copy()


def mean_hessian(model: ModelSpec, history: History, j: int, theta) -> np.ndarray:
    ev = model._single(history, j, _as_theta(theta), hessian=True)
    if ev.d2mean is None:
        raise NotImplementedError(f"{model!r} does not provide second derivatives")
    return ev.d2mean[0, -1].copy()
