"""Parametric imputation of censored gaps with a known standardized law.

Each censored term is replaced by its conditional moments under a fixed
distribution ``F0`` of the standardized residual ``W = Z / sigma``. With
``w = (C - S_{tau-1} - mu_tau) / (sigma V_tau)`` (the standardized observed
part of the censored gap) the per-subject scores are

    S1_i = sum_{j<tau} f_j W_j + f_tau K1(w)
    S2_i = sum_{j<tau} (W_j^2 - 1) + (K2(w) - 1)

where ``K_r(w) = E[W^r | W > w]``. Only ``F0 = N(0, 1)`` is built in; other
laws can be passed as a :class:`TailMomentTable`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, special

from .estimate import (
    EstimatingContext,
    FitResult,
    SolverOptions,
    _clip,
    admissible_rho,
    default_init,
)
from .exceptions import ContractError, EvaluationError, SingularJacobianError
from .asymptotics import regularity_diagnostics
from .model import ModelSpec, Parameters, _as_theta
from .simulate import Dataset

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def k1_normal(w):
    """Mean of a standard normal truncated below at ``w`` (the Mills ratio).

    Written as ``sqrt(2/pi) / erfcx(w / sqrt(2))``, which stays accurate for
    large ``w`` where ``1 - Phi(w)`` underflows.
    """
    w = np.asarray(w, dtype=float)
    out = _SQRT_2_OVER_PI / special.erfcx(w / math.sqrt(2.0))
    return out if out.ndim else float(out)


def k2_normal(w):
    """Second moment of a standard normal truncated below at ``w``."""
    w = np.asarray(w, dtype=float)
    # w * K1(w) -> 0 as w -> -inf, but inf * 0 would give nan
    with np.errstate(invalid="ignore"):
        prod = np.where(np.isfinite(w), w * k1_normal(w), 0.0)
    out = 1.0 + prod
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TailMomentTable:
    """First and second conditional tail moments of ``F0``."""

    K1: Callable
    K2: Callable
    name: str = "custom"


NORMAL_TAIL = TailMomentTable(k1_normal, k2_normal, "normal")


@dataclass
class CSOptions:
    tol: float = 1e-8
    max_outer: int = 200
    max_inner: int = 50
    max_halvings: int = 30
    fd_step: float = 1e-6
    rho_bounds: tuple | None = None
    rho_margin: float = 0.01
    max_condition: float = 1e12


class CSContext:
    """Scores of the parametric-imputation equations at ``(theta, sigma)``."""

    def __init__(self, ds: Dataset, model: ModelSpec, theta, sigma: float, tail: TailMomentTable = NORMAL_TAIL):
        if not sigma > 0:
            raise ContractError(f"sigma must be positive, got {sigma}")
        ctx = EstimatingContext(ds, model, theta)
        self.ctx = ctx
        self.sigma = float(sigma)
        W = ctx.Z / sigma
        cen = ctx.cen.astype(bool)
        k1 = np.zeros_like(W)
        k2 = np.zeros_like(W)
        if cen.any():
            w = W[cen]
            k1[cen] = tail.K1(w)
            k2[cen] = tail.K2(w)
        if not (np.all(np.isfinite(k1)) and np.all(np.isfinite(k2))):
            raise EvaluationError("non-finite tail moment")
        self.W = W
        # residual used in each slot: W for observed gaps, K1(w) for the censored one
        self.r1 = ctx.obs * W + ctx.cen * k1
        self.r2 = ctx.obs * (W**2 - 1.0) + ctx.cen * (k2 - 1.0)

    def u1(self) -> np.ndarray:
        return np.einsum("ij,ijk->ik", self.r1, self.ctx.f)

    def u2(self) -> np.ndarray:
        return self.r2.sum(axis=1)

    def s1(self) -> np.ndarray:
        return self.u1().sum(axis=0)

    def s2(self) -> float:
        return float(self.u2().sum())


def cs_scores(ds, model, theta, sigma, tail=NORMAL_TAIL) -> tuple:
    """Totals ``(S1, S2)``."""
    c = CSContext(ds, model, theta, sigma, tail)
    return c.s1(), c.s2()


def _s1(ds, model, theta, sigma, tail):
    return CSContext(ds, model, theta, sigma, tail).s1()


def _s1_jacobian(ds, model, theta, sigma, tail, step):
    p = theta.size
    J = np.empty((p, p))
    for k in range(p):
        h = step * (1.0 + abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = (_s1(ds, model, tp, sigma, tail) - _s1(ds, model, tm, sigma, tail)) / (2.0 * h)
    return J


def _theta_step(ds, model, theta, sigma, tail, opts, bounds):
    """Damped Newton iterations for S1 at fixed sigma."""
    g = _s1(ds, model, theta, sigma, tail)
    for _ in range(opts.max_inner):
        if np.max(np.abs(g)) <= opts.tol * ds.n:
            break
        J = _s1_jacobian(ds, model, theta, sigma, tail, opts.fd_step)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > opts.max_condition:
            raise SingularJacobianError(f"S1 Jacobian is singular (condition number {cond:.3g})",
                                        diagnostics={"condition_number": cond, "theta": theta.copy()})
        step = np.linalg.solve(J, -g)
        norm0 = np.linalg.norm(g)
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            cand = _clip(theta + t * step, bounds)
            try:
                gc = _s1(ds, model, cand, sigma, tail)
            except EvaluationError:
                gc = None
            if gc is not None and np.all(np.isfinite(gc)) and np.linalg.norm(gc) < norm0:
                break
            t *= 0.5
        else:
            return theta, g, False
        theta, g = cand, gc
    return theta, g, True


def _sigma_root(ds, model, theta, sigma, tail) -> float:
    """Root in sigma of S2 at fixed theta, bracketed around the current value."""
    def s2(s):
        return CSContext(ds, model, theta, s, tail).s2()

    lo, hi = sigma, sigma
    f_lo = f_hi = s2(sigma)
    if f_lo == 0:
        return sigma
    # S2 decreases in sigma: positive means sigma is too small
    for _ in range(200):
        if f_lo > 0 and f_hi < 0:
            break
        if f_hi >= 0:
            hi *= 2.0
            f_hi = s2(hi)
        if f_lo <= 0:
            lo *= 0.5
            f_lo = s2(lo)
    else:
        raise EvaluationError("could not bracket the sigma equation")
    return optimize.brentq(s2, lo, hi, xtol=1e-14, rtol=1e-13)


def cs_sandwich(ds, model, theta, sigma, tail=NORMAL_TAIL, step: float = 1e-6) -> tuple:
    """Joint sandwich covariance of ``(theta, sigma^2)`` from per-subject scores.

    Derivatives are central differences in ``(theta, sigma)``; the
    ``sigma^2`` entry follows by the delta method.
    """
    n = ds.n
    eta = np.append(_as_theta(theta), sigma)

    def total(e):
        c = CSContext(ds, model, e[:-1], e[-1], tail)
        return np.append(c.s1(), c.s2())

    q = eta.size
    A = np.empty((q, q))
    for k in range(q):
        h = step * (1.0 + abs(eta[k]))
        ep, em = eta.copy(), eta.copy()
        ep[k] += h
        em[k] -= h
        A[:, k] = (total(ep) - total(em)) / (2.0 * h)
    A = -A / n
    c = CSContext(ds, model, eta[:-1], eta[-1], tail)
    U = np.column_stack([c.u1(), c.u2()])
    B = U.T @ U / n
    Ainv = np.linalg.inv(A)
    cov = Ainv @ B @ Ainv.T / n
    cov = 0.5 * (cov + cov.T)
    var_s2 = (2.0 * sigma) ** 2 * cov[-1, -1]
    ase = np.append(np.sqrt(np.clip(np.diag(cov)[:-1], 0, None)), math.sqrt(max(var_s2, 0.0)))
    return cov[:-1, :-1], var_s2, ase, regularity_diagnostics(A[:-1, :-1])


def cs_fit(ds: Dataset, model: ModelSpec, init: Parameters | None = None, opts: CSOptions | None = None,
           tail: TailMomentTable = NORMAL_TAIL, variance: bool = True) -> FitResult:
    """Alternate a Newton solve for theta and a root solve for sigma until both scores vanish.

    Converged when ``max(||S1||_inf, |S2|) <= tol * n``.
    """
    if ds.n == 0:
        raise ContractError("empty dataset")
    opts = opts or CSOptions()
    if init is None:
        init = default_init(ds, model)
    bounds = admissible_rho(ds, SolverOptions(rho_bounds=opts.rho_bounds, rho_margin=opts.rho_margin))
    theta = _clip(_as_theta(init).astype(float), bounds)
    sigma = math.sqrt(init.sigma2) if isinstance(init, Parameters) and init.sigma2 > 0 else 1.0
    method = "cs-normal" if tail is NORMAL_TAIL else f"cs-{tail.name}"
    result = FitResult(None, float("nan"), float("nan"), 0, False, method=method, n=ds.n)
    res = float("inf")
    try:
        for it in range(1, opts.max_outer + 1):
            theta, _, ok = _theta_step(ds, model, theta, sigma, tail, opts, bounds)
            sigma = _sigma_root(ds, model, theta, sigma, tail)
            s1, s2 = cs_scores(ds, model, theta, sigma, tail)
            res = max(float(np.max(np.abs(s1))), abs(s2))
            result.iterations = it
            if res <= opts.tol * ds.n:
                result.converged = True
                break
            if not ok:
                result.message = "line search failed to reduce ||S1||"
                break
        else:
            result.message = "maximum outer iterations reached"
    except (SingularJacobianError, EvaluationError, ValueError) as exc:
        result.message = str(exc)
        return result
    result.theta_hat = Parameters.from_theta(theta, sigma**2)
    result.sigma2_hat = sigma**2
    result.g1_residual_norm = float(np.max(np.abs(s1)))
    result.g2_residual = float(s2)
    if variance and result.converged:
        try:
            cov, var_s2, ase, diag = cs_sandwich(ds, model, theta, sigma, tail)
        except (np.linalg.LinAlgError, EvaluationError) as exc:
            result.converged = False
            result.message = f"sandwich failed: {exc}"
            return result
        result.covariance_theta, result.var_sigma2, result.ase, result.diagnostics = cov, var_s2, ase, diag
    return result
