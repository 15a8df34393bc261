"""Sandwich variance for the conditional estimating equations.

With per-subject scores ``u1_i`` (for theta) and ``u2_i`` (for sigma^2):

    D1 = -n^-1 d g1 / d theta^T,   D2 = -n^-1 d g2 / d sigma^2,   D3 = -n^-1 d g2 / d theta^T
    Sigma = n^-1 sum_i u1_i u1_i^T
    Cov(theta_hat) ~ D1^-1 Sigma D1^-T / n
    Var(sigma2_hat) ~ Omega / (D2^2 n),  Omega = n^-1 sum_i (u2_i - D3 D1^-1 u1_i)^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimate import EstimatingContext, g1_jacobian_fd, g2_hat
from .exceptions import DegenerateDataError, SingularJacobianError
from .model import ModelSpec, _as_theta
from .simulate import Dataset


@dataclass
class PerSubjectScore:
    u1: np.ndarray
    u2: float
    a1: np.ndarray  # per-event f_ij Z_ij, shape (tau_i, p)
    b1: np.ndarray  # per-event f_ij R1_j, shape (tau_i, p)


@dataclass
class RegularityReport:
    min_abs_eigen_symD1: float
    condition_number_D1: float
    ok: bool


@dataclass
class SandwichComponents:
    D1: np.ndarray
    D2: float
    D3: np.ndarray
    Sigma: np.ndarray
    Omega: float


@dataclass
class SandwichResult:
    components: SandwichComponents
    covariance_theta: np.ndarray
    var_sigma2: float
    ase: np.ndarray
    diagnostics: RegularityReport


def per_subject_scores(ds: Dataset, model: ModelSpec, theta, sigma2: float, symmetric_g2: bool = False) -> list:
    ctx = EstimatingContext(ds, model, theta, symmetric_g2=symmetric_g2)
    u1 = ctx.u1()
    u2 = ctx.u2(sigma2)
    out = []
    for i, s in enumerate(ds.subjects):
        t = s.tau
        a1 = ctx.f[i, :t] * ctx.Z[i, :t, None]
        b1 = ctx.f[i, :t] * ctx.R1[:t, None]
        out.append(PerSubjectScore(u1[i].copy(), float(u2[i]), a1, b1))
    return out


def jacobian_D1(ds: Dataset, model: ModelSpec, theta, analytic: bool = True) -> np.ndarray:
    """``-n^-1 d g1 / d theta^T``; finite differences when the model has no Hessian."""
    if analytic and getattr(model, "has_hessian", False):
        J = EstimatingContext(ds, model, theta, hessian=True).g1_jacobian()
    else:
        J = g1_jacobian_fd(ds, model, theta)
    D1 = -J / ds.n
    if not np.all(np.isfinite(D1)):
        from .exceptions import EvaluationError

        raise EvaluationError("non-finite entries in D1")
    return D1


def derivatives_D2_D3(ds: Dataset, model: ModelSpec, theta, sigma2: float, symmetric_g2: bool = False) -> tuple:
    ctx = EstimatingContext(ds, model, theta, symmetric_g2=symmetric_g2)
    _, b = ctx.g2_coefficients()
    D2 = float(b.sum()) / ds.n
    D3 = -ctx.g2_theta_gradient(sigma2) / ds.n
    return D2, D3


def D3_fd(ds: Dataset, model: ModelSpec, theta, sigma2: float, step: float = 1e-6, symmetric_g2=False) -> np.ndarray:
    theta = _as_theta(theta)
    out = np.empty(theta.size)
    for k in range(theta.size):
        h = step * (1.0 + abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        out[k] = (g2_hat(ds, model, tp, sigma2, symmetric_g2) - g2_hat(ds, model, tm, sigma2, symmetric_g2)) / (2 * h)
    return -out / ds.n


def sigma_plug_in(scores) -> np.ndarray:
    U = np.array([s.u1 if isinstance(s, PerSubjectScore) else s for s in scores], dtype=float)
    return U.T @ U / U.shape[0]


def theta_sandwich(D1, Sigma, n: int) -> tuple:
    D1 = np.asarray(D1, dtype=float)
    try:
        Dinv = np.linalg.inv(D1)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("D1 is singular", diagnostics=regularity_diagnostics(D1)) from None
    cov = Dinv @ np.asarray(Sigma) @ Dinv.T / n
    cov = 0.5 * (cov + cov.T)
    return cov, np.sqrt(np.clip(np.diag(cov), 0.0, None))


def sigma2_variance(D1, D2: float, D3, scores, n: int) -> float:
    if D2 == 0:
        raise DegenerateDataError("D2 = 0: sigma^2 is not identified")
    U1 = np.array([s.u1 for s in scores])
    u2 = np.array([s.u2 for s in scores])
    lin = np.linalg.solve(np.asarray(D1, dtype=float).T, np.asarray(D3, dtype=float))  # D1^-T D3^T
    Q = u2 - U1 @ lin
    omega = float(np.mean(Q**2))
    return omega / (D2**2 * n)


def omega_hat(D1, D3, scores) -> float:
    U1 = np.array([s.u1 for s in scores])
    u2 = np.array([s.u2 for s in scores])
    lin = np.linalg.solve(np.asarray(D1, dtype=float).T, np.asarray(D3, dtype=float))
    return float(np.mean((u2 - U1 @ lin) ** 2))


def regularity_diagnostics(D1, eigen_threshold: float = 1e-8, max_condition: float = 1e12) -> RegularityReport:
    D1 = np.asarray(D1, dtype=float)
    sym = 0.5 * (D1 + D1.T)
    min_eig = float(np.min(np.abs(np.linalg.eigvalsh(sym))))
    with np.errstate(divide="ignore"):
        cond = float(np.linalg.cond(D1))
    if not np.isfinite(cond):
        cond = float("inf")
    ok = min_eig >= eigen_threshold and cond <= max_condition
    return RegularityReport(min_eig, cond, bool(ok))


def sandwich(ds: Dataset, model: ModelSpec, theta, sigma2: float, symmetric_g2: bool = False) -> SandwichResult:
    """All variance pieces at ``(theta, sigma2)``."""
    n = ds.n
    D1 = jacobian_D1(ds, model, theta)
    diag = regularity_diagnostics(D1)
    if not diag.ok:
        raise SingularJacobianError(
            f"D1 fails regularity check (min |eig| {diag.min_abs_eigen_symD1:.3g}, "
            f"condition {diag.condition_number_D1:.3g})",
            diagnostics=diag,
        )
    scores = per_subject_scores(ds, model, theta, sigma2, symmetric_g2)
    D2, D3 = derivatives_D2_D3(ds, model, theta, sigma2, symmetric_g2)
    Sigma = sigma_plug_in(scores)
    cov, ase_theta = theta_sandwich(D1, Sigma, n)
    omega = omega_hat(D1, D3, scores)
    var_s2 = sigma2_variance(D1, D2, D3, scores, n)
    ase = np.append(ase_theta, np.sqrt(max(var_s2, 0.0)))
    comps = SandwichComponents(D1, D2, D3, Sigma, omega)
    return SandwichResult(comps, cov, var_s2, ase, diag)
