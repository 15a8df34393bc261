"""Conditional estimating equations with nonparametric imputation.

For every subject ``i`` and event ``j <= tau_i`` a gap is either fully
observed (``S_ij <= C_i``) or censored (``S_{i,j-1} < C_i < S_ij``). Censored
residual terms are replaced by a cross-subject ratio computed per event
index from the observed residuals:

    g1(theta)   = sum_ij f_ij Z_ij obs_ij - f_ij cen_ij R1_j,
                  R1_j = sum_k Z_kj obs_kj / sum_k cen_kj
    g2(theta,s) = sum_ij (Z_ij^2 - s) obs_ij - cen_ij R2_ij(s),
                  R2_ij = sum_k (Z_kj^2 - s) obs_kj / sum_{k != i} cen_kj

with ``Z = (Y - mu) / V`` and ``f = (d mu / d theta) / V``. Ratios with a zero
denominator (or a non-finite numerator) contribute nothing.

``theta`` is fitted by damped Newton on ``g1``; ``g2`` is affine in ``s``,
so ``sigma^2`` has a closed form.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DegenerateDataError, EvaluationError, SingularJacobianError
from .model import ModelSpec, Parameters, _as_theta
from .simulate import Dataset

log = logging.getLogger(__name__)


class GapClass(enum.IntEnum):
    OBS = 0
    CEN = 1
    OUT = 2


def classify(ds: Dataset) -> list:
    """Per-subject tuple of :class:`GapClass` for ``j = 1..tau_i``."""
    out = []
    for s in ds.subjects:
        cls = [GapClass.OBS] * s.tau
        if s.final_gap_censored:
            cls[-1] = GapClass.CEN
        out.append(tuple(cls))
    return out


def classify_times(event_times, censor_time) -> tuple:
    """Classes straight from the indicator definitions, for every listed event."""
    out = []
    prev = 0.0
    for s in event_times:
        if s <= censor_time:
            out.append(GapClass.OBS)
        elif prev < censor_time < s:
            out.append(GapClass.CEN)
        else:
            out.append(GapClass.OUT)
        prev = s
    return tuple(out)


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 30
    # None: (-(1 - margin)/(m - 1), 1 - 1e-6), the largest interval on which
    # f_j and V_j stay finite and positive for every event index in the data
    rho_bounds: tuple | None = None
    rho_margin: float = 0.01
    max_condition: float = 1e12
    # symmetric (leave-self-in) denominator in the sigma^2 equation
    symmetric_g2: bool = False
    analytic_jacobian: bool = True
    fd_step: float = 1e-6


# ---------------------------------------------------------------------------
# Per-dataset evaluation


class EstimatingContext:
    """Residuals, weights and imputation ratios of a dataset at one ``theta``."""

    def __init__(self, ds: Dataset, model: ModelSpec, theta, hessian: bool = False, symmetric_g2: bool = False):
        if ds.n == 0:
            raise ContractError("empty dataset")
        self.ds = ds
        self.model = model
        self.theta = _as_theta(theta).copy()
        self.symmetric_g2 = symmetric_g2
        pd = ds.padded
        self.pd = pd
        ev = model.evaluate(pd.gaps, pd.covariates, self.theta, hessian=hessian)
        mean, sd = ev.mean, ev.sd
        valid = pd.valid
        bad = valid & ~(np.isfinite(mean) & np.isfinite(sd) & (sd > 0))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise EvaluationError(
                f"non-finite or non-positive mean/scale at subject {i}, event {j + 1} (theta={self.theta})",
                index=(int(i), int(j)),
            )
        sd = np.where(valid, sd, 1.0)
        self.V = sd
        self.Z = np.where(valid, (pd.gaps - mean) / sd, 0.0)
        self.f = np.where(valid[..., None], ev.dmean / sd[..., None], 0.0)
        self.dlogV = np.where(valid[..., None], ev.dsd / sd[..., None], 0.0)
        self.dmean = ev.dmean
        self.d2mean = ev.d2mean
        obs = pd.obs.astype(float)
        cen = pd.cen.astype(float)
        self.obs, self.cen = obs, cen
        self.n_obs = obs.sum(axis=0)
        self.n_cen = cen.sum(axis=0)
        self.R1 = _ratio((self.Z * obs).sum(axis=0), self.n_cen)

    @property
    def n(self) -> int:
        return self.pd.n

    # -- g1 ---------------------------------------------------------------
    def u1(self) -> np.ndarray:
        """Per-subject contributions to g1, shape (n, p)."""
        w = self.obs * self.Z - self.cen * self.R1
        return np.einsum("ij,ijk->ik", w, self.f)

    def g1(self) -> np.ndarray:
        return self.u1().sum(axis=0)

    def g1_jacobian(self) -> np.ndarray:
        """Analytic ``d g1 / d theta^T`` (needs model second derivatives)."""
        if self.d2mean is None:
            raise NotImplementedError("model does not provide second derivatives")
        V = self.V[..., None]
        # d f_k / d theta_l = H_kl / V - f_k dlogV_l
        df = self.d2mean / V[..., None] - self.f[..., :, None] * self.dlogV[..., None, :]
        dZ = -self.f - self.Z[..., None] * self.dlogV  # (n, m, p)
        obs, cen = self.obs, self.cen
        # observed part: sum obs (df Z + f dZ^T)
        J = np.einsum("ij,ijkl->kl", obs * self.Z, df) + np.einsum("ij,ijk,ijl->kl", obs, self.f, dZ)
        # imputed part: - sum cen (df R + f dR^T)
        ok = self.n_cen > 0
        dR = np.zeros((self.pd.m, dZ.shape[-1]))
        dR[ok] = np.einsum("ij,ijl->jl", obs, dZ)[ok] / self.n_cen[ok, None]
        J -= np.einsum("ij,ijkl->kl", cen * self.R1, df) + np.einsum("ij,ijk,jl->kl", cen, self.f, dR)
        return J

    # -- g2 ---------------------------------------------------------------
    def _g2_denominator(self) -> np.ndarray:
        return self.n_cen if self.symmetric_g2 else self.n_cen - 1.0

    def g2_coefficients(self) -> tuple:
        """Per-subject ``(a_i, b_i)`` with ``u2_i(s) = a_i - s b_i``."""
        Z2 = self.Z**2
        obs, cen = self.obs, self.cen
        num_a = (Z2 * obs).sum(axis=0)
        num_b = self.n_obs
        den = self._g2_denominator()
        ok = (den > 0) & np.isfinite(num_a)
        ra = np.where(ok, num_a / np.where(ok, den, 1.0), 0.0)
        rb = np.where(ok, num_b / np.where(ok, den, 1.0), 0.0)
        a = (obs * Z2).sum(axis=1) - (cen * ra).sum(axis=1)
        b = obs.sum(axis=1) - (cen * rb).sum(axis=1)
        return a, b

    def u2(self, sigma2: float) -> np.ndarray:
        a, b = self.g2_coefficients()
        return a - sigma2 * b

    def g2(self, sigma2: float) -> float:
        a, b = self.g2_coefficients()
        return float(a.sum() - sigma2 * b.sum())

    def g2_theta_gradient(self, sigma2: float) -> np.ndarray:
        """Analytic ``d g2 / d theta`` at fixed ``sigma2`` (length p)."""
        dZ = -self.f - self.Z[..., None] * self.dlogV
        dZ2 = 2.0 * self.Z[..., None] * dZ
        obs, cen = self.obs, self.cen
        den = self._g2_denominator()
        num_a = ((self.Z**2) * obs).sum(axis=0)
        ok = (den > 0) & np.isfinite(num_a)
        dnum = np.einsum("ij,ijk->jk", obs, dZ2)
        dra = np.where(ok[:, None], dnum / np.where(ok, den, 1.0)[:, None], 0.0)
        return np.einsum("ij,ijk->k", obs, dZ2) - np.einsum("ij,jk->k", cen, dra)


def _ratio(num, den):
    ok = (den > 0) & np.isfinite(num)
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def g1_hat(ds: Dataset, model: ModelSpec, theta) -> np.ndarray:
    return EstimatingContext(ds, model, theta).g1()


def g2_hat(ds: Dataset, model: ModelSpec, theta, sigma2: float | None = None, symmetric: bool = False) -> float:
    if isinstance(theta, Parameters) and sigma2 is None:
        sigma2 = theta.sigma2
    if sigma2 is None:
        raise ContractError("sigma2 is required")
    return EstimatingContext(ds, model, theta, symmetric_g2=symmetric).g2(float(sigma2))


def g1_jacobian_fd(ds: Dataset, model: ModelSpec, theta, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference ``d g1 / d theta^T``."""
    theta = _as_theta(theta)
    p = theta.size
    J = np.empty((p, p))
    for k in range(p):
        h = step * (1.0 + abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = (g1_hat(ds, model, tp) - g1_hat(ds, model, tm)) / (2.0 * h)
    return J


# ---------------------------------------------------------------------------
# Solving


@dataclass
class ThetaSolution:
    theta: np.ndarray
    iterations: int
    residual: float
    converged: bool
    message: str = ""


def admissible_rho(ds: Dataset, opts: SolverOptions) -> tuple:
    if opts.rho_bounds is not None:
        return tuple(opts.rho_bounds)
    m = ds.max_events
    lo = -(1.0 - opts.rho_margin) / (m - 1) if m > 1 else -(1.0 - opts.rho_margin)
    return (lo, 1.0 - 1e-6)


def _clip(theta, bounds):
    t = theta.copy()
    lo, hi = bounds
    t[2] = min(max(t[2], lo), hi)
    return t


def _g1_and_jac(ds, model, theta, opts):
    use_analytic = opts.analytic_jacobian and getattr(model, "has_hessian", False)
    ctx = EstimatingContext(ds, model, theta, hessian=use_analytic)
    g = ctx.g1()
    if use_analytic:
        J = ctx.g1_jacobian()
    else:
        J = g1_jacobian_fd(ds, model, theta, opts.fd_step)
    return g, J


def solve_theta(ds: Dataset, model: ModelSpec, init, opts: SolverOptions | None = None) -> ThetaSolution:
    """Damped Newton iteration for ``g1(theta) = 0``.

    Steps are halved until ``||g1||_2`` decreases; ``rho`` is kept inside
    ``opts.rho_bounds``. Convergence: ``||g1||_inf <= tol * n``.
    """
    opts = opts or SolverOptions()
    n = ds.n
    bounds = admissible_rho(ds, opts)
    theta = _clip(_as_theta(init).astype(float), bounds)
    g, J = _g1_and_jac(ds, model, theta, opts)
    best = (np.linalg.norm(g), theta.copy(), np.max(np.abs(g)))
    for it in range(opts.max_iter + 1):
        res = float(np.max(np.abs(g)))
        if res <= opts.tol * n:
            return ThetaSolution(theta, it, res, True)
        if it == opts.max_iter:
            break
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > opts.max_condition:
            raise SingularJacobianError(
                f"g1 Jacobian is singular (condition number {cond:.3g}) at theta={theta}",
                diagnostics={"condition_number": cond, "theta": theta.copy()},
            )
        step = np.linalg.solve(J, -g)
        norm0 = np.linalg.norm(g)
        t = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            cand = _clip(theta + t * step, bounds)
            try:
                gc = EstimatingContext(ds, model, cand).g1()
            except EvaluationError:
                gc = None
            if gc is not None and np.all(np.isfinite(gc)) and np.linalg.norm(gc) < norm0:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return ThetaSolution(best[1], it, float(best[2]), False, "line search failed to reduce ||g1||")
        theta = cand
        g, J = _g1_and_jac(ds, model, theta, opts)
        if np.linalg.norm(g) < best[0]:
            best = (np.linalg.norm(g), theta.copy(), np.max(np.abs(g)))
    return ThetaSolution(best[1], opts.max_iter, float(best[2]), False, "maximum iterations reached")


def sigma2_coefficients(ds: Dataset, model: ModelSpec, theta, symmetric: bool = False) -> tuple:
    """Totals ``(A, B)`` with ``g2(theta, s) = A - s B``."""
    a, b = EstimatingContext(ds, model, theta, symmetric_g2=symmetric).g2_coefficients()
    return float(a.sum()), float(b.sum())


def sigma2_closed_form(ds: Dataset, model: ModelSpec, theta, symmetric: bool = False) -> float:
    A, B = sigma2_coefficients(ds, model, theta, symmetric)
    if not B > 0:
        raise DegenerateDataError(f"sigma^2 equation has non-positive slope coefficient B={B:.6g}")
    return A / B


def default_init(ds: Dataset, model: ModelSpec) -> Parameters:
    """OLS of observed gaps on (1, x) ignoring history; rho = 0.05."""
    pd = ds.padded
    y = pd.gaps[pd.obs]
    x = pd.covariates[pd.obs]
    if y.size < 2:
        y = pd.gaps[pd.valid]
        x = pd.covariates[pd.valid]
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid.var(ddof=min(2, max(y.size - 1, 0)))) if y.size > 2 else 1.0
    return Parameters(float(coef[0]) - model.intercept_offset, float(coef[1]), 0.05, max(s2, 0.0))


# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    theta_hat: Parameters | None
    sigma2_hat: float
    g1_residual_norm: float
    iterations: int
    converged: bool
    diagnostics: object = None
    ase: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))
    covariance_theta: np.ndarray = field(default_factory=lambda: np.full((3, 3), np.nan))
    var_sigma2: float = float("nan")
    method: str = "np"
    g2_residual: float = float("nan")
    message: str = ""
    n: int = 0

    @property
    def estimates(self) -> np.ndarray:
        if self.theta_hat is None:
            return np.full(4, np.nan)
        return np.append(self.theta_hat.theta, self.sigma2_hat)

    @property
    def params(self) -> Parameters:
        return self.theta_hat.replace(sigma2=self.sigma2_hat)

    def report_lines(self) -> list:
        from .model import PARAM_NAMES

        lines = [f"method={self.method}", f"converged={str(self.converged).lower()}", f"n={self.n}"]
        est = self.estimates
        for name, v in zip(PARAM_NAMES, est):
            lines.append(f"{name}={float(v)!r}")
        for name, v in zip(PARAM_NAMES, self.ase):
            lines.append(f"ase_{name}={float(v)!r}")
        lines.append(f"iterations={self.iterations}")
        lines.append(f"g1_residual_norm={float(self.g1_residual_norm)!r}")
        lines.append(f"g2_residual={float(self.g2_residual)!r}")
        d = self.diagnostics
        if d is not None:
            lines.append(f"min_abs_eigen_symD1={d.min_abs_eigen_symD1!r}")
            lines.append(f"condition_number_D1={d.condition_number_D1!r}")
            lines.append(f"regularity_ok={str(d.ok).lower()}")
        if self.message:
            lines.append(f"message={self.message}")
        return lines


def fit(ds: Dataset, model: ModelSpec, init: Parameters | None = None, opts: SolverOptions | None = None,
        variance: bool = True) -> FitResult:
    """Three-step fit: theta from g1, closed-form sigma^2 from g2, then the sandwich."""
    from . import asymptotics

    if ds.n == 0:
        raise ContractError("empty dataset")
    opts = opts or SolverOptions()
    if init is None:
        init = default_init(ds, model)
    result = FitResult(None, float("nan"), float("nan"), 0, False, n=ds.n)
    try:
        sol = solve_theta(ds, model, init, opts)
    except (SingularJacobianError, EvaluationError) as exc:
        result.message = str(exc)
        return result
    result.theta_hat = Parameters.from_theta(sol.theta, 1.0)
    result.iterations = sol.iterations
    result.g1_residual_norm = sol.residual
    result.converged = sol.converged
    result.message = sol.message
    try:
        s2 = sigma2_closed_form(ds, model, sol.theta, opts.symmetric_g2)
    except DegenerateDataError as exc:
        result.converged = False
        result.message = str(exc)
        return result
    result.sigma2_hat = s2
    result.theta_hat = Parameters.from_theta(sol.theta, max(s2, 0.0))
    result.g2_residual = g2_hat(ds, model, sol.theta, s2, opts.symmetric_g2)
    if variance:
        try:
            sw = asymptotics.sandwich(ds, model, sol.theta, s2, symmetric_g2=opts.symmetric_g2)
        except (SingularJacobianError, DegenerateDataError) as exc:
            result.converged = False
            result.message = str(exc)
            return result
        result.diagnostics = sw.diagnostics
        result.covariance_theta = sw.covariance_theta
        result.var_sigma2 = sw.var_sigma2
        result.ase = sw.ase
    return result
