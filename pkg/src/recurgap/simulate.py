"""Simulation of right-censored recurrent-event gap times and tidy CSV I/O.

Gaps follow ``Y_ij = max(mu_ij + sigma V_ij eps_ij, 1)`` with standardized
errors ``eps``. The covariate is a deterministic BMI trajectory evaluated at
the start of each gap and centered at 21. Observation stops at ``C_i``; the
gap in progress at that time is recorded as censored.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable

import numpy as np

from .config import check_known, require
from .exceptions import ConfigError, ContractError, GenerationError, ModelDomainError, TidyParseError
from .model import ModelSpec, MurphyModel, Parameters
from .streams import seed_stream

# ln(golden ratio): with X ~ N(0, s), exp(X) has variance (e^s - 1) e^s = phi^2 - phi = 1.
LOGNORMAL_S = math.log((1.0 + math.sqrt(5.0)) / 2.0)
LOGNORMAL_SHIFT = math.exp(LOGNORMAL_S / 2.0)
SQRT3 = math.sqrt(3.0)

TIDY_COLUMNS = (
    "Subject ID",
    "Start Time",
    "End Time",
    "Gap Time",
    "Event Indicator",
    "Event Number",
    "BMI",
)


class ErrorDistribution(enum.Enum):
    """Mean-zero, unit-variance error laws."""

    NORMAL = "normal"
    EXPONENTIAL = "exponential"
    UNIFORM = "uniform"
    LOGNORMAL = "lognormal"

    @classmethod
    def parse(cls, value) -> "ErrorDistribution":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(d.value for d in cls)
            raise ValueError(f"unknown error distribution {value!r}; expected one of {names}") from None


def sample_errors(dist: ErrorDistribution, rng: np.random.Generator, size) -> np.ndarray:
    if dist is ErrorDistribution.NORMAL:
        return rng.standard_normal(size)
    if dist is ErrorDistribution.EXPONENTIAL:
        return rng.standard_exponential(size) - 1.0
    if dist is ErrorDistribution.UNIFORM:
        return rng.uniform(-SQRT3, SQRT3, size)
    if dist is ErrorDistribution.LOGNORMAL:
        return np.exp(math.sqrt(LOGNORMAL_S) * rng.standard_normal(size)) - LOGNORMAL_SHIFT
    raise ValueError(dist)


def sample_error(dist: ErrorDistribution, rng: np.random.Generator) -> float:
    return float(sample_errors(dist, rng, 1)[0])


def bmi_schedule(day: float) -> float:
    """BMI in kg/m^2: 22 up to day 1, down to 20 at day 195, up to 21 at day 225, flat after."""
    if day <= 1.0:
        return 22.0
    if day <= 195.0:
        return 22.0 - 2.0 * (day - 1.0) / 194.0
    if day <= 225.0:
        return 20.0 + (day - 195.0) / 30.0
    return 21.0


def centered_bmi(day: float) -> float:
    return bmi_schedule(day) - 21.0


# ---------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class SubjectPath:
    """Observed history of one subject.

    ``gaps[-1]`` is the observed part ``C_i - S_{i,tau-1}`` of the last gap when
    ``final_gap_censored``; the untruncated value, when known (simulation), is
    kept in ``latent_final_gap`` and never written to disk.
    """

    id: int
    gaps: tuple
    covariates: tuple
    censor_time: float
    final_gap_censored: bool = True
    latent_final_gap: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "gaps", tuple(float(g) for g in self.gaps))
        object.__setattr__(self, "covariates", tuple(float(x) for x in self.covariates))
        if not self.gaps:
            raise ContractError(f"subject {self.id} has no gaps")
        if len(self.gaps) != len(self.covariates):
            raise ContractError(f"subject {self.id}: {len(self.gaps)} gaps vs {len(self.covariates)} covariates")
        if any(not g > 0 for g in self.gaps):
            raise ContractError(f"subject {self.id}: gaps must be positive")

    @property
    def tau(self) -> int:
        return len(self.gaps)

    @property
    def event_times(self) -> tuple:
        return tuple(np.cumsum(self.gaps).tolist())

    @property
    def start_times(self) -> tuple:
        return (0.0,) + self.event_times[:-1]

    @property
    def n_observed(self) -> int:
        return self.tau - 1 if self.final_gap_censored else self.tau

    @classmethod
    def from_event_times(cls, id, event_times, censor_time, covariates=None) -> "SubjectPath":
        """Build the observed path from a (long enough) sequence of event times.

        ``tau`` is the first ``j`` with ``C <= S_j``; gap ``tau`` is censored
        unless ``S_tau == C``.
        """
        times = [float(s) for s in event_times]
        tau = next((k + 1 for k, s in enumerate(times) if censor_time <= s), None)
        if tau is None:
            raise ContractError("event times end before the censoring time")
        starts = [0.0] + times[: tau - 1]
        gaps = [times[k] - starts[k] for k in range(tau)]
        censored = times[tau - 1] > censor_time
        latent = None
        if censored:
            latent = gaps[-1]
            gaps[-1] = censor_time - starts[-1]
        if covariates is None:
            covariates = [0.0] * tau
        return cls(id, gaps, list(covariates)[:tau], float(censor_time), censored, latent)


@dataclass(frozen=True)
class PaddedData:
    """Dataset laid out on an ``(n, m)`` grid (zeros beyond ``tau_i``)."""

    gaps: np.ndarray
    covariates: np.ndarray
    valid: np.ndarray
    obs: np.ndarray
    cen: np.ndarray
    tau: np.ndarray

    @property
    def n(self) -> int:
        return self.gaps.shape[0]

    @property
    def m(self) -> int:
        return self.gaps.shape[1]


@dataclass(frozen=True)
class Dataset:
    subjects: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self):
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def max_events(self) -> int:
        return max((s.tau for s in self.subjects), default=0)

    def mean_observed_events(self) -> float:
        return float(np.mean([s.n_observed for s in self.subjects]))

    @cached_property
    def padded(self) -> PaddedData:
        n, m = self.n, self.max_events
        gaps = np.zeros((n, m))
        covs = np.zeros((n, m))
        valid = np.zeros((n, m), dtype=bool)
        cen = np.zeros((n, m), dtype=bool)
        tau = np.zeros(n, dtype=int)
        for i, s in enumerate(self.subjects):
            t = s.tau
            gaps[i, :t] = s.gaps
            covs[i, :t] = s.covariates
            valid[i, :t] = True
            cen[i, t - 1] = s.final_gap_censored
            tau[i] = t
        obs = valid & ~cen
        for a in (gaps, covs, valid, obs, cen, tau):
            a.setflags(write=False)
        return PaddedData(gaps, covs, valid, obs, cen, tau)

    def equals(self, other: "Dataset", rtol: float = 1e-12) -> bool:
        if self.n != other.n:
            return False
        for a, b in zip(self.subjects, other.subjects):
            if a.id != b.id or a.tau != b.tau or a.final_gap_censored != b.final_gap_censored:
                return False
            if not np.allclose(a.gaps, b.gaps, rtol=rtol, atol=0):
                return False
            if not np.allclose(a.covariates, b.covariates, rtol=rtol, atol=1e-300):
                return False
            if not math.isclose(a.censor_time, b.censor_time, rel_tol=rtol):
                return False
        return True


# ---------------------------------------------------------------------------
# Simulation


@dataclass(frozen=True)
class SimConfig:
    n: int
    c_max: float
    error: ErrorDistribution = ErrorDistribution.NORMAL
    params: Parameters = Parameters(0.6, -0.4, 0.03, 11.0)
    seed: int = 0
    model: ModelSpec = field(default_factory=lambda: MurphyModel(28.0))
    censor_sampler: Callable | None = None
    max_events: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "error", ErrorDistribution.parse(self.error))
        if int(self.n) < 1:
            raise ContractError(f"n must be >= 1, got {self.n}")
        if not self.c_max > 0:
            raise ContractError(f"c_max must be > 0, got {self.c_max}")

    @property
    def event_cap(self) -> int:
        if self.max_events is not None:
            return int(self.max_events)
        return max(int(10 * self.c_max), 10)

    SIM_KEYS = ("n", "c_max", "error_dist", "gamma0", "gamma1", "rho", "sigma2", "seed", "intercept_offset")

    @classmethod
    def from_mapping(cls, cfg: dict, extra_keys: Iterable[str] = ()) -> "SimConfig":
        check_known(cfg, tuple(cls.SIM_KEYS) + tuple(extra_keys))
        try:
            error = ErrorDistribution.parse(require(cfg, "error_dist", str))
        except ValueError as exc:
            raise ConfigError(str(exc), key="error_dist") from None
        try:
            params = Parameters(
                require(cfg, "gamma0"),
                require(cfg, "gamma1"),
                require(cfg, "rho"),
                require(cfg, "sigma2"),
            )
        except ModelDomainError as exc:
            raise ConfigError(str(exc), key="sigma2") from None
        offset = require(cfg, "intercept_offset", float, default=28.0)
        try:
            return cls(
                n=require(cfg, "n", int),
                c_max=require(cfg, "c_max"),
                error=error,
                params=params,
                seed=require(cfg, "seed", int, default=0),
                model=MurphyModel(offset),
            )
        except ContractError as exc:
            raise ConfigError(str(exc)) from None


_BLOCK = 16


def simulate_subject(cfg: SimConfig, id: int, rng: np.random.Generator) -> SubjectPath:
    """Generate one subject's gaps until the censoring time is reached."""
    theta = cfg.params.theta
    sigma = math.sqrt(cfg.params.sigma2)
    censor = float(cfg.censor_sampler(rng, id)) if cfg.censor_sampler is not None else float(cfg.c_max)
    gaps: list = []
    covs: list = []
    t = 0.0
    draws = sample_errors(cfg.error, rng, _BLOCK)
    k = 0
    cap = cfg.event_cap
    while True:
        if len(gaps) >= cap:
            raise GenerationError(f"subject {id}: more than {cap} events before censoring at {censor}")
        covs.append(bmi_schedule(t) - 21.0)
        mu, v = cfg.model.moments(gaps, covs, theta)
        if k == _BLOCK:
            draws = sample_errors(cfg.error, rng, _BLOCK)
            k = 0
        y = max(mu + sigma * v * draws[k], 1.0)
        k += 1
        if t + y >= censor:
            censored = t + y > censor
            gaps.append(censor - t if censored else y)
            return SubjectPath(id, gaps, covs, censor, censored, y if censored else None)
        gaps.append(y)
        t += y


def simulate_dataset(cfg: SimConfig, rep: int = 0) -> Dataset:
    """``cfg.n`` independent subjects; subject ``i`` uses ``seed_stream(cfg.seed, rep, i)``."""
    subjects = [simulate_subject(cfg, i + 1, seed_stream(cfg.seed, rep, i)) for i in range(int(cfg.n))]
    return Dataset(tuple(subjects))


# ---------------------------------------------------------------------------
# Tidy CSV


def _fmt(x: float) -> str:
    return repr(float(x))


def write_tidy(ds: Dataset, sink) -> None:
    """Write one row per gap. ``sink`` is a path or a text stream."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", newline="", encoding="utf-8") as fh:
            write_tidy(ds, fh)
        return
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(TIDY_COLUMNS)
    for s in ds.subjects:
        start = 0.0
        for j, (g, x) in enumerate(zip(s.gaps, s.covariates), start=1):
            last = j == s.tau
            end = s.censor_time if (last and s.final_gap_censored) else start + g
            indicator = 0 if (last and s.final_gap_censored) else 1
            w.writerow([s.id, _fmt(start), _fmt(end), _fmt(g), indicator, j, _fmt(x)])
            start = end


def tidy_string(ds: Dataset) -> str:
    buf = io.StringIO()
    write_tidy(ds, buf)
    return buf.getvalue()


def read_tidy(source) -> Dataset:
    """Parse a tidy CSV produced by :func:`write_tidy` (or by hand)."""
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_tidy(fh)
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise TidyParseError("empty file", line=1) from None
    if tuple(h.strip() for h in header) != TIDY_COLUMNS:
        raise TidyParseError(f"header must be {','.join(TIDY_COLUMNS)}", line=1)

    subjects = []
    cur = None  # [id, rows]

    def flush():
        if cur is None:
            return
        sid, rows = cur
        gaps = [r[2] for r in rows]
        covs = [r[3] for r in rows]
        last_ind, last_end, last_line = rows[-1][1], rows[-1][0], rows[-1][4]
        try:
            subjects.append(SubjectPath(sid, gaps, covs, last_end, last_ind == 0))
        except ContractError as exc:
            raise TidyParseError(str(exc), line=last_line) from None

    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(TIDY_COLUMNS):
            raise TidyParseError(f"expected {len(TIDY_COLUMNS)} fields, got {len(row)}", line=lineno)
        try:
            sid = int(row[0])
            start, end, gap = float(row[1]), float(row[2]), float(row[3])
            ind = int(row[4])
            num = int(row[5])
            x = float(row[6])
        except ValueError as exc:
            raise TidyParseError(f"bad number ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in (start, end, gap, x)):
            raise TidyParseError("non-finite value", line=lineno)
        if ind not in (0, 1):
            raise TidyParseError(f"event indicator must be 0 or 1, got {ind}", line=lineno)
        if not end > start:
            raise TidyParseError(f"end time {end} not after start time {start}", line=lineno)
        if abs(gap - (end - start)) > 1e-9 * max(1.0, abs(end)):
            raise TidyParseError(f"gap {gap} != end - start = {end - start}", line=lineno)
        if cur is None or cur[0] != sid:
            flush()
            if sid in seen:
                raise TidyParseError(f"rows of subject {sid} are not contiguous", line=lineno)
            seen.add(sid)
            if num != 1 or start != 0.0:
                raise TidyParseError(f"subject {sid} must start with event 1 at time 0", line=lineno)
            cur = (sid, [])
        else:
            prev = cur[1][-1]
            if prev[1] == 0:
                raise TidyParseError(f"subject {sid}: rows after a censored gap", line=lineno)
            if num != len(cur[1]) + 1:
                raise TidyParseError(f"subject {sid}: event number {num} out of sequence", line=lineno)
            if abs(start - prev[0]) > 1e-9 * max(1.0, abs(start)):
                raise TidyParseError(f"subject {sid}: start {start} != previous end {prev[0]}", line=lineno)
        cur[1].append((end, ind, gap, x, lineno))
    flush()
    if not subjects:
        raise TidyParseError("no data rows", line=2)
    return Dataset(tuple(subjects))
