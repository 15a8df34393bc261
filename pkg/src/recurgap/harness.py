"""Monte Carlo replication driver and summary tables.

Replication ``r`` simulates its dataset from ``seed_stream(master_seed, r, i)``
for subject ``i``, fits every requested method, and returns a small record.
Records are reduced in replication order with compensated summation, so the
summary depends only on the configuration and never on the worker count.

ESE uses the ``R - 1`` divisor over converged replications.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .comparator import cs_fit
from .config import check_known, require
from .estimate import fit
from .exceptions import ConfigError, RecurGapError
from .model import PARAM_NAMES
from .simulate import SimConfig, simulate_dataset
from .streams import seed_stream  # noqa: F401  (part of the harness API)

log = logging.getLogger(__name__)

METHODS = ("np", "cs-normal")
DEGRADED_FRACTION = 0.2

ERROR_LABELS = {
    "normal": "Normal errors",
    "exponential": "Exponential errors",
    "uniform": "Uniform errors",
    "lognormal": "Log-normal errors",
}


@dataclass(frozen=True)
class MCConfig:
    sim: SimConfig
    reps: int
    methods: tuple = ("np",)
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if int(self.reps) < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}", key="reps")
        if not self.methods:
            raise ConfigError("at least one method is required", key="methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}", key="methods")
        if int(self.workers) < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}", key="workers")
        if int(self.master_seed) < 0 or int(self.master_seed) >= 2**64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer", key="master_seed")

    MC_KEYS = ("reps", "methods", "master_seed", "workers")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "MCConfig":
        check_known(cfg, SimConfig.SIM_KEYS + cls.MC_KEYS)
        sim_part = {k: v for k, v in cfg.items() if k in SimConfig.SIM_KEYS}
        sim = SimConfig.from_mapping(sim_part)
        methods = tuple(m.strip() for m in str(cfg.get("methods", "np")).split(",") if m.strip())
        return cls(
            sim=sim,
            reps=require(cfg, "reps", int),
            methods=methods,
            master_seed=require(cfg, "master_seed", int, default=sim.seed),
            workers=require(cfg, "workers", int, default=1),
        )


@dataclass(frozen=True)
class RepRecord:
    rep: int
    enoes: float
    # method -> (converged, estimates[4], ase[4])
    fits: dict


@dataclass(frozen=True)
class SummaryRow:
    method: str
    parameter: str
    truth: float
    bias: float
    abs_rbias: float
    ese: float
    ase_mean: float
    n_converged: int
    # abs_rbias holds |bias| when the truth is zero
    rbias_is_absolute: bool = False


@dataclass
class MCSummary:
    error: str
    n: int
    c_max: float
    reps: int
    enoes: float
    rows: list = field(default_factory=list)
    degraded: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict, compare=False, repr=False)

    def row(self, method: str, parameter: str) -> SummaryRow:
        for r in self.rows:
            if r.method == method and r.parameter == parameter:
                return r
        raise KeyError((method, parameter))

    @property
    def methods(self) -> tuple:
        return tuple(dict.fromkeys(r.method for r in self.rows))


def _fit_one(method, ds, model):
    try:
        if method == "np":
            res = fit(ds, model)
        else:
            res = cs_fit(ds, model)
    except RecurGapError as exc:
        log.debug("fit failed: %s", exc)
        return (False, np.full(4, np.nan), np.full(4, np.nan))
    ok = bool(res.converged) and bool(np.all(np.isfinite(res.estimates)))
    return (ok, np.asarray(res.estimates, dtype=float), np.asarray(res.ase, dtype=float))


def run_replication(cfg: MCConfig, rep: int) -> RepRecord:
    sim = replace(cfg.sim, seed=int(cfg.master_seed))
    ds = simulate_dataset(sim, rep=rep)
    fits = {m: _fit_one(m, ds, sim.model) for m in cfg.methods}
    return RepRecord(rep, ds.mean_observed_events(), fits)


def _run_chunk(args):
    cfg, reps = args
    return [run_replication(cfg, r) for r in reps]


def _chunks(reps: int, size: int):
    return [range(a, min(a + size, reps)) for a in range(0, reps, size)]


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def _ese(values, mean) -> float:
    values = list(values)
    if len(values) < 2:
        return 0.0 if values else float("nan")
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))


def summarize(cfg: MCConfig, records: Sequence[RepRecord]) -> MCSummary:
    records = sorted(records, key=lambda r: r.rep)
    truth = cfg.sim.params.eta
    out = MCSummary(
        error=cfg.sim.error.value,
        n=int(cfg.sim.n),
        c_max=float(cfg.sim.c_max),
        reps=int(cfg.reps),
        enoes=_mean(r.enoes for r in records),
    )
    for m in cfg.methods:
        ok = [r.fits[m] for r in records if r.fits[m][0]]
        est = np.array([f[1] for f in ok]).reshape(-1, 4)
        ase = np.array([f[2] for f in ok]).reshape(-1, 4)
        out.estimates[m] = est
        n_ok = len(ok)
        out.degraded[m] = (cfg.reps - n_ok) > DEGRADED_FRACTION * cfg.reps
        for k, name in enumerate(PARAM_NAMES):
            mean = _mean(est[:, k])
            bias = mean - truth[k]
            zero = truth[k] == 0
            rb = abs(bias) if zero else abs(bias / truth[k])
            col = [a for a in ase[:, k] if np.isfinite(a)]
            out.rows.append(SummaryRow(m, name, float(truth[k]), bias, rb, _ese(est[:, k], mean), _mean(col), n_ok, zero))
    return out


def run_study(cfg: MCConfig, progress: Callable[[int, int], None] | None = None, chunk_size: int | None = None) -> MCSummary:
    """Run all replications and reduce them to an :class:`MCSummary`.

    ``progress(done, total)`` is called after every finished chunk.
    """
    reps = int(cfg.reps)
    workers = min(int(cfg.workers), reps)
    if chunk_size is None:
        chunk_size = max(1, min(25, reps // (4 * workers) or 1))
    chunks = _chunks(reps, chunk_size)
    records: list = []
    if workers == 1:
        for ch in chunks:
            records.extend(_run_chunk((cfg, ch)))
            if progress:
                progress(len(records), reps)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for part in ex.map(_run_chunk, [(cfg, ch) for ch in chunks]):
                records.extend(part)
                if progress:
                    progress(len(records), reps)
    summary = summarize(cfg, records)
    for m, bad in summary.degraded.items():
        if bad:
            log.warning("method %s: more than %d%% of replications failed", m, int(DEGRADED_FRACTION * 100))
    return summary


# ---------------------------------------------------------------------------
# Rendering

CSV_COLUMNS = (
    "error", "n", "c_max", "reps", "enoes", "method", "parameter", "truth",
    "abs_rbias", "ese", "bias", "ase_mean", "n_converged", "degraded", "rbias_is_absolute",
)


def _r3(x: float) -> str:
    if x is None or not np.isfinite(x):
        return "NA"
    s = f"{x:.3f}"
    return "0.000" if s == "-0.000" else s


def _g(x: float) -> str:
    return f"{x:g}"


def render_summary(s, format: str = "csv") -> str:
    """CSV (one row per method and parameter) or a markdown table per error law.

    ``s`` may be a single summary or a sequence of them (one block each).
    """
    summaries = [s] if isinstance(s, MCSummary) else list(s)
    if not summaries or any(not x.rows for x in summaries):
        raise ValueError("nothing to render: empty methods set")
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for x in summaries:
            for r in x.rows:
                w.writerow([
                    x.error, x.n, _g(x.c_max), x.reps, _r3(x.enoes), r.method, r.parameter, _g(r.truth),
                    _r3(r.abs_rbias), _r3(r.ese), _r3(r.bias), _r3(r.ase_mean), r.n_converged,
                    int(x.degraded.get(r.method, False)), int(r.rbias_is_absolute),
                ])
        return buf.getvalue()
    if format in ("markdown", "md"):
        return "\n".join(_markdown_block(x) for x in summaries)
    raise ValueError(f"unknown format {format!r}")


def _markdown_block(x: MCSummary) -> str:
    methods = x.methods
    head = ["Parameter"]
    for m in methods:
        head += [f"{m} \\|rBias\\|", f"{m} ESE", f"{m} Bias", f"{m} ASE"]
    lines = [
        f"### {ERROR_LABELS.get(x.error, x.error)} (n={x.n}, C={_g(x.c_max)}, reps={x.reps}, ENOES={_r3(x.enoes)})",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    for name in PARAM_NAMES:
        cells = [name]
        for m in methods:
            r = x.row(m, name)
            cells += [_r3(r.abs_rbias), _r3(r.ese), _r3(r.bias), _r3(r.ase_mean)]
        lines.append("| " + " | ".join(cells) + " |")
    conv = ", ".join(
        f"{m}: {x.rows[[r.method for r in x.rows].index(m)].n_converged}/{x.reps} converged"
        + (" (degraded)" if x.degraded.get(m) else "")
        for m in methods
    )
    lines += ["", conv, ""]
    return "\n".join(lines)


def _num(v: str) -> float:
    return float("nan") if v == "NA" else float(v)


def parse_summary_csv(text: str) -> list:
    """Inverse of ``render_summary(..., "csv")`` (values at 3-decimal precision)."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    out: dict = {}
    for rec in reader:
        key = (rec["error"], int(rec["n"]), float(rec["c_max"]), int(rec["reps"]))
        if key not in out:
            out[key] = MCSummary(rec["error"], key[1], key[2], key[3], _num(rec["enoes"]))
        s = out[key]
        s.degraded[rec["method"]] = bool(int(rec["degraded"]))
        s.rows.append(SummaryRow(
            rec["method"], rec["parameter"], float(rec["truth"]), _num(rec["bias"]), _num(rec["abs_rbias"]),
            _num(rec["ese"]), _num(rec["ase_mean"]), int(rec["n_converged"]), bool(int(rec["rbias_is_absolute"])),
        ))
    return list(out.values())


def write_text(path, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
