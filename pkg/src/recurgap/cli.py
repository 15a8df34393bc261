"""Command-line interface: ``recurgap {simulate,fit,mc,compare}``.

Exit codes: 0 success, 2 bad configuration or input, 3 I/O failure,
4 the estimating equations did not converge.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .comparator import CSOptions, cs_fit
from .config import check_known, read_kv, require
from .estimate import SolverOptions, fit
from .exceptions import ConfigError, ContractError, ModelDomainError, TidyParseError
from .model import MurphyModel, Parameters
from .simulate import SimConfig, read_tidy, simulate_dataset, write_tidy

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONVERGENCE = 0, 2, 3, 4

FIT_KEYS = (
    "intercept_offset", "tol", "max_iter", "symmetric_g2", "rho_min", "rho_max",
    "init_gamma0", "init_gamma1", "init_rho", "init_sigma2",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="recurgap", description="Gap-time regression under right censoring.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a dataset and write it as tidy CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=_u64)

    f = sub.add_parser("fit", help="fit a tidy CSV dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--config")
    f.add_argument("--method", choices=harness.METHODS, default="np")
    f.add_argument("--out", required=True)

    for name, help_ in (("mc", "run a Monte Carlo study"), ("compare", "Monte Carlo study with both methods")):
        m = sub.add_parser(name, help=help_)
        m.add_argument("--config", required=True)
        m.add_argument("--out", required=True, help="summary CSV")
        m.add_argument("--out-md", help="summary markdown")
        m.add_argument("--workers", type=int)
        m.add_argument("--seed", type=_u64)
    return p


def _err(msg: str) -> None:
    print(f"recurgap: {msg}", file=sys.stderr)


def _write(path, text: str) -> None:
    harness.write_text(path, text)


def cmd_simulate(config_path, out_path, seed=None) -> int:
    cfg = SimConfig.from_mapping(read_kv(config_path))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    ds = simulate_dataset(cfg)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        write_tidy(ds, fh)
    return EXIT_OK


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def cmd_fit(data_path, config_path, method, out_path) -> int:
    cfg = read_kv(config_path) if config_path else {}
    check_known(cfg, FIT_KEYS + SimConfig.SIM_KEYS + harness.MCConfig.MC_KEYS)
    model = MurphyModel(require(cfg, "intercept_offset", float, default=28.0))
    init = None
    init_keys = ("init_gamma0", "init_gamma1", "init_rho")
    if any(k in cfg for k in init_keys):
        init = Parameters(*(require(cfg, k) for k in init_keys), require(cfg, "init_sigma2", float, default=1.0))
    tol = require(cfg, "tol", float, default=1e-8)
    max_iter = require(cfg, "max_iter", int, default=100)
    bounds = None
    if "rho_min" in cfg or "rho_max" in cfg:
        bounds = (require(cfg, "rho_min"), require(cfg, "rho_max"))
        if not bounds[0] < bounds[1]:
            raise ConfigError("rho_min must be below rho_max", key="rho_min")
    ds = read_tidy(data_path)
    if method == "np":
        opts = SolverOptions(tol=tol, max_iter=max_iter, rho_bounds=bounds,
                             symmetric_g2=require(cfg, "symmetric_g2", _bool, default=False))
        res = fit(ds, model, init=init, opts=opts)
    else:
        res = cs_fit(ds, model, init=init, opts=CSOptions(tol=tol, rho_bounds=bounds))
    _write(out_path, "\n".join(res.report_lines()))
    if not res.converged:
        _err(f"estimating equations did not converge: {res.message}")
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_mc(config_path, out_csv, out_md=None, workers=None, seed=None, methods=None) -> int:
    cfg = harness.MCConfig.from_mapping(read_kv(config_path))
    over = {}
    if workers is not None:
        over["workers"] = workers
    if seed is not None:
        over["master_seed"] = seed
    if methods is not None:
        over["methods"] = methods
    if over:
        cfg = replace(cfg, **over)
    step = max(1, cfg.reps // 10)
    last = [0]

    def progress(done, total):
        if done // step > last[0] or done == total:
            last[0] = done // step
            print(f"progress: {done}/{total} replications", file=sys.stderr, flush=True)

    summary = harness.run_study(cfg, progress=progress)
    _write(out_csv, harness.render_summary(summary, "csv"))
    if out_md:
        _write(out_md, harness.render_summary(summary, "markdown"))
    for m, bad in summary.degraded.items():
        if bad:
            print(f"warning: method {m} degraded (more than 20% of replications failed to converge)", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, args.seed)
        if args.command == "fit":
            return cmd_fit(args.data, args.config, args.method, args.out)
        methods = harness.METHODS if args.command == "compare" else None
        return cmd_mc(args.config, args.out, args.out_md, args.workers, args.seed, methods)
    except (ConfigError, TidyParseError, ContractError, ModelDomainError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
