"""Command-line pipeline: ingest, estimate, extract, analyze, liftoff, report.

Every command reads an INI configuration, writes CSV artefacts to the output
directory and stamps each file with a hash of the configuration.  Exit codes
are 0 on success, 1 on a numerical failure and 2 on an input, output or
configuration problem.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass, field, replace
from datetime import date
from fractions import Fraction
from pathlib import Path

import numpy as np

from bqg2 import __version__
from bqg2.eigenpair import ExtractionError, extract, fit_exp_quadratic, load_eigenpair, save_eigenpair
from bqg2.estimation import EstimationOptions, sandwich_se
from bqg2.estimation import estimate as run_estimation
from bqg2.kalman import FilterError, ekf_filter, read_states_csv, simulate_panel
from bqg2.liftoff import (LIFTOFF_THRESHOLD, simulate_liftoff, summarize, write_histogram_csv,
                          write_summary_csv)
from bqg2.market_data import (DataError, YieldPanel, bootstrap_panel, missing_spans, parse_cmt_csv,
                              read_curves_csv, write_curves_csv, zero_yield_panel)
from bqg2.measures import MeasureTag, lambda_L_affine, martingale_vol, test_v_zero, write_measure_report
from bqg2.model import (ModelParams, load_params, load_standard_errors, save_params, table1_params,
                        table1_standard_errors)
from bqg2.pde import GridSpec, PdeInstabilityError, PdeSolver, solve_surface
from bqg2.risk import (conditional_forecast, duration_matched_table, hj_bound, log_dominance_check,
                       realized_table, wealth_paths, write_forecast_csv)

log = logging.getLogger("bqg2")

EXIT_OK, EXIT_NUMERIC, EXIT_IO = 0, 1, 2
DEFAULT_TENORS = (1 / 12, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


@dataclass
class RunConfig:
    """Settings shared by all commands.

    Paths are resolved against the configuration file's directory.  Empty
    paths mean "not supplied"; ``params`` then falls back to the packaged
    reference parameters.
    """

    source: Path | None = None
    text: str = ""
    cmt_csv: Path | None = None
    curves_csv: Path | None = None
    params: Path | None = None
    eigenpair: Path | None = None
    states: Path | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    max_tau: float = 40.0
    eps: float = 1e-4
    tenors: tuple[float, ...] = DEFAULT_TENORS
    starts: int = 5
    simplex_maxfev: int = 400
    polish_maxiter: int = 30
    estimation_seed: int = 0
    meas_sd: float = 0.001
    estimation_grid: GridSpec = field(default_factory=lambda: GridSpec(n1=51, n2=51, dt=1 / 24))
    synthetic_days: int = 0
    synthetic_noise: float = 0.001
    synthetic_seed: int = 0
    mc_paths: int = 100_000
    mc_dt: float = 1 / 96
    mc_seed: int | None = None
    mc_horizon: float = 0.25
    mc_state: str = "mean"
    liftoff_paths: int = 100_000
    liftoff_dt: float = 1 / 252
    liftoff_cap: float = 15.0
    liftoff_threshold: float = LIFTOFF_THRESHOLD
    liftoff_seed: int | None = None
    liftoff_state: str = "0,0"
    out: Path = Path("out")
    threads: int = 1

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def header(self, command: str) -> list[str]:
        return [f"config-hash: {self.hash}", f"command: {command}", f"bqg2 {__version__}"]


def _step(sec, key: str, default: float) -> float:
    """Time step given as a decimal or a fraction such as ``1/96``."""
    return float(Fraction(sec[key].strip())) if key in sec else default


def _grid_from(sec, prefix: str, default: GridSpec) -> GridSpec:
    return GridSpec(default.x1_range, default.x2_range, sec.getint(f"{prefix}n1", default.n1),
                    sec.getint(f"{prefix}n2", default.n2), _step(sec, f"{prefix}dt", default.dt))


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a run configuration; ``None`` gives the defaults.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigError: On malformed values.
    """
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"configuration file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def opt_path(sec, key):
        value = parser.get(sec, key, fallback="").strip()
        return (base / value) if value else None

    try:
        cfg = RunConfig(source=path, text=text)
        cfg.cmt_csv = opt_path("paths", "cmt_csv")
        cfg.curves_csv = opt_path("paths", "curves_csv")
        cfg.params = opt_path("paths", "params")
        cfg.eigenpair = opt_path("paths", "eigenpair")
        cfg.states = opt_path("paths", "states")
        out = parser.get("paths", "out", fallback="").strip()
        cfg.out = base / out if out else base / "out"
        if parser.has_section("grid"):
            cfg.grid = _grid_from(parser["grid"], "", cfg.grid)
            cfg.max_tau = parser.getfloat("grid", "max_tau", fallback=cfg.max_tau)
        cfg.eps = parser.getfloat("extraction", "eps", fallback=cfg.eps)
        if parser.has_section("estimation"):
            sec = parser["estimation"]
            cfg.tenors = _floats(sec.get("tenors", "")) or cfg.tenors
            cfg.starts = sec.getint("starts", cfg.starts)
            cfg.simplex_maxfev = sec.getint("simplex_maxfev", cfg.simplex_maxfev)
            cfg.polish_maxiter = sec.getint("polish_maxiter", cfg.polish_maxiter)
            cfg.estimation_seed = sec.getint("seed", cfg.estimation_seed)
            cfg.meas_sd = sec.getfloat("meas_sd", cfg.meas_sd)
            cfg.estimation_grid = _grid_from(sec, "grid_", cfg.estimation_grid)
            cfg.synthetic_days = sec.getint("synthetic_days", 0)
            cfg.synthetic_noise = sec.getfloat("synthetic_noise", cfg.synthetic_noise)
            cfg.synthetic_seed = sec.getint("synthetic_seed", cfg.synthetic_seed)
        if parser.has_section("monte_carlo"):
            sec = parser["monte_carlo"]
            cfg.mc_paths = sec.getint("paths", cfg.mc_paths)
            cfg.mc_dt = _step(sec, "dt", cfg.mc_dt)
            cfg.mc_seed = sec.getint("seed") if "seed" in sec else None
            cfg.mc_horizon = sec.getfloat("horizon", cfg.mc_horizon)
            cfg.mc_state = sec.get("state", cfg.mc_state)
        if parser.has_section("liftoff"):
            sec = parser["liftoff"]
            cfg.liftoff_paths = sec.getint("paths", cfg.liftoff_paths)
            cfg.liftoff_dt = _step(sec, "dt", cfg.liftoff_dt)
            cfg.liftoff_cap = sec.getfloat("horizon_cap", cfg.liftoff_cap)
            cfg.liftoff_threshold = sec.getfloat("threshold", cfg.liftoff_threshold)
            cfg.liftoff_seed = sec.getint("seed") if "seed" in sec else None
            cfg.liftoff_state = sec.get("state", cfg.liftoff_state)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} configured")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _params(cfg: RunConfig) -> ModelParams:
    return table1_params() if cfg.params is None else load_params(_require(cfg.params, "parameter file"))


def _standard_errors(cfg: RunConfig):
    return table1_standard_errors() if cfg.params is None else load_standard_errors(cfg.params)


def _out(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _seed(value: int | None, what: str) -> int:
    if value is None:
        raise ConfigError(f"{what} needs a seed: set it in the configuration or pass --seed")
    return value


# Commands -------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> list[Path]:
    """Bootstrap zero curves from a CMT file and write them with a summary."""
    src = _require(cfg.cmt_csv, "CMT file")
    panel = parse_cmt_csv(src)
    curves, skipped = bootstrap_panel(panel)
    if not curves:
        raise DataError(f"{src}: no date has enough quotes to bootstrap a curve")
    out = _out(cfg)
    header = cfg.header("ingest")
    curves_path = out / "curves.csv"
    write_curves_csv(curves, curves_path, header)
    summary_path = out / "ingest_summary.txt"
    lines = header + [f"dates: {curves[0].date} .. {curves[-1].date} ({len(curves)} curves)",
                      f"skipped dates: {len(skipped)}"]
    for tenor, spans in missing_spans(panel).items():
        if spans:
            longest = max(spans, key=lambda s: (s[1] - s[0]).days)
            lines.append(f"tenor {tenor:g}y: {len(spans)} missing spans, longest {longest[0]} .. {longest[1]}")
    summary_path.write_text("\n".join(lines) + "\n")
    print(lines[3] + "; " + lines[4])
    return [curves_path, summary_path]


def _estimation_panel(cfg: RunConfig, params: ModelParams) -> tuple[YieldPanel, list | None]:
    if cfg.synthetic_days > 0:
        surface = solve_surface(params, cfg.estimation_grid, max(cfg.tenors), ladder=cfg.tenors)
        panel, _ = simulate_panel(params, surface, cfg.tenors, cfg.synthetic_days, cfg.synthetic_noise,
                                  cfg.synthetic_seed)
        return panel, None
    curves_path = cfg.curves_csv or cfg.out / "curves.csv"
    curves = read_curves_csv(_require(curves_path, "curves file"))
    return zero_yield_panel(curves, cfg.tenors), curves


def cmd_estimate(cfg: RunConfig) -> list[Path]:
    """Quasi-maximum-likelihood estimation with sandwich standard errors.

    The configured parameters serve as the starting point; on synthetic runs
    they also generate the data.  Restarting with the same output directory
    resumes from the optimiser checkpoint.
    """
    init = _params(cfg)
    panel, curves = _estimation_panel(cfg, init)
    out = _out(cfg)
    header = cfg.header("estimate")
    opts = EstimationOptions(grid=cfg.estimation_grid, starts=cfg.starts, simplex_maxfev=cfg.simplex_maxfev,
                             polish_maxiter=cfg.polish_maxiter, seed=cfg.estimation_seed,
                             checkpoint=out / "estimate_checkpoint.json")
    params, filt = run_estimation(panel, init, opts, cfg.meas_sd)
    sw = sandwich_se(params, panel, filt.meas_error_sd, cfg.estimation_grid)
    se = {n: v for n, v in sw.as_dict().items() if not n.startswith("sd_")}
    params_path = out / "params.ini"
    save_params(params, params_path, "; ".join(header), se)
    table_path = out / "parameters.csv"
    with open(table_path, "w", newline="") as fh:
        for line in header + [f"loglik: {filt.loglik:.6f}", f"observations: {len(panel)}"]:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["parameter", "estimate", "std_error", "std_error_hessian"])
        for name, est, s, sh in sw.table():
            w.writerow([name, f"{est:.6g}", f"{s:.3g}", f"{sh:.3g}"])
    states_path = out / "states.csv"
    filt.write_states_csv(states_path, params, header)
    fit_path = out / "pricing_errors.csv"
    with open(fit_path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["tenor", "measurement_sd_bp", "mean_abs_error_bp"])
        for t, sd, e in zip(filt.tenors, filt.meas_error_sd, filt.pricing_errors):
            w.writerow([f"{t:g}", f"{sd * 1e4:.3f}", f"{e:.3f}"])
    paths = [params_path, table_path, states_path, fit_path]
    if curves is not None:
        realized_path = out / "realized_returns.csv"
        realized_table(curves).write_csv(realized_path, header)
        paths.append(realized_path)
    print(f"loglik {filt.loglik:.4f} over {len(panel)} dates; parameters written to {params_path}")
    return paths


def _eigenpair(cfg: RunConfig, params: ModelParams):
    path = cfg.eigenpair or cfg.out / "eigenpair.npz"
    if Path(path).exists():
        return load_eigenpair(path)
    if cfg.eigenpair is not None:
        raise FileNotFoundError(f"eigenpair file not found: {path}")
    return _extract(cfg, params)[0]


def _extract(cfg: RunConfig, params: ModelParams):
    solver = PdeSolver(params, cfg.grid)
    pair = extract(solver, cfg.eps)
    out = _out(cfg)
    save_eigenpair(pair, out / "eigenpair.npz")
    return pair, out / "eigenpair.npz"


def cmd_extract(cfg: RunConfig) -> list[Path]:
    """Principal eigenpair with its exponential-quadratic and affine summaries."""
    params = _params(cfg)
    pair, npz = _extract(cfg, params)
    out = cfg.out
    header = cfg.header("extract")
    pi_path = out / "eigenfunction.csv"
    pair.to_csv(pi_path, header)
    fit = fit_exp_quadratic(pair)
    icpt, slope, resid = lambda_L_affine(pair)
    report = out / "eigenpair.csv"
    with open(report, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        w.writerow(["lambda", f"{pair.lam:.6f}"])
        w.writerow(["horizon_N", pair.N])
        w.writerow(["ratio_gap", f"{pair.gap:.3e}"])
        for name, c in zip(("x1^2", "x2^2", "x1*x2", "x1", "x2"), fit.coefficients):
            w.writerow([f"log_pi_{name}", f"{c:.4f}"])
        w.writerow(["exp_quad_max_rel_error", f"{fit.max_rel_error:.4f}"])
        for i in range(2):
            w.writerow([f"lambda_L_intercept_{i + 1}", f"{icpt[i]:.4f}"])
        for i in range(2):
            for j in range(2):
                w.writerow([f"lambda_L_slope_{i + 1}{j + 1}", f"{slope[i, j]:.4f}"])
        w.writerow(["lambda_L_affine_max_residual", f"{resid:.4f}"])
    print(f"lambda = {pair.lam:.6f} (N = {pair.N}); {fit.describe()}")
    return [npz, pi_path, report]


def _state(spec: str, params: ModelParams, cfg: RunConfig) -> np.ndarray:
    spec = spec.strip()
    if spec == "mean":
        return params.theta_P.copy()
    try:
        day = date.fromisoformat(spec)
    except ValueError:
        day = None
    if day is not None:
        dates, states = read_states_csv(_require(cfg.states or cfg.out / "states.csv", "states file"))
        if day not in dates:
            raise ConfigError(f"date {day} not in the filtered states")
        return states[dates.index(day)]
    values = _floats(spec)
    if len(values) != 2:
        raise ConfigError(f"state must be 'mean', an ISO date or 'x1,x2', got {spec!r}")
    return np.array(values)


def cmd_analyze(cfg: RunConfig) -> list[Path]:
    """Measure decomposition, conditional forecasts and, with data, realised tables."""
    params = _params(cfg)
    seed = _seed(cfg.mc_seed, "analyze")
    pair = _eigenpair(cfg, params)
    out = _out(cfg)
    header = cfg.header("analyze")
    paths = []

    icpt, slope, _ = lambda_L_affine(pair)
    se = _standard_errors(cfg)
    mv = martingale_vol(params, pair, mpr_se=se)
    test = test_v_zero(mv) if se is not None else None
    measures_path = out / "measures.csv"
    write_measure_report(measures_path, icpt, slope, mv, test, header)
    paths.append(measures_path)

    x = _state(cfg.mc_state, params, cfg)
    surface = solve_surface(params, cfg.grid, max_tau=31.0)
    kwargs = dict(horizon=cfg.mc_horizon, n_paths=cfg.mc_paths, seed=seed, dt_euler=cfg.mc_dt)
    tables = [conditional_forecast(tag, params, pair, surface, x, **kwargs) for tag in (MeasureTag.P, MeasureTag.L)]
    forecast_path = out / "forecasts.csv"
    write_forecast_csv(forecast_path, tables, header + [f"state: {x[0]:.6f}, {x[1]:.6f}"])
    paths.append(forecast_path)

    bound = hj_bound(params, pair, surface, x, **kwargs)
    dom = log_dominance_check(params, pair, surface, x, **kwargs)
    dom_path = out / "long_bond_checks.csv"
    with open(dom_path, "w", newline="") as fh:
        for line in header + [f"hj_bound: {bound.value:.6f} (se {bound.se:.6f})"]:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["maturity", "log_gap", "se_log_gap", "excess", "covariance_price", "se_pricing_gap",
                    "dominated", "pricing_ok"])
        for r in dom.rows:
            w.writerow([f"{r.maturity:g}", f"{r.log_gap:.6f}", f"{r.se_log_gap:.6f}", f"{r.excess:.6f}",
                        f"{r.covariance_price:.6f}", f"{r.se_pricing_gap:.6f}", r.dominated, r.pricing_ok])
    paths.append(dom_path)

    curves_path = cfg.curves_csv or cfg.out / "curves.csv"
    states_path = cfg.states or cfg.out / "states.csv"
    if Path(curves_path).exists() and Path(states_path).exists():
        curves = read_curves_csv(curves_path)
        dates, states = read_states_csv(states_path)
        by_date = dict(zip(dates, states))
        keep = [c for c in curves if c.date in by_date]
        aligned = np.array([by_date[c.date] for c in keep])
        realized_path = out / "realized_returns.csv"
        realized_table(keep, pair, aligned).write_csv(realized_path, header)
        levered_path = out / "duration_matched.csv"
        duration_matched_table(keep, pair=pair, states=aligned).write_csv(levered_path, header)
        wealth_path = out / "wealth_paths.csv"
        with open(wealth_path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["date", "strategy", "wealth"])
            for name, (ds, wealth) in wealth_paths(keep, pair, aligned).items():
                w.writerow([ds[0].isoformat(), name, "1.0"])
                for d, v in zip(ds, wealth[1:]):
                    w.writerow([d.isoformat(), name, f"{v:.8f}"])
        paths += [realized_path, levered_path, wealth_path]
    print(f"HJ bound {bound.value:.4f}; long bond dominance {'holds' if dom.ok else 'VIOLATED'}")
    return paths


def cmd_liftoff(cfg: RunConfig) -> list[Path]:
    """Lift-off time distributions under the three measures."""
    params = _params(cfg)
    seed = _seed(cfg.liftoff_seed, "liftoff")
    pair = _eigenpair(cfg, params)
    x0 = _state(cfg.liftoff_state, params, cfg)
    out = _out(cfg)
    header = cfg.header("liftoff") + [f"state: {x0[0]:.6f}, {x0[1]:.6f}"]
    dists = [simulate_liftoff(tag, params, pair, x0, cfg.liftoff_dt, cfg.liftoff_cap, cfg.liftoff_paths, seed,
                              cfg.liftoff_threshold, workers=cfg.threads) for tag in MeasureTag]
    summaries = [summarize(d, min_uncensored=0) for d in dists]
    hist_path = out / "liftoff_histogram.csv"
    write_histogram_csv(hist_path, dists, header_lines=header)
    summary_path = out / "liftoff_summary.csv"
    write_summary_csv(summary_path, summaries, header)
    print("; ".join(f"{s.tag.value}: median {s.median:.2f}y mean {s.mean:.2f}y" for s in summaries))
    return [hist_path, summary_path]


def cmd_report(cfg: RunConfig) -> list[Path]:
    """Collect the CSV artefacts in the output directory into one text summary."""
    out = _require(cfg.out, "output directory")
    files = sorted(p for p in out.glob("*.csv") if p.name != "eigenfunction.csv")
    if not files:
        raise FileNotFoundError(f"no CSV reports in {out}")
    lines = cfg.header("report")
    for f in files:
        lines += ["", f"== {f.name} =="]
        body = f.read_text().splitlines()
        lines += body[:60] + ([f"... ({len(body) - 60} more lines)"] if len(body) > 60 else [])
    path = out / "report.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"report written to {path}")
    return [path]


COMMANDS = {
    "ingest": cmd_ingest,
    "estimate": cmd_estimate,
    "extract": cmd_extract,
    "analyze": cmd_analyze,
    "liftoff": cmd_liftoff,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bqg2", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="INI run configuration")
    parser.add_argument("--out", type=Path, help="output directory (overrides the configuration)")
    parser.add_argument("--seed", type=int, help="seed for Monte Carlo and estimation starts")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for simulations")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg = replace(cfg, mc_seed=args.seed, liftoff_seed=args.seed, estimation_seed=args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            cfg.threads = args.threads
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        COMMANDS[args.command](cfg)
    except (FileNotFoundError, PermissionError, IsADirectoryError, DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ExtractionError, PdeInstabilityError, FilterError, np.linalg.LinAlgError, FloatingPointError,
            RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
