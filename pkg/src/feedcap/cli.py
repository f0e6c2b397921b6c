"""Command-line front end.

Every subcommand ingests a JSON model file, runs the corresponding engine
and writes its artifacts into the output directory:

    results.csv    per-step (or per-entry) numbers for the command
    summary.json   headline values and diagnostics, deterministic bytes
                   for a fixed config and seed
    plotdata.csv   long-format (series, x, y) rows for downstream plotting
    <command>.png  rendered figures of the same series (skip: --no-plots)

Exit codes: 0 success, 1 user error (bad arguments, missing or malformed
model, guard violations), 2 numerical failure (engine breakdown or a
non-converged result; artifacts are still written when available).

Rates and entropies are reported in nats unless --bits is given.  The
default seed comes from the FEEDCAP_SEED environment variable when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import (
    ChannelConfig,
    ModelFormatError,
    assemble_noise_covariance,
    is_time_invariant,
    load_model,
    with_horizon,
)
from .noise_filter import noise_entropy, run_noise_filter
from .channel_filter import SequentialStrategy, run_output_filter
from .capacity import (
    OptimizerOptions,
    asymptotic_rate_estimate,
    optimize_strategy,
    steady_state_riccati,
)
from .oracle import cp_optimize
from .mc_sim import check_orthogonality, empirical_rate, simulate
from . import plots

__all__ = ["RunConfig", "run", "main"]

_LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class RunConfig:
    command: str
    model: str
    kappa: float = 1.0
    n: int | None = None
    restarts: int = 16
    max_iters: int = 300
    tol: float = 1e-8
    seed: int = 0
    out: str = "."
    bits: bool = False
    no_plots: bool = False
    samples: int = 10_000
    n_grid: tuple[int, ...] = (1, 2, 3, 4, 6, 8)
    lam: tuple[float, ...] | None = None
    kz: float | None = None


class _UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract reserves 2
    # for numerical failures, so remap to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _write_summary(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_plotdata(path: str, rows: Iterable[tuple[str, float, float]]) -> None:
    _write_csv(path, ["series", "x", "y"], rows)


def _diag_dict(diag) -> dict:
    return {
        "iterations": diag.iterations,
        "grad_norm": diag.grad_norm,
        "restarts": diag.restarts,
        "converged": diag.converged,
        "note": diag.note,
    }


class _Paths:
    def __init__(self, cfg: RunConfig):
        os.makedirs(cfg.out, exist_ok=True)
        self.results = os.path.join(cfg.out, "results.csv")
        self.summary = os.path.join(cfg.out, "summary.json")
        self.plotdata = os.path.join(cfg.out, "plotdata.csv")
        self.figure = os.path.join(cfg.out, cfg.command.replace("-", "_") + ".png")

    def extra_figure(self, cfg: RunConfig, suffix: str) -> str:
        return os.path.join(cfg.out, cfg.command.replace("-", "_") + f"_{suffix}.png")


def _load(cfg: RunConfig):
    if cfg.kappa < 0:
        raise _UserError(f"kappa must be >= 0, got {cfg.kappa}")
    if not os.path.exists(cfg.model):
        raise _UserError(f"model file not found: {cfg.model}")
    try:
        r = load_model(cfg.model)
    except ModelFormatError as e:
        raise _UserError(f"malformed model file: {e}") from e
    if cfg.n is not None and cfg.n != r.n:
        if not is_time_invariant(r):
            raise _UserError(
                f"--n {cfg.n} requires a time-invariant model (model horizon is {r.n})"
            )
        r = with_horizon(r, cfg.n)
    return r


def _units(cfg: RunConfig) -> tuple[float, str]:
    return (1.0 / _LN2, "bits") if cfg.bits else (1.0, "nats")


def _options(cfg: RunConfig) -> OptimizerOptions:
    return OptimizerOptions(
        restarts=cfg.restarts, max_iters=cfg.max_iters, tol=cfg.tol, seed=cfg.seed
    )


def _base_summary(cfg: RunConfig, r, units_name: str) -> dict:
    return {
        "command": cfg.command,
        "model": cfg.model,
        "n": r.n,
        "kappa": cfg.kappa,
        "seed": cfg.seed,
        "units": units_name,
    }


def _cmd_filter(cfg: RunConfig, r) -> int:
    scale, uname = _units(cfg)
    paths = _Paths(cfg)
    trace = run_noise_filter(r)
    _, logdet = np.linalg.slogdet(assemble_noise_covariance(r))
    sum_log = float(np.log(trace.K_Ihat).sum())
    entropy = noise_entropy(trace, units=uname)

    header = (
        ["t", "K_Ihat"]
        + [f"M_{i+1}" for i in range(r.n_s)]
        + [f"Sigma_diag_{i+1}" for i in range(r.n_s)]
    )
    rows = []
    for t in range(r.n):
        m_row = list(trace.M[t]) if t < r.n - 1 else [np.nan] * r.n_s
        rows.append([t + 1, trace.K_Ihat[t]] + m_row + list(np.diag(trace.Sigma[t])))
    _write_csv(paths.results, header, rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "entropy": entropy,
            "sum_log_K_Ihat": sum_log * scale,
            "logdet_K_V": logdet * scale,
            "identity_gap": abs(sum_log - logdet) * scale,
        }
    )
    _write_summary(paths.summary, summary)
    ts = np.arange(1, r.n + 1)
    _write_plotdata(
        paths.plotdata, [("K_Ihat", float(t), float(v)) for t, v in zip(ts, trace.K_Ihat)]
    )
    if not cfg.no_plots:
        plots.line_figure(
            paths.figure, ts, {"K_Ihat": trace.K_Ihat},
            "t", "innovations variance", "Noise-filter innovations variance",
        )
    return 0


def _cmd_capacity(cfg: RunConfig, r) -> int:
    scale, uname = _units(cfg)
    paths = _Paths(cfg)
    res = optimize_strategy(r, ChannelConfig(kappa=cfg.kappa, n=r.n), _options(cfg))
    out = run_output_filter(r, res.strategy)

    header = (
        ["t", "rate", "power", "K_Z"] + [f"Lambda_{i+1}" for i in range(r.n_s)]
    )
    rows = [
        [t + 1, res.rate_per_step[t] * scale, out.power[t], res.strategy.K_Z[t]]
        + list(res.strategy.Lambda[t])
        for t in range(r.n)
    ]
    _write_csv(paths.results, header, rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "value": res.value * scale,
            "value_per_step": res.value * scale / r.n,
            "avg_power": res.avg_power,
            "diagnostics": _diag_dict(res.optimizer_diag),
        }
    )
    _write_summary(paths.summary, summary)
    ts = np.arange(1, r.n + 1)
    rows = [("rate", float(t), float(v * scale)) for t, v in zip(ts, res.rate_per_step)]
    rows += [("power", float(t), float(v)) for t, v in zip(ts, out.power)]
    _write_plotdata(paths.plotdata, rows)
    if not cfg.no_plots:
        plots.line_figure(
            paths.figure, ts,
            {f"rate [{uname}]": res.rate_per_step * scale, "power": out.power},
            "t", "per-step rate / power", "Optimized strategy, per-step behavior",
        )
    if not res.optimizer_diag.converged:
        print(f"numerical failure: optimizer did not converge: {res.optimizer_diag.note}",
              file=sys.stderr)
        return 2
    return 0


def _cmd_oracle_compare(cfg: RunConfig, r) -> int:
    scale, uname = _units(cfg)
    paths = _Paths(cfg)
    if r.n > 8:
        raise _UserError(f"oracle-compare needs n <= 8 (matrix-form guard), got n={r.n}")
    opts = _options(cfg)
    chan = ChannelConfig(kappa=cfg.kappa, n=r.n)
    seq = optimize_strategy(r, chan, opts)
    cp = cp_optimize(assemble_noise_covariance(r), chan, opts)
    delta = abs(seq.value - cp.value)

    header = ["t", "seq_rate"]
    rows = [[t + 1, seq.rate_per_step[t] * scale] for t in range(r.n)]
    _write_csv(paths.results, header, rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "sequential_value": seq.value * scale,
            "matrix_form_value": cp.value * scale,
            "abs_delta": delta * scale,
            "sequential_avg_power": seq.avg_power,
            "matrix_form_avg_power": cp.avg_power,
            "sequential_diagnostics": _diag_dict(seq.optimizer_diag),
            "matrix_form_diagnostics": _diag_dict(cp.optimizer_diag),
        }
    )
    _write_summary(paths.summary, summary)
    ts = np.arange(1, r.n + 1)
    rows = [("seq_rate", float(t), float(v * scale)) for t, v in zip(ts, seq.rate_per_step)]
    rows += [
        ("engine_value", 1.0, seq.value * scale),
        ("engine_value", 2.0, cp.value * scale),
    ]
    _write_plotdata(paths.plotdata, rows)
    if not cfg.no_plots:
        plots.bar_figure(
            paths.figure, ["sequential", "matrix form"],
            [seq.value * scale, cp.value * scale],
            f"n-block value [{uname}]",
            f"Engine agreement (|delta| = {delta * scale:.3e} {uname})",
        )
    if not (seq.optimizer_diag.converged and cp.optimizer_diag.converged):
        print("numerical failure: an engine did not converge", file=sys.stderr)
        return 2
    return 0


def _cmd_steady_state(cfg: RunConfig, r) -> int:
    _, uname = _units(cfg)
    paths = _Paths(cfg)
    if not is_time_invariant(r):
        raise _UserError("steady-state requires a time-invariant model")
    if r.n < 2:
        r = with_horizon(r, 2)  # fixed points do not depend on the horizon
    lam = np.zeros(r.n_s) if cfg.lam is None else np.asarray(cfg.lam, dtype=float)
    if lam.shape != (r.n_s,):
        raise _UserError(f"--lam needs {r.n_s} comma-separated values")
    kz = cfg.kappa if cfg.kz is None else cfg.kz
    if kz < 0:
        raise _UserError(f"--kz must be >= 0, got {kz}")
    s = SequentialStrategy(
        Lambda=np.tile(lam, (r.n, 1)), K_Z=np.full(r.n, float(kz))
    )
    res = steady_state_riccati(r, s)

    rows = []
    for name, mat in (("Sigma", res.Sigma), ("K", res.K)):
        for i in range(r.n_s):
            for j in range(r.n_s):
                rows.append([name, i + 1, j + 1, mat[i, j]])
    rows.append(["K_Ihat", 1, 1, res.K_Ihat])
    rows.append(["K_I", 1, 1, res.K_I])
    _write_csv(paths.results, ["field", "i", "j", "value"], rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "Sigma": res.Sigma,
            "K": res.K,
            "M": res.M,
            "K_Ihat": res.K_Ihat,
            "K_I": res.K_I,
            "converged": res.converged,
            "iterations_sigma": res.iterations_sigma,
            "iterations_output": res.iterations_output,
            "note": res.note,
            "strategy": {"Lambda_row": lam, "K_Z": float(kz)},
        }
    )
    _write_summary(paths.summary, summary)

    horizon = 60
    finite = run_noise_filter(with_horizon(r, horizon))
    ts = np.arange(1, horizon + 1)
    _write_plotdata(
        paths.plotdata,
        [("K_Ihat_finite_horizon", float(t), float(v)) for t, v in zip(ts, finite.K_Ihat)],
    )
    if not cfg.no_plots:
        plots.line_figure(
            paths.figure, ts, {"finite-horizon K_Ihat": finite.K_Ihat},
            "t", "innovations variance",
            "Approach to the fixed point",
            hline=res.K_Ihat, hline_label="steady state",
        )
    if not res.converged:
        print(f"numerical failure: {res.note or 'no fixed point'}", file=sys.stderr)
        return 2
    return 0


def _cmd_simulate(cfg: RunConfig, r) -> int:
    scale, uname = _units(cfg)
    paths = _Paths(cfg)
    if cfg.samples < 1:
        raise _UserError(f"--samples must be >= 1, got {cfg.samples}")
    res = optimize_strategy(r, ChannelConfig(kappa=cfg.kappa, n=r.n), _options(cfg))
    trace = simulate(r, res.strategy, n_samples=cfg.samples, seed=cfg.seed)
    er = empirical_rate(trace)
    rep = check_orthogonality(trace)
    z = (er.estimate - res.value) / er.se if er.se > 0 else float("inf")

    header = ["t", "empirical_rate", "exact_rate", "var_I", "var_Ihat"]
    v_i = np.var(trace.I, axis=0, ddof=1)
    v_ihat = np.var(trace.Ihat, axis=0, ddof=1)
    rows = [
        [t + 1, er.per_step[t] * scale, res.rate_per_step[t] * scale, v_i[t], v_ihat[t]]
        for t in range(r.n)
    ]
    _write_csv(paths.results, header, rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "n_samples": cfg.samples,
            "empirical_rate": er.estimate * scale,
            "standard_error": er.se * scale,
            "exact_value": res.value * scale,
            "z_score": z,
            "empirical_power": float(np.mean(trace.X**2)),
            "exact_avg_power": res.avg_power,
            "orthogonality": [
                {
                    "family": f.name,
                    "max_abs_corr": f.max_abs_corr,
                    "threshold": f.threshold,
                    "ok": f.ok,
                    "applicable": f.applicable,
                }
                for f in rep.families
            ],
            "orthogonality_ok": rep.all_ok,
        }
    )
    _write_summary(paths.summary, summary)
    ts = np.arange(1, r.n + 1)
    rows = [("empirical_rate", float(t), float(v * scale)) for t, v in zip(ts, er.per_step)]
    rows += [("exact_rate", float(t), float(v * scale)) for t, v in zip(ts, res.rate_per_step)]
    _write_plotdata(paths.plotdata, rows)
    if not cfg.no_plots:
        plots.line_figure(
            paths.figure, ts,
            {"empirical": er.per_step * scale, "exact": res.rate_per_step * scale},
            "t", f"per-step rate [{uname}]",
            f"Empirical vs exact rate ({cfg.samples} samples)",
        )
        plots.bar_figure(
            paths.extra_figure(cfg, "orthogonality"),
            [f.name for f in rep.families],
            [f.max_abs_corr for f in rep.families],
            "max |corr|", "Cross-correlation families",
            hline=rep.threshold, hline_label="3/sqrt(N)",
        )
    if not rep.all_ok:
        print("numerical failure: orthogonality violated at the 3/sqrt(N) level",
              file=sys.stderr)
        return 2
    return 0


def _cmd_asymptotic(cfg: RunConfig, r) -> int:
    scale, uname = _units(cfg)
    paths = _Paths(cfg)
    if not is_time_invariant(r):
        raise _UserError("asymptotic requires a time-invariant model")
    report = asymptotic_rate_estimate(
        r, ChannelConfig(kappa=cfg.kappa, n=r.n), cfg.n_grid, _options(cfg)
    )

    header = ["n", "C_n", "per_step", "per_step_diff"]
    rows = []
    for i, n in enumerate(report.ns):
        diff = report.diffs[i - 1] * scale if i > 0 else np.nan
        rows.append([n, report.values[i] * scale, report.per_step[i] * scale, diff])
    _write_csv(paths.results, header, rows)

    summary = _base_summary(cfg, r, uname)
    summary.update(
        {
            "n_grid": list(report.ns),
            "values": report.values * scale,
            "per_step": report.per_step * scale,
            "per_step_diffs": report.diffs * scale,
            "converged": list(report.converged),
        }
    )
    _write_summary(paths.summary, summary)
    _write_plotdata(
        paths.plotdata,
        [("per_step", float(n), float(v * scale)) for n, v in zip(report.ns, report.per_step)],
    )
    if not cfg.no_plots:
        plots.line_figure(
            paths.figure, report.ns, {"C_n / n": report.per_step * scale},
            "horizon n", f"per-step value [{uname}]", "Per-step value over horizons",
        )
    if not all(report.converged):
        print("numerical failure: optimizer did not converge at some horizons",
              file=sys.stderr)
        return 2
    return 0


_HANDLERS = {
    "filter": _cmd_filter,
    "capacity": _cmd_capacity,
    "oracle-compare": _cmd_oracle_compare,
    "steady-state": _cmd_steady_state,
    "simulate": _cmd_simulate,
    "asymptotic": _cmd_asymptotic,
}


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit status (0, 1 or 2)."""
    try:
        if config.command not in _HANDLERS:
            raise _UserError(f"unknown command: {config.command}")
        r = _load(config)
        return _HANDLERS[config.command](config, r)
    except _UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (np.linalg.LinAlgError, ArithmeticError, ValueError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


def _default_seed() -> int:
    env = os.environ.get("FEEDCAP_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        return 0


def _parse_n_grid(text: str) -> tuple[int, ...]:
    try:
        grid = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad n grid {text!r}") from e
    if not grid or any(n < 1 for n in grid):
        raise argparse.ArgumentTypeError(f"bad n grid {text!r}")
    return grid


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from e


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="path to a JSON model file")
    common.add_argument("--kappa", type=float, default=1.0, help="average power budget")
    common.add_argument("--n", type=int, default=None,
                        help="horizon override (time-invariant models)")
    common.add_argument("--restarts", type=int, default=16)
    common.add_argument("--max-iters", type=int, default=300)
    common.add_argument("--tol", type=float, default=1e-8)
    common.add_argument("--seed", type=int, default=_default_seed(),
                        help="default from FEEDCAP_SEED, else 0")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--bits", action="store_true",
                        help="report rates and entropies in bits")
    common.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    parser = _Parser(prog="feedcap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("filter", parents=[common],
                   help="noise filter: innovations variances and entropy")
    sub.add_parser("capacity", parents=[common],
                   help="optimize a sequential strategy at the power budget")
    sub.add_parser("oracle-compare", parents=[common],
                   help="sequential engine vs matrix-form engine (n <= 8)")
    p = sub.add_parser("steady-state", parents=[common],
                       help="Riccati fixed points for a time-invariant strategy")
    p.add_argument("--lam", type=_parse_floats, default=None,
                   help="comma-separated Lambda row (default zeros)")
    p.add_argument("--kz", type=float, default=None,
                   help="dither variance per step (default kappa)")
    p = sub.add_parser("simulate", parents=[common],
                       help="Monte Carlo validation of the optimized strategy")
    p.add_argument("--samples", type=int, default=10_000)
    p = sub.add_parser("asymptotic", parents=[common],
                       help="per-step value over a horizon grid")
    p.add_argument("--n-grid", type=_parse_n_grid, default=(1, 2, 3, 4, 6, 8),
                   help="comma-separated horizons")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    config = RunConfig(
        command=args.command,
        model=args.model,
        kappa=args.kappa,
        n=args.n,
        restarts=args.restarts,
        max_iters=args.max_iters,
        tol=args.tol,
        seed=args.seed,
        out=args.out,
        bits=args.bits,
        no_plots=args.no_plots,
        samples=getattr(args, "samples", 10_000),
        n_grid=getattr(args, "n_grid", (1, 2, 3, 4, 6, 8)),
        lam=getattr(args, "lam", None),
        kz=getattr(args, "kz", None),
    )
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
