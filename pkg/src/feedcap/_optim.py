"""Constrained-maximization driver shared by the sequential and matrix engines.

Both engines maximize a rate that is strictly increasing in the dither
variances, so the average-power constraint is active whenever kappa > 0.
The driver runs an outer bisection (with secant acceleration, in log space)
on the Lagrange multiplier mu of the power sum; each inner problem
maximize value(x) - mu * power_sum(x) is solved by bounded L-BFGS-B with
analytic gradients, warm-started across mu updates.  Multi-start is seeded
and deterministic; candidates within 1e-9 of the best value are tie-broken
by the engine's norm (smallest wins), then by start index.

An engine provides a problem object with:
    bounds            L-BFGS-B bounds or None
    mu_hint           positive initial multiplier scale
    fg(x, mu)         -> (L, dL/dx, value, power_sum)
    starts(rng, k)    -> list of k start vectors (informed starts first)
    tie_norm(x)       -> float
    add_slack(x, d)   -> x' with power_sum increased by exactly d (and value
                         not decreased), used to land on the budget exactly
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

__all__ = ["OptimizerOptions", "OptimizerDiagnostics", "maximize_under_power"]


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs shared by optimize_strategy / cp_optimize / perfect_state_rate."""

    restarts: int = 16
    max_iters: int = 300
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.tol > 0):
            raise ValueError("tol must be > 0")


@dataclass(frozen=True)
class OptimizerDiagnostics:
    iterations: int
    grad_norm: float
    restarts: int
    converged: bool
    note: str = ""


@dataclass
class _SolveResult:
    x: np.ndarray
    value: float
    power_sum: float
    iterations: int
    grad_norm: float
    converged: bool
    note: str = ""


def _inner(problem, x0: np.ndarray, mu: float, options: OptimizerOptions):
    def fun(x):
        L, g, _, _ = problem.fg(x, mu)
        return -L, -g

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=problem.bounds,
        options={"maxiter": options.max_iters, "ftol": 1e-14, "gtol": 1e-10},
    )
    _, g, value, power_sum = problem.fg(res.x, mu)
    return res.x, value, power_sum, int(res.nit), float(np.linalg.norm(g))


def _solve_one(problem, x0: np.ndarray, target: float, options: OptimizerOptions) -> _SolveResult:
    """Track the active power constraint power_sum(x*(mu)) = target over mu."""
    power_tol = options.tol * max(1.0, target)
    mu = float(problem.mu_hint)
    x, value, p, it, gn = _inner(problem, x0, mu, options)
    iterations = it
    note = ""

    if p > target:
        mu_lo, p_lo = mu, p
        bracketed = False
        for _ in range(80):
            mu *= 4.0
            x, value, p, it, gn = _inner(problem, x, mu, options)
            iterations += it
            if p <= target:
                bracketed = True
                break
            mu_lo, p_lo = mu, p
        mu_hi, p_hi, x_hi, v_hi = mu, p, x, value
        if not bracketed:
            return _SolveResult(x, value, p, iterations, gn, False, "could not bracket multiplier")
    else:
        mu_hi, p_hi, x_hi, v_hi = mu, p, x, value
        bracketed = False
        for _ in range(80):
            mu /= 4.0
            x, value, p, it, gn = _inner(problem, x, mu, options)
            iterations += it
            if p > target:
                bracketed = True
                break
            mu_hi, p_hi, x_hi, v_hi = mu, p, x, value
        mu_lo, p_lo = mu, p
        if not bracketed:
            # power never reaches the budget even at a vanishing multiplier;
            # fall through with the feasible solution and top up below
            note = "budget not reached while relaxing multiplier"

    if bracketed:
        lo, hi = np.log(mu_lo), np.log(mu_hi)
        for k in range(60):
            if abs(p_hi - target) <= power_tol or hi - lo < 1e-13:
                break
            if k % 3 != 2 and p_lo != p_hi:
                m = hi + (target - p_hi) * (lo - hi) / (p_lo - p_hi)
                m = float(np.clip(m, lo + 0.02 * (hi - lo), hi - 0.02 * (hi - lo)))
            else:
                m = 0.5 * (lo + hi)
            x, value, p, it, gn = _inner(problem, x_hi, np.exp(m), options)
            iterations += it
            if p > target:
                lo, p_lo = m, p
            else:
                hi, p_hi, x_hi, v_hi = m, p, x, value

    # land on the budget by spending the residual slack on extra dither; a
    # 1e-12 relative margin keeps the recomputed power strictly feasible
    # under roundoff (the value cost is ~1e-13, far below any tolerance)
    slack = target - p_hi - 1e-12 * max(1.0, abs(target))
    x_final = x_hi
    if slack > 0:
        x_final = problem.add_slack(x_hi, slack)
    mu_final = np.exp(hi) if bracketed else mu
    _, g, v_final, p_final = problem.fg(x_final, mu_final)
    converged = abs(p_final - target) <= max(power_tol, 1e-9 * max(1.0, target))
    if not converged and not note:
        note = f"power {p_final:g} missed budget {target:g}"
    return _SolveResult(
        x_final, v_final, p_final, iterations, float(np.linalg.norm(g)), converged, note
    )


def maximize_under_power(problem, kappa: float, n: int, options: OptimizerOptions):
    """Multi-start driver; returns (x, value, avg_power, diagnostics)."""
    rng = np.random.default_rng(options.seed)
    target = n * float(kappa)
    results: list[tuple[float, float, int, _SolveResult]] = []
    iterations = 0
    failed = 0
    for idx, x0 in enumerate(problem.starts(rng, options.restarts)):
        res = _solve_one(problem, np.asarray(x0, dtype=float), target, options)
        iterations += res.iterations
        if not res.converged:
            failed += 1
        results.append((res.value, problem.tie_norm(res.x), idx, res))
    best_value = max(item[0] for item in results)
    eligible = [item for item in results if item[0] >= best_value - 1e-9]
    eligible.sort(key=lambda item: (item[1], item[2]))
    chosen = eligible[0][3]
    note = chosen.note
    if failed and not note:
        note = f"{failed}/{len(results)} restarts did not converge"
    diag = OptimizerDiagnostics(
        iterations=iterations,
        grad_norm=chosen.grad_norm,
        restarts=len(results),
        converged=chosen.converged,
        note=note,
    )
    return chosen.x, chosen.value, chosen.power_sum / n, diag
