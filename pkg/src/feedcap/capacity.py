"""Finite-horizon rate evaluation and optimization over sequential strategies.

The n-block objective for a strategy (Lambda_t, K_Z_t) is

    C_n = (1/2) sum_t log(K_I_t / K_Ihat_t)      [nats]

subject to the average power constraint (1/n) sum_t (Lambda_t K_t Lambda_t^T
+ K_Z_t) <= kappa, where K_I_t and K_t come from the output filter.  The
objective is strictly increasing in every K_Z_t, so the constraint is active
for kappa > 0; `optimize_strategy` therefore bisects the power multiplier
(outer loop) around bounded quasi-Newton ascents with exact adjoint
gradients (inner loop), with seeded multi-start and a smallest-|Lambda|
tie-break among equal-value candidates.

`perfect_state_rate` optimizes the variant that feeds back the true state,
X_t = Lambda_t (S_t - E[S_t | Y^{t-1}]) + Z_t.  Its filter runs on S_t
itself (error covariance started at K_S1, process noise B_t K_W_t B_t^T,
measurement floor R_t), which is the same gain-filter algebra with a
different noise triple.  When the driver noise is recoverable from the
feedthrough (single invertible driver) and the initial state is
deterministic, the two objectives coincide; with independent drivers in
state and feedthrough they genuinely differ, and comparing the two optima
quantifies that gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ChannelConfig,
    FloatArray,
    PoSsRealization,
    is_time_invariant,
    with_horizon,
)
from .noise_filter import NoiseFilterTrace, noise_riccati_step, run_noise_filter
from .channel_filter import (
    SequentialStrategy,
    _GainFilterPlant,
    _plant_forward,
    _plant_value_grad,
    _poss_plant,
    output_riccati_step,
    run_output_filter,
)
from ._optim import OptimizerDiagnostics, OptimizerOptions, maximize_under_power

__all__ = [
    "CapacityResult",
    "SteadyStateResult",
    "AsymptoticReport",
    "OptimizerOptions",
    "OptimizerDiagnostics",
    "evaluate_rate",
    "optimize_strategy",
    "perfect_state_rate",
    "steady_state_riccati",
    "asymptotic_rate_estimate",
]


@dataclass(frozen=True)
class CapacityResult:
    """Rate value (nats), per-step decomposition, realized power and strategy."""

    value: float
    rate_per_step: FloatArray
    avg_power: float
    strategy: SequentialStrategy
    optimizer_diag: OptimizerDiagnostics | None = None


@dataclass(frozen=True)
class SteadyStateResult:
    Sigma: FloatArray
    K: FloatArray
    M: FloatArray
    K_Ihat: float
    K_I: float
    converged: bool
    iterations_sigma: int
    iterations_output: int
    note: str = ""


@dataclass(frozen=True)
class AsymptoticReport:
    """Per-horizon optima: values C_n, per-step rates C_n/n and their differences."""

    ns: tuple[int, ...]
    values: FloatArray
    per_step: FloatArray
    diffs: FloatArray
    converged: tuple[bool, ...]


def evaluate_rate(
    r: PoSsRealization,
    s: SequentialStrategy,
    noise_trace: NoiseFilterTrace | None = None,
) -> CapacityResult:
    """Rate and power of a fixed sequential strategy (no optimization)."""
    if noise_trace is None:
        noise_trace = run_noise_filter(r)
    out = run_output_filter(r, s, noise_trace)
    rate = 0.5 * np.log(out.K_I / noise_trace.K_Ihat)
    return CapacityResult(
        value=float(rate.sum()),
        rate_per_step=rate,
        avg_power=float(out.power.mean()),
        strategy=s,
        optimizer_diag=None,
    )


class _PlantProblem:
    """Adapter exposing a gain-filter plant to the constrained driver."""

    def __init__(self, plant: _GainFilterPlant, kappa: float):
        self.plant = plant
        self.n = plant.n
        self.n_s = plant.n_s
        self.kappa = float(kappa)
        self.bounds = [(None, None)] * (self.n * self.n_s) + [(0.0, None)] * self.n
        self.mu_hint = 0.5 / (self.kappa + float(np.min(plant.noise_floor)))

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        split = self.n * self.n_s
        return x[:split].reshape(self.n, self.n_s), x[split:]

    def fg(self, x: np.ndarray, mu: float):
        lam, kz = self.unpack(x)
        value, psum, g_lam, g_kz = _plant_value_grad(self.plant, lam, kz, mu)
        return value - mu * psum, np.concatenate([g_lam.ravel(), g_kz]), value, psum

    def starts(self, rng: np.random.Generator, count: int) -> list[np.ndarray]:
        n, n_s, kappa = self.n, self.n_s, self.kappa
        out = [np.concatenate([np.zeros(n * n_s), np.full(n, kappa)])]
        scales = [0.3, 1.0, 3.0]
        while len(out) < count:
            lam = rng.normal(0.0, scales[len(out) % len(scales)], size=n * n_s)
            kz = kappa * rng.uniform(0.1, 1.5, size=n)
            out.append(np.concatenate([lam, kz]))
        return out[:count]

    def tie_norm(self, x: np.ndarray) -> float:
        lam, _ = self.unpack(x)
        return float(np.linalg.norm(lam))

    def add_slack(self, x: np.ndarray, delta: float) -> np.ndarray:
        out = x.copy()
        out[-1] += delta  # K_Z at the last step enters no later Riccati state
        return out


def _perfect_plant(r: PoSsRealization, noise_trace: NoiseFilterTrace) -> _GainFilterPlant:
    n, n_s = r.n, r.n_s
    if n > 1:
        BK = np.einsum("tij,tjk->tik", r.B, r.K_W[: n - 1])
        Q = np.einsum("tik,tlk->til", BK, r.B)
        s = np.einsum("tik,tk->ti", BK, r.N[: n - 1, 0, :])
    else:
        Q = np.zeros((0, n_s, n_s))
        s = np.zeros((0, n_s))
    R = np.einsum("ti,tij,tj->t", r.N[:, 0, :], r.K_W, r.N[:, 0, :])
    return _GainFilterPlant(
        A=r.A,
        C=r.C[:, 0, :].copy(),
        Q=Q,
        s=s,
        noise_floor=R,
        denom=noise_trace.K_Ihat.copy(),
        K1=0.5 * (r.K_S1 + r.K_S1.T),
    )


def _optimize_plant(
    r: PoSsRealization,
    cfg: ChannelConfig,
    options: OptimizerOptions,
    plant: _GainFilterPlant,
) -> CapacityResult:
    problem = _PlantProblem(plant, cfg.kappa)
    x, _, _, diag = maximize_under_power(problem, cfg.kappa, r.n, options)
    lam, kz = problem.unpack(x)
    strategy = SequentialStrategy(Lambda=lam, K_Z=kz)
    _, _, K_I, power, rate = _plant_forward(plant, strategy.Lambda, strategy.K_Z)
    return CapacityResult(
        value=float(rate.sum()),
        rate_per_step=rate,
        avg_power=float(power.mean()),
        strategy=strategy,
        optimizer_diag=diag,
    )


def _fast_path(
    r: PoSsRealization,
    cfg: ChannelConfig,
    plant: _GainFilterPlant,
    note: str,
    strategy: SequentialStrategy,
) -> CapacityResult:
    _, _, K_I, power, rate = _plant_forward(plant, strategy.Lambda, strategy.K_Z)
    diag = OptimizerDiagnostics(iterations=0, grad_norm=0.0, restarts=0, converged=True, note=note)
    return CapacityResult(
        value=float(rate.sum()),
        rate_per_step=rate,
        avg_power=float(power.mean()),
        strategy=strategy,
        optimizer_diag=diag,
    )


def _check_cfg(r: PoSsRealization, cfg: ChannelConfig) -> None:
    if cfg.n != r.n:
        raise ValueError(f"config horizon n={cfg.n} does not match model horizon n={r.n}")


def optimize_strategy(
    r: PoSsRealization,
    cfg: ChannelConfig,
    options: OptimizerOptions | None = None,
) -> CapacityResult:
    """Maximize the n-block rate over sequential strategies at power kappa.

    Deterministic given options.seed.  Non-convergence of the multiplier
    search or of restarts is reported in the diagnostics, never raised.
    kappa = 0 and n = 1 are handled in closed form (no feedback can help).
    """
    _check_cfg(r, cfg)
    options = options or OptimizerOptions()
    noise_trace = run_noise_filter(r)
    plant = _poss_plant(r, noise_trace)
    if cfg.kappa == 0.0:
        return _fast_path(r, cfg, plant, "kappa=0: zero strategy is optimal",
                          SequentialStrategy.zero(r.n, r.n_s))
    if r.n == 1:
        # K_1 = 0 makes Lambda_1 irrelevant; all power goes to the dither.
        return _fast_path(r, cfg, plant, "n=1: closed form",
                          SequentialStrategy.no_feedback(1, r.n_s, cfg.kappa))
    return _optimize_plant(r, cfg, options, plant)


def perfect_state_rate(
    r: PoSsRealization,
    cfg: ChannelConfig,
    options: OptimizerOptions | None = None,
) -> CapacityResult:
    """Optimize the true-state-feedback variant X_t = Lambda_t (S_t - E S_t|Y^{t-1}) + Z_t.

    The returned strategy's Lambda multiplies the receiver-side error of the
    true state, not of the noise filter's estimate.  The rate is measured
    against the same noise entropy terms K_Ihat_t as the sequential
    objective, so the two values are directly comparable.
    """
    _check_cfg(r, cfg)
    options = options or OptimizerOptions()
    noise_trace = run_noise_filter(r)
    plant = _perfect_plant(r, noise_trace)
    if cfg.kappa == 0.0:
        return _fast_path(r, cfg, plant, "kappa=0: zero strategy is optimal",
                          SequentialStrategy.zero(r.n, r.n_s))
    return _optimize_plant(r, cfg, options, plant)


def steady_state_riccati(
    r: PoSsRealization,
    s: SequentialStrategy,
    tol: float = 1e-12,
    max_iters: int = 100_000,
) -> SteadyStateResult:
    """Fixed points of both Riccati recursions for time-invariant data.

    Iterates the noise filter to Sigma*, then the output filter (at the
    converged gain M* and innovations variance K_Ihat*) to K*.  Divergence
    or failure to converge within `max_iters` is flagged in the result, not
    raised.
    """
    if not is_time_invariant(r):
        raise ValueError("steady_state_riccati requires a time-invariant realization")
    if r.n < 2:
        raise ValueError("need n >= 2 so the realization carries A_t and B_t")
    if not (np.all(s.Lambda == s.Lambda[0]) and np.all(s.K_Z == s.K_Z[0])):
        raise ValueError("steady_state_riccati requires a time-invariant strategy")
    A, B = r.A[0], r.B[0]
    c, nr, K_W = r.C[0, 0], r.N[0, 0], r.K_W[0]
    lam, kz = s.Lambda[0], float(s.K_Z[0])

    Sigma = 0.5 * (r.K_S1 + r.K_S1.T)
    M = np.zeros(r.n_s)
    k_ihat = float(c @ Sigma @ c + nr @ K_W @ nr)
    iters_sigma = 0
    converged_sigma = False
    for iters_sigma in range(1, max_iters + 1):
        Sigma_next, M, k_ihat = noise_riccati_step(A, B, c, nr, K_W, Sigma)
        delta = float(np.max(np.abs(Sigma_next - Sigma)))
        Sigma = Sigma_next
        if not np.all(np.isfinite(Sigma)) or np.max(np.abs(Sigma)) > 1e12:
            return SteadyStateResult(
                Sigma, np.full_like(Sigma, np.nan), M, k_ihat, np.nan,
                False, iters_sigma, 0, "noise Riccati iteration diverged",
            )
        if delta <= tol:
            converged_sigma = True
            break

    K = np.zeros((r.n_s, r.n_s))
    k_i = k_ihat + kz
    iters_out = 0
    converged_out = False
    for iters_out in range(1, max_iters + 1):
        K_next, _, k_i = output_riccati_step(A, c, lam, kz, M, k_ihat, K)
        delta = float(np.max(np.abs(K_next - K)))
        K = K_next
        if not np.all(np.isfinite(K)) or np.max(np.abs(K)) > 1e12:
            return SteadyStateResult(
                Sigma, K, M, k_ihat, k_i,
                False, iters_sigma, iters_out, "output Riccati iteration diverged",
            )
        if delta <= tol:
            converged_out = True
            break

    converged = converged_sigma and converged_out
    note = "" if converged else f"no fixed point within {max_iters} iterations"
    return SteadyStateResult(
        Sigma=Sigma, K=K, M=M, K_Ihat=k_ihat, K_I=k_i,
        converged=converged, iterations_sigma=iters_sigma,
        iterations_output=iters_out, note=note,
    )


def asymptotic_rate_estimate(
    r: PoSsRealization,
    cfg: ChannelConfig,
    n_grid: tuple[int, ...] | list[int],
    options: OptimizerOptions | None = None,
) -> AsymptoticReport:
    """Optimize C_n over a horizon grid and report the per-step sequence.

    Returns C_n, C_n/n and successive differences of C_n/n; no convergence
    (or limit) claim is made, the table is raw evidence.  Requires a
    time-invariant realization, which is re-horizoned per grid point.
    """
    ns = tuple(int(n) for n in n_grid)
    if len(ns) == 0:
        raise ValueError("n_grid must be non-empty")
    if any(n < 1 for n in ns):
        raise ValueError("n_grid entries must be >= 1")
    values = np.zeros(len(ns))
    converged = []
    for i, n in enumerate(ns):
        r_n = with_horizon(r, n)
        result = optimize_strategy(r_n, ChannelConfig(kappa=cfg.kappa, n=n), options)
        values[i] = result.value
        converged.append(bool(result.optimizer_diag.converged))
    per_step = values / np.asarray(ns, dtype=float)
    return AsymptoticReport(
        ns=ns, values=values, per_step=per_step, diffs=np.diff(per_step),
        converged=tuple(converged),
    )
