"""Monte Carlo simulation of the closed loop, for statistical validation.

All strategy forms are driven by the same primitive randomness, drawn from
three counter-based (Philox) streams keyed as (seed, stream) with

    stream 0: state-noise innovations W_t      (n_samples, n, n_w)
    stream 1: dither draws                     (n_samples, n)
    stream 2: initial state S_1                (n_samples, n_s)

so different strategy forms can be seed-coupled: a sequential strategy and
its unrolled matrix form consume identical W, S_1 and dither standard
normals and therefore produce identical sample paths (the dither of the
matrix form is the lower-triangular Cholesky image of the same standard
normals).  Because the generators are counter-based, the draw tensors are
well-defined independently of how sampling would be batched.

Matrix-form strategies are applied in the centered convention
X^n = B (V^n - E V^n) + Zbar^n; the innovations form likewise reads its
regressors centered.  Receiver-side quantities for matrix forms --
Shathat_t = E[Shat_t | Y^{t-1}] and the innovation I_t = Y_t - E[Y_t | Y^{t-1}]
-- are computed by exact Gaussian conditioning on the strategy's joint
covariance rather than by a filter recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    FloatArray,
    PoSsRealization,
    assemble_noise_covariance,
    noise_mean,
    validate_realization,
)
from .noise_filter import run_noise_filter, _state_coefficients
from .channel_filter import SequentialStrategy, run_output_filter
from .oracle import (
    CoverPombraStrategy,
    InnovationsFormStrategy,
    _innovations_maps,
)

__all__ = [
    "SimulationTrace",
    "CorrelationFamily",
    "OrthogonalityReport",
    "EmpiricalRate",
    "simulate",
    "check_orthogonality",
    "empirical_rate",
]


@dataclass(frozen=True)
class SimulationTrace:
    """Sample paths over (sample, t); state-valued paths carry a trailing axis.

    Z holds whatever dither the strategy form draws: per-step dithers for
    sequential and innovations strategies, the correlated Zbar for matrix
    strategies (reflected by strategy_kind).
    """

    S: FloatArray
    W: FloatArray
    V: FloatArray
    Shat: FloatArray
    Ihat: FloatArray
    X: FloatArray
    Z: FloatArray
    Y: FloatArray
    Shathat: FloatArray
    I: FloatArray
    seed: int
    n_samples: int
    strategy_kind: str

    @property
    def n(self) -> int:
        return self.V.shape[1]

    def to_csv(self, path: str, max_samples: int = 1000) -> None:
        """Long-format dump (one row per sample and step), 17 significant digits.

        Refuses to write more than `max_samples` samples; raise the limit
        explicitly for bigger dumps.
        """
        if self.n_samples > max_samples:
            raise ValueError(
                f"trace has {self.n_samples} samples; raise max_samples={max_samples} to export"
            )
        n_s = self.S.shape[2]
        n_w = self.W.shape[2]
        cols = (
            ["sample", "t"]
            + [f"S_{i+1}" for i in range(n_s)]
            + [f"W_{i+1}" for i in range(n_w)]
            + ["V"]
            + [f"Shat_{i+1}" for i in range(n_s)]
            + ["Ihat", "X", "Z", "Y"]
            + [f"Shathat_{i+1}" for i in range(n_s)]
            + ["I"]
        )
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.n_samples):
                for t in range(self.n):
                    vals = (
                        list(self.S[k, t])
                        + list(self.W[k, t])
                        + [self.V[k, t]]
                        + list(self.Shat[k, t])
                        + [self.Ihat[k, t], self.X[k, t], self.Z[k, t], self.Y[k, t]]
                        + list(self.Shathat[k, t])
                        + [self.I[k, t]]
                    )
                    fh.write(f"{k},{t+1}," + ",".join(f"{v:.17g}" for v in vals) + "\n")


@dataclass(frozen=True)
class CorrelationFamily:
    name: str
    max_abs_corr: float
    threshold: float
    ok: bool
    applicable: bool = True


@dataclass(frozen=True)
class OrthogonalityReport:
    families: tuple[CorrelationFamily, ...]
    n_samples: int
    threshold: float

    @property
    def all_ok(self) -> bool:
        return all(f.ok for f in self.families if f.applicable)


@dataclass(frozen=True)
class EmpiricalRate:
    estimate: float
    se: float
    per_step: FloatArray


def _gaussian_factor(K: FloatArray) -> FloatArray:
    """Lower Cholesky factor, or an eigenvalue factor for semidefinite K."""
    K = np.asarray(K, dtype=float)
    if K.size == 0 or not np.any(K):
        return np.zeros_like(K)
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (K + K.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


def _draws(r: PoSsRealization, n_samples: int, seed: int):
    def stream(i: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox([seed, i]))

    xi_W = stream(0).standard_normal((n_samples, r.n, r.n_w))
    xi_Z = stream(1).standard_normal((n_samples, r.n))
    xi_S1 = stream(2).standard_normal((n_samples, r.n_s))
    return xi_W, xi_Z, xi_S1


def _noise_paths(r: PoSsRealization, xi_W: np.ndarray, xi_S1: np.ndarray):
    """Sample S, W, V and run the per-sample noise filter (Shat, Ihat)."""
    trace = run_noise_filter(r)
    N = xi_W.shape[0]
    n, n_s = r.n, r.n_s
    S = np.zeros((N, n, n_s))
    W = np.zeros((N, n, r.n_w))
    V = np.zeros((N, n))
    Shat = np.zeros((N, n, n_s))
    Ihat = np.zeros((N, n))
    S[:, 0] = r.mu_S1 + xi_S1 @ _gaussian_factor(r.K_S1).T
    Shat[:, 0] = r.mu_S1
    for t in range(n):
        W[:, t] = xi_W[:, t] @ _gaussian_factor(r.K_W[t]).T
        V[:, t] = S[:, t] @ r.C[t, 0] + W[:, t] @ r.N[t, 0]
        Ihat[:, t] = V[:, t] - Shat[:, t] @ r.C[t, 0]
        if t < n - 1:
            S[:, t + 1] = S[:, t] @ r.A[t].T + W[:, t] @ r.B[t].T
            Shat[:, t + 1] = Shat[:, t] @ r.A[t].T + np.outer(Ihat[:, t], trace.M[t])
    return trace, S, W, V, Shat, Ihat


def simulate(
    r: PoSsRealization,
    strategy: SequentialStrategy | CoverPombraStrategy | InnovationsFormStrategy,
    n_samples: int,
    seed: int = 0,
    _noise_gain_override: FloatArray | None = None,
) -> SimulationTrace:
    """Sample the closed loop under the given strategy form.

    Reproducible given (seed, n_samples); the per-sample identities
    Y_t = X_t + V_t and Ihat_t = V_t - C_t Shat_t hold exactly by
    construction.  `_noise_gain_override` substitutes the noise-filter gains
    M_t (testing hook for negative controls); it must have shape (n-1, n_s).
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    report = validate_realization(r)
    if not report.ok:
        raise ValueError("invalid realization: " + "; ".join(report.violations))
    xi_W, xi_Z, xi_S1 = _draws(r, n_samples, seed)
    trace, S, W, V, Shat, Ihat = _noise_paths(r, xi_W, xi_S1)
    if _noise_gain_override is not None:
        M = np.asarray(_noise_gain_override, dtype=float)
        for t in range(r.n - 1):
            Shat[:, t + 1] = Shat[:, t] @ r.A[t].T + np.outer(Ihat[:, t], M[t])
            Ihat[:, t + 1] = V[:, t + 1] - Shat[:, t + 1] @ r.C[t + 1, 0]

    n = r.n
    N = n_samples
    if isinstance(strategy, SequentialStrategy):
        out = run_output_filter(r, strategy, trace)
        Z = xi_Z * np.sqrt(strategy.K_Z)
        X = np.zeros((N, n))
        Y = np.zeros((N, n))
        Shathat = np.zeros((N, n, r.n_s))
        I = np.zeros((N, n))
        Shathat[:, 0] = r.mu_S1
        for t in range(n):
            X[:, t] = (Shat[:, t] - Shathat[:, t]) @ strategy.Lambda[t] + Z[:, t]
            Y[:, t] = X[:, t] + V[:, t]
            I[:, t] = Y[:, t] - Shathat[:, t] @ r.C[t, 0]
            if t < n - 1:
                Shathat[:, t + 1] = Shathat[:, t] @ r.A[t].T + np.outer(I[:, t], out.F[t])
        return SimulationTrace(
            S=S, W=W, V=V, Shat=Shat, Ihat=Ihat, X=X, Z=Z, Y=Y,
            Shathat=Shathat, I=I, seed=seed, n_samples=n_samples,
            strategy_kind="sequential",
        )

    if isinstance(strategy, CoverPombraStrategy):
        kind = "matrix"
        P = strategy.B
        K_D = strategy.K_Zbar
        Z = xi_Z @ _gaussian_factor(K_D).T
        dither = Z
    elif isinstance(strategy, InnovationsFormStrategy):
        kind = "innovations"
        P, Q = _innovations_maps(strategy)
        K_D = (Q * strategy.K_Z) @ Q.T
        Z = xi_Z * np.sqrt(strategy.K_Z)
        dither = Z @ Q.T
    else:
        raise TypeError(f"unsupported strategy type {type(strategy).__name__}")
    if P.shape[0] != n:
        raise ValueError(f"strategy horizon {P.shape[0]} does not match model n={n}")

    m_V = noise_mean(r)
    Vc = V - m_V
    X = Vc @ P.T + dither
    Y = X + V

    # receiver side by Gaussian conditioning on Y^{t-1}
    K_V = assemble_noise_covariance(r)
    PI = P + np.eye(n)
    cov_Y = PI @ K_V @ PI.T + K_D
    cov_VY = K_V @ PI.T
    G = _state_coefficients(r, trace)
    m_S = np.zeros((n, r.n_s))
    m_S[0] = r.mu_S1
    for t in range(n - 1):
        m_S[t + 1] = r.A[t] @ m_S[t]
    Yc = Y - m_V
    Shathat = np.zeros((N, n, r.n_s))
    I = np.zeros((N, n))
    Shathat[:, 0] = m_S[0]
    I[:, 0] = Yc[:, 0]
    for t in range(1, n):
        past = cov_Y[:t, :t]
        coef_y = np.linalg.solve(past, cov_Y[:t, t])
        I[:, t] = Yc[:, t] - Yc[:, :t] @ coef_y
        cov_SY = G[t] @ cov_VY[:, :t]  # (n_s, t)
        coef_s = np.linalg.solve(past, cov_SY.T)  # (t, n_s)
        Shathat[:, t] = m_S[t] + Yc[:, :t] @ coef_s
    return SimulationTrace(
        S=S, W=W, V=V, Shat=Shat, Ihat=Ihat, X=X, Z=Z, Y=Y,
        Shathat=Shathat, I=I, seed=seed, n_samples=n_samples,
        strategy_kind=kind,
    )


def _cross_corr(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Columnwise correlation matrix; zero-variance columns correlate to 0."""
    N = A.shape[0]
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    sa = Ac.std(axis=0, ddof=1)
    sb = Bc.std(axis=0, ddof=1)
    sa[sa == 0.0] = np.inf
    sb[sb == 0.0] = np.inf
    return (Ac / sa).T @ (Bc / sb) / (N - 1)


def check_orthogonality(trace: SimulationTrace) -> OrthogonalityReport:
    """Sample cross-correlation checks against the 3/sqrt(n_samples) band.

    Families: Ihat_t vs Ihat_s (t != s), I_t vs I_s (t != s), Ihat_t vs V_j
    (j < t), Z_t vs Y_j (j < t).  The last family presumes a per-step dither
    that is fresh at each t, which holds for sequential and innovations
    strategies but not for a raw matrix strategy's correlated Zbar, so there
    it is reported as not applicable.
    """
    n = trace.n
    thr = 3.0 / np.sqrt(trace.n_samples)
    off = ~np.eye(n, dtype=bool)
    lower = np.tril(np.ones((n, n), dtype=bool), -1)

    def family(name: str, corr: np.ndarray, mask: np.ndarray, applicable: bool = True):
        m = float(np.max(np.abs(corr[mask]))) if mask.any() else 0.0
        return CorrelationFamily(
            name=name, max_abs_corr=m, threshold=thr,
            ok=bool(m <= thr) or not applicable, applicable=applicable,
        )

    fams = (
        family("Ihat-Ihat", _cross_corr(trace.Ihat, trace.Ihat), off),
        family("I-I", _cross_corr(trace.I, trace.I), off),
        family("Ihat-pastV", _cross_corr(trace.Ihat, trace.V), lower),
        family(
            "Z-pastY", _cross_corr(trace.Z, trace.Y), lower,
            applicable=trace.strategy_kind != "matrix",
        ),
    )
    return OrthogonalityReport(families=fams, n_samples=trace.n_samples, threshold=thr)


def empirical_rate(trace: SimulationTrace) -> EmpiricalRate:
    """Gaussian plug-in rate: (1/2) sum_t log(var(I_t) / var(Ihat_t)).

    The standard error comes from the delta method with the sampling
    covariance of the two log-variances, var ~ (1 - rho_t^2) / (N - 1) per
    step with rho_t = corr(I_t, Ihat_t); cross-step terms are neglected
    (innovations are orthogonal across steps).
    """
    N = trace.n_samples
    v_i = np.var(trace.I, axis=0, ddof=1)
    v_ihat = np.var(trace.Ihat, axis=0, ddof=1)
    per_step = 0.5 * np.log(v_i / v_ihat)
    rho = np.array(
        [_cross_corr(trace.I[:, [t]], trace.Ihat[:, [t]])[0, 0] for t in range(trace.n)]
    )
    se = float(np.sqrt(np.sum((1.0 - rho**2) / (N - 1))))
    return EmpiricalRate(estimate=float(per_step.sum()), se=se, per_step=per_step)
