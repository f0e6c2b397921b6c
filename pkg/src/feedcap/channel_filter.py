"""Closed-loop output filter for sequential channel-input strategies.

A sequential strategy transmits X_t = Lambda_t (Shat_t - Shathat_t) + Z_t,
where Shat_t is the noise filter's state estimate from V^{t-1}, Shathat_t is
the receiver-side estimate E[Shat_t | Y^{t-1}], and Z_t ~ N(0, K_Z_t) is an
independent dither.  The channel output Y_t = X_t + V_t then admits its own
innovations representation I_t = Y_t - C_t Shathat_t with

    K_I_t   = (Lambda_t + C_t) K_t (Lambda_t + C_t)^T + K_Ihat_t + K_Z_t
    F_t     = (A_t K_t (Lambda_t + C_t)^T + M_t K_Ihat_t) / K_I_t
    K_{t+1} = A_t K_t A_t^T + M_t K_Ihat_t M_t^T - F_t K_I_t F_t^T,   K_1 = 0

where K_t = cov(Shat_t | Y^{t-1}).  This is a filter for the process
Shat_{t+1} = A_t Shat_t + M_t Ihat_t observed through Y_t, with process noise
M_t Ihat_t and measurement noise Ihat_t + Z_t that share the innovation
Ihat_t; the cross-covariance M_t K_Ihat_t is what distinguishes the update
from a textbook one.  Updates are evaluated in Joseph form (a sum of PSD
quadratic forms) and symmetrized.

The same algebra with a different process/measurement noise triple also
covers the perfect-state-feedback variant, so the step is implemented
generically and specialized here; `capacity` reuses the generic machinery.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import FloatArray, PoSsRealization, validate_realization
from .noise_filter import NoiseFilterTrace, run_noise_filter

__all__ = [
    "SequentialStrategy",
    "OutputFilterTrace",
    "output_riccati_step",
    "run_output_filter",
]


@dataclass(frozen=True)
class SequentialStrategy:
    """Per-step gains Lambda (n, n_s) and dither variances K_Z (n,), K_Z >= 0."""

    Lambda: FloatArray
    K_Z: FloatArray

    def __post_init__(self) -> None:
        lam = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        kz = np.asarray(self.K_Z, dtype=float).reshape(-1)
        if lam.ndim != 2:
            raise ValueError(f"Lambda must be a (n, n_s) array, got shape {lam.shape}")
        if kz.shape[0] != lam.shape[0]:
            raise ValueError(
                f"K_Z length {kz.shape[0]} does not match Lambda's {lam.shape[0]} steps"
            )
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(kz))):
            raise ValueError("strategy contains non-finite entries")
        if np.any(kz < 0):
            raise ValueError(f"K_Z must be nonnegative, got min {kz.min():g}")
        lam = lam.copy()
        kz = kz.copy()
        lam.setflags(write=False)
        kz.setflags(write=False)
        object.__setattr__(self, "Lambda", lam)
        object.__setattr__(self, "K_Z", kz)

    @property
    def n(self) -> int:
        return self.K_Z.shape[0]

    @classmethod
    def no_feedback(cls, n: int, n_s: int, kappa: float) -> "SequentialStrategy":
        """Lambda = 0, K_Z = kappa at every step (pure dither at full power)."""
        return cls(Lambda=np.zeros((n, n_s)), K_Z=np.full(n, float(kappa)))

    @classmethod
    def zero(cls, n: int, n_s: int) -> "SequentialStrategy":
        return cls(Lambda=np.zeros((n, n_s)), K_Z=np.zeros(n))


@dataclass(frozen=True)
class OutputFilterTrace:
    """K (n, n_s, n_s), gains F (n-1, n_s), K_I (n,), per-step power (n,)."""

    K: FloatArray
    F: FloatArray
    K_I: FloatArray
    power: FloatArray

    @property
    def n(self) -> int:
        return self.K_I.shape[0]

    def to_csv(self, path: str) -> None:
        """Write columns t, K (row-major flattened), F, K_I, power."""
        n_s = self.K.shape[1]
        header = ["t"]
        header += [f"K_{i + 1}{j + 1}" for i in range(n_s) for j in range(n_s)]
        header += [f"F_{i + 1}" for i in range(n_s)]
        header += ["K_I", "power"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(self.n):
                gain = self.F[t] if t < self.n - 1 else np.full(n_s, np.nan)
                row = [t + 1]
                row += [f"{x:.17g}" for x in self.K[t].ravel()]
                row += [f"{x:.17g}" for x in gain]
                row += [f"{self.K_I[t]:.17g}", f"{self.power[t]:.17g}"]
                writer.writerow(row)


# ---------------------------------------------------------------------------
# Generic gain filter: state K driven by per-step (A, alpha, Q, s, r_meas).
# Process noise has covariance Q and cross-covariance s (a column) with the
# scalar measurement noise of variance r_meas.

def _gain_step(
    A: FloatArray,
    alpha: FloatArray,
    K: FloatArray,
    Q: FloatArray,
    s_vec: FloatArray,
    r_meas: float,
) -> tuple[FloatArray, FloatArray, float]:
    u = K @ alpha
    k_i = float(alpha @ u + r_meas)
    if k_i <= 0.0:
        raise ValueError(f"output innovations variance K_I = {k_i:g} is not positive")
    F = (A @ u + s_vec) / k_i
    A_cl = A - np.outer(F, alpha)
    K_next = (
        A_cl @ K @ A_cl.T
        + Q
        - np.outer(F, s_vec)
        - np.outer(s_vec, F)
        + r_meas * np.outer(F, F)
    )
    return 0.5 * (K_next + K_next.T), F, k_i


@dataclass(frozen=True)
class _GainFilterPlant:
    """Strategy-independent per-step data consumed by the gain filter.

    The sequential-output case uses Q_t = M_t K_Ihat_t M_t^T,
    s_t = M_t K_Ihat_t, noise_floor = K_Ihat and K1 = 0; the
    perfect-state variant uses Q_t = B_t K_W_t B_t^T, s_t = B_t K_W_t N_t^T,
    noise_floor = R_t and K1 = K_S1.  `denom` holds the rate denominators
    (always the noise innovations variances K_Ihat_t).
    """

    A: FloatArray          # (n-1, n_s, n_s)
    C: FloatArray          # (n, n_s)
    Q: FloatArray          # (n-1, n_s, n_s)
    s: FloatArray          # (n-1, n_s)
    noise_floor: FloatArray  # (n,)
    denom: FloatArray      # (n,)
    K1: FloatArray         # (n_s, n_s)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def n_s(self) -> int:
        return self.C.shape[1]


def _poss_plant(r: PoSsRealization, trace: NoiseFilterTrace) -> _GainFilterPlant:
    n, n_s = r.n, r.n_s
    k = trace.K_Ihat
    M = trace.M
    Q = np.einsum("ti,t,tj->tij", M, k[: n - 1], M) if n > 1 else np.zeros((0, n_s, n_s))
    s = M * k[: n - 1, None] if n > 1 else np.zeros((0, n_s))
    return _GainFilterPlant(
        A=r.A, C=r.C[:, 0, :].copy(), Q=Q, s=s,
        noise_floor=k.copy(), denom=k.copy(), K1=np.zeros((n_s, n_s)),
    )


def _plant_forward(plant: _GainFilterPlant, Lambda: FloatArray, K_Z: FloatArray):
    """Run the filter; returns (K, F, K_I, power, rate) arrays."""
    n, n_s = plant.n, plant.n_s
    K = np.zeros((n, n_s, n_s))
    F = np.zeros((max(n - 1, 0), n_s))
    K_I = np.zeros(n)
    power = np.zeros(n)
    K[0] = plant.K1
    for t in range(n):
        lam = Lambda[t]
        alpha = lam + plant.C[t]
        power[t] = float(lam @ K[t] @ lam) + K_Z[t]
        if t < n - 1:
            K[t + 1], F[t], K_I[t] = _gain_step(
                plant.A[t], alpha, K[t], plant.Q[t], plant.s[t],
                plant.noise_floor[t] + K_Z[t],
            )
        else:
            k_i = float(alpha @ K[t] @ alpha) + plant.noise_floor[t] + K_Z[t]
            if k_i <= 0.0:
                raise ValueError(f"output innovations variance K_I = {k_i:g} is not positive")
            K_I[t] = k_i
    rate = 0.5 * np.log(K_I / plant.denom)
    return K, F, K_I, power, rate


def _plant_value_grad(
    plant: _GainFilterPlant,
    Lambda: FloatArray,
    K_Z: FloatArray,
    mu: float,
) -> tuple[float, float, FloatArray, FloatArray]:
    """Value, power sum and gradients of L = value - mu * sum_t power_t.

    The backward pass is the adjoint of the recursion
    K_{t+1} = A K A^T + Q - g g^T / k_i with g = A K alpha + s and
    k_i = alpha K alpha + floor + K_Z; it is exact (no finite differences).
    Returns (value, power_sum, dL/dLambda, dL/dK_Z).
    """
    n, n_s = plant.n, plant.n_s
    K_store = np.zeros((n, n_s, n_s))
    u_store = np.zeros((n, n_s))
    g_store = np.zeros((max(n - 1, 0), n_s))
    k_i_arr = np.zeros(n)
    power = np.zeros(n)
    K_store[0] = plant.K1
    for t in range(n):
        lam = Lambda[t]
        alpha = lam + plant.C[t]
        K = K_store[t]
        u = K @ alpha
        u_store[t] = u
        k_i = float(alpha @ u) + plant.noise_floor[t] + K_Z[t]
        if k_i <= 0.0:
            raise ValueError(f"output innovations variance K_I = {k_i:g} is not positive")
        k_i_arr[t] = k_i
        power[t] = float(lam @ K @ lam) + K_Z[t]
        if t < n - 1:
            g = plant.A[t] @ u + plant.s[t]
            g_store[t] = g
            K_next = plant.A[t] @ K @ plant.A[t].T + plant.Q[t] - np.outer(g, g) / k_i
            K_store[t + 1] = 0.5 * (K_next + K_next.T)
    value = float(0.5 * np.log(k_i_arr / plant.denom).sum())
    power_sum = float(power.sum())

    gLambda = np.zeros((n, n_s))
    gKZ = np.zeros(n)
    W = np.zeros((n_s, n_s))
    for t in reversed(range(n)):
        lam = Lambda[t]
        alpha = lam + plant.C[t]
        K = K_store[t]
        u = u_store[t]
        k_i = k_i_arr[t]
        if t < n - 1:
            g = g_store[t]
            Wg = W @ g
            kibar = 0.5 / k_i + float(g @ Wg) / k_i**2
            ubar = plant.A[t].T @ (-2.0 * Wg / k_i) + kibar * alpha
        else:
            kibar = 0.5 / k_i
            ubar = kibar * alpha
        abar = kibar * u + K @ ubar
        gLambda[t] = abar - 2.0 * mu * (K @ lam)
        gKZ[t] = kibar - mu
        W_new = 0.5 * (np.outer(ubar, alpha) + np.outer(alpha, ubar)) - mu * np.outer(lam, lam)
        if t < n - 1:
            W_new = W_new + plant.A[t].T @ W @ plant.A[t]
        W = W_new
    return value, power_sum, gLambda, gKZ


# ---------------------------------------------------------------------------
# Public sequential-output surface.

def output_riccati_step(
    A_t: FloatArray,
    C_t: FloatArray,
    Lambda_t: FloatArray,
    K_Z_t: float,
    M_t: FloatArray,
    K_Ihat_t: float,
    K_t: FloatArray,
) -> tuple[FloatArray, FloatArray, float]:
    """One output-filter step; returns (K_next, F_t, K_I_t).

    Row inputs (C_t, Lambda_t, M_t) may be flat vectors or 1 x n_s matrices.
    """
    A = np.atleast_2d(np.asarray(A_t, dtype=float))
    c = np.asarray(C_t, dtype=float).reshape(-1)
    lam = np.asarray(Lambda_t, dtype=float).reshape(-1)
    M = np.asarray(M_t, dtype=float).reshape(-1)
    K = np.atleast_2d(np.asarray(K_t, dtype=float))
    k_ihat = float(K_Ihat_t)
    k_z = float(K_Z_t)
    if k_z < 0:
        raise ValueError(f"K_Z must be nonnegative, got {k_z:g}")
    K_next, F, k_i = _gain_step(
        A, lam + c, K, np.outer(M, M) * k_ihat, M * k_ihat, k_ihat + k_z
    )
    return K_next, F, k_i


def run_output_filter(
    r: PoSsRealization,
    s: SequentialStrategy,
    noise_trace: NoiseFilterTrace | None = None,
) -> OutputFilterTrace:
    """Run the output filter for a sequential strategy over the whole horizon.

    Validates the realization and the strategy dimensions; pass a
    precomputed `noise_trace` to reuse one across many strategies.
    """
    if s.n != r.n or s.Lambda.shape[1] != r.n_s:
        raise ValueError(
            f"strategy shape ({s.n}, {s.Lambda.shape[1]}) does not match "
            f"model (n={r.n}, n_s={r.n_s})"
        )
    if noise_trace is None:
        noise_trace = run_noise_filter(r)
    else:
        report = validate_realization(r)
        if not report.ok:
            raise ValueError("invalid realization: " + "; ".join(report.violations))
    plant = _poss_plant(r, noise_trace)
    K, F, K_I, power, _ = _plant_forward(plant, s.Lambda, s.K_Z)
    return OutputFilterTrace(K=K, F=F, K_I=K_I, power=power)
