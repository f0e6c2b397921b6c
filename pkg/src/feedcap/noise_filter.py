"""One-step prediction filter for the noise process (innovations representation).

For a realization of V^n this computes the prediction-error covariances
Sigma_t = cov(S_t | V^{t-1}), the filter gains M_t and the innovations
variances K_Ihat_t = var(V_t | V^{t-1}):

    M_t         = (A_t Sigma_t C_t^T + B_t K_W_t N_t^T) / K_Ihat_t
    K_Ihat_t    = C_t Sigma_t C_t^T + N_t K_W_t N_t^T
    Sigma_{t+1} = A_t Sigma_t A_t^T + B_t K_W_t B_t^T - M_t K_Ihat_t M_t^T
    Sigma_1     = K_S1

The innovations Ihat_t = V_t - C_t Shat_t are independent over time, which
gives the chain-rule entropy H(V^n) = (1/2) sum_t log(2 pi e K_Ihat_t).

Updates are evaluated in Joseph form,

    Sigma_{t+1} = (A - M C) Sigma (A - M C)^T + (B - M N) K_W (B - M N)^T,

which is the same formula rearranged into a sum of two PSD quadratic forms,
then symmetrized; this keeps Sigma_t numerically PSD at any scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import FloatArray, PoSsRealization, validate_realization

__all__ = [
    "NoiseFilterTrace",
    "noise_riccati_step",
    "run_noise_filter",
    "noise_entropy",
    "noise_entropy_terms",
]

_LOG_2PIE = float(np.log(2.0 * np.pi) + 1.0)


@dataclass(frozen=True)
class NoiseFilterTrace:
    """Filter quantities over a horizon.

    Sigma has shape (n, n_s, n_s); M has shape (n-1, n_s) holding the gain
    column for t = 1..n-1; K_Ihat has shape (n,).
    """

    Sigma: FloatArray
    M: FloatArray
    K_Ihat: FloatArray

    @property
    def n(self) -> int:
        return self.K_Ihat.shape[0]

    def to_csv(self, path: str) -> None:
        """Write columns t, Sigma (row-major flattened), M, K_Ihat."""
        n_s = self.Sigma.shape[1]
        header = ["t"]
        header += [f"Sigma_{i + 1}{j + 1}" for i in range(n_s) for j in range(n_s)]
        header += [f"M_{i + 1}" for i in range(n_s)]
        header += ["K_Ihat"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(self.n):
                gain = self.M[t] if t < self.n - 1 else np.full(n_s, np.nan)
                row = [t + 1]
                row += [f"{x:.17g}" for x in self.Sigma[t].ravel()]
                row += [f"{x:.17g}" for x in gain]
                row.append(f"{self.K_Ihat[t]:.17g}")
                writer.writerow(row)


def noise_riccati_step(
    A_t: FloatArray,
    B_t: FloatArray,
    C_t: FloatArray,
    N_t: FloatArray,
    K_W_t: FloatArray,
    Sigma_t: FloatArray,
) -> tuple[FloatArray, FloatArray, float]:
    """One filter step; returns (Sigma_next, M_t, K_Ihat_t).

    C_t and N_t are row matrices (or flat vectors); M_t is returned as the
    flat gain column of length n_s.  Raises on a non-positive innovations
    variance, which a valid realization (R_t > 0, Sigma_t PSD) cannot produce.
    """
    A = np.atleast_2d(np.asarray(A_t, dtype=float))
    B = np.atleast_2d(np.asarray(B_t, dtype=float))
    c = np.asarray(C_t, dtype=float).reshape(-1)
    nr = np.asarray(N_t, dtype=float).reshape(-1)
    K_W = np.atleast_2d(np.asarray(K_W_t, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma_t, dtype=float))

    k_ihat = float(c @ Sigma @ c + nr @ K_W @ nr)
    if k_ihat <= 0.0:
        raise ValueError(f"innovations variance K_Ihat = {k_ihat:g} is not positive")
    gain_num = A @ (Sigma @ c) + B @ (K_W @ nr)
    M = gain_num / k_ihat
    A_cl = A - np.outer(M, c)
    B_cl = B - np.outer(M, nr)
    Sigma_next = A_cl @ Sigma @ A_cl.T + B_cl @ K_W @ B_cl.T
    Sigma_next = 0.5 * (Sigma_next + Sigma_next.T)
    return Sigma_next, M, k_ihat


def run_noise_filter(r: PoSsRealization) -> NoiseFilterTrace:
    """Run the prediction filter over the whole horizon of a valid realization."""
    report = validate_realization(r)
    if not report.ok:
        raise ValueError("invalid realization: " + "; ".join(report.violations))
    n, n_s = r.n, r.n_s
    Sigma = np.zeros((n, n_s, n_s))
    M = np.zeros((max(n - 1, 0), n_s))
    K_Ihat = np.zeros(n)
    Sigma[0] = 0.5 * (r.K_S1 + r.K_S1.T)
    for t in range(n):
        c = r.C[t, 0]
        nr = r.N[t, 0]
        if t < n - 1:
            Sigma[t + 1], M[t], K_Ihat[t] = noise_riccati_step(
                r.A[t], r.B[t], c, nr, r.K_W[t], Sigma[t]
            )
        else:
            k_ihat = float(c @ Sigma[t] @ c + nr @ r.K_W[t] @ nr)
            if k_ihat <= 0.0:
                raise ValueError(f"innovations variance K_Ihat = {k_ihat:g} is not positive")
            K_Ihat[t] = k_ihat
    return NoiseFilterTrace(Sigma=Sigma, M=M, K_Ihat=K_Ihat)


def noise_entropy_terms(trace: NoiseFilterTrace, units: str = "nats") -> FloatArray:
    """Per-step differential entropies (1/2) log(2 pi e K_Ihat_t)."""
    terms = 0.5 * (_LOG_2PIE + np.log(trace.K_Ihat))
    return _in_units(terms, units)


def noise_entropy(trace: NoiseFilterTrace, units: str = "nats") -> float:
    """Differential entropy H(V^n) = sum of the per-step innovation entropies."""
    return float(noise_entropy_terms(trace, units).sum())


def _in_units(x, units: str):
    if units == "nats":
        return x
    if units == "bits":
        return x / np.log(2.0)
    raise ValueError(f"units must be 'nats' or 'bits', got {units!r}")


def _state_coefficients(r: PoSsRealization, trace: NoiseFilterTrace) -> FloatArray:
    """Coefficient matrices G with Shat_t = E S_t + G_t (V^n - E V^n).

    Returns shape (n, n_s, n); row block t has support on columns < t only.
    Follows Shat_{t+1} = (A_t - M_t C_t) Shat_t + M_t V_t.
    """
    n, n_s = r.n, r.n_s
    G = np.zeros((n, n_s, n))
    for t in range(n - 1):
        A_cl = r.A[t] - np.outer(trace.M[t], r.C[t, 0])
        G[t + 1] = A_cl @ G[t]
        G[t + 1, :, t] += trace.M[t]
    return G
