"""Independent linear-Gaussian oracle for small horizons.

Every closed-loop signal is written as an affine map of the primitive
vector xi = (xi_S1, xi_W flattened, xi_Z) with identity covariance; all
conditional expectations are least-squares projections onto coefficient
rows.  No Riccati recursion appears anywhere, so agreement with the
package filters is a genuine cross-check, not a reimplementation.
O(n^3) per model -- keep n small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feedcap.model import PoSsRealization
from feedcap.channel_filter import SequentialStrategy


def _factor(K: np.ndarray) -> np.ndarray:
    """PSD square root (eigenvalue form, tolerates semidefinite input)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    w, v = np.linalg.eigh(0.5 * (K + K.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def _project(T: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Rows of T projected onto the row space of G (centered coefficients)."""
    T = np.atleast_2d(T)
    if G.shape[0] == 0:
        return np.zeros_like(T)
    gram = G @ G.T
    beta = (T @ G.T) @ np.linalg.pinv(gram, hermitian=True)
    return beta @ G


@dataclass(frozen=True)
class NoiseUnroll:
    """Coefficient rows of S and V over the primitives, plus K_V."""

    S_coef: np.ndarray   # (n, n_s, d)
    S_mean: np.ndarray   # (n, n_s)
    V_coef: np.ndarray   # (n, d)
    V_mean: np.ndarray   # (n,)
    K_V: np.ndarray      # (n, n)
    dim: int
    z_offset: int        # first xi_Z column


def unroll_noise(r: PoSsRealization) -> NoiseUnroll:
    n, n_s, n_w = r.n, r.n_s, r.n_w
    d = n_s + n * n_w + n
    S_c = np.zeros((n, n_s, d))
    S_m = np.zeros((n, n_s))
    V_c = np.zeros((n, d))
    V_m = np.zeros(n)
    S_c[0, :, :n_s] = _factor(r.K_S1)
    S_m[0] = r.mu_S1
    for t in range(n):
        W_c = np.zeros((n_w, d))
        W_c[:, n_s + t * n_w: n_s + (t + 1) * n_w] = _factor(r.K_W[t])
        V_c[t] = r.C[t, 0] @ S_c[t] + r.N[t, 0] @ W_c
        V_m[t] = float(r.C[t, 0] @ S_m[t])
        if t < n - 1:
            S_c[t + 1] = r.A[t] @ S_c[t] + r.B[t] @ W_c
            S_m[t + 1] = r.A[t] @ S_m[t]
    return NoiseUnroll(
        S_coef=S_c, S_mean=S_m, V_coef=V_c, V_mean=V_m,
        K_V=V_c @ V_c.T, dim=d, z_offset=n_s + n * n_w,
    )


@dataclass(frozen=True)
class BruteTrace:
    """Everything the filters compute, derived by projection instead."""

    Sigma: np.ndarray     # (n, n_s, n_s) noise-filter error covariance
    K_Ihat: np.ndarray    # (n,)
    K: np.ndarray         # (n, n_s, n_s) cov(Shat - Shathat)
    K_I: np.ndarray       # (n,)
    power: np.ndarray     # (n,)
    rate: float
    X_coef: np.ndarray    # (n, d)
    Y_coef: np.ndarray    # (n, d)

    @property
    def avg_power(self) -> float:
        return float(self.power.mean())


def closed_loop(r: PoSsRealization, s: SequentialStrategy) -> BruteTrace:
    nu = unroll_noise(r)
    n, n_s, d = r.n, r.n_s, nu.dim
    Sigma = np.zeros((n, n_s, n_s))
    K_Ihat = np.zeros(n)
    K = np.zeros((n, n_s, n_s))
    K_I = np.zeros(n)
    power = np.zeros(n)
    X_c = np.zeros((n, d))
    Y_c = np.zeros((n, d))
    for t in range(n):
        past_v = nu.V_coef[:t]
        Shat = _project(nu.S_coef[t], past_v)
        err = nu.S_coef[t] - Shat
        Sigma[t] = err @ err.T
        ihat = nu.V_coef[t] - _project(nu.V_coef[t], past_v)[0]
        K_Ihat[t] = float(ihat @ ihat)

        theta = Shat - _project(Shat, Y_c[:t])
        K[t] = theta @ theta.T
        X_c[t] = s.Lambda[t] @ theta
        X_c[t, nu.z_offset + t] = np.sqrt(s.K_Z[t])
        power[t] = float(X_c[t] @ X_c[t])
        Y_c[t] = X_c[t] + nu.V_coef[t]
        innov = Y_c[t] - _project(Y_c[t], Y_c[:t])[0]
        K_I[t] = float(innov @ innov)
    rate = float(0.5 * np.sum(np.log(K_I) - np.log(K_Ihat)))
    return BruteTrace(
        Sigma=Sigma, K_Ihat=K_Ihat, K=K, K_I=K_I, power=power,
        rate=rate, X_coef=X_c, Y_coef=Y_c,
    )
