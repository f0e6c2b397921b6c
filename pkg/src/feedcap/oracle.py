"""Matrix-form feedback strategies over the whole horizon: the cross-check engine.

A matrix strategy feeds back the noise directly, X^n = B (V^n - E V^n) + Zbar^n
with B strictly lower triangular and Zbar^n ~ N(0, K_Zbar) independent of V^n.
Its information rate and power are exact matrix functionals,

    value = (1/2) [log det((B+I) K_V (B+I)^T + K_Zbar) - log det K_V]
    power = (1/n) trace(B K_V B^T + K_Zbar),

which provides an independent route to the same optimum the sequential
(filter-based) engine computes; the two are compared in the acceptance tests.

This module also converts between forms:

 * `unroll_sequential` eliminates the filter recursions of a sequential
   strategy into an equivalent (B, K_Zbar) pair with the same joint law of
   (X^n, Y^n);
 * `cp_to_innovations_form` rewrites a matrix strategy as
   X_t = Gamma1_t V^{t-1} + Gamma2_t Y^{t-1} + Z_t with Z_t independent over
   time, by conditioning Zbar_t on the past (V^{t-1}, Y^{t-1});
 * `joint_covariance` produces the exact joint covariance of (X^n, Y^n) for
   either matrix form, the common currency of the equivalence tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ChannelConfig, FloatArray, PoSsRealization
from .noise_filter import NoiseFilterTrace, run_noise_filter, _state_coefficients
from .channel_filter import SequentialStrategy, run_output_filter
from ._optim import OptimizerDiagnostics, OptimizerOptions

__all__ = [
    "CoverPombraStrategy",
    "InnovationsFormStrategy",
    "CpOptimizeResult",
    "cp_objective",
    "cp_optimize",
    "unroll_sequential",
    "cp_to_innovations_form",
    "joint_covariance",
]

_PSD_TOL = 1e-10


@dataclass(frozen=True)
class CoverPombraStrategy:
    """Matrix strategy (B, K_Zbar): B strictly lower triangular, K_Zbar PSD."""

    B: FloatArray
    K_Zbar: FloatArray

    def __post_init__(self) -> None:
        B = np.array(self.B, dtype=float)
        K = np.array(self.K_Zbar, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ValueError(f"B must be square, got shape {B.shape}")
        if K.shape != B.shape:
            raise ValueError(f"K_Zbar shape {K.shape} does not match B shape {B.shape}")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(K))):
            raise ValueError("strategy contains non-finite entries")
        upper = np.triu(B)
        if np.any(upper != 0.0):
            bad = float(np.max(np.abs(upper)))
            raise ValueError(f"B must be strictly lower triangular (max on/above diagonal {bad:g})")
        asym = float(np.max(np.abs(K - K.T))) if K.size else 0.0
        if asym > _PSD_TOL:
            raise ValueError(f"K_Zbar not symmetric (max asymmetry {asym:.3g})")
        K = 0.5 * (K + K.T)
        min_eig = float(np.linalg.eigvalsh(K).min()) if K.size else 0.0
        if min_eig < -_PSD_TOL:
            raise ValueError(f"K_Zbar not PSD (min eigenvalue {min_eig:.3g})")
        B.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "K_Zbar", K)

    @property
    def n(self) -> int:
        return self.B.shape[0]

    def to_csv(self, path: str) -> None:
        """Write rows t, B_{t,1..n}, K_Zbar_{t,1..n}."""
        import csv

        n = self.n
        header = ["t"] + [f"B_{j + 1}" for j in range(n)] + [f"K_Zbar_{j + 1}" for j in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(n):
                row = [t + 1]
                row += [f"{x:.17g}" for x in self.B[t]]
                row += [f"{x:.17g}" for x in self.K_Zbar[t]]
                writer.writerow(row)


@dataclass(frozen=True)
class InnovationsFormStrategy:
    """Strategy X_t = Gamma1_t V^{t-1} + Gamma2_t Y^{t-1} + Z_t, Z_t independent.

    Gamma1 and Gamma2 are tuples of length n-1; entry i is the coefficient
    row for step t = i+2 and has length t-1.  K_Z holds the n dither
    variances (all >= 0).
    """

    Gamma1: tuple[FloatArray, ...]
    Gamma2: tuple[FloatArray, ...]
    K_Z: FloatArray

    def __post_init__(self) -> None:
        kz = np.asarray(self.K_Z, dtype=float).reshape(-1).copy()
        n = kz.shape[0]
        if n < 1:
            raise ValueError("K_Z must have at least one entry")
        if not np.all(np.isfinite(kz)):
            raise ValueError("K_Z contains non-finite entries")
        if np.any(kz < 0):
            raise ValueError(f"K_Z must be nonnegative, got min {kz.min():g}")

        def rows(seq, name: str) -> tuple[FloatArray, ...]:
            if len(seq) != n - 1:
                raise ValueError(f"{name} must have {n - 1} rows, got {len(seq)}")
            out = []
            for i, row in enumerate(seq):
                arr = np.asarray(row, dtype=float).reshape(-1).copy()
                if arr.shape[0] != i + 1:
                    raise ValueError(
                        f"{name} row for t={i + 2} must have length {i + 1}, got {arr.shape[0]}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name} row for t={i + 2} has non-finite entries")
                arr.setflags(write=False)
                out.append(arr)
            return tuple(out)

        g1 = rows(self.Gamma1, "Gamma1")
        g2 = rows(self.Gamma2, "Gamma2")
        kz.setflags(write=False)
        object.__setattr__(self, "Gamma1", g1)
        object.__setattr__(self, "Gamma2", g2)
        object.__setattr__(self, "K_Z", kz)

    @property
    def n(self) -> int:
        return self.K_Z.shape[0]


def cp_objective(K_V: FloatArray, s: CoverPombraStrategy) -> tuple[float, float]:
    """Information rate (nats) and average power of a matrix strategy.

    Raises if K_V is not symmetric positive definite or dimensions mismatch.
    """
    K_V = np.asarray(K_V, dtype=float)
    n = s.n
    if K_V.shape != (n, n):
        raise ValueError(f"K_V shape {K_V.shape} does not match strategy n={n}")
    sign_v, logdet_v = np.linalg.slogdet(K_V)
    if sign_v <= 0:
        raise ValueError("K_V must be positive definite")
    BI = s.B + np.eye(n)
    S = BI @ K_V @ BI.T + s.K_Zbar
    sign_s, logdet_s = np.linalg.slogdet(S)
    if sign_s <= 0:
        raise ValueError("output covariance is not positive definite")
    value = 0.5 * (logdet_s - logdet_v)
    power = float(np.trace(s.B @ K_V @ s.B.T) + np.trace(s.K_Zbar)) / n
    return float(value), power


def unroll_sequential(
    r: PoSsRealization,
    s: SequentialStrategy,
    noise_trace: NoiseFilterTrace | None = None,
) -> CoverPombraStrategy:
    """Eliminate the filters of a sequential strategy into an equivalent (B, K_Zbar).

    Writes the closed-loop processes as linear maps of the centered noise V
    and the dither vector Z:  Shat_t = G_t V, Shathat_t = H_t V + J_t Z,
    X_t = Lambda_t (G_t - H_t) V + (e_t - Lambda_t J_t) Z.  The V-coefficient
    rows form B (strictly lower triangular by construction) and the
    Z-coefficient rows Q give K_Zbar = Q diag(K_Z) Q^T, so the joint law of
    (X^n, Y^n) is preserved exactly.
    """
    if noise_trace is None:
        noise_trace = run_noise_filter(r)
    out = run_output_filter(r, s, noise_trace)
    n, n_s = r.n, r.n_s
    G = _state_coefficients(r, noise_trace)
    H = np.zeros((n_s, n))
    J = np.zeros((n_s, n))
    B = np.zeros((n, n))
    Q = np.zeros((n, n))
    for t in range(n):
        lam = s.Lambda[t]
        c = r.C[t, 0]
        alpha = lam + c
        B[t] = lam @ (G[t] - H)
        B[t, t:] = 0.0  # structural zeros, exact
        Q[t] = -(lam @ J)
        Q[t, t] = 1.0
        Q[t, t + 1:] = 0.0
        if t < n - 1:
            i_v = lam @ G[t] - alpha @ H
            i_v[t] += 1.0
            i_z = -(alpha @ J)
            i_z[t] += 1.0
            H = r.A[t] @ H + np.outer(out.F[t], i_v)
            J = r.A[t] @ J + np.outer(out.F[t], i_z)
    K_Zbar = (Q * s.K_Z) @ Q.T
    K_Zbar = 0.5 * (K_Zbar + K_Zbar.T)
    return CoverPombraStrategy(B=B, K_Zbar=K_Zbar)


def cp_to_innovations_form(K_V: FloatArray, s: CoverPombraStrategy) -> InnovationsFormStrategy:
    """Rewrite a matrix strategy with time-independent dither.

    Defines Z_t = Zbar_t - E[Zbar_t | V^{t-1}, Y^{t-1}] and folds the
    conditional-mean coefficients into Gamma1 (on V^{t-1}) and Gamma2
    (on Y^{t-1}).  The joint law of (X^n, Y^n) is unchanged.  Degenerate
    conditioning covariances get a 1e-12 ridge, reported as a RuntimeWarning.
    """
    K_V = np.asarray(K_V, dtype=float)
    n = s.n
    if K_V.shape != (n, n):
        raise ValueError(f"K_V shape {K_V.shape} does not match strategy n={n}")
    BI = s.B + np.eye(n)
    K_vy = K_V @ BI.T             # cov(V, Y)
    K_y = BI @ K_V @ BI.T + s.K_Zbar
    gamma1: list[FloatArray] = []
    gamma2: list[FloatArray] = []
    K_Z = np.zeros(n)
    K_Z[0] = s.K_Zbar[0, 0]
    ridge_steps: list[int] = []
    for t in range(1, n):
        Sigma_H = np.block([
            [K_V[:t, :t], K_vy[:t, :t]],
            [K_vy[:t, :t].T, K_y[:t, :t]],
        ])
        sigma = np.concatenate([np.zeros(t), s.K_Zbar[t, :t]])  # cov(Zbar_t, (V, Y))
        try:
            coef = np.linalg.solve(Sigma_H, sigma)
            ok = np.all(np.isfinite(coef))
        except np.linalg.LinAlgError:
            ok = False
        if not ok or np.linalg.cond(Sigma_H) > 1e12:
            coef = np.linalg.solve(Sigma_H + 1e-12 * np.eye(2 * t), sigma)
            ridge_steps.append(t + 1)
        gamma1.append(s.B[t, :t] + coef[:t])
        gamma2.append(coef[t:].copy())
        K_Z[t] = max(0.0, s.K_Zbar[t, t] - float(coef @ sigma))
    if ridge_steps:
        warnings.warn(
            f"near-singular conditioning at t={ridge_steps}; applied 1e-12 ridge",
            RuntimeWarning,
            stacklevel=2,
        )
    return InnovationsFormStrategy(Gamma1=tuple(gamma1), Gamma2=tuple(gamma2), K_Z=K_Z)


def _innovations_maps(s: InnovationsFormStrategy) -> tuple[FloatArray, FloatArray]:
    """Coefficient matrices (P, Q) with X = P (V - E V) + Q Z, Y = X + V."""
    n = s.n
    P = np.zeros((n, n))
    Q = np.zeros((n, n))
    Q[0, 0] = 1.0
    for t in range(1, n):
        g1 = s.Gamma1[t - 1]
        g2 = s.Gamma2[t - 1]
        P[t, :t] = g1 + g2 @ P[:t, :t]
        P[t, :t] += g2  # Y_j = X_j + V_j contributes the identity on V
        Q[t, :t] = g2 @ Q[:t, :t]
        Q[t, t] = 1.0
    return P, Q


def joint_covariance(
    K_V: FloatArray,
    s: CoverPombraStrategy | InnovationsFormStrategy,
) -> FloatArray:
    """Exact joint covariance of the stacked vector (X^n, Y^n)."""
    K_V = np.asarray(K_V, dtype=float)
    n = s.n
    if K_V.shape != (n, n):
        raise ValueError(f"K_V shape {K_V.shape} does not match strategy n={n}")
    if isinstance(s, CoverPombraStrategy):
        P = s.B
        K_dither = s.K_Zbar
    else:
        P, Q = _innovations_maps(s)
        K_dither = (Q * s.K_Z) @ Q.T
    PI = P + np.eye(n)
    xx = P @ K_V @ P.T + K_dither
    xy = P @ K_V @ PI.T + K_dither
    yy = PI @ K_V @ PI.T + K_dither
    out = np.block([[xx, xy], [xy.T, yy]])
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class CpOptimizeResult:
    """Matrix-form optimum: the strategy, its value (nats) and realized power."""

    best: CoverPombraStrategy
    value: float
    avg_power: float
    optimizer_diag: OptimizerDiagnostics

class _CpBarrier:
    """Barrier subproblems for the matrix-form optimum, in convex coordinates.

    With K_X = cov(X^n) and the strictly-lower B as variables, the output
    covariance K_Y = K_X + B K_V + K_V B^T + K_V and the transmit power
    trace(K_X) are linear, and the dither constraint
    K_Zbar = K_X - B K_V B^T >= 0 carves a convex set, so maximizing
    (1/2) logdet K_Y is a concave program.  Coordinates like
    (B, Cholesky factor of K_Zbar) are smooth but make the same landscape
    multimodal, and the optima routinely have rank-deficient K_Zbar, which
    random restarts in factor coordinates almost never reach.  Here every
    barrier subproblem is strictly concave, so one warm-started damped
    Newton path finds the global optimum; no restarts involved.

    Packing: x = [strict-lower entries of B, lower-triangle entries of the
    symmetric K_X], both in row-major tril order.
    """

    def __init__(self, K_V: FloatArray, kappa: float):
        self.K_V = K_V
        n = K_V.shape[0]
        self.n = n
        self.budget = n * float(kappa)
        self._il = np.tril_indices(n, -1)
        self._it = np.tril_indices(n, 0)
        self._m_b = n * (n - 1) // 2
        m_x = n * (n + 1) // 2
        self.dim = self._m_b + m_x
        # constant per-coordinate direction matrices dK_Y and dK_X, and the
        # per-coordinate power traces
        P = np.zeros((self.dim, n, n))
        dKX = np.zeros((self.dim, n, n))
        tau = np.zeros(self.dim)
        for k in range(self._m_b):
            i, j = self._il[0][k], self._il[1][k]
            P[k, i, :] += K_V[j, :]
            P[k, :, i] += K_V[:, j]
        for k in range(m_x):
            i, j = self._it[0][k], self._it[1][k]
            dKX[self._m_b + k, i, j] += 1.0
            dKX[self._m_b + k, j, i] += 1.0 if i != j else 0.0
            P[self._m_b + k] = dKX[self._m_b + k]
            tau[self._m_b + k] = np.trace(dKX[self._m_b + k])
        self._P = P
        self._dKX = dKX
        self._tau = tau

    def pack(self, B: np.ndarray, K_X: np.ndarray) -> np.ndarray:
        return np.concatenate([B[self._il], K_X[self._it]])

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        B = np.zeros((n, n))
        B[self._il] = x[: self._m_b]
        K_X = np.zeros((n, n))
        K_X[self._it] = x[self._m_b :]
        K_X = K_X + K_X.T - np.diag(np.diag(K_X))
        return B, K_X

    def value(self, x: np.ndarray) -> float:
        B, K_X = self.unpack(x)
        K_Y = K_X + B @ self.K_V + self.K_V @ B.T + self.K_V
        return 0.5 * float(
            np.linalg.slogdet(K_Y)[1] - np.linalg.slogdet(self.K_V)[1]
        )

    def _pieces(self, x: np.ndarray):
        """(K_Y, K_Zbar, slack), or None when x is outside the barrier domain."""
        B, K_X = self.unpack(x)
        slack = self.budget - float(np.trace(K_X))
        if slack <= 0.0:
            return None
        K_Zbar = K_X - B @ self.K_V @ B.T
        K_Y = K_X + B @ self.K_V + self.K_V @ B.T + self.K_V
        return B, K_Y, 0.5 * (K_Zbar + K_Zbar.T), slack

    def barrier(self, x: np.ndarray, eps: float) -> float:
        """Barrier objective (maximize orientation); -inf outside the domain."""
        pieces = self._pieces(x)
        if pieces is None:
            return -np.inf
        _, K_Y, K_Zbar, slack = pieces
        try:
            cy = np.linalg.cholesky(K_Y)
            cz = np.linalg.cholesky(K_Zbar)
        except np.linalg.LinAlgError:
            return -np.inf
        return float(np.log(np.diag(cy)).sum()) + eps * (
            2.0 * float(np.log(np.diag(cz)).sum()) + np.log(slack)
        )

    def grad_hess(self, x: np.ndarray, eps: float):
        """(f, gradient, Hessian) of the barrier at a strictly feasible x.

        The Hessian of each logdet term along the coordinate directions is
        -tr(S^-1 D_k S^-1 D_l); all direction matrices are precomputed
        except the K_Zbar ones, which depend on B.
        """
        pieces = self._pieces(x)
        if pieces is None:
            raise ValueError("barrier evaluated outside its domain")
        B, K_Y, K_Zbar, slack = pieces
        f = self.barrier(x, eps)
        if not np.isfinite(f):
            raise ValueError("barrier evaluated outside its domain")
        W = np.linalg.inv(K_Y)
        U = np.linalg.inv(K_Zbar)

        # direction matrices of K_Zbar: dK_X part is constant, the B part is
        # -(E_ij K_V B^T + B K_V E_ij^T) for the strict-lower coordinate (i,j)
        Z = self._dKX.copy()
        BKV = B @ self.K_V
        for k in range(self._m_b):
            i, j = self._il[0][k], self._il[1][k]
            Z[k, i, :] -= BKV[:, j]
            Z[k, :, i] -= BKV[:, j]

        WP = np.einsum("ij,kjl,lm->kim", W, self._P, W)
        UZ = np.einsum("ij,kjl,lm->kim", U, Z, U)
        grad = (
            0.5 * np.einsum("ij,kij->k", W, self._P)
            + eps * np.einsum("ij,kij->k", U, Z)
            - (eps / slack) * self._tau
        )
        H = (
            -0.5 * np.einsum("kij,lij->kl", WP, self._P)
            - eps * np.einsum("kij,lij->kl", UZ, Z)
            - (eps / slack**2) * np.outer(self._tau, self._tau)
        )
        return f, grad, 0.5 * (H + H.T)


def _newton_stage(
    prob: _CpBarrier, x: np.ndarray, eps: float, max_iters: int
) -> tuple[np.ndarray, int, float, bool]:
    """Damped Newton ascent on one barrier subproblem (strictly concave)."""
    lam2 = np.inf
    for it in range(1, max_iters + 1):
        f, g, H = prob.grad_hess(x, eps)
        A = -H
        jitter = 0.0
        for _ in range(8):
            try:
                c = np.linalg.cholesky(A + jitter * np.eye(prob.dim))
                break
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-12 * max(1.0, np.abs(A).max()))
        else:
            return x, it, lam2, False
        step = np.linalg.solve(c.T, np.linalg.solve(c, g))
        lam2 = float(g @ step)
        if lam2 <= 2e-12:
            return x, it, lam2, True
        t = 1.0
        while t > 1e-16:
            f_new = prob.barrier(x + t * step, eps)
            if f_new >= f + 0.25 * t * lam2:
                break
            t *= 0.5
        else:
            return x, it, lam2, False
        x = x + t * step
    return x, max_iters, lam2, lam2 <= 1e-8


_CP_EPS_SCHEDULE = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9)


def cp_optimize(
    K_V: FloatArray,
    cfg: ChannelConfig,
    options: OptimizerOptions | None = None,
) -> CpOptimizeResult:
    """Maximize the matrix-form objective over (B, K_Zbar) at average power kappa.

    Deterministic interior-point path on the concave reformulation (see
    _CpBarrier), one damped-Newton solve per barrier stage; the barrier gap
    at the final stage is about (n+1)*1e-9 nats, far inside the cross-check
    tolerances, and the returned strategy lands on the power budget exactly
    (up to roundoff) and feasibly.  Dense matrix search intended as a
    small-horizon cross-check engine, so n > 8 is rejected; use the
    sequential optimizer for anything larger.
    """
    K_V = np.asarray(K_V, dtype=float)
    options = options or OptimizerOptions()
    n = cfg.n
    if K_V.shape != (n, n):
        raise ValueError(f"K_V shape {K_V.shape} does not match config n={n}")
    if n > 8:
        raise ValueError(f"cp_optimize is a cross-check for n <= 8, got n={n}")
    K_V = 0.5 * (K_V + K_V.T)
    if np.min(np.linalg.eigvalsh(K_V)) <= 0:
        raise ValueError("K_V must be positive definite")

    if cfg.kappa == 0.0:
        best = CoverPombraStrategy(B=np.zeros((n, n)), K_Zbar=np.zeros((n, n)))
        diag = OptimizerDiagnostics(
            iterations=0, grad_norm=0.0, restarts=0, converged=True,
            note="kappa=0: zero strategy is optimal",
        )
        return CpOptimizeResult(best, 0.0, 0.0, diag)
    if n == 1:
        best = CoverPombraStrategy(B=np.zeros((1, 1)), K_Zbar=np.array([[cfg.kappa]]))
        value, power = cp_objective(K_V, best)
        diag = OptimizerDiagnostics(
            iterations=0, grad_norm=0.0, restarts=0, converged=True,
            note="n=1: closed form, all power on the dither",
        )
        return CpOptimizeResult(best, value, power, diag)

    prob = _CpBarrier(K_V, cfg.kappa)
    x = prob.pack(np.zeros((n, n)), 0.5 * cfg.kappa * np.eye(n))
    total_iters = 0
    all_ok = True
    lam2 = np.inf
    for eps in _CP_EPS_SCHEDULE:
        x, iters, lam2, ok = _newton_stage(prob, x, eps, max(options.max_iters, 100))
        total_iters += iters
        all_ok = all_ok and ok

    B, K_X = prob.unpack(x)
    # land on the budget; adding to the diagonal of K_X keeps
    # K_Zbar = K_X - B K_V B^T positive semidefinite and raises the value,
    # and a 1e-12 relative margin keeps the recomputed power strictly
    # feasible under roundoff
    margin = 1e-12 * max(1.0, prob.budget)
    delta = (prob.budget - margin - float(np.trace(K_X))) / n
    if delta > 0.0:
        K_X = K_X + delta * np.eye(n)
    K_Zbar = K_X - B @ K_V @ B.T
    best = CoverPombraStrategy(B=B, K_Zbar=0.5 * (K_Zbar + K_Zbar.T))
    value, power = cp_objective(K_V, best)
    converged = bool(all_ok and np.isfinite(value))
    note = "" if converged else "a barrier stage stopped before its Newton tolerance"
    diag = OptimizerDiagnostics(
        iterations=total_iters, grad_norm=float(np.sqrt(max(lam2, 0.0))),
        restarts=1, converged=converged, note=note,
    )
    return CpOptimizeResult(best, value, power, diag)
