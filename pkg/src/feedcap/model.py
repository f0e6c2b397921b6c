"""Noise models: partially observable state-space realizations of colored Gaussian noise.

The channel is Y_t = X_t + V_t with scalar additive noise V_t generated by

    S_{t+1} = A_t S_t + B_t W_t        t = 1..n-1
    V_t     = C_t S_t + N_t W_t        t = 1..n
    S_1 ~ N(mu_S1, K_S1),  W_t ~ N(0, K_W_t) independent across t,

where the feedthrough covariance R_t = N_t K_W_t N_t^T must be a strictly
positive scalar.  Realizations are immutable containers; structural problems
(shapes) raise at construction, while numeric validity (symmetry, PSD-ness,
R_t > 0, finiteness) is checked by `validate_realization`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

__all__ = [
    "PoSsRealization",
    "ChannelConfig",
    "ValidationReport",
    "ModelFormatError",
    "validate_realization",
    "assemble_noise_covariance",
    "noise_mean",
    "build_arma11",
    "build_white_noise",
    "build_two_driver",
    "is_time_invariant",
    "with_horizon",
    "load_model",
    "save_model",
]

# absolute tolerance for symmetry / PSD checks on input covariances
_PSD_TOL = 1e-10


def _frozen(arr: np.ndarray) -> FloatArray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PoSsRealization:
    """State-space noise realization over a finite horizon.

    Fields hold the per-step system matrices stacked along the first axis:
    A (n-1, n_s, n_s), B (n-1, n_s, n_w), C (n, 1, n_s), N (n, 1, n_w),
    K_W (n, n_w, n_w), plus the initial-state mean mu_S1 (n_s,) and
    covariance K_S1 (n_s, n_s).  The observation is scalar, so C_t and N_t
    are row matrices.  `meta` carries builder annotations (e.g. an
    "unstable_ar" flag) and is never interpreted by the numerics.
    """

    n: int
    A: FloatArray
    B: FloatArray
    C: FloatArray
    N: FloatArray
    K_W: FloatArray
    mu_S1: FloatArray
    K_S1: FloatArray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = int(self.n)
        if n < 1:
            raise ValueError("horizon n must be >= 1")
        C = np.array(self.C, dtype=float)
        if C.ndim != 3 or C.shape[0] != n or C.shape[1] != 1:
            raise ValueError(
                f"C must have shape (n, 1, n_s) for a scalar observation, got {C.shape}"
            )
        n_s = C.shape[2]
        N = np.array(self.N, dtype=float)
        if N.ndim != 3 or N.shape[0] != n or N.shape[1] != 1:
            raise ValueError(
                f"N must have shape (n, 1, n_w) for a scalar observation, got {N.shape}"
            )
        n_w = N.shape[2]
        A = np.array(self.A, dtype=float)
        if A.shape != (n - 1, n_s, n_s):
            raise ValueError(f"A must have shape (n-1, n_s, n_s)={(n - 1, n_s, n_s)}, got {A.shape}")
        B = np.array(self.B, dtype=float)
        if B.shape != (n - 1, n_s, n_w):
            raise ValueError(f"B must have shape (n-1, n_s, n_w)={(n - 1, n_s, n_w)}, got {B.shape}")
        K_W = np.array(self.K_W, dtype=float)
        if K_W.shape != (n, n_w, n_w):
            raise ValueError(f"K_W must have shape (n, n_w, n_w)={(n, n_w, n_w)}, got {K_W.shape}")
        mu = np.array(self.mu_S1, dtype=float).reshape(-1)
        if mu.shape != (n_s,):
            raise ValueError(f"mu_S1 must have length n_s={n_s}, got {mu.shape}")
        K_S1 = np.array(self.K_S1, dtype=float)
        if K_S1.shape != (n_s, n_s):
            raise ValueError(f"K_S1 must have shape (n_s, n_s)={(n_s, n_s)}, got {K_S1.shape}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "N", _frozen(N))
        object.__setattr__(self, "K_W", _frozen(K_W))
        object.__setattr__(self, "mu_S1", _frozen(mu))
        object.__setattr__(self, "K_S1", _frozen(K_S1))

    @property
    def n_s(self) -> int:
        return self.C.shape[2]

    @property
    def n_w(self) -> int:
        return self.N.shape[2]

    @classmethod
    def time_invariant(
        cls,
        n: int,
        A: Any,
        B: Any,
        C: Any,
        N: Any,
        K_W: Any,
        mu_S1: Any = None,
        K_S1: Any = None,
        meta: dict | None = None,
    ) -> "PoSsRealization":
        """Build a realization by repeating one set of matrices over the horizon."""
        A2 = np.atleast_2d(np.asarray(A, dtype=float))
        B2 = np.atleast_2d(np.asarray(B, dtype=float))
        C2 = np.atleast_2d(np.asarray(C, dtype=float))
        N2 = np.atleast_2d(np.asarray(N, dtype=float))
        KW2 = np.atleast_2d(np.asarray(K_W, dtype=float))
        n_s = C2.shape[1]
        n_w = N2.shape[1]
        if mu_S1 is None:
            mu_S1 = np.zeros(n_s)
        if K_S1 is None:
            K_S1 = np.zeros((n_s, n_s))
        return cls(
            n=n,
            A=np.tile(A2, (n - 1, 1, 1)) if n > 1 else np.zeros((0, n_s, n_s)),
            B=np.tile(B2, (n - 1, 1, 1)) if n > 1 else np.zeros((0, n_s, n_w)),
            C=np.tile(C2, (n, 1, 1)),
            N=np.tile(N2, (n, 1, 1)),
            K_W=np.tile(KW2, (n, 1, 1)),
            mu_S1=mu_S1,
            K_S1=K_S1,
            meta=dict(meta or {}),
        )


@dataclass(frozen=True)
class ChannelConfig:
    """Average power constraint: (1/n) E sum_t X_t^2 <= kappa over horizon n."""

    kappa: float
    n: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        if int(self.n) < 1:
            raise ValueError(f"horizon n must be >= 1, got {self.n}")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "n", int(self.n))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


class ModelFormatError(ValueError):
    """Raised when a model file does not match the documented JSON schema."""


def _check_sym_psd(M: FloatArray, name: str, violations: list[str]) -> None:
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > _PSD_TOL:
        violations.append(f"{name} not symmetric (max asymmetry {asym:.3g})")
        return
    if M.size:
        min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        if min_eig < -_PSD_TOL:
            violations.append(f"{name} not PSD (min eigenvalue {min_eig:.3g})")


def validate_realization(r: PoSsRealization) -> ValidationReport:
    """Numeric validity checks for a realization.

    Verifies finiteness of all matrices, symmetry/PSD-ness of every K_W_t and
    of K_S1 (tolerance 1e-10), and strict positivity of the feedthrough
    covariance R_t = N_t K_W_t N_t^T at every step.  Returns a report rather
    than raising so callers can surface all violations at once.
    """
    violations: list[str] = []
    for name in ("A", "B", "C", "N", "K_W", "mu_S1", "K_S1"):
        if not np.all(np.isfinite(getattr(r, name))):
            violations.append(f"{name} contains non-finite entries")
    if violations:
        return ValidationReport(False, tuple(violations))
    for t in range(r.n):
        _check_sym_psd(r.K_W[t], f"K_W at t={t + 1}", violations)
    _check_sym_psd(r.K_S1, "K_S1", violations)
    for t in range(r.n):
        n_row = r.N[t, 0]
        R_t = float(n_row @ r.K_W[t] @ n_row)
        if R_t <= 0.0:
            violations.append(f"R_t = {R_t:g} at t={t + 1} (must be > 0)")
    return ValidationReport(not violations, tuple(violations))


def assemble_noise_covariance(r: PoSsRealization) -> FloatArray:
    """Exact covariance matrix K_V of (V_1, ..., V_n).

    Propagates the state second moments forward:

        cov(V_t, V_t) = C_t P_t C_t^T + N_t K_W_t N_t^T
        cov(V_t, V_s) = C_t Phi_{t,s+1} (A_s P_s C_s^T + B_s K_W_s N_s^T),  s < t

    with P_1 = K_S1, P_{t+1} = A_t P_t A_t^T + B_t K_W_t B_t^T and
    Phi_{t,s} the state transition product.  The result is symmetrized; a
    PSD failure beyond roundoff is reported by raising, never patched.
    """
    report = validate_realization(r)
    if not report.ok:
        raise ValueError("invalid realization: " + "; ".join(report.violations))
    n = r.n
    K_V = np.zeros((n, n))
    P = 0.5 * (r.K_S1 + r.K_S1.T)
    carried: list[FloatArray] = []  # carried[s] = Phi_{t,s+1} d_s at loop time t
    for t in range(n):
        c_row = r.C[t, 0]
        n_row = r.N[t, 0]
        K_V[t, t] = c_row @ P @ c_row + n_row @ r.K_W[t] @ n_row
        for s, x in enumerate(carried):
            K_V[t, s] = K_V[s, t] = c_row @ x
        if t < n - 1:
            A_t, B_t = r.A[t], r.B[t]
            d = A_t @ (P @ c_row) + B_t @ (r.K_W[t] @ n_row)
            carried = [A_t @ x for x in carried]
            carried.append(d)
            P = A_t @ P @ A_t.T + B_t @ r.K_W[t] @ B_t.T
            P = 0.5 * (P + P.T)
    K_V = 0.5 * (K_V + K_V.T)
    min_eig = float(np.linalg.eigvalsh(K_V).min())
    if min_eig < -1e-9 * max(1.0, float(np.abs(K_V).max())):
        raise ValueError(f"assembled noise covariance is not PSD (min eigenvalue {min_eig:.3g})")
    return K_V


def noise_mean(r: PoSsRealization) -> FloatArray:
    """Mean vector of (V_1, ..., V_n); nonzero only when mu_S1 is nonzero."""
    m = r.mu_S1.copy()
    out = np.zeros(r.n)
    for t in range(r.n):
        out[t] = r.C[t, 0] @ m
        if t < r.n - 1:
            m = r.A[t] @ m
    return out


def build_arma11(c: float, a: float, sigma_w: float, n: int) -> PoSsRealization:
    """Scalar ARMA(1,1) noise (1 - c q^-1) V = (1 - a q^-1) W in innovation form.

    Uses the one-dimensional realization A=c, B=1, C=c-a, N=1, K_W=sigma_w^2
    with the stationary initial variance K_S1 = sigma_w^2 / (1 - c^2) when
    |c| < 1.  For |c| >= 1 no stationary variance exists; K_S1 is set to 0
    and the realization is flagged in meta["unstable_ar"].
    """
    if sigma_w <= 0:
        raise ValueError("sigma_w must be > 0")
    meta: dict[str, Any] = {"family": "arma11", "c": float(c), "a": float(a)}
    if abs(c) < 1.0:
        k_s1 = sigma_w**2 / (1.0 - c**2)
    else:
        k_s1 = 0.0
        meta["unstable_ar"] = True
    return PoSsRealization.time_invariant(
        n=n,
        A=[[c]],
        B=[[1.0]],
        C=[[c - a]],
        N=[[1.0]],
        K_W=[[sigma_w**2]],
        mu_S1=[0.0],
        K_S1=[[k_s1]],
        meta=meta,
    )


def build_white_noise(sigma_w: float, n: int) -> PoSsRealization:
    """Memoryless noise V_t ~ N(0, sigma_w^2) i.i.d. (state decoupled: A=B=C=0)."""
    if sigma_w <= 0:
        raise ValueError("sigma_w must be > 0")
    return PoSsRealization.time_invariant(
        n=n,
        A=[[0.0]],
        B=[[0.0]],
        C=[[0.0]],
        N=[[1.0]],
        K_W=[[sigma_w**2]],
        meta={"family": "white"},
    )


def build_two_driver(
    base: PoSsRealization,
    B1: Any,
    B2: Any,
    N1: Any,
    N2: Any,
) -> PoSsRealization:
    """Split the noise driver of `base` into two independent drivers.

    The returned realization keeps A_t, C_t, mu_S1, K_S1 from `base`, doubles
    the driver dimension with B_t = [B1_t B2_t], N_t = [N1_t N2_t] and
    block-diagonal K_W_t = diag(K_W_t, K_W_t).  Gains may be given per step
    (leading axis n-1 for B parts, n for N parts) or as single matrices that
    are repeated.  Only dimension mismatches raise; numeric validity (for
    example R_t > 0) is left to `validate_realization`.
    """
    n, n_s, n_w = base.n, base.n_s, base.n_w

    def steps(x: Any, count: int, rows: int, name: str) -> FloatArray:
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 2:
            arr = np.tile(arr, (count, 1, 1)) if count else np.zeros((0, rows, n_w))
        if arr.shape != (count, rows, n_w):
            raise ValueError(f"{name} must have shape ({count}, {rows}, {n_w}), got {arr.shape}")
        return arr

    b1 = steps(B1, n - 1, n_s, "B1")
    b2 = steps(B2, n - 1, n_s, "B2")
    n1 = steps(N1, n, 1, "N1")
    n2 = steps(N2, n, 1, "N2")
    B = np.concatenate([b1, b2], axis=2)
    N = np.concatenate([n1, n2], axis=2)
    K_W = np.zeros((n, 2 * n_w, 2 * n_w))
    K_W[:, :n_w, :n_w] = base.K_W
    K_W[:, n_w:, n_w:] = base.K_W
    meta = dict(base.meta)
    meta["family"] = "two_driver"
    return PoSsRealization(
        n=n, A=base.A, B=B, C=base.C, N=N, K_W=K_W,
        mu_S1=base.mu_S1, K_S1=base.K_S1, meta=meta,
    )


def is_time_invariant(r: PoSsRealization) -> bool:
    """True when every per-step matrix is constant over the horizon."""
    for name in ("A", "B"):
        arr = getattr(r, name)
        if arr.shape[0] > 1 and not np.all(arr == arr[0]):
            return False
    for name in ("C", "N", "K_W"):
        arr = getattr(r, name)
        if not np.all(arr == arr[0]):
            return False
    return True


def with_horizon(r: PoSsRealization, n: int) -> PoSsRealization:
    """Re-horizon a time-invariant realization to n steps."""
    if not is_time_invariant(r):
        raise ValueError("with_horizon requires a time-invariant realization")
    if r.n == 1 and n > 1:
        raise ValueError("cannot extend a horizon-1 realization (A_t, B_t unknown)")
    A0 = r.A[0] if r.n > 1 else np.zeros((r.n_s, r.n_s))
    B0 = r.B[0] if r.n > 1 else np.zeros((r.n_s, r.n_w))
    return PoSsRealization.time_invariant(
        n=n, A=A0, B=B0, C=r.C[0], N=r.N[0], K_W=r.K_W[0],
        mu_S1=r.mu_S1, K_S1=r.K_S1, meta=dict(r.meta),
    )


# ---------------------------------------------------------------------------
# JSON model files (schema documented in docs/model-schema.md)

def _schema_array(obj: dict, key: str, path: str) -> np.ndarray:
    if key not in obj:
        raise ModelFormatError(f"{path}: missing required field '{key}'")
    try:
        return np.array(obj[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: field '{key}' is not a numeric array ({exc})") from None


def load_model(path: str) -> PoSsRealization:
    """Load a realization from the JSON model format.

    Matrices may be given per step (lists of 2-D arrays, length n-1 for A/B
    and n for C/N/K_W) or, with "time_invariant": true, as single 2-D arrays
    repeated over the horizon.  Raises ModelFormatError naming the offending
    field; numeric validity is not checked here.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON (line {exc.lineno}: {exc.msg})") from None
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{path}: top level must be a JSON object")
    if "n" not in obj:
        raise ModelFormatError(f"{path}: missing required field 'n'")
    try:
        n = int(obj["n"])
    except (TypeError, ValueError):
        raise ModelFormatError(f"{path}: field 'n' must be an integer") from None
    ti = bool(obj.get("time_invariant", False))
    fields = {key: _schema_array(obj, key, path) for key in ("A", "B", "C", "N", "K_W", "mu_S1", "K_S1")}
    if not ti and n == 1 and fields["C"].ndim == 3 and fields["N"].ndim == 3:
        # JSON "[]" carries no shape; restore the empty (0, n_s, .) stacks
        n_s, n_w = fields["C"].shape[2], fields["N"].shape[2]
        if fields["A"].size == 0:
            fields["A"] = fields["A"].reshape(0, n_s, n_s)
        if fields["B"].size == 0:
            fields["B"] = fields["B"].reshape(0, n_s, n_w)
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise ModelFormatError(f"{path}: field 'meta' must be an object")
    try:
        if ti:
            r = PoSsRealization.time_invariant(
                n=n, A=fields["A"], B=fields["B"], C=fields["C"], N=fields["N"],
                K_W=fields["K_W"], mu_S1=fields["mu_S1"], K_S1=fields["K_S1"], meta=meta,
            )
        else:
            r = PoSsRealization(
                n=n, A=fields["A"], B=fields["B"], C=fields["C"], N=fields["N"],
                K_W=fields["K_W"], mu_S1=fields["mu_S1"], K_S1=fields["K_S1"], meta=meta,
            )
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    # n_s / n_w are redundant with the matrix shapes; cross-check when given
    for key, actual in (("n_s", r.n_s), ("n_w", r.n_w)):
        if key in obj and int(obj[key]) != actual:
            raise ModelFormatError(
                f"{path}: field '{key}' = {obj[key]} contradicts the matrix shapes ({actual})"
            )
    return r


def save_model(r: PoSsRealization, path: str) -> None:
    """Write a realization in the JSON model format (shorthand when time-invariant)."""
    if is_time_invariant(r) and r.n > 1:
        obj: dict[str, Any] = {
            "n": r.n,
            "n_s": r.n_s,
            "n_w": r.n_w,
            "time_invariant": True,
            "A": r.A[0].tolist(),
            "B": r.B[0].tolist(),
            "C": r.C[0].tolist(),
            "N": r.N[0].tolist(),
            "K_W": r.K_W[0].tolist(),
        }
    else:
        obj = {
            "n": r.n,
            "n_s": r.n_s,
            "n_w": r.n_w,
            "A": r.A.tolist(),
            "B": r.B.tolist(),
            "C": r.C.tolist(),
            "N": r.N.tolist(),
            "K_W": r.K_W.tolist(),
        }
    obj["mu_S1"] = r.mu_S1.tolist()
    obj["K_S1"] = r.K_S1.tolist()
    if r.meta:
        obj["meta"] = r.meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
