"""Dense float32 numerics underneath the predictors and probes.

A "matrix" throughout this package is a plain 2-D float32 numpy array of
shape [rows, cols] (tokens along rows, channels along columns). This module
owns the two primitives everything else builds on: closed-form ridge
regression via the augmented normal equations, and explained-variance
ratios. Accumulations run in float64 to limit cancellation; results come
back as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateTargetError, SingularSystemError

# Fixed row-block size for affine-map application. Keeping the GEMM shape
# constant makes each row's output independent of how callers batch rows,
# which cache replay relies on for bit-identical reconstructions.
_APPLY_BLOCK = 256


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a C-contiguous 2-D float32 array."""
    arr = np.ascontiguousarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, name: str = "matrix") -> None:
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class LinearMap:
    """Affine map ``x -> x @ weight + bias``.

    weight is [in_dim, out_dim], bias is [out_dim], both float32.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"out_dim {self.weight.shape[1]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, X) -> np.ndarray:
        """Apply the map row-wise.

        Rows are processed in fixed blocks of ``_APPLY_BLOCK`` (the last
        block zero-padded), so the result for any given row does not depend
        on how many other rows were passed in the same call.
        """
        X = as_matrix(X, "X")
        if X.shape[1] != self.in_dim:
            raise ValueError(
                f"input has {X.shape[1]} columns, map expects {self.in_dim}"
            )
        n = X.shape[0]
        out = np.empty((n, self.out_dim), dtype=np.float32)
        scratch = np.zeros((_APPLY_BLOCK, self.in_dim), dtype=np.float32)
        for start in range(0, n, _APPLY_BLOCK):
            stop = min(start + _APPLY_BLOCK, n)
            m = stop - start
            if m == _APPLY_BLOCK:
                np.matmul(X[start:stop], self.weight, out=out[start:stop])
            else:
                scratch[:m] = X[start:stop]
                scratch[m:] = 0.0
                out[start:stop] = (scratch @ self.weight)[:m]
        out += self.bias
        return out


def ridge_fit(X, Y, lam: float = 1e-3) -> LinearMap:
    """Fit ``argmin ||X W + b - Y||^2 + lam ||W||^2`` in closed form.

    A constant-one column is appended to X and the augmented normal
    equations are solved with a Cholesky factorization; the bias row is
    never regularized. With ``lam == 0`` a rank-deficient system raises
    :class:`SingularSystemError` instead of returning garbage.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(
            f"X has {X.shape[0]} rows but Y has {Y.shape[0]}"
        )
    if X.shape[0] < 1:
        raise ValueError("need at least one row to fit")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    check_finite(X, "X")
    check_finite(Y, "Y")

    n, p = X.shape
    q = Y.shape[1]
    Xd = X.astype(np.float64)
    Yd = Y.astype(np.float64)

    # Augmented Gram matrix [[X'X, X'1], [1'X, n]] without materializing
    # the ones column.
    G = np.empty((p + 1, p + 1), dtype=np.float64)
    G[:p, :p] = Xd.T @ Xd
    col_sums = Xd.sum(axis=0)
    G[:p, p] = col_sums
    G[p, :p] = col_sums
    G[p, p] = n
    if lam > 0:
        G[np.arange(p), np.arange(p)] += lam

    rhs = np.empty((p + 1, q), dtype=np.float64)
    rhs[:p] = Xd.T @ Yd
    rhs[p] = Yd.sum(axis=0)

    try:
        factor = cho_factor(G, lower=False, check_finite=False)
    except np.linalg.LinAlgError as exc:
        if lam == 0:
            raise SingularSystemError(
                "normal equations are singular with lambda = 0; "
                "refit with lambda > 0"
            ) from exc
        raise
    if lam == 0:
        # rounding can push an exactly-singular matrix through the
        # factorization with tiny positive pivots; catch that explicitly
        pivots = np.abs(np.diag(factor[0]))
        if (pivots.min() / pivots.max()) ** 2 <= 64 * (p + 1) * np.finfo(np.float64).eps:
            raise SingularSystemError(
                "normal equations are singular or ill-conditioned with "
                "lambda = 0; refit with lambda > 0"
            )
    sol = cho_solve(factor, rhs, check_finite=False)
    return LinearMap(
        weight=np.ascontiguousarray(sol[:p], dtype=np.float32),
        bias=np.ascontiguousarray(sol[p], dtype=np.float32),
    )


def explained_variance_ratio(Y, Y_hat, aggregate: str = "pooled") -> float:
    """1 minus residual variance over target variance, summed per channel.

    Variances are per-column population variances accumulated in float64.
    ``aggregate="pooled"`` (default) returns a ratio of sums, which stays
    well-behaved when individual channels have near-zero variance;
    ``aggregate="per_channel"`` averages 1 - var_resid_c / var_target_c
    over channels with positive target variance.
    """
    Y = as_matrix(Y, "Y")
    Y_hat = as_matrix(Y_hat, "Y_hat")
    if Y.shape != Y_hat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Y_hat.shape}")
    if Y.shape[0] < 2:
        raise ValueError("need at least 2 rows to estimate variance")

    var_target = Y.var(axis=0, dtype=np.float64)
    var_resid = (Y.astype(np.float64) - Y_hat.astype(np.float64)).var(axis=0)

    if aggregate == "pooled":
        total = var_target.sum()
        if total <= 0.0:
            raise DegenerateTargetError("target has zero variance in every channel")
        return float(1.0 - var_resid.sum() / total)
    if aggregate == "per_channel":
        mask = var_target > 0.0
        if not mask.any():
            raise DegenerateTargetError("target has zero variance in every channel")
        return float(np.mean(1.0 - var_resid[mask] / var_target[mask]))
    raise ValueError(f"unknown aggregate mode {aggregate!r}")
