"""Batched dense SPD helpers for stacks of small patch-sized systems.

numpy's gufunc Cholesky handles stacked (n, m, m) arrays, but neither numpy
nor scipy exposes a batched triangular solve, so forward/backward
substitution is vectorized here across the stack axis (a Python loop over
the m rows, einsum across the n systems). For m = d^2 of a 5x5 patch this
is a few dozen vector operations total.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericError


def cholesky_stack(a: np.ndarray, context: str = "operator") -> np.ndarray:
    """Lower Cholesky factor of each matrix in an (n, m, m) stack."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        # identify the first offending slice for the error message
        bad = _first_non_spd(a)
        raise NumericError(f"Cholesky factorization failed for {context} (first failing patch index {bad})") from exc


def _first_non_spd(a: np.ndarray) -> int:
    for idx in range(a.shape[0]):
        try:
            np.linalg.cholesky(a[idx])
        except np.linalg.LinAlgError:
            return idx
    return -1


def solve_lower_stack(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L x = rhs for each lower-triangular L in the stack.

    chol: (n, m, m), rhs: (n, m). Returns (n, m).
    """
    n, m = rhs.shape
    x = np.empty((n, m), dtype=np.float64)
    for i in range(m):
        acc = np.einsum("nj,nj->n", chol[:, i, :i], x[:, :i]) if i else 0.0
        x[:, i] = (rhs[:, i] - acc) / chol[:, i, i]
    return x


def solve_upper_from_lower_stack(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L^T x = rhs for each lower-triangular L in the stack."""
    n, m = rhs.shape
    x = np.empty((n, m), dtype=np.float64)
    for i in range(m - 1, -1, -1):
        acc = np.einsum("nj,nj->n", chol[:, i + 1 :, i], x[:, i + 1 :]) if i < m - 1 else 0.0
        x[:, i] = (rhs[:, i] - acc) / chol[:, i, i]
    return x


def solve_spd_stack(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = rhs given the stacked Cholesky factors."""
    return solve_upper_from_lower_stack(chol, solve_lower_stack(chol, rhs))


def solve_operator_stack(a: np.ndarray, rhs: np.ndarray, context: str = "operator") -> np.ndarray:
    """Solve a_i x_i = rhs_i across an (n, m, m) stack in one batched call.

    The hot path for the per-patch solver operators, which are positive
    definite by construction (PSD potential plus projector plus ridge).
    Batched LU beats a Cholesky factorization plus two substitution sweeps
    here because it is a single LAPACK dispatch; on failure the slower
    Cholesky pass runs once purely to name the offending patch.
    """
    try:
        x = np.linalg.solve(a, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        cholesky_stack(a, context=context)
        raise NumericError(f"singular system in {context}") from exc
    if not np.all(np.isfinite(x)):
        cholesky_stack(a, context=context)
        raise NumericError(f"non-finite solution in {context}")
    return x


def spd_solve(a: np.ndarray, b: np.ndarray, context: str = "system") -> np.ndarray:
    """Dense single-matrix SPD solve via scipy's Cholesky routines."""
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"SPD factorization failed for {context}: {exc}") from exc
    return scipy.linalg.cho_solve(factor, b)


def operator_ridge(scaled_stack: np.ndarray, scale: float = 1e-6) -> np.ndarray:
    """Relative ridge for the patch-inference operator beta*Sigma + G.

    Takes the already-scaled beta*Sigma stack. Per patch the ridge is
    scale * trace(beta*Sigma + G) / m, with trace(G) = m - 1. Keeping it
    proportional to the operator's own scale makes the conditioning
    safeguard unit-free.
    """
    m = scaled_stack.shape[-1]
    traces = np.trace(scaled_stack, axis1=-2, axis2=-1) + (m - 1)
    return scale * traces / m


def prior_ridge(sigma_stack: np.ndarray, scale: float = 1e-6) -> np.ndarray:
    """Relative ridge used when inverting Sigma itself (energy evaluators).

    Convex combinations of covariance-like matrices built from centered
    patches annihilate the constant vector, so a plain inverse does not
    exist; the inflated direction is annihilated by the surrounding mean
    projections and never contributes to the quadratic form.
    """
    m = sigma_stack.shape[-1]
    return scale * np.trace(sigma_stack, axis1=-2, axis2=-1) / m
