"""Zero-mean Gaussian mixture fitting for potential-bank initialization.

Mean-subtracted patches live exactly in the subspace orthogonal to the
all-ones vector, so their scatter matrices are always rank deficient by
one. EM therefore runs in an orthonormal basis of that subspace, where
the covariances are generically full rank and no regularizer is needed;
the fitted covariances are lifted back afterwards and a small diagonal
is added so the Cholesky factors exist.

:param conventions: patch rows are length d*d, already mean subtracted.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import DataError, ParameterError
from .pgnet import PotentialBank

logger = logging.getLogger(__name__)

BANK_DIAGONAL = 1e-6
MIN_PATCHES_PER_COMPONENT = 10


def orthonormal_complement_basis(m: int) -> np.ndarray:
    """Columns form an orthonormal basis of the subspace orthogonal to ones.

    :param m: ambient dimension, at least 2.
    :returns: (m, m-1) matrix Q with Q.T @ Q = I and Q.T @ ones = 0.
    """
    if m < 2:
        raise ParameterError(f"need dimension >= 2, got {m}")
    a = np.empty((m, m))
    a[:, 0] = 1.0
    a[:, 1:] = np.eye(m)[:, : m - 1]
    q, _ = np.linalg.qr(a)
    return q[:, 1:]


def _log_gaussian_rows(data: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Zero-mean Gaussian log-density of each row under one covariance."""
    m = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    half = np.linalg.solve(chol, data.T)
    quad = np.sum(half * half, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + logdet + m * np.log(2.0 * np.pi))


def fit_zero_mean_gmm(
    data: np.ndarray,
    n_components: int,
    n_iters: int = 30,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """EM for a zero-mean Gaussian mixture.

    :param data: (n, m) rows, assumed full rank in their span.
    :param n_components: mixture size K.
    :param n_iters: number of EM updates after the seeded hard assignment.
    :param seed: RNG seed for anchor choice and degenerate reseeding.
    :returns: (covariances (K, m, m), weights (K,), per-iteration log-likelihood).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ParameterError(f"data must be 2-d, got shape {data.shape}")
    n, m = data.shape
    k = int(n_components)
    if k < 1:
        raise ParameterError(f"n_components must be >= 1, got {k}")
    rng = np.random.Generator(np.random.PCG64(seed))

    corpus_scatter = data.T @ data / n
    corpus_trace = float(np.trace(corpus_scatter)) / m

    # hard-assignment warm start from K random anchor patches
    anchors = data[rng.choice(n, size=k, replace=False)]
    d2 = (
        np.sum(data * data, axis=1)[:, None]
        - 2.0 * data @ anchors.T
        + np.sum(anchors * anchors, axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0

    covs = np.empty((k, m, m))
    weights = np.full(k, 1.0 / k)
    log_lik: list[float] = []

    for _ in range(n_iters + 1):
        # M step (also consumes the warm-start responsibilities on pass 0)
        counts = resp.sum(axis=0)
        for j in range(k):
            if counts[j] < 1.0:
                logger.warning("reseeding degenerate mixture component %d", j)
                idx = int(rng.integers(n))
                covs[j] = np.outer(data[idx], data[idx]) + corpus_scatter
                covs[j] += 1e-9 * corpus_trace * np.eye(m)
                counts[j] = 1.0
                continue
            weighted = data * resp[:, j][:, None]
            cov = weighted.T @ data / counts[j]
            cov += 1e-9 * corpus_trace * np.eye(m)
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                logger.warning("reseeding singular mixture component %d", j)
                cov = corpus_scatter + 1e-9 * corpus_trace * np.eye(m)
            covs[j] = cov
        weights = counts / counts.sum()

        # E step, in the log domain
        log_joint = np.empty((n, k))
        for j in range(k):
            log_joint[:, j] = np.log(weights[j]) + _log_gaussian_rows(data, covs[j])
        row_max = log_joint.max(axis=1, keepdims=True)
        shifted = np.exp(log_joint - row_max)
        norm = shifted.sum(axis=1, keepdims=True)
        resp = shifted / norm
        log_lik.append(float(np.sum(np.log(norm) + row_max)))

    return covs, weights, log_lik


def gmm_init(
    patches: np.ndarray,
    n_components: int,
    side: int,
    sigma0: float,
    n_iters: int = 30,
    seed: int = 0,
) -> PotentialBank:
    """Fit a patch mixture and turn it into a potential bank.

    :param patches: (n, d*d) mean-subtracted patch rows.
    :param n_components: bank size K.
    :param side: patch side d.
    :param sigma0: reference noise level on the [0, 1] intensity scale,
        used only for the bias terms.
    :param n_iters: EM iterations.
    :param seed: RNG seed.
    :returns: PotentialBank with W = Psi = covariance + 1e-6 I per component.
    """
    patches = np.asarray(patches, dtype=np.float64)
    m = side * side
    if patches.ndim != 2 or patches.shape[1] != m:
        raise ParameterError(
            f"patches must have shape (n, {m}) for side {side}, got {patches.shape}"
        )
    required = MIN_PATCHES_PER_COMPONENT * n_components * m
    if patches.shape[0] < required:
        raise DataError(
            f"patch corpus too small: got {patches.shape[0]} patches, "
            f"need at least {required} for {n_components} components of size {m}"
        )
    if sigma0 < 0:
        raise ParameterError(f"sigma0 must be >= 0, got {sigma0}")

    basis = orthonormal_complement_basis(m)
    reduced = patches @ basis
    covs_sub, weights, _ = fit_zero_mean_gmm(reduced, n_components, n_iters, seed)

    covs = np.einsum("ij,kjl,ml->kim", basis, covs_sub, basis, optimize=True)
    covs += BANK_DIAGONAL * np.eye(m)
    factors = np.linalg.cholesky(covs)

    sign, logdet = np.linalg.slogdet(covs + sigma0 * sigma0 * np.eye(m))
    if np.any(sign <= 0):
        raise ParameterError("mixture produced a non-positive-definite component")
    biases = np.log(weights) - 0.5 * logdet
    return PotentialBank(
        side=side,
        factors_w=factors,
        factors_psi=factors.copy(),
        biases=biases,
    )
