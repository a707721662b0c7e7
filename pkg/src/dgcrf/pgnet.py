"""Parameter generation: map noisy patches to PSD pairwise potentials.

Each patch is scored against K learned base matrices with a Gaussian-style
quadratic form, the scores pass through a softmax, and the resulting convex
weights mix the K base matrices into one PSD potential per patch. The
learnable parameters live in Cholesky factors so PSD-ness holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError
from .patches import center_rows, extract_patches

SOFTMAX_VARIANTS = ("exp", "linear")


@dataclass
class PotentialBank:
    """Learnable bank {P_k, R_k, b_k} of K base potentials for patch side d.

    factors_w: (K, d^2, d^2) lower-triangular, W_k = P_k P_k^T scores patches.
    factors_psi: (K, d^2, d^2) lower-triangular, Psi_k = R_k R_k^T is mixed
        into the per-patch potential.
    biases: (K,) additive score offsets b_k.

    Banks are immutable once built; the per-sigma^2 factorization cache below
    relies on that (a new parameter vector means a new bank instance).
    """

    side: int
    factors_w: np.ndarray
    factors_psi: np.ndarray
    biases: np.ndarray
    _score_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.factors_w = np.asarray(self.factors_w, dtype=np.float64)
        self.factors_psi = np.asarray(self.factors_psi, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        m = self.side * self.side
        k = self.biases.shape[0] if self.biases.ndim == 1 else -1
        if self.factors_w.shape != (k, m, m) or self.factors_psi.shape != (k, m, m) or k < 1:
            raise ParameterError(
                f"inconsistent bank shapes: factors_w {self.factors_w.shape}, "
                f"factors_psi {self.factors_psi.shape}, biases {self.biases.shape}, side {self.side}"
            )
        for name, stack in (("factors_w", self.factors_w), ("factors_psi", self.factors_psi)):
            if not np.all(np.isfinite(stack)):
                raise ParameterError(f"{name} contains non-finite entries")
            upper = np.triu(stack, k=1)
            if np.any(upper != 0.0):
                raise ParameterError(f"{name} must be strictly lower-triangular (zero upper triangle)")
        if not np.all(np.isfinite(self.biases)):
            raise ParameterError("biases contain non-finite entries")

    @property
    def n_components(self) -> int:
        return self.biases.shape[0]

    def matrices_w(self) -> np.ndarray:
        """Reconstructed (K, d^2, d^2) stack W_k = P_k P_k^T."""
        return self.factors_w @ self.factors_w.transpose(0, 2, 1)

    def matrices_psi(self) -> np.ndarray:
        """Reconstructed (K, d^2, d^2) stack Psi_k = R_k R_k^T."""
        return self.factors_psi @ self.factors_psi.transpose(0, 2, 1)

    def score_inverses(self, sigma2: float) -> np.ndarray:
        """Explicit inverses of (W_k + sigma^2 I), cached per sigma^2.

        Inverting once per (bank, sigma^2) amortizes the O(K d^6) cost over
        every patch and every solver layer that shares the noise level, and
        turns per-patch scoring into one batched matmul. The matrices are
        well conditioned (sigma^2 > 0 bounds the spectrum away from zero),
        so the explicit inverse loses nothing here; positive definiteness
        is still checked by an attempted factorization first.
        """
        key = float(sigma2)
        inverses = self._score_cache.get(key)
        if inverses is None:
            m = self.side * self.side
            shifted = self.matrices_w() + key * np.eye(m)
            try:
                np.linalg.cholesky(shifted)
            except np.linalg.LinAlgError as exc:
                for k in range(self.n_components):
                    try:
                        np.linalg.cholesky(shifted[k])
                    except np.linalg.LinAlgError:
                        raise NumericError(
                            f"score matrix for component {k} is not positive definite"
                        ) from exc
                raise NumericError(f"score factorization failed: {exc}") from exc
            inverses = np.linalg.inv(shifted)
            self._score_cache[key] = inverses
        return inverses


@dataclass
class PgnetCache:
    """Forward intermediates one backprop pass needs.

    xbar: (n, d^2) centered patches of the generator's input image.
    scores: (n, K) quadratic scores.
    gamma: (n, K) combination weights.
    solves: (K, d^2, n) cached (W_k + sigma^2 I)^{-1} xbar^T solutions.
    image_shape: the input image's (height, width), for scattering gradients.
    """

    xbar: np.ndarray
    scores: np.ndarray
    gamma: np.ndarray
    solves: np.ndarray
    image_shape: tuple[int, int]
    softmax_variant: str


def _check_sigma2(sigma2: float) -> float:
    if not sigma2 > 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    return float(sigma2)


def scores_for_patches(xbar_rows: np.ndarray, bank: PotentialBank, sigma2: float) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic scores for a whole (n, d^2) stack of centered patches.

    Returns (scores (n, K), solves (K, d^2, n)); the solve results are kept
    because backprop reuses them.
    """
    sigma2 = _check_sigma2(sigma2)
    inverses = bank.score_inverses(sigma2)
    rhs = np.ascontiguousarray(xbar_rows.T)
    solves = np.matmul(inverses, rhs)
    scores = -0.5 * np.einsum("mn,kmn->nk", rhs, solves) + bank.biases[None, :]
    return scores, solves


def quadratic_scores(xbar: np.ndarray, bank: PotentialBank, sigma2: float) -> np.ndarray:
    """Score one centered patch: s_k = -0.5 xbar^T (W_k + sigma^2 I)^{-1} xbar + b_k."""
    xbar = np.asarray(xbar, dtype=np.float64).reshape(1, -1)
    scores, _ = scores_for_patches(xbar, bank, sigma2)
    return scores[0]


def softmax_rows(scores: np.ndarray, variant: str = "exp") -> np.ndarray:
    """Row-wise combination weights for an (n, K) score array."""
    if variant == "exp":
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if variant == "linear":
        # ablation path: plain normalization of raw scores, which can leave
        # the simplex (negative weights) and divides by the score sum
        totals = scores.sum(axis=1, keepdims=True)
        if np.any(np.abs(totals) < 1e-300):
            raise NumericError("linear normalization hit a zero score sum")
        return scores / totals
    raise ParameterError(f"unknown softmax variant {variant!r}, expected one of {SOFTMAX_VARIANTS}")


def softmax_weights(s: np.ndarray, variant: str = "exp") -> np.ndarray:
    """Combination weights of one score vector (max-shifted, overflow-safe)."""
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    return softmax_rows(s, variant)[0]


def combine_rows(gamma: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Mix (n, K) weights with (K, m, m) bases into an (n, m, m) stack."""
    n, kk = gamma.shape
    m = psi.shape[-1]
    return (gamma @ psi.reshape(kk, m * m)).reshape(n, m, m)


def combine_potentials(gamma: np.ndarray, bank: PotentialBank) -> np.ndarray:
    """Convex combination Sigma = sum_k gamma_k Psi_k for one patch."""
    gamma = np.asarray(gamma, dtype=np.float64).reshape(1, -1)
    if gamma.shape[1] != bank.n_components:
        raise ParameterError(f"gamma has {gamma.shape[1]} entries for a bank of {bank.n_components}")
    return combine_rows(gamma, bank.matrices_psi())[0]


def generate_potentials(
    xbar: np.ndarray,
    image_shape: tuple[int, int],
    bank: PotentialBank,
    sigma2: float,
    softmax_variant: str = "exp",
    scale: float = 1.0,
) -> tuple[np.ndarray, PgnetCache]:
    """Generator core on pre-centered patch rows.

    Returns (scale * Sigma stack, cache). The scale lets the solver request
    the beta-weighted operator prior directly, saving one full pass over the
    (n, m, m) stack; the cache always holds the unscaled weights.
    """
    scores, solves = scores_for_patches(xbar, bank, sigma2)
    gamma = softmax_rows(scores, softmax_variant)
    mix = gamma if scale == 1.0 else gamma * scale
    sigma_stack = combine_rows(mix, bank.matrices_psi())
    cache = PgnetCache(
        xbar=xbar,
        scores=scores,
        gamma=gamma,
        solves=solves,
        image_shape=image_shape,
        softmax_variant=softmax_variant,
    )
    return sigma_stack, cache


def pgnet_forward(
    img: np.ndarray,
    bank: PotentialBank,
    sigma2: float,
    softmax_variant: str = "exp",
) -> tuple[np.ndarray, PgnetCache]:
    """Run the generator on an image: per-patch potentials plus cache.

    Returns (sigma_stack (n, d^2, d^2), PgnetCache). The potentials adapt to
    the image content: patches with similar centered content get similar
    score vectors, hence similar mixtures of the K bases.
    """
    pset = extract_patches(img, bank.side)
    xbar = center_rows(pset.patches)
    return generate_potentials(
        xbar, (img.shape[0], img.shape[1]), bank, sigma2, softmax_variant
    )
