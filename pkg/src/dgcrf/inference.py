"""Unrolled half-quadratic inference over patch-adaptive Gaussian potentials.

One solver layer alternates two exact minimizations: patch inference pulls
every patch of the current estimate toward the null space of its potential
(a small SPD solve per patch), and image formation blends the auxiliary
patches back with the noisy input, pixel-wise. Stacking T layers with an
increasing coupling schedule unrolls the classic half-quadratic splitting
iteration into a differentiable network.

The module also carries the dense full-image solvers used as test oracles;
they scale as (pixel count)^3 and are guarded to tiny images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .linalg import (
    cholesky_stack,
    operator_ridge,
    prior_ridge,
    solve_operator_stack,
    solve_spd_stack,
    spd_solve,
)
from .patches import PatchSet, accumulate_patches, center_rows, coverage_counts, extract_patches, mean_projection
from .pgnet import PgnetCache, PotentialBank, generate_potentials

DEFAULT_BETA_MULTIPLIERS = (1.0, 4.0, 8.0, 16.0, 32.0, 64.0)
DEFAULT_RIDGE_SCALE = 1e-6
ORACLE_MAX_SIDE = 16


@dataclass(frozen=True)
class HQSSchedule:
    """Coupling weights for the unrolled solver, as multiples of 1/sigma^2.

    Storing dimensionless multipliers lets one schedule (and one trained
    model) serve every noise level; resolve() scales them at run time. An
    empty schedule is the identity network (no layers), used by tests.
    """

    multipliers: tuple[float, ...]

    def __post_init__(self):
        mults = tuple(float(m) for m in self.multipliers)
        object.__setattr__(self, "multipliers", mults)
        if any(m <= 0 for m in mults):
            raise ParameterError(f"beta multipliers must be positive, got {mults}")
        if any(b < a for a, b in zip(mults, mults[1:])):
            raise ParameterError(f"beta multipliers must be non-decreasing, got {mults}")

    @classmethod
    def default(cls, n_layers: int) -> "HQSSchedule":
        """The standard [1, 4, 8, 16, 32, 64] ladder truncated to n_layers."""
        if n_layers > len(DEFAULT_BETA_MULTIPLIERS):
            raise ParameterError(
                f"default schedule has {len(DEFAULT_BETA_MULTIPLIERS)} entries, requested {n_layers}"
            )
        return cls(DEFAULT_BETA_MULTIPLIERS[:n_layers])

    @property
    def n_layers(self) -> int:
        return len(self.multipliers)

    def resolve(self, sigma2: float) -> np.ndarray:
        """Concrete beta values (multiplier / sigma^2) for one noise level."""
        if not sigma2 > 0:
            raise ParameterError(f"sigma2 must be positive, got {sigma2}")
        return np.asarray(self.multipliers, dtype=np.float64) / float(sigma2)


@dataclass
class LayerCache:
    """Per-layer intermediates kept for backprop.

    op holds the exact forward operators (beta*Sigma + G + ridge*I);
    backprop solves against the same matrices, so they are built once here
    and reused.
    """

    beta: float
    ridge_scale: float        # trace-coupled ridge coefficient used forward
    y_rows: np.ndarray        # (n, d^2) patches of the layer's input estimate
    op: np.ndarray            # (n, d^2, d^2) PI operator stack
    u: np.ndarray             # (n, d^2) solves (beta*Sigma+G+eps)^{-1} G y
    z_rows: np.ndarray        # (n, d^2) auxiliary patches after PI
    pg: PgnetCache | None     # generator cache; None = reuse layer 0's potentials


@dataclass
class InferenceState:
    """Current estimate plus the caches of every executed layer."""

    estimate: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)


@dataclass
class ForwardCache:
    """Everything backprop needs to replay the forward pass in reverse."""

    x: np.ndarray
    sigma2: float
    side: int
    betas: np.ndarray
    cascade: bool
    softmax_variant: str
    ridge_scale: float
    counts: np.ndarray
    layers: list[LayerCache]
    banks: list[PotentialBank]


def patch_inference(y: np.ndarray, sigma: np.ndarray, beta: float, ridge: float = 0.0) -> np.ndarray:
    """Auxiliary-patch update: z = y - G solve(beta*Sigma + G + ridge*I, G y).

    This is the Woodbury form of the patch subproblem's argmin; the direct
    normal-equation form solve(G Sigma^{-1} G + beta I, beta y) agrees with
    it whenever Sigma is invertible and ridge is 0.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64)
    m = y.shape[0]
    if sigma.shape != (m, m):
        raise ParameterError(f"Sigma shape {sigma.shape} does not match patch length {m}")
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if ridge < 0:
        raise ParameterError(f"ridge must be nonnegative, got {ridge}")
    side = int(round(np.sqrt(m)))
    a = beta * sigma + mean_projection(side) + ridge * np.eye(m)
    gy = y - y.mean()
    u = spd_solve(a, gy, context="patch inference operator")
    return y - (u - u.mean())


def patch_inference_rows(
    y_rows: np.ndarray, scaled_stack: np.ndarray, ridge_vec: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized patch inference over an (n, d^2) stack.

    scaled_stack is the beta-weighted prior beta*Sigma per patch; it is
    consumed (the projector and ridge are added in place). Returns
    (z_rows, op, u) where op is the assembled per-patch operator stack and
    u = op^{-1} G y; both are reused by backprop.
    """
    n, m = y_rows.shape
    side = int(round(np.sqrt(m)))
    a = scaled_stack
    a += mean_projection(side)
    idx = np.arange(m)
    a[:, idx, idx] += np.broadcast_to(ridge_vec, (n,))[:, None]
    gy = center_rows(y_rows)
    u = solve_operator_stack(a, gy, context="patch inference operator")
    z_rows = y_rows - (u - u.mean(axis=1, keepdims=True))
    return z_rows, a, u


def formation_from_rows(
    z_rows: np.ndarray, x: np.ndarray, sigma2: float, beta: float, counts: np.ndarray, side: int
) -> np.ndarray:
    """Pixel-wise estimate update from auxiliary patches.

    Y(i,j) = [X(i,j)/sigma^2 + beta*S(i,j)] / [1/sigma^2 + beta*N(i,j)]
    with S the fixed-order sum of covering auxiliary values and N the
    coverage count: the exact per-pixel argmin of the data-plus-coupling
    quadratic. On interior pixels N = d^2 and this reduces to the classic
    1/(1 + beta sigma^2 d^2) blend.
    """
    height, width = x.shape
    s = accumulate_patches(z_rows, height, width, side)
    inv_s2 = 1.0 / sigma2
    return (x * inv_s2 + beta * s) / (inv_s2 + beta * counts)


def image_formation(zset: PatchSet, x: np.ndarray, sigma2: float, beta: float) -> np.ndarray:
    """Estimate update from a PatchSet of auxiliaries (see formation_from_rows)."""
    x = np.asarray(x, dtype=np.float64)
    if zset.counts.shape != x.shape:
        raise ParameterError(f"patch geometry {zset.counts.shape} does not match image {x.shape}")
    if not sigma2 > 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    return formation_from_rows(zset.patches, x, sigma2, beta, zset.counts.astype(np.float64), zset.side)


def hqs_layer(
    state: InferenceState,
    sigma_stack: np.ndarray,
    x: np.ndarray,
    sigma2: float,
    beta: float,
    ridge_scale: float = DEFAULT_RIDGE_SCALE,
    pg: PgnetCache | None = None,
    counts: np.ndarray | None = None,
    scaled_stack: np.ndarray | None = None,
    y_rows: np.ndarray | None = None,
) -> InferenceState:
    """One solver layer: patch inference on the current estimate, then
    image formation against the noisy input. Returns the advanced state with
    this layer's cache appended.

    sigma_stack holds the per-patch potentials; callers that already have
    the beta-weighted stack (or the current estimate's patches) can pass
    them to skip the rescale/re-extract.
    """
    y_img = state.estimate
    scaled = beta * sigma_stack if scaled_stack is None else scaled_stack
    side = int(round(np.sqrt(scaled.shape[-1])))
    if counts is None:
        counts = coverage_counts(x.shape[0], x.shape[1], side).astype(np.float64)
    if y_rows is None:
        y_rows = extract_patches(y_img, side).patches
    ridge_vec = operator_ridge(scaled, ridge_scale) if ridge_scale > 0 else np.zeros(y_rows.shape[0])
    z_rows, op, u = patch_inference_rows(y_rows, scaled, ridge_vec)
    y_next = formation_from_rows(z_rows, x, sigma2, beta, counts, side)
    cache = LayerCache(
        beta=float(beta),
        ridge_scale=float(ridge_scale) if ridge_scale > 0 else 0.0,
        y_rows=y_rows,
        op=op,
        u=u,
        z_rows=z_rows,
        pg=pg,
    )
    return InferenceState(estimate=y_next, layers=state.layers + [cache])


def dgcrf_forward(
    x: np.ndarray,
    sigma2: float,
    banks: PotentialBank | list[PotentialBank],
    schedule: HQSSchedule,
    cascade: bool = True,
    softmax_variant: str = "exp",
    ridge_scale: float = DEFAULT_RIDGE_SCALE,
) -> tuple[np.ndarray, ForwardCache]:
    """Full denoising forward pass.

    With cascade on, the parameter generator reruns on the current estimate
    before every layer, so the potentials track the partially restored
    image; with cascade off it runs once on the input and its potentials are
    reused by every layer. A single bank may be shared by all layers or one
    bank supplied per layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(banks, PotentialBank):
        banks = [banks]
    banks = list(banks)
    if not banks:
        raise ParameterError("at least one potential bank is required")
    betas = schedule.resolve(sigma2)
    n_layers = len(betas)
    if len(banks) not in (1, max(n_layers, 1)):
        raise ParameterError(f"got {len(banks)} banks for {n_layers} layers; need 1 or {n_layers}")
    side = banks[0].side
    if x.shape[0] < side or x.shape[1] < side:
        raise ParameterError(f"image {x.shape} smaller than patch side {side}")
    counts = coverage_counts(x.shape[0], x.shape[1], side).astype(np.float64)

    state = InferenceState(estimate=x)
    sigma_stack = None
    for t in range(n_layers):
        bank_t = banks[0] if len(banks) == 1 else banks[t]
        y_rows = extract_patches(state.estimate, side).patches
        if cascade:
            # generate the beta-weighted operator prior for this layer directly
            scaled, pg = generate_potentials(
                center_rows(y_rows), x.shape, bank_t, sigma2, softmax_variant, scale=betas[t]
            )
        else:
            if t == 0:
                sigma_stack, pg = generate_potentials(
                    center_rows(y_rows), x.shape, bank_t, sigma2, softmax_variant
                )
            else:
                pg = None
            scaled = betas[t] * sigma_stack
        state = hqs_layer(
            state, None, x, sigma2, betas[t], ridge_scale,
            pg=pg, counts=counts, scaled_stack=scaled, y_rows=y_rows,
        )

    cache = ForwardCache(
        x=x,
        sigma2=float(sigma2),
        side=side,
        betas=betas,
        cascade=cascade,
        softmax_variant=softmax_variant,
        ridge_scale=ridge_scale,
        counts=counts,
        layers=state.layers,
        banks=banks,
    )
    return state.estimate, cache


def _prior_ridge_vec(sigma_stack: np.ndarray, ridge) -> np.ndarray:
    n = sigma_stack.shape[0]
    if ridge is None:
        return prior_ridge(sigma_stack)
    return np.broadcast_to(np.asarray(ridge, dtype=np.float64), (n,)).copy()


def _prior_quadratic(rows: np.ndarray, sigma_stack: np.ndarray, ridge_vec: np.ndarray) -> float:
    """sum_p (G r_p)^T (Sigma_p + eps_p I)^{-1} (G r_p) for an (n, m) stack."""
    n, m = rows.shape
    c = sigma_stack.copy()
    idx = np.arange(m)
    c[:, idx, idx] += ridge_vec[:, None]
    chol = cholesky_stack(c, context="pairwise potential")
    g_rows = center_rows(rows)
    w = solve_spd_stack(chol, g_rows)
    return float(np.einsum("nm,nm->", g_rows, w))


def gcrf_energy(
    y: np.ndarray, x: np.ndarray, sigma_stack: np.ndarray, sigma2: float, ridge=None
) -> float:
    """Denoising objective: data fidelity plus patch-prior quadratic.

    (1/sigma^2) sum_pixels (Y - X)^2 + sum_patches (G y_p)^T Sigma_p^{-1} (G y_p),
    with Sigma inverted through a small relative ridge (pass ridge=0 for
    strictly PD potentials). Diagnostic/test use only.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape:
        raise ParameterError(f"image shapes differ: {y.shape} vs {x.shape}")
    side = int(round(np.sqrt(sigma_stack.shape[-1])))
    rows = extract_patches(y, side).patches
    if rows.shape[0] != sigma_stack.shape[0]:
        raise ParameterError("potential stack does not match the image's patch count")
    ridge_vec = _prior_ridge_vec(sigma_stack, ridge)
    data = float(np.sum((y - x) ** 2)) / sigma2
    return data + _prior_quadratic(rows, sigma_stack, ridge_vec)


def hqs_cost(
    y: np.ndarray,
    z_rows: np.ndarray,
    sigma_stack: np.ndarray,
    x: np.ndarray,
    sigma2: float,
    beta: float,
    ridge=None,
) -> float:
    """Split objective J(Y, {z}, beta): data term + coupling + prior on z.

    The prior quadratic acts on the auxiliaries, the beta term couples them
    to the estimate's patches. Diagnostic/test use only.
    """
    y = np.asarray(y, dtype=np.float64)
    side = int(round(np.sqrt(sigma_stack.shape[-1])))
    y_rows = extract_patches(y, side).patches
    z_rows = np.asarray(z_rows, dtype=np.float64)
    if z_rows.shape != y_rows.shape:
        raise ParameterError(f"auxiliary stack {z_rows.shape} does not match patch stack {y_rows.shape}")
    ridge_vec = _prior_ridge_vec(sigma_stack, ridge)
    data = float(np.sum((y - x) ** 2)) / sigma2
    coupling = beta * float(np.sum((y_rows - z_rows) ** 2))
    return data + coupling + _prior_quadratic(z_rows, sigma_stack, ridge_vec)


def _guard_oracle_size(x: np.ndarray) -> None:
    if x.shape[0] > ORACLE_MAX_SIDE or x.shape[1] > ORACLE_MAX_SIDE:
        raise ParameterError(
            f"dense oracle limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} images, got {x.shape}"
        )


def _patch_index_grid(height: int, width: int, side: int) -> np.ndarray:
    """(n, d^2) global pixel indices of each patch's entries."""
    base = np.arange(side)[:, None] * width + np.arange(side)[None, :]
    anchors = (
        np.arange(height - side + 1)[:, None] * width + np.arange(width - side + 1)[None, :]
    ).ravel()
    return anchors[:, None] + base.ravel()[None, :]


def direct_solve_oracle(x: np.ndarray, sigma_stack: np.ndarray, sigma2: float, ridge=None) -> np.ndarray:
    """Exact minimizer of the full denoising objective by one dense solve.

    Assembles (1/sigma^2) I + sum_p S_p^T (G Sigma_p^{-1} G) S_p over all
    pixels and solves it directly; cubic in pixel count, so guarded to tiny
    images. This is the expensive path the layered solver approximates.
    """
    x = np.asarray(x, dtype=np.float64)
    _guard_oracle_size(x)
    height, width = x.shape
    m = sigma_stack.shape[-1]
    side = int(round(np.sqrt(m)))
    ridge_vec = _prior_ridge_vec(sigma_stack, ridge)
    g = mean_projection(side)
    n_pix = height * width
    h = np.eye(n_pix) / sigma2
    idx = _patch_index_grid(height, width, side)
    if idx.shape[0] != sigma_stack.shape[0]:
        raise ParameterError("potential stack does not match the image's patch count")
    for p in range(sigma_stack.shape[0]):
        c = sigma_stack[p] + ridge_vec[p] * np.eye(m)
        mat = g @ spd_solve(c, g, context=f"potential {p}")
        mat = 0.5 * (mat + mat.T)
        h[np.ix_(idx[p], idx[p])] += mat
    y = spd_solve(h, x.ravel() / sigma2, context="full-image system")
    return y.reshape(height, width)


def hqs_joint_minimizer(
    x: np.ndarray, sigma_stack: np.ndarray, sigma2: float, beta: float, ridge=None
) -> tuple[np.ndarray, np.ndarray]:
    """Joint minimizer of the split objective J at a fixed beta, solved densely.

    Eliminates the auxiliaries analytically (for each patch the partial
    minimum over z is a quadratic in the patch), solves the resulting
    full-image system, then recovers the optimal auxiliaries. Same size
    guard as direct_solve_oracle; used to check that the layered solver
    converges to the true joint optimum when beta is held constant.
    """
    x = np.asarray(x, dtype=np.float64)
    _guard_oracle_size(x)
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    height, width = x.shape
    m = sigma_stack.shape[-1]
    side = int(round(np.sqrt(m)))
    ridge_vec = _prior_ridge_vec(sigma_stack, ridge)
    g = mean_projection(side)
    eye = np.eye(m)
    n_pix = height * width
    h = np.eye(n_pix) / sigma2
    idx = _patch_index_grid(height, width, side)
    shrinkers = []
    for p in range(sigma_stack.shape[0]):
        cmat = g @ spd_solve(sigma_stack[p] + ridge_vec[p] * eye, g, context=f"potential {p}")
        cmat = 0.5 * (cmat + cmat.T)
        shrink = beta * np.linalg.solve(cmat + beta * eye, eye)
        shrinkers.append(shrink)
        # partial minimum over z of z^T C z + beta ||y - z||^2 is
        # y^T [beta (I - shrink)] y
        fmat = beta * (eye - shrink)
        fmat = 0.5 * (fmat + fmat.T)
        h[np.ix_(idx[p], idx[p])] += fmat
    y = spd_solve(h, x.ravel() / sigma2, context="full-image system").reshape(height, width)
    y_rows = extract_patches(y, side).patches
    z_rows = np.stack([shrinkers[p] @ y_rows[p] for p in range(y_rows.shape[0])])
    return y, z_rows
