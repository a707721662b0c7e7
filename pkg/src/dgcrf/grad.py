"""Exact reverse-mode derivatives for the unrolled solver.

Every forward layer is a composition of small linear solves and projections,
so its adjoint is assembled from the same cached Cholesky factors; no
autodiff framework is involved. The finite-difference harness at the bottom
is the arbiter: every formula here is validated against central differences
in the test suite and by the gradcheck command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ParameterError
from .inference import ForwardCache
from .linalg import cholesky_stack, solve_operator_stack, solve_spd_stack
from .patches import accumulate_patches, center_rows, gather_pixels, mean_projection
from .pgnet import PgnetCache, PotentialBank


@dataclass
class BankGradients:
    """Gradients of a scalar loss with respect to every learnable block.

    d_w / d_psi are the symmetric gradients on the reconstructed matrices;
    d_factors_w / d_factors_psi are the lower-triangular gradients on the
    Cholesky factors actually optimized. Leading axis indexes banks (one
    entry when a single bank is shared by all layers).
    """

    d_w: np.ndarray            # (nb, K, m, m)
    d_psi: np.ndarray          # (nb, K, m, m)
    d_biases: np.ndarray       # (nb, K)
    d_factors_w: np.ndarray    # (nb, K, m, m), lower-triangular
    d_factors_psi: np.ndarray  # (nb, K, m, m), lower-triangular
    dx: np.ndarray             # gradient w.r.t. the noisy input image


def backprop_combination(
    dsigma: np.ndarray, gamma: np.ndarray, bank: PotentialBank
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the convex combination Sigma_p = sum_k gamma_pk Psi_k.

    dGamma_pk = <Psi_k, dSigma_p>; dPsi_k = sum_p gamma_pk dSigma_p, the sum
    taken in patch order.
    """
    n, m = dsigma.shape[0], dsigma.shape[-1]
    psi = bank.matrices_psi()
    kk = psi.shape[0]
    flat = dsigma.reshape(n, m * m)
    dgamma = flat @ psi.reshape(kk, m * m).T
    dpsi = (gamma.T @ flat).reshape(kk, m, m)
    return dgamma, dpsi


def softmax_jacobian_rows(dgamma: np.ndarray, gamma: np.ndarray, scores: np.ndarray, variant: str) -> np.ndarray:
    """Pull a weight gradient back through the normalization to the scores."""
    if variant == "exp":
        inner = np.sum(gamma * dgamma, axis=1, keepdims=True)
        return gamma * (dgamma - inner)
    if variant == "linear":
        totals = scores.sum(axis=1, keepdims=True)
        inner = np.sum(gamma * dgamma, axis=1, keepdims=True)
        return (dgamma - inner) / totals
    raise ParameterError(f"unknown softmax variant {variant!r}")


def backprop_patch_inference(
    dz: np.ndarray, y: np.ndarray, sigma: np.ndarray, beta: float, ridge: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of one patch-inference solve (single patch, test-friendly).

    dy is the same symmetric operator applied to dz; dSigma is the
    symmetrized outer product of the operator's solves against G dz and G y,
    scaled by beta. Uses the identical ridge-shifted operator as the forward
    pass (pass the same ridge).
    """
    dz = np.asarray(dz, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    m = y.shape[0]
    side = int(round(np.sqrt(m)))
    a = (beta * np.asarray(sigma, dtype=np.float64) + mean_projection(side) + ridge * np.eye(m))[None]
    chol = cholesky_stack(a, context="patch inference operator")
    u = solve_spd_stack(chol, (y - y.mean())[None])[0]
    v = solve_spd_stack(chol, (dz - dz.mean())[None])[0]
    dy = dz - (v - v.mean())
    outer = beta * np.outer(v, u)
    return dy, 0.5 * (outer + outer.T)


def backprop_patch_inference_rows(
    dz_rows: np.ndarray, op: np.ndarray, u: np.ndarray, beta: float, ridge_scale: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked patch-inference adjoint reusing the forward operator stack.

    When the forward pass shifted each operator by the trace-coupled ridge
    eps_p = ridge_scale*(tr(beta Sigma_p) + m - 1)/m, that shift also moves
    with Sigma_p; its adjoint dL/deps_p = v_p^T u_p lands on the diagonal of
    dSigma_p scaled by ridge_scale*beta/m. Pass the same ridge_scale as the
    forward pass (0 when the ridge was disabled).
    """
    v = solve_operator_stack(op, center_rows(dz_rows), context="patch inference adjoint")
    dy_rows = dz_rows - (v - v.mean(axis=1, keepdims=True))
    outer = np.matmul(v[:, :, None], u[:, None, :])
    dsigma = outer + outer.transpose(0, 2, 1)
    dsigma *= 0.5 * beta
    if ridge_scale > 0:
        m = u.shape[1]
        dots = np.einsum("nm,nm->n", v, u)
        idx = np.arange(m)
        dsigma[:, idx, idx] += (ridge_scale * beta / m) * dots[:, None]
    return dy_rows, dsigma


def backprop_patch_and_combination(
    dz_rows: np.ndarray,
    op: np.ndarray,
    u: np.ndarray,
    beta: float,
    gamma: np.ndarray,
    bank: PotentialBank,
    ridge_scale: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fused adjoint of patch inference and the potential combination.

    Contracts the rank-two dSigma_p = 0.5 beta (v u^T + u v^T) against the
    bank directly instead of materializing the (n, m, m) stack:
    dGamma_pk = beta v_p^T Psi_k u_p (Psi_k is symmetric) and
    dPsi_k = 0.5 beta sym(sum_p gamma_pk v_p u_p^T). The trace-coupled
    operator ridge also moves with Sigma_p; its adjoint v_p^T u_p adds
    ridge_scale*beta/m times tr(Psi_k) to dGamma_pk and a matching diagonal
    to dPsi_k. Equal to backprop_patch_inference_rows followed by
    backprop_combination; used on layers that own their potentials, where
    nothing else consumes dSigma.
    """
    v = solve_operator_stack(op, center_rows(dz_rows), context="patch inference adjoint")
    dy_rows = dz_rows - (v - v.mean(axis=1, keepdims=True))
    psi = bank.matrices_psi()
    pu = np.matmul(psi, u.T[None])                      # (K, m, n)
    dgamma = beta * np.einsum("nm,kmn->nk", v, pu)
    vg = v.T[None] * gamma.T[:, None, :]                # (K, m, n)
    s = np.matmul(vg, u)
    dpsi = 0.5 * beta * (s + s.transpose(0, 2, 1))
    if ridge_scale > 0:
        m = u.shape[1]
        coeff = ridge_scale * beta / m
        dots = np.einsum("nm,nm->n", v, u)
        dgamma += coeff * dots[:, None] * np.trace(psi, axis1=1, axis2=2)[None, :]
        idx = np.arange(m)
        dpsi[:, idx, idx] += coeff * (gamma.T @ dots)[:, None]
    return dy_rows, dgamma, dpsi


def backprop_selection(
    dgamma: np.ndarray, pg: PgnetCache, bank: PotentialBank, sigma2: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of the scoring/softmax stage.

    Applies the softmax Jacobian to reach score space, then accumulates
    dW_k = 0.5 sum_p ds_pk t_p t_p^T with t_p = (W_k + sigma^2 I)^{-1} xbar_p
    (the sandwich identity, reusing the cached solves), db_k = sum_p ds_pk,
    and dxbar_p = -sum_k ds_pk t_p.
    """
    ds = softmax_jacobian_rows(dgamma, pg.gamma, pg.scores, pg.softmax_variant)
    weighted = pg.solves * ds.T[:, None, :]              # (K, m, n)
    half = np.matmul(weighted, pg.solves.transpose(0, 2, 1))
    d_w = 0.25 * (half + half.transpose(0, 2, 1))
    dxbar = -weighted.sum(axis=0).T
    d_biases = ds.sum(axis=0)
    return d_w, d_biases, dxbar


def backprop_image_formation(
    dy_img: np.ndarray, sigma2: float, beta: float, counts: np.ndarray, side: int
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the pixel-wise formation blend.

    Splits an image-space gradient into the auxiliary-patch share (gathered
    back onto patches) and the noisy-input share.
    """
    denom = 1.0 / sigma2 + beta * counts
    dz_rows = gather_pixels(beta * dy_img / denom, side)
    dx = dy_img / (sigma2 * denom)
    return dz_rows, dx


def _check_banks_match(cache: ForwardCache, banks: list[PotentialBank]) -> None:
    if len(banks) != len(cache.banks):
        raise ContractError(f"cache was built with {len(cache.banks)} banks, got {len(banks)}")
    for i, (a, b) in enumerate(zip(banks, cache.banks)):
        same = (
            a.side == b.side
            and a.n_components == b.n_components
            and np.array_equal(a.factors_w, b.factors_w)
            and np.array_equal(a.factors_psi, b.factors_psi)
            and np.array_equal(a.biases, b.biases)
        )
        if not same:
            raise ContractError(f"bank {i} does not match the one used in the forward pass")


def backprop_dgcrf(
    dyhat: np.ndarray, cache: ForwardCache, banks: PotentialBank | list[PotentialBank]
) -> BankGradients:
    """Chain every layer adjoint in reverse through the forward cache.

    Gradient flow per layer: image formation splits into auxiliary and input
    shares; patch inference turns the auxiliary share into estimate patches
    plus a potential gradient; the potential gradient walks back through the
    generator into its parameters and (cascade) into the very image estimate
    the generator read. Shared parameters accumulate across layers; the
    Cholesky chain rule maps matrix gradients onto the factors at the end.
    """
    if isinstance(banks, PotentialBank):
        banks = [banks]
    banks = list(banks)
    _check_banks_match(cache, banks)
    nb = len(banks)
    side = cache.side
    m = side * side
    kk = banks[0].n_components
    height, width = cache.x.shape
    sigma2 = cache.sigma2

    d_w = np.zeros((nb, kk, m, m), dtype=np.float64)
    d_psi = np.zeros((nb, kk, m, m), dtype=np.float64)
    d_biases = np.zeros((nb, kk), dtype=np.float64)
    dx = np.zeros((height, width), dtype=np.float64)

    dy_img = np.asarray(dyhat, dtype=np.float64).copy()
    pending_dsigma = None
    for t in range(len(cache.layers) - 1, -1, -1):
        layer = cache.layers[t]
        ib = 0 if nb == 1 else t
        bank_t = banks[ib]

        dz_rows, dx_share = backprop_image_formation(dy_img, sigma2, layer.beta, cache.counts, side)
        dx += dx_share
        if layer.pg is not None and pending_dsigma is None:
            # this layer owns its potentials: contract dSigma on the fly
            dy_rows, dgamma, dpsi_k = backprop_patch_and_combination(
                dz_rows, layer.op, layer.u, layer.beta, layer.pg.gamma, bank_t, layer.ridge_scale
            )
            dy_img = accumulate_patches(dy_rows, height, width, side)
        else:
            dy_rows, dsigma = backprop_patch_inference_rows(
                dz_rows, layer.op, layer.u, layer.beta, layer.ridge_scale
            )
            dy_img = accumulate_patches(dy_rows, height, width, side)
            if layer.pg is None:
                # potentials were generated by an earlier layer; defer
                pending_dsigma = dsigma if pending_dsigma is None else pending_dsigma + dsigma
                continue
            dsigma = dsigma + pending_dsigma
            pending_dsigma = None
            dgamma, dpsi_k = backprop_combination(dsigma, layer.pg.gamma, bank_t)
        dw_k, db_k, dxbar = backprop_selection(dgamma, layer.pg, bank_t, sigma2)
        d_psi[ib] += dpsi_k
        d_w[ib] += dw_k
        d_biases[ib] += db_k
        dy_img += accumulate_patches(center_rows(dxbar), height, width, side)

    if pending_dsigma is not None:
        raise ContractError("forward cache has layers without any potential generator")
    dx += dy_img

    d_factors_w = np.tril((d_w + d_w.transpose(0, 1, 3, 2)) @ np.stack([b.factors_w for b in banks]))
    d_factors_psi = np.tril((d_psi + d_psi.transpose(0, 1, 3, 2)) @ np.stack([b.factors_psi for b in banks]))
    return BankGradients(
        d_w=d_w,
        d_psi=d_psi,
        d_biases=d_biases,
        d_factors_w=d_factors_w,
        d_factors_psi=d_factors_psi,
        dx=dx,
    )


@dataclass
class BlockReport:
    """Finite-difference comparison result for one parameter block."""

    block: str
    analytic_norm: float
    numeric_norm: float
    max_rel_err: float
    epsilon: float

    def passes(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def finite_diff_check(
    objective,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    epsilons=(1e-5,),
    rel_floor: float = 1e-8,
    normalize: str = "element",
) -> dict[str, BlockReport]:
    """Compare analytic gradients against central finite differences.

    objective maps a {block name: array} dict to a scalar. Each element of
    each block is perturbed by +/-eps. With normalize="element" the relative
    error denominator is max(|analytic|, |numeric|, rel_floor) per element;
    with normalize="block" every deviation in a block is measured against
    the block's own scale, max(inf-norm analytic, inf-norm numeric,
    rel_floor). Element mode is the sharper check when all entries carry
    comparable magnitude; block mode is the honest one when entries span
    many orders, where the probe's absolute accuracy cannot support a
    relative claim about the smallest entries. When several epsilons are
    given, each block keeps its best sweep (smallest max relative error),
    which guards against step-size artifacts on either end.
    """
    if np.isscalar(epsilons):
        epsilons = (float(epsilons),)
    if any(e <= 0 for e in epsilons):
        raise ParameterError(f"epsilons must be positive, got {epsilons}")
    if normalize not in ("element", "block"):
        raise ParameterError(f"normalize must be 'element' or 'block', got {normalize!r}")
    reports: dict[str, BlockReport] = {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        ana = np.asarray(analytic[name], dtype=np.float64).ravel()
        best: BlockReport | None = None
        for eps in epsilons:
            numeric = np.zeros(theta.size, dtype=np.float64)
            work = {k: (v.copy() if k == name else v) for k, v in params.items()}
            flat = work[name].reshape(-1)
            for i in range(theta.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = objective(work)
                flat[i] = orig - eps
                f_minus = objective(work)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(f"objective returned a non-finite value probing block {name!r}")
                numeric[i] = (f_plus - f_minus) / (2.0 * eps)
            if normalize == "element":
                denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), rel_floor)
            else:
                scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(numeric), initial=0.0))
                denom = max(scale, rel_floor)
            max_rel = float(np.max(np.abs(ana - numeric) / denom)) if theta.size else 0.0
            report = BlockReport(
                block=name,
                analytic_norm=float(np.linalg.norm(ana)),
                numeric_norm=float(np.linalg.norm(numeric)),
                max_rel_err=max_rel,
                epsilon=eps,
            )
            if best is None or report.max_rel_err < best.max_rel_err:
                best = report
        reports[name] = best
    return reports


def format_gradcheck_report(reports: dict[str, BlockReport], tol: float) -> str:
    """Plain-text table: block, analytic norm, numeric norm, max rel err, verdict."""
    lines = [f"{'block':<12} {'analytic_norm':>14} {'numeric_norm':>14} {'max_rel_err':>12}  result"]
    for name in reports:
        r = reports[name]
        verdict = "pass" if r.passes(tol) else "FAIL"
        lines.append(
            f"{name:<12} {r.analytic_norm:>14.6e} {r.numeric_norm:>14.6e} {r.max_rel_err:>12.3e}  {verdict}"
        )
    return "\n".join(lines)
