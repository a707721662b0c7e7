"""Discriminative training: PSNR objective, parameter packing, L-BFGS loop.

The learnable parameters are the lower-triangular factor entries and the
biases, flattened into one vector for the optimizer. Sharing flags control
how many parameter copies exist across layers; the packing helpers are the
single source of truth for that layout (model serialization reuses it).

Conventions
-----------
Intensities live in [0, 1]; noise levels are quoted on the 0..255 scale
throughout and converted at the boundary. All randomness descends from the
config seed through tagged derive_seed streams, so identical configs give
identical pairs, identical initialization, and identical logs.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .errors import DataError, NumericError, ParameterError
from .gmm import gmm_init
from .grad import BankGradients, backprop_dgcrf
from .image import PSNR_CAP_DB, add_gaussian_noise, derive_seed, psnr, validate_image
from .inference import DEFAULT_BETA_MULTIPLIERS, DEFAULT_RIDGE_SCALE, HQSSchedule, dgcrf_forward
from .optim import MinimizeResult, lbfgs_minimize
from .patches import center_rows, extract_patches
from .pgnet import SOFTMAX_VARIANTS, PotentialBank

INIT_MODES = ("gmm", "random")

# tags for the per-purpose seed streams derived from config.seed
_STREAM_CROP = 1
_STREAM_NOISE = 2
_STREAM_GMM = 3
_STREAM_RANDOM_INIT = 4
_STREAM_PREFLIGHT = 5
_STREAM_EVAL = 6

# minimum sigma (0..255 scale) substituted for the model's noise variance
# when evaluating at sigma = 0, where 1/sigma^2 would blow up
MIN_MODEL_SIGMA255 = 0.255


@dataclass
class TrainConfig:
    """Hyperparameters for one training run. Defaults are the desk scale."""

    side: int = 5
    n_components: int = 16
    n_layers: int = 4
    beta_multipliers: tuple[float, ...] = DEFAULT_BETA_MULTIPLIERS
    sigma255_list: tuple[float, ...] = (15.0, 25.0)
    cascade: bool = True
    share_bank: bool = True
    share_bias: bool = True
    softmax_variant: str = "exp"
    lbfgs_memory: int = 10
    max_iters: int = 200
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-8
    ftol: float = 1e-11
    seed: int = 0
    crop_size: int = 64
    quantize_noise: bool = True
    threads: int = 1
    init_mode: str = "gmm"
    init_scale: float = 0.05
    em_iters: int = 25
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    preflight: bool = True

    def validate(self) -> None:
        if self.side < 2:
            raise ParameterError(f"side must be >= 2, got {self.side}")
        if self.n_components < 1:
            raise ParameterError(f"n_components must be >= 1, got {self.n_components}")
        if self.n_layers < 1:
            raise ParameterError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_layers > len(self.beta_multipliers):
            raise ParameterError(
                f"n_layers = {self.n_layers} exceeds the {len(self.beta_multipliers)} "
                "available beta multipliers"
            )
        if not self.sigma255_list:
            raise ParameterError("sigma255_list must not be empty")
        if any(s <= 0 for s in self.sigma255_list):
            raise ParameterError(f"training noise levels must be positive, got {self.sigma255_list}")
        if not 0 < self.c1 < self.c2 < 1:
            raise ParameterError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.max_iters < 0:
            raise ParameterError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.lbfgs_memory < 1:
            raise ParameterError(f"lbfgs_memory must be >= 1, got {self.lbfgs_memory}")
        if self.crop_size < self.side:
            raise ParameterError(
                f"crop_size {self.crop_size} is smaller than the patch side {self.side}"
            )
        if self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")
        if self.init_mode not in INIT_MODES:
            raise ParameterError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.softmax_variant not in SOFTMAX_VARIANTS:
            raise ParameterError(
                f"softmax_variant must be one of {SOFTMAX_VARIANTS}, got {self.softmax_variant!r}"
            )
        if self.em_iters < 0:
            raise ParameterError(f"em_iters must be >= 0, got {self.em_iters}")
        if self.ridge_scale < 0:
            raise ParameterError(f"ridge_scale must be >= 0, got {self.ridge_scale}")
        # the default ladder is non-decreasing; a custom one is checked here
        HQSSchedule(self.beta_multipliers[: self.n_layers])

    def schedule(self) -> HQSSchedule:
        return HQSSchedule(self.beta_multipliers[: self.n_layers])

    @property
    def n_factor_banks(self) -> int:
        return 1 if self.share_bank else self.n_layers

    @property
    def n_bias_banks(self) -> int:
        return 1 if self.share_bias else self.n_layers


@dataclass
class TrainingPair:
    """One (clean crop, synthesized noisy crop) training example."""

    clean: np.ndarray
    noisy: np.ndarray
    sigma255: float


@dataclass
class TrainResult:
    banks: list[PotentialBank]
    result: MinimizeResult
    log_lines: list[str] = field(default_factory=list)

    @property
    def log_text(self) -> str:
        return "\n".join(self.log_lines) + "\n"


@dataclass
class EvalRow:
    sigma255: float
    input_psnr: float
    output_psnr: float


def psnr_loss(yhat: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Negative PSNR (peak 1) and its gradient w.r.t. the estimate.

    Returns (loss, dYhat, degenerate). A zero MSE cannot be differentiated
    (and means the pair carries no signal), so the loss caps at the PSNR
    ceiling with a zero gradient and the degenerate flag set.
    """
    yhat = np.asarray(yhat, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if yhat.shape != target.shape:
        raise ParameterError(f"image shapes differ: {yhat.shape} vs {target.shape}")
    diff = yhat - target
    sq = float(np.sum(diff * diff))
    if sq == 0.0:
        return -PSNR_CAP_DB, np.zeros_like(yhat), True
    mse = sq / diff.size
    loss = 10.0 * np.log10(mse)
    dyhat = (20.0 / np.log(10.0)) * diff / sq
    return float(loss), dyhat, False


def random_init(n_components: int, side: int, seed: int, scale: float = 0.05) -> PotentialBank:
    """Bank with factors scale*(random lower-triangular) + I and zero biases."""
    if scale < 0:
        raise ParameterError(f"scale must be >= 0, got {scale}")
    m = side * side
    rng = np.random.Generator(np.random.PCG64(seed))
    eye = np.eye(m)
    factors_w = scale * np.tril(rng.standard_normal((n_components, m, m))) + eye
    factors_psi = scale * np.tril(rng.standard_normal((n_components, m, m))) + eye
    return PotentialBank(
        side=side,
        factors_w=factors_w,
        factors_psi=factors_psi,
        biases=np.zeros(n_components),
    )


# ---------------------------------------------------------------------------
# parameter vector layout


def n_parameters(config: TrainConfig) -> int:
    m = config.side * config.side
    tril = m * (m + 1) // 2
    kk = config.n_components
    return (config.n_factor_banks * 2) * kk * tril + config.n_bias_banks * kk


def pack_parameters(banks: list[PotentialBank], config: TrainConfig) -> np.ndarray:
    """Flatten bank parameters: W factors, then Psi factors, then biases.

    Factor blocks appear once when share_bank is set (the layer-0 arrays),
    else once per layer; bias blocks follow the same rule with share_bias.
    Only lower-triangle entries are stored.
    """
    m = config.side * config.side
    rows, cols = np.tril_indices(m)
    fbanks = banks[:1] if config.share_bank else banks
    bbanks = banks[:1] if config.share_bias else banks
    if not config.share_bank and len(banks) != config.n_layers:
        raise ParameterError(f"expected {config.n_layers} banks without share_bank, got {len(banks)}")
    parts = [b.factors_w[:, rows, cols].ravel() for b in fbanks]
    parts += [b.factors_psi[:, rows, cols].ravel() for b in fbanks]
    parts += [b.biases for b in bbanks]
    return np.concatenate(parts)


def unpack_parameters(theta: np.ndarray, config: TrainConfig) -> list[PotentialBank]:
    """Rebuild the per-layer bank list from a flat parameter vector.

    Returns a single bank when both sharing flags are set (every layer then
    uses the same object), otherwise one bank per layer; shared blocks alias
    the same underlying arrays.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (n_parameters(config),):
        raise ParameterError(
            f"parameter vector has {theta.size} entries, expected {n_parameters(config)}"
        )
    m = config.side * config.side
    kk = config.n_components
    rows, cols = np.tril_indices(m)
    tril = rows.size
    nw, nb = config.n_factor_banks, config.n_bias_banks

    def take_factors(offset: int) -> tuple[np.ndarray, int]:
        stack = np.zeros((kk, m, m), dtype=np.float64)
        flat = theta[offset : offset + kk * tril].reshape(kk, tril)
        stack[:, rows, cols] = flat
        return stack, offset + kk * tril

    pos = 0
    factors_w, factors_psi, biases = [], [], []
    for _ in range(nw):
        stack, pos = take_factors(pos)
        factors_w.append(stack)
    for _ in range(nw):
        stack, pos = take_factors(pos)
        factors_psi.append(stack)
    for _ in range(nb):
        biases.append(theta[pos : pos + kk].copy())
        pos += kk

    if nw == 1 and nb == 1:
        return [
            PotentialBank(
                side=config.side,
                factors_w=factors_w[0],
                factors_psi=factors_psi[0],
                biases=biases[0],
            )
        ]
    return [
        PotentialBank(
            side=config.side,
            factors_w=factors_w[0 if nw == 1 else t],
            factors_psi=factors_psi[0 if nw == 1 else t],
            biases=biases[0 if nb == 1 else t],
        )
        for t in range(config.n_layers)
    ]


def gradients_to_vector(grads: BankGradients, config: TrainConfig) -> np.ndarray:
    """Reduce per-bank gradients to the packed layout (summing shared blocks)."""
    m = config.side * config.side
    rows, cols = np.tril_indices(m)
    d_fw, d_fp, d_b = grads.d_factors_w, grads.d_factors_psi, grads.d_biases
    if config.share_bank and d_fw.shape[0] > 1:
        d_fw = d_fw.sum(axis=0, keepdims=True)
        d_fp = d_fp.sum(axis=0, keepdims=True)
    if config.share_bias and d_b.shape[0] > 1:
        d_b = d_b.sum(axis=0, keepdims=True)
    parts = [d_fw[i][:, rows, cols].ravel() for i in range(d_fw.shape[0])]
    parts += [d_fp[i][:, rows, cols].ravel() for i in range(d_fp.shape[0])]
    parts += [d_b[i] for i in range(d_b.shape[0])]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# training pairs and the full-batch objective


def build_training_pairs(images: list[np.ndarray], config: TrainConfig) -> list[TrainingPair]:
    """Deterministic pairs: seeded crop per image, sigma cycling, seeded noise."""
    pairs = []
    c = config.crop_size
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        validate_image(img, name=f"training image {i}")
        if img.shape[0] < c or img.shape[1] < c:
            raise DataError(
                f"training image {i} is {img.shape[0]}x{img.shape[1]}, smaller than crop_size {c}"
            )
        sigma = float(config.sigma255_list[i % len(config.sigma255_list)])
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, _STREAM_CROP, i)))
        r0 = int(rng.integers(0, img.shape[0] - c + 1))
        c0 = int(rng.integers(0, img.shape[1] - c + 1))
        clean = img[r0 : r0 + c, c0 : c0 + c].copy()
        noisy = add_gaussian_noise(
            clean, sigma, derive_seed(config.seed, _STREAM_NOISE, i), quantize=config.quantize_noise
        )
        pairs.append(TrainingPair(clean=clean, noisy=noisy, sigma255=sigma))
    return pairs


def _pair_loss_grad(
    pair: TrainingPair, theta: np.ndarray, config: TrainConfig
) -> tuple[float, np.ndarray]:
    """Loss and packed gradient of one pair (module-level for the process pool)."""
    banks = unpack_parameters(theta, config)
    sigma2 = (pair.sigma255 / 255.0) ** 2
    yhat, cache = dgcrf_forward(
        pair.noisy,
        sigma2,
        banks,
        config.schedule(),
        cascade=config.cascade,
        softmax_variant=config.softmax_variant,
        ridge_scale=config.ridge_scale,
    )
    loss, dyhat, _ = psnr_loss(yhat, pair.clean)
    grads = backprop_dgcrf(dyhat, cache, banks)
    return loss, gradients_to_vector(grads, config)


def make_objective(pairs: list[TrainingPair], config: TrainConfig, pool=None):
    """Full-batch mean-loss objective: theta -> (value, gradient).

    With a process pool the per-pair terms are computed in parallel but
    reduced in pair order, so the result is bit-identical to the serial
    path. Non-finite per-pair losses abort with the pair identified.
    """

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        if pool is None:
            results = [_pair_loss_grad(p, theta, config) for p in pairs]
        else:
            results = list(pool.map(partial(_pair_loss_grad, theta=theta, config=config), pairs))
        total_loss = 0.0
        total_grad = np.zeros(n_parameters(config))
        for i, (loss_i, grad_i) in enumerate(results):
            if not np.isfinite(loss_i) or not np.all(np.isfinite(grad_i)):
                raise NumericError(
                    f"non-finite loss or gradient on training pair {i} "
                    f"(sigma255={pairs[i].sigma255})"
                )
            total_loss += loss_i
            total_grad += grad_i
        n = len(pairs)
        return total_loss / n, total_grad / n

    return objective


def preflight_gradient_check(
    objective,
    theta0: np.ndarray,
    seed: int,
    n_directions: int = 2,
    epsilon: float = 1e-5,
    tol: float = 1e-4,
) -> list[tuple[float, float, float]]:
    """Directional finite-difference check of the objective gradient.

    Probes seeded random unit directions; each directional derivative must
    match central differences to the given relative tolerance, else the
    training run is aborted before any optimizer step.
    """
    _, g0 = objective(theta0)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, _STREAM_PREFLIGHT)))
    reports = []
    for j in range(n_directions):
        v = rng.standard_normal(theta0.size)
        v /= np.linalg.norm(v)
        f_plus = objective(theta0 + epsilon * v)[0]
        f_minus = objective(theta0 - epsilon * v)[0]
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(np.dot(g0, v))
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        reports.append((analytic, numeric, rel))
        if rel > tol:
            raise NumericError(
                f"gradient preflight failed on direction {j}: analytic {analytic:.6e} "
                f"vs finite-difference {numeric:.6e} (relative error {rel:.3e} > {tol})"
            )
    return reports


def init_banks(images: list[np.ndarray], config: TrainConfig) -> list[PotentialBank]:
    """Initial bank per config.init_mode (one bank; layers share it at init)."""
    if config.init_mode == "random":
        bank = random_init(
            config.n_components,
            config.side,
            derive_seed(config.seed, _STREAM_RANDOM_INIT),
            config.init_scale,
        )
    else:
        corpus = np.concatenate(
            [center_rows(extract_patches(img, config.side).patches) for img in images]
        )
        sigma0 = float(np.mean(config.sigma255_list)) / 255.0
        bank = gmm_init(
            corpus,
            config.n_components,
            config.side,
            sigma0,
            n_iters=config.em_iters,
            seed=derive_seed(config.seed, _STREAM_GMM),
        )
    return [bank]


def _spread_init(banks: list[PotentialBank], config: TrainConfig) -> list[PotentialBank]:
    """Replicate a single init bank across layers when parameters are unshared."""
    if config.share_bank and config.share_bias:
        return banks[:1] if len(banks) == 1 else banks
    if len(banks) == config.n_layers:
        return banks
    if len(banks) != 1:
        raise ParameterError(f"need 1 or {config.n_layers} init banks, got {len(banks)}")
    b = banks[0]
    return [
        PotentialBank(
            side=b.side,
            factors_w=b.factors_w if config.share_bank else b.factors_w.copy(),
            factors_psi=b.factors_psi if config.share_bank else b.factors_psi.copy(),
            biases=b.biases if config.share_bias else b.biases.copy(),
        )
        for _ in range(config.n_layers)
    ]


def train(
    images: list[np.ndarray],
    config: TrainConfig,
    start_banks: list[PotentialBank] | None = None,
    log_fn=None,
) -> TrainResult:
    """Fit the bank(s) by maximizing mean PSNR over synthesized pairs.

    Builds the deterministic pair set, initializes (GMM on the clean crops
    by default), verifies the end-to-end gradient against finite
    differences, then runs L-BFGS. Returns the trained banks with a
    line-oriented log (iter, loss, mean PSNR, gradient norm, wall time);
    log_fn, when given, additionally receives each line as it is produced.
    """
    config.validate()
    if not images:
        raise DataError("no training images given")
    pairs = build_training_pairs(images, config)
    if start_banks is None:
        start_banks = init_banks([p.clean for p in pairs], config)
    banks0 = _spread_init(list(start_banks), config)
    theta0 = pack_parameters(banks0, config)

    pool = None
    log_lines: list[str] = []
    t_start = time.perf_counter()

    def emit(line: str) -> None:
        log_lines.append(line)
        if log_fn is not None:
            log_fn(line)

    try:
        if config.threads > 1:
            pool = ProcessPoolExecutor(max_workers=config.threads)
        objective = make_objective(pairs, config, pool=pool)
        if config.preflight:
            reports = preflight_gradient_check(objective, theta0, config.seed)
            worst = max(r[2] for r in reports)
            emit(f"# gradient preflight: {len(reports)} directions, worst rel err {worst:.3e}")

        def log_iteration(iteration: int, value: float, grad_norm: float) -> None:
            emit(
                f"iter {iteration:4d}  loss {value:+.6f}  psnr {-value:.4f}  "
                f"grad {grad_norm:.6e}  time {time.perf_counter() - t_start:.1f}s"
            )

        # the optimizer's callback only sees iterations >= 1; its very first
        # evaluation is the initial point, logged here as iteration 0
        seen_first = False

        def logged_objective(theta):
            nonlocal seen_first
            value, grad = objective(theta)
            if not seen_first:
                seen_first = True
                log_iteration(0, value, float(np.max(np.abs(grad))))
            return value, grad

        result = lbfgs_minimize(
            logged_objective,
            theta0,
            memory=config.lbfgs_memory,
            max_iters=config.max_iters,
            c1=config.c1,
            c2=config.c2,
            gtol=config.gtol,
            ftol=config.ftol,
            callback=lambda rec: log_iteration(rec.iteration, rec.value, rec.grad_norm),
        )
    finally:
        if pool is not None:
            pool.shutdown()

    emit(f"# {result.message}")
    banks = unpack_parameters(result.params, config)
    return TrainResult(banks=banks, result=result, log_lines=log_lines)


def _eval_one(
    task: tuple[int, int], banks: list[PotentialBank], images, sigma255_list, config: TrainConfig, seed: int
) -> tuple[float, float]:
    si, ii = task
    sigma = float(sigma255_list[si])
    img = np.asarray(images[ii], dtype=np.float64)
    if sigma == 0.0:
        noisy = img
    else:
        noisy = add_gaussian_noise(
            img, sigma, derive_seed(seed, _STREAM_EVAL, si, ii), quantize=config.quantize_noise
        )
    sigma_eff = max(sigma, MIN_MODEL_SIGMA255) / 255.0
    yhat, _ = dgcrf_forward(
        noisy,
        sigma_eff * sigma_eff,
        banks,
        config.schedule(),
        cascade=config.cascade,
        softmax_variant=config.softmax_variant,
        ridge_scale=config.ridge_scale,
    )
    return psnr(noisy, img), psnr(np.clip(yhat, 0.0, 1.0), img)


def evaluate(
    banks: list[PotentialBank],
    images: list[np.ndarray],
    sigma255_list,
    config: TrainConfig,
    seed: int | None = None,
) -> list[EvalRow]:
    """Mean input/output PSNR per noise level over seeded noisy versions.

    Input PSNR is measured on the synthesized noisy image, output PSNR on
    the denoised estimate clipped to [0, 1]. sigma255 = 0 rows evaluate the
    model at a floor noise level (the forward pass needs sigma > 0) while
    the capped input PSNR marks the noiseless row.
    """
    if not images:
        raise DataError("no evaluation images given")
    if seed is None:
        seed = config.seed
    tasks = [(si, ii) for si in range(len(sigma255_list)) for ii in range(len(images))]
    fn = partial(
        _eval_one, banks=banks, images=images, sigma255_list=tuple(sigma255_list), config=config, seed=seed
    )
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(fn, tasks))
    else:
        results = [fn(t) for t in tasks]
    rows = []
    n = len(images)
    for si, sigma in enumerate(sigma255_list):
        chunk = results[si * n : (si + 1) * n]
        rows.append(
            EvalRow(
                sigma255=float(sigma),
                input_psnr=float(np.mean([c[0] for c in chunk])),
                output_psnr=float(np.mean([c[1] for c in chunk])),
            )
        )
    return rows
