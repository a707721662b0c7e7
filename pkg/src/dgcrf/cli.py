"""Command-line entry points: train, denoise, eval, gradcheck, init, noise.

Exit codes: 0 success, 2 configuration problem, 3 data problem (files,
images, models, corpora), 4 numeric failure, 5 gradient check failure.
All commands are deterministic given their --seed, so reruns are
byte-identical; --threads only caps worker processes and never changes
results.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DgcrfError,
    NumericError,
    ParameterError,
)
from .gmm import gmm_init
from .grad import backprop_dgcrf, finite_diff_check, format_gradcheck_report
from .image import add_gaussian_noise, derive_seed, load_image, psnr, quantize_to_grid, save_image
from .inference import DEFAULT_BETA_MULTIPLIERS, dgcrf_forward
from .model_io import ModelMeta, load_model, save_model
from .patches import center_rows, extract_patches
from .pgnet import PotentialBank
from .train import (
    TrainConfig,
    evaluate,
    psnr_loss,
    random_init,
    train,
)

GRADCHECK_TOL = 1e-4
GRADCHECK_IMAGE_SIZE = 12
GRADCHECK_SIGMA255 = 25.0
GRADCHECK_MAX = {"d": 4, "K": 8, "T": 3}
GRADCHECK_EPS_SWEEP = (1e-5, 1e-4, 1e-3)
GRADCHECK_INIT_SCALE = 0.4


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


# config-file key -> (TrainConfig field or path slot, value parser)
CONFIG_KEYS = {
    "d": ("side", int),
    "K": ("n_components", int),
    "T": ("n_layers", int),
    "betaMultipliers": ("beta_multipliers", _parse_float_list),
    "sigma255List": ("sigma255_list", _parse_float_list),
    "cascade": ("cascade", _parse_bool),
    "shareBank": ("share_bank", _parse_bool),
    "shareBias": ("share_bias", _parse_bool),
    "softmaxVariant": ("softmax_variant", str),
    "lbfgsMemory": ("lbfgs_memory", int),
    "maxIters": ("max_iters", int),
    "c1": ("c1", float),
    "c2": ("c2", float),
    "gtol": ("gtol", float),
    "ftol": ("ftol", float),
    "seed": ("seed", int),
    "cropSize": ("crop_size", int),
    "quantizeNoise": ("quantize_noise", _parse_bool),
    "threads": ("threads", int),
    "initMode": ("init_mode", str),
    "initScale": ("init_scale", float),
    "emIters": ("em_iters", int),
    "ridgeScale": ("ridge_scale", float),
    "preflight": ("preflight", _parse_bool),
    "trainDir": ("train_dir", str),
    "modelOut": ("model_out", str),
    "initModel": ("init_model", str),
}

def read_config_file(path: str) -> dict[str, str]:
    """Parse a key = value file with '#' comments into a raw string dict."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    return raw


def _typed_settings(raw: dict[str, str]) -> dict[str, object]:
    settings: dict[str, object] = {}
    for key, text in raw.items():
        dest, convert = CONFIG_KEYS[key]
        try:
            settings[dest] = convert(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for key {key!r}: {exc}") from exc
    return settings


def _require_parent_dir(path: str, what: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"directory for {what} does not exist: {parent}")


def load_image_dir(path: str) -> tuple[list[np.ndarray], list[str]]:
    """All .pgm/.png images under `path`, in sorted filename order."""
    if not os.path.isdir(path):
        raise DataError(f"not a directory: {path}")
    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".pgm", ".png")))
    if not names:
        raise DataError(f"no .pgm or .png images in {path}")
    return [load_image(os.path.join(path, n)) for n in names], names


def _config_from_meta(meta: ModelMeta, threads: int = 1, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        side=meta.side,
        n_components=meta.n_components,
        n_layers=meta.n_layers,
        beta_multipliers=tuple(meta.beta_multipliers),
        cascade=meta.cascade,
        share_bank=meta.share_bank,
        share_bias=meta.share_bias,
        softmax_variant=meta.softmax_variant,
        threads=threads,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    raw = read_config_file(args.config) if args.config else {}
    settings = _typed_settings(raw)
    flag_overrides = {
        "train_dir": args.train_dir,
        "model_out": args.out,
        "init_model": args.init_model,
        "side": args.d,
        "n_components": args.K,
        "n_layers": args.T,
        "sigma255_list": tuple(args.sigmas) if args.sigmas else None,
        "max_iters": args.max_iters,
        "seed": args.seed,
        "threads": args.threads,
        "crop_size": args.crop_size,
        "init_mode": args.init_mode,
        "cascade": args.cascade,
    }
    for dest, value in flag_overrides.items():
        if value is not None:
            settings[dest] = value

    train_dir = settings.pop("train_dir", None)
    model_out = settings.pop("model_out", None)
    init_model = settings.pop("init_model", None)
    if train_dir is None:
        raise ConfigError("missing required key trainDir (flag --train-dir)")
    if model_out is None:
        raise ConfigError("missing required key modelOut (flag --out)")
    if not os.path.isdir(train_dir):
        raise DataError(f"training directory not found: {train_dir}")
    _require_parent_dir(model_out, "the output model")

    config = TrainConfig(**settings)
    config.validate()

    start_banks = None
    if init_model is not None:
        start_banks, init_meta = load_model(init_model)
        if init_meta.side != config.side or init_meta.n_components != config.n_components:
            raise ConfigError(
                f"init model is d={init_meta.side}, K={init_meta.n_components}; "
                f"config wants d={config.side}, K={config.n_components}"
            )

    images, _ = load_image_dir(train_dir)
    result = train(images, config, start_banks=start_banks, log_fn=print)
    meta = ModelMeta(
        side=config.side,
        n_components=config.n_components,
        n_layers=config.n_layers,
        share_bank=config.share_bank,
        share_bias=config.share_bias,
        cascade=config.cascade,
        softmax_variant=config.softmax_variant,
        beta_multipliers=tuple(config.beta_multipliers[: config.n_layers]),
    )
    save_model(model_out, result.banks, meta)
    print(f"model written to {model_out}")
    return 0


def _denoise_image(noisy: np.ndarray, sigma255: float, banks, meta: ModelMeta) -> np.ndarray:
    config = _config_from_meta(meta)
    sigma = sigma255 / 255.0
    estimate, _ = dgcrf_forward(
        noisy,
        sigma * sigma,
        banks,
        config.schedule(),
        cascade=config.cascade,
        softmax_variant=config.softmax_variant,
    )
    return estimate


def cmd_denoise(args) -> int:
    if args.sigma <= 0:
        raise ConfigError(f"--sigma must be positive, got {args.sigma}")
    _require_parent_dir(args.output, "the output image")
    banks, meta = load_model(args.model)
    noisy = load_image(args.input)
    if noisy.shape[0] < meta.side or noisy.shape[1] < meta.side:
        raise DataError(
            f"input image is {noisy.shape[0]}x{noisy.shape[1]}, smaller than the "
            f"model's {meta.side}x{meta.side} patches"
        )
    estimate = _denoise_image(noisy, args.sigma, banks, meta)
    save_image(estimate, args.output)
    if args.clean is not None:
        clean = load_image(args.clean)
        written = quantize_to_grid(estimate)
        print(f"input_psnr={psnr(noisy, clean):.4f} output_psnr={psnr(written, clean):.4f}")
    return 0


def cmd_eval(args) -> int:
    sigmas = tuple(args.sigmas)
    if any(s < 0 for s in sigmas):
        raise ConfigError(f"--sigmas must be nonnegative, got {sigmas}")
    if args.csv is not None:
        _require_parent_dir(args.csv, "the CSV report")
    banks, meta = load_model(args.model)
    images, _ = load_image_dir(args.test_dir)
    for i, img in enumerate(images):
        if img.shape[0] < meta.side or img.shape[1] < meta.side:
            raise DataError(f"test image {i} is smaller than the model's patches")
    config = _config_from_meta(meta, threads=args.threads, seed=args.seed)
    rows = evaluate(banks, images, sigmas, config, seed=args.seed)

    print(f"{'sigma':>8}  {'input_psnr':>10}  {'output_psnr':>11}")
    for r in rows:
        print(f"{r.sigma255:>8.2f}  {r.input_psnr:>10.4f}  {r.output_psnr:>11.4f}")
    csv_lines = ["sigma,input_psnr,output_psnr"]
    csv_lines += [f"{r.sigma255:g},{r.input_psnr:.4f},{r.output_psnr:.4f}" for r in rows]
    csv_text = "\n".join(csv_lines) + "\n"
    if args.csv is not None:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(csv_text)
        print(f"csv written to {args.csv}")
    else:
        sys.stdout.write(csv_text)
    return 0


def _gradcheck_image(size: int, seed: int) -> np.ndarray:
    """Small synthetic scene: smooth ramp, one sharp edge, mild texture."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 11)))
    rr, cc = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = 0.3 + 0.4 * rr * cc
    img[:, size // 2 :] += 0.25
    img += 0.02 * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)


def run_gradcheck(side: int, n_components: int, n_layers: int, seed: int) -> dict:
    """End-to-end finite-difference check of every parameter block.

    Uses per-layer banks (nothing shared), cascaded potentials and the
    negative-PSNR loss, so each layer's factor and bias blocks and the
    input-image block are all exercised independently.
    """
    m = side * side
    rows, cols = np.tril_indices(m)
    clean = _gradcheck_image(GRADCHECK_IMAGE_SIZE, seed)
    noisy = add_gaussian_noise(clean, GRADCHECK_SIGMA255, derive_seed(seed, 12))
    sigma = GRADCHECK_SIGMA255 / 255.0
    sigma2 = sigma * sigma
    config = TrainConfig(
        side=side,
        n_components=n_components,
        n_layers=n_layers,
        share_bank=False,
        share_bias=False,
        cascade=True,
    )
    schedule = config.schedule()

    banks = []
    for t in range(n_layers):
        banks.append(
            random_init(n_components, side, derive_seed(seed, 13, t), scale=GRADCHECK_INIT_SCALE)
        )

    def build_banks(work: dict[str, np.ndarray]) -> list[PotentialBank]:
        rebuilt = []
        for t in range(n_layers):
            fw = np.zeros((n_components, m, m))
            fp = np.zeros((n_components, m, m))
            fw[:, rows, cols] = work[f"P{t}"].reshape(n_components, -1)
            fp[:, rows, cols] = work[f"R{t}"].reshape(n_components, -1)
            rebuilt.append(
                PotentialBank(side=side, factors_w=fw, factors_psi=fp, biases=work[f"b{t}"].copy())
            )
        return rebuilt

    def objective(work: dict[str, np.ndarray]) -> float:
        estimate, _ = dgcrf_forward(
            work["x"].reshape(clean.shape),
            sigma2,
            build_banks(work),
            schedule,
            cascade=True,
        )
        return psnr_loss(estimate, clean)[0]

    params = {}
    for t, b in enumerate(banks):
        params[f"P{t}"] = b.factors_w[:, rows, cols].ravel()
        params[f"R{t}"] = b.factors_psi[:, rows, cols].ravel()
        params[f"b{t}"] = b.biases.copy()
    params["x"] = noisy.ravel().copy()

    estimate, cache = dgcrf_forward(noisy, sigma2, banks, schedule, cascade=True)
    loss, dyhat, _ = psnr_loss(estimate, clean)
    grads = backprop_dgcrf(dyhat, cache, banks)
    analytic = {}
    for t in range(n_layers):
        analytic[f"P{t}"] = grads.d_factors_w[t][:, rows, cols].ravel()
        analytic[f"R{t}"] = grads.d_factors_psi[t][:, rows, cols].ravel()
        analytic[f"b{t}"] = grads.d_biases[t]
    analytic["x"] = grads.dx.ravel()

    return {"params": params, "analytic": analytic, "objective": objective, "loss": loss}


def cmd_gradcheck(args) -> int:
    limits = GRADCHECK_MAX
    if not (2 <= args.d <= limits["d"] and 1 <= args.K <= limits["K"] and 1 <= args.T <= limits["T"]):
        raise ConfigError(
            f"gradcheck supports 2 <= d <= {limits['d']}, 1 <= K <= {limits['K']}, "
            f"1 <= T <= {limits['T']}; got d={args.d}, K={args.K}, T={args.T}"
        )
    if args.eps is not None and args.eps <= 0:
        raise ConfigError(f"--eps must be positive, got {args.eps}")
    epsilons = GRADCHECK_EPS_SWEEP if args.eps is None else (args.eps,)
    setup = run_gradcheck(args.d, args.K, args.T, args.seed)
    analytic = setup["analytic"]
    if args.corrupt_block is not None:
        if args.corrupt_block not in analytic:
            raise ConfigError(
                f"unknown block {args.corrupt_block!r}; have {sorted(analytic)}"
            )
        block = analytic[args.corrupt_block]
        analytic[args.corrupt_block] = block * 1.01 + 1e-3
    reports = finite_diff_check(
        setup["objective"],
        setup["params"],
        analytic,
        epsilons=epsilons,
        normalize="block",
    )
    print(format_gradcheck_report(reports, GRADCHECK_TOL))
    failed = [r for r in reports.values() if not r.passes(GRADCHECK_TOL)]
    if failed:
        print(f"{len(failed)} of {len(reports)} blocks exceed tolerance {GRADCHECK_TOL:g}")
        return 5
    print(f"all {len(reports)} blocks within tolerance {GRADCHECK_TOL:g}")
    return 0


def cmd_init(args) -> int:
    _require_parent_dir(args.out, "the output model")
    n_layers = args.T
    if n_layers < 1 or n_layers > len(DEFAULT_BETA_MULTIPLIERS):
        raise ConfigError(
            f"--T must be in 1..{len(DEFAULT_BETA_MULTIPLIERS)}, got {n_layers}"
        )
    if args.mode == "random":
        bank = random_init(args.K, args.d, derive_seed(args.seed, 14), scale=args.scale)
    else:
        images, _ = load_image_dir(args.patch_dir)
        chunks = []
        for img in images:
            if img.shape[0] >= args.d and img.shape[1] >= args.d:
                chunks.append(center_rows(extract_patches(img, args.d).patches))
        if not chunks:
            raise DataError(f"no image in {args.patch_dir} is at least {args.d}x{args.d}")
        corpus = np.concatenate(chunks)
        bank = gmm_init(
            corpus,
            args.K,
            args.d,
            args.sigma0 / 255.0,
            n_iters=args.em_iters,
            seed=derive_seed(args.seed, 15),
        )
    meta = ModelMeta(
        side=args.d,
        n_components=args.K,
        n_layers=n_layers,
        share_bank=True,
        share_bias=True,
        cascade=True,
        softmax_variant="exp",
        beta_multipliers=tuple(DEFAULT_BETA_MULTIPLIERS[:n_layers]),
    )
    save_model(args.out, [bank], meta)
    print(f"model written to {args.out}")
    return 0


def cmd_noise(args) -> int:
    if args.sigma < 0:
        raise ConfigError(f"--sigma must be nonnegative, got {args.sigma}")
    _require_parent_dir(args.output, "the output image")
    img = load_image(args.input)
    noisy = add_gaussian_noise(img, args.sigma, args.seed, quantize=args.quantize)
    save_image(noisy, args.output)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgcrf",
        description="Gaussian-CRF image denoiser: training, inference and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a directory of clean images")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--train-dir", help="directory of clean training images")
    p.add_argument("--out", help="output model path")
    p.add_argument("--init-model", help="warm-start from an existing model file")
    p.add_argument("--d", type=int, help="patch side")
    p.add_argument("--K", type=int, help="mixture size")
    p.add_argument("--T", type=int, help="number of layers")
    p.add_argument("--sigmas", type=_parse_float_list, help="training noise levels, 0-255 scale")
    p.add_argument("--max-iters", type=int, help="optimizer iteration budget")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="worker process cap")
    p.add_argument("--crop-size", type=int, help="training crop side")
    p.add_argument("--init-mode", choices=("gmm", "random"), help="initialization scheme")
    p.add_argument("--cascade", action=argparse.BooleanOptionalAction, help="regenerate potentials per layer")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, required=True, help="noise level, 0-255 scale")
    p.add_argument("--output", required=True)
    p.add_argument("--clean", help="reference image; prints input/output PSNR")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR table over a test directory")
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--sigmas", type=_parse_float_list, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the table as CSV to this path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the backward pass")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--T", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=None, help="single finite-difference step (default: sweep)")
    p.add_argument("--corrupt-block", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("init", help="build an untrained model file")
    p.add_argument("--mode", choices=("gmm", "random"), required=True)
    p.add_argument("--patch-dir", help="images supplying the mixture-fit corpus (gmm mode)")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=4, help="layer count recorded in the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma0", type=float, default=25.0, help="bias noise level, 0-255 scale")
    p.add_argument("--em-iters", type=int, default=25)
    p.add_argument("--scale", type=float, default=0.05, help="random-mode factor scale")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("noise", help="synthesize a seeded noisy copy of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_noise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is cmd_init and args.mode == "gmm" and not args.patch_dir:
        print("error: --patch-dir is required with --mode gmm", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DgcrfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
