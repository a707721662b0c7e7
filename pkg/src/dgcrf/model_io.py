"""Binary serialization of trained models.

File layout (all integers and floats little-endian):

    bytes 0..5    magic "DGCRF1"
    uint32        format version (currently 1)
    uint32 x3     patch side d, mixture size K, layer count T
    uint8  x4     flags: share_bank, share_bias, cascade, softmax variant
                  (variant byte: 0 = exp, 1 = linear)
    float64 x T   beta multipliers, one per layer
    float64 ...   W factors, then Psi factors, then biases, row-major;
                  factor blocks appear once when share_bank is set, else
                  once per layer (biases likewise with share_bias)

Factors are lower-triangular but stored as full d^2 x d^2 matrices whose
strict upper triangle is exactly zero; save refuses anything else so a
file can never round-trip through a state the solver would not produce.
The byte count is determined by the header alone, and load rejects files
whose length disagrees with it.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ModelFormatError
from .pgnet import SOFTMAX_VARIANTS, PotentialBank

MAGIC = b"DGCRF1"
FORMAT_VERSION = 1


@dataclass
class ModelMeta:
    """Architecture descriptor stored in a model file's header."""

    side: int
    n_components: int
    n_layers: int
    share_bank: bool = True
    share_bias: bool = True
    cascade: bool = True
    softmax_variant: str = "exp"
    beta_multipliers: tuple[float, ...] = ()

    @property
    def n_factor_banks(self) -> int:
        return 1 if self.share_bank else self.n_layers

    @property
    def n_bias_banks(self) -> int:
        return 1 if self.share_bias else self.n_layers

    def expected_banks(self) -> int:
        return 1 if (self.share_bank and self.share_bias) else self.n_layers


def _payload_elements(meta: ModelMeta) -> int:
    m = meta.side * meta.side
    return meta.n_factor_banks * 2 * meta.n_components * m * m + meta.n_bias_banks * meta.n_components


def expected_file_size(meta: ModelMeta) -> int:
    """Exact byte count of a model file with this header."""
    header = len(MAGIC) + 4 + 12 + 4 + 8 * meta.n_layers
    return header + 8 * _payload_elements(meta)


def _gather_stacks(banks: list[PotentialBank], meta: ModelMeta):
    if len(banks) != meta.expected_banks():
        raise ContractError(
            f"model with share_bank={meta.share_bank}, share_bias={meta.share_bias} "
            f"needs {meta.expected_banks()} banks, got {len(banks)}"
        )
    m = meta.side * meta.side
    for i, b in enumerate(banks):
        if b.side != meta.side or b.factors_w.shape != (meta.n_components, m, m):
            raise ContractError(
                f"bank {i} shape {b.factors_w.shape} does not match header "
                f"(d={meta.side}, K={meta.n_components})"
            )
    fbanks = banks[: meta.n_factor_banks]
    bbanks = banks[: meta.n_bias_banks]
    fw = np.stack([b.factors_w for b in fbanks])
    fp = np.stack([b.factors_psi for b in fbanks])
    bias = np.stack([b.biases for b in bbanks])
    return fw, fp, bias


def save_model(path: str | os.PathLike, banks: list[PotentialBank], meta: ModelMeta) -> None:
    """Write banks to `path` in the binary format described above.

    Raises ContractError when the banks disagree with the header metadata,
    contain non-finite values, or have factors with a nonzero entry above
    the diagonal (the factors are Cholesky-style and must be lower
    triangular, stored full).
    """
    if meta.softmax_variant not in SOFTMAX_VARIANTS:
        raise ContractError(f"unknown softmax variant {meta.softmax_variant!r}")
    if len(meta.beta_multipliers) != meta.n_layers:
        raise ContractError(
            f"need {meta.n_layers} beta multipliers, got {len(meta.beta_multipliers)}"
        )
    fw, fp, bias = _gather_stacks(banks, meta)
    for name, stack in (("W", fw), ("Psi", fp)):
        if np.any(np.triu(stack, k=1) != 0.0):
            raise ContractError(
                f"{name} factors carry nonzero entries above the diagonal; refusing to save"
            )
    for name, arr in (("W factors", fw), ("Psi factors", fp), ("biases", bias)):
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"{name} contain non-finite values; refusing to save")

    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<III", meta.side, meta.n_components, meta.n_layers),
        struct.pack(
            "<BBBB",
            int(meta.share_bank),
            int(meta.share_bias),
            int(meta.cascade),
            SOFTMAX_VARIANTS.index(meta.softmax_variant),
        ),
        np.asarray(meta.beta_multipliers, dtype="<f8").tobytes(),
        np.ascontiguousarray(fw, dtype="<f8").tobytes(),
        np.ascontiguousarray(fp, dtype="<f8").tobytes(),
        np.ascontiguousarray(bias, dtype="<f8").tobytes(),
    ]
    blob = b"".join(parts)
    if len(blob) != expected_file_size(meta):
        raise ContractError(
            f"serialized size {len(blob)} disagrees with header size {expected_file_size(meta)}"
        )
    with open(path, "wb") as f:
        f.write(blob)


def load_model(path: str | os.PathLike) -> tuple[list[PotentialBank], ModelMeta]:
    """Read a model file, reconstructing the per-layer bank list.

    Returns one bank when both sharing flags are set, else one per layer
    with shared blocks aliasing the same arrays. Raises ModelFormatError
    with a distinct message for bad magic, version mismatch, size mismatch,
    and non-finite parameter values.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise ModelFormatError(f"unreadable model file {path}: {exc}") from exc

    if len(data) < len(MAGIC) + 20 or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(
            f"bad magic: {path} does not start with {MAGIC.decode('ascii')!r}"
        )
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"version mismatch: file has format version {version}, this reader supports {FORMAT_VERSION}"
        )
    side, kk, tt = struct.unpack_from("<III", data, pos)
    pos += 12
    share_bank, share_bias, cascade, variant = struct.unpack_from("<BBBB", data, pos)
    pos += 4
    if side < 2 or kk < 1 or tt < 1:
        raise ModelFormatError(f"invalid header: d={side}, K={kk}, T={tt}")
    if share_bank > 1 or share_bias > 1 or cascade > 1 or variant >= len(SOFTMAX_VARIANTS):
        raise ModelFormatError(
            f"invalid header flags: {share_bank}, {share_bias}, {cascade}, {variant}"
        )
    meta = ModelMeta(
        side=int(side),
        n_components=int(kk),
        n_layers=int(tt),
        share_bank=bool(share_bank),
        share_bias=bool(share_bias),
        cascade=bool(cascade),
        softmax_variant=SOFTMAX_VARIANTS[variant],
    )
    expected = expected_file_size(meta)
    if len(data) != expected:
        raise ModelFormatError(
            f"size mismatch: file has {len(data)} bytes, header implies {expected}"
        )
    multipliers = np.frombuffer(data, dtype="<f8", count=meta.n_layers, offset=pos)
    pos += 8 * meta.n_layers
    meta.beta_multipliers = tuple(float(b) for b in multipliers)

    m = meta.side * meta.side
    nw, nb = meta.n_factor_banks, meta.n_bias_banks

    def take(count: int, shape) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        return arr.reshape(shape).astype(np.float64)

    fw = take(nw * kk * m * m, (nw, kk, m, m))
    fp = take(nw * kk * m * m, (nw, kk, m, m))
    bias = take(nb * kk, (nb, kk))
    if not (np.all(np.isfinite(fw)) and np.all(np.isfinite(fp)) and np.all(np.isfinite(bias))):
        raise ModelFormatError(f"non-finite parameter values in {path}")
    if np.any(np.triu(fw, k=1) != 0.0) or np.any(np.triu(fp, k=1) != 0.0):
        raise ModelFormatError(f"factors in {path} have nonzero entries above the diagonal")
    if not np.all(np.isfinite(multipliers)) or np.any(multipliers <= 0):
        raise ModelFormatError(f"invalid beta multipliers in {path}")

    if nw == 1 and nb == 1:
        banks = [
            PotentialBank(side=meta.side, factors_w=fw[0], factors_psi=fp[0], biases=bias[0])
        ]
    else:
        banks = [
            PotentialBank(
                side=meta.side,
                factors_w=fw[0 if nw == 1 else t],
                factors_psi=fp[0 if nw == 1 else t],
                biases=bias[0 if nb == 1 else t],
            )
            for t in range(meta.n_layers)
        ]
    return banks, meta
