"""Shared test utilities: synthetic images, random SPD stacks, baselines.

The clean-image generator produces piecewise-smooth content (gradient
background, a few flat shapes with hard edges, mild texture). Edges matter:
a linear blur baseline handles smooth regions well but smears edges, which
is exactly the regime a learned denoiser should win in.
"""

import numpy as np

from dgcrf.pgnet import PotentialBank


def make_clean_image(seed, height=64, width=64):
    """Piecewise-smooth grayscale image in [0.05, 0.95]."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rr = np.linspace(0.0, 1.0, height)[:, None]
    cc = np.linspace(0.0, 1.0, width)[None, :]
    a, b = rng.uniform(-0.25, 0.25, size=2)
    img = 0.5 + a * (rr - 0.5) + b * (cc - 0.5)
    img += 0.08 * np.sin(2 * np.pi * (rng.uniform(0.5, 2.0) * rr + rng.uniform()))

    for _ in range(rng.integers(3, 6)):
        level = rng.uniform(0.15, 0.85)
        if rng.random() < 0.5:
            r0, c0 = rng.integers(0, height - 8), rng.integers(0, width - 8)
            dr = rng.integers(6, max(7, height // 2))
            dc = rng.integers(6, max(7, width // 2))
            img[r0 : r0 + dr, c0 : c0 + dc] = level
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            rad = rng.uniform(4, min(height, width) / 3)
            yy, xx = np.mgrid[0:height, 0:width]
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < rad**2] = level

    img += 0.01 * rng.standard_normal((height, width))
    return np.clip(img, 0.05, 0.95)


def random_spd(rng, m, floor=0.1):
    """Random symmetric positive definite m x m matrix."""
    a = rng.standard_normal((m, m))
    return a @ a.T / m + floor * np.eye(m)


def random_bank(seed, side, n_components, scale=0.3):
    """Potential bank with heterogeneous, well-conditioned components."""
    rng = np.random.Generator(np.random.PCG64(seed))
    m = side * side
    fw = scale * np.tril(rng.standard_normal((n_components, m, m))) + np.eye(m)
    fp = scale * np.tril(rng.standard_normal((n_components, m, m))) + np.eye(m)
    biases = 0.1 * rng.standard_normal(n_components)
    return PotentialBank(side=side, factors_w=fw, factors_psi=fp, biases=biases)


def bank_from_matrices(side, w_list, psi_list, biases):
    """Bank whose W_k / Psi_k equal the given SPD matrices exactly."""
    fw = np.stack([np.linalg.cholesky(w) for w in w_list])
    fp = np.stack([np.linalg.cholesky(p) for p in psi_list])
    return PotentialBank(side=side, factors_w=fw, factors_psi=fp, biases=np.asarray(biases, dtype=np.float64))


def blur3(img):
    """3x3 binomial blur [1,2,1] x [1,2,1] / 16 with reflect padding."""
    padded = np.pad(img, 1, mode="reflect")
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    tmp = (
        k[0] * padded[:, :-2] + k[1] * padded[:, 1:-1] + k[2] * padded[:, 2:]
    )
    return k[0] * tmp[:-2, :] + k[1] * tmp[1:-1, :] + k[2] * tmp[2:, :]
