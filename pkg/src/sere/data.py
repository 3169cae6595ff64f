"""Dataset ingestion: IDX parsing, average-pool downscaling, and the
synthetic generators used as desk-scale stand-ins (a smooth-prototype image
mixture, a 2-D checkerboard, and draws from a linear-Gaussian hierarchy whose
exact likelihood the oracle can compute)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .tensor import new_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(path):
    """Parse an IDX file: images -> (N, rows*cols) f64 in [0,1] (divide by
    255), labels -> (N,) int64. Big-endian dims per the format."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic = int.from_bytes(blob[0:4], "big")
    if magic == IDX_IMAGES_MAGIC:
        if len(blob) < 16:
            raise ValueError(f"{path}: truncated IDX image header")
        n, rows, cols = (int.from_bytes(blob[4 + 4 * i: 8 + 4 * i], "big") for i in range(3))
        payload = blob[16:]
        if len(payload) != n * rows * cols:
            raise ValueError(f"{path}: truncated IDX payload "
                             f"({len(payload)} bytes for {n}x{rows}x{cols})")
        data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
        return data.reshape(n, rows * cols)
    if magic == IDX_LABELS_MAGIC:
        n = int.from_bytes(blob[4:8], "big")
        payload = blob[8:]
        if len(payload) != n:
            raise ValueError(f"{path}: truncated IDX label payload")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")


def avg_pool2(x, side):
    """2x2 average pooling of flattened side x side images (side even)."""
    x = np.asarray(x, dtype=np.float64)
    if side % 2 != 0 or x.shape[-1] != side * side:
        raise ValueError(f"avg_pool2: need even side with side*side columns, got {x.shape}")
    n = x.shape[0]
    half = side // 2
    return x.reshape(n, half, 2, half, 2).mean(axis=(2, 4)).reshape(n, half * half)


@dataclass
class SynthData:
    samples: np.ndarray
    kind: str
    image_side: int = 0
    model: object = None   # LinearGaussianModel for kind="linear-model"


def _smooth_field(rng, side, iters=6):
    img = rng.standard_normal((side, side))
    for _ in range(iters):
        img = (img
               + np.roll(img, 1, axis=0) + np.roll(img, -1, axis=0)
               + np.roll(img, 1, axis=1) + np.roll(img, -1, axis=1)) / 5.0
    img = (img - img.mean()) / max(img.std(), 1e-9)
    return img


def gaussian_mixture_images(n, side=14, components=8, noise=0.08, seed=0):
    """Multimodal grayscale images in [0,1]: smooth random prototypes plus
    small noise; dynamic binarization turns these into a genuinely structured
    binary image distribution."""
    rng = new_rng(seed, "gmm-images")
    protos = np.stack([1.0 / (1.0 + np.exp(-2.5 * _smooth_field(rng, side)))
                       for _ in range(components)])
    comp = rng.integers(0, components, size=n)
    x = protos[comp].reshape(n, side * side)
    x = x + noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0)


def gaussian_mixture(n, dim=2, components=4, scale=0.5, seed=0):
    rng = new_rng(seed, "gmm")
    means = rng.uniform(-3.0, 3.0, size=(components, dim))
    comp = rng.integers(0, components, size=n)
    return means[comp] + scale * rng.standard_normal((n, dim))


def checkerboard(n, seed=0):
    """2-D checkerboard on [-2,2]^2; floor(x1)+floor(x2) is always even."""
    rng = new_rng(seed, "checkerboard")
    x1 = rng.uniform(-2.0, 2.0, n)
    x2 = rng.uniform(0.0, 1.0, n) - rng.integers(0, 2, n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=1)


def checkerboard_support(x):
    return (np.floor(x[:, 0]) + np.floor(x[:, 1])) % 2 == 0


def linear_model_data(n, seed=0, L=3, dims=(2, 2, 2), xdim=3):
    """Observations drawn from a fixed valid linear hierarchy; the model is
    returned so exact likelihoods exist for every sample."""
    model = oracle.random_sere_model(new_rng(seed, "linear-model"), L=L,
                                     dims=list(dims), xdim=xdim)
    _, _, x = oracle.sample_model(model, n, new_rng(seed, "linear-model-draws"))
    return x, model


def synth_dataset(kind, n, seed=0, **kw):
    if n < 1:
        raise ValueError("need n >= 1")
    if kind == "gaussian-mixture":
        side = kw.get("image_side", 0)
        if side:
            samples = gaussian_mixture_images(
                n, side=side, components=kw.get("components", 8),
                noise=kw.get("noise", 0.08), seed=seed)
            return SynthData(samples=samples, kind=kind, image_side=side)
        samples = gaussian_mixture(n, dim=kw.get("dim", 2),
                                   components=kw.get("components", 4), seed=seed)
        return SynthData(samples=samples, kind=kind)
    if kind == "checkerboard":
        return SynthData(samples=checkerboard(n, seed=seed), kind=kind)
    if kind == "linear-model":
        x, model = linear_model_data(n, seed=seed,
                                     dims=kw.get("dims", (2, 2, 2)),
                                     xdim=kw.get("xdim", 3))
        return SynthData(samples=x, kind=kind, model=model)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def idx_pipeline(images_path, n_keep=None, downscale=True):
    """IDX images -> optional 2x2 pool -> optional subset, desk-scale ready."""
    x = load_idx(images_path)
    side = int(round(np.sqrt(x.shape[1])))
    if side * side != x.shape[1]:
        raise ValueError("idx_pipeline expects square images")
    if downscale:
        x = avg_pool2(x, side)
        side //= 2
    if n_keep is not None:
        x = x[:n_keep]
    return x, side
