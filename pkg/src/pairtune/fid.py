"""Reference-statistics scoring for hypothesis self-selection.

A pluggable embedding maps images to vectors; sets of vectors become
Gaussian statistics; two statistics compare via the Frechet distance.
Single images are expanded into a deterministic grid of overlapping crops
first, since a one-sample covariance does not exist. The expansion is a
repo convention for ranking hypotheses consistently, not a claim of
comparability with published scores.
"""
from __future__ import annotations

import importlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, IOFailure, NumericError
from .seeding import rng_for
from .tensors import as_image, to_chw

EMBEDDING_KINDS = ("toy-deterministic", "external-pretrained")
POOL_GRID = 16  # toy embedding pools images to this many cells per side

# Below this many images, fid_score expands each into overlapping crops.
EXPANSION_THRESHOLD = 16
RESIDUAL_TOLERANCE = 1e-5
IMAG_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "toy-deterministic"
    output_dim: int = 16
    pooling: str = "spatial-mean"
    seed: int = 0
    weight_source: str | None = None

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ConfigurationError(
                f"embedding kind must be one of {EMBEDDING_KINDS}, got {self.kind!r}"
            )
        if self.output_dim < 2:
            raise ConfigurationError(f"output-dim must be >= 2, got {self.output_dim}")
        if self.pooling != "spatial-mean":
            raise ConfigurationError(f"unsupported pooling {self.pooling!r}")
        if self.kind == "external-pretrained" and not self.weight_source:
            raise ConfigurationError("external-pretrained embedding needs weight-source")


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        if self.sample_count < 2:
            raise ConfigurationError(f"sample-count must be >= 2, got {self.sample_count}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8):
            raise ConfigurationError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


class ToyEmbedding:
    """Seeded fixed projection of spatially mean-pooled images.

    The image is average-pooled to a 16x16 grid per channel, flattened,
    and projected to ``output_dim`` dimensions by a seeded gaussian matrix
    scaled by the usual 1/sqrt(fan-in).
    """

    def __init__(self, spec: EmbeddingSpec):
        self.spec = spec
        fan_in = 3 * POOL_GRID * POOL_GRID
        rng = rng_for("toy-embedding", spec.seed, spec.output_dim)
        self.projection = rng.normal(0.0, 1.0, size=(spec.output_dim, fan_in)) * fan_in**-0.5

    def embed(self, image: torch.Tensor) -> np.ndarray:
        chw = to_chw(as_image(image))
        pooled = F.adaptive_avg_pool2d(chw, (POOL_GRID, POOL_GRID))
        flat = pooled.reshape(-1).detach().numpy()
        return self.projection @ flat


def build_embedding(spec: EmbeddingSpec):
    if spec.kind == "toy-deterministic":
        return ToyEmbedding(spec)
    locator, _, path = spec.weight_source.partition("@")
    module_name, _, attr = locator.partition(":")
    if not module_name or not attr:
        raise ConfigurationError(
            f"weight-source must look like 'module:factory[@path]', got {spec.weight_source!r}"
        )
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot resolve embedding weight-source: {exc}") from exc
    return factory(path or None, spec)


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased sample covariance of embedding vectors."""
    arr = np.asarray([np.asarray(e, dtype=np.float64) for e in embeddings])
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ConfigurationError("gaussian_stats needs at least 2 embeddings")
    mean = arr.mean(axis=0)
    cov = np.cov(arr, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, covariance=cov, sample_count=arr.shape[0])


def _sqrt_trace(cov_a: np.ndarray, cov_b: np.ndarray):
    """Trace of (cov_a cov_b)^(1/2) plus the square root's relative residual.

    Eigendecomposition with negative eigenvalues clamped to zero and small
    imaginary parts discarded; returns None when the decomposition is too
    ill-conditioned to trust.
    """
    product = cov_a @ cov_b
    scale = max(1.0, float(np.abs(product).max()))
    try:
        vals, vecs = np.linalg.eig(product)
        if np.abs(vals.imag).max() > IMAG_TOLERANCE * scale:
            return None
        clamped = np.clip(vals.real, 0.0, None)
        root = (vecs * np.sqrt(clamped)) @ np.linalg.inv(vecs)
    except np.linalg.LinAlgError:
        return None
    if np.abs(root.imag).max() > IMAG_TOLERANCE * scale:
        return None
    root = root.real
    norm = np.linalg.norm(product)
    residual = np.linalg.norm(root @ root - product) / max(norm, 1e-30)
    return float(np.trace(root)), float(residual)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    Computed plain first; when the square root's relative residual exceeds
    1e-5 the computation retries once with 1e-6 I added to both
    covariances (traces included, for consistency).
    """
    if a.dim != b.dim:
        raise ConfigurationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    last_residual = np.inf
    for eps in (0.0, 1e-6):
        eye = eps * np.eye(a.dim)
        ca = a.covariance + eye
        cb = b.covariance + eye
        result = _sqrt_trace(ca, cb)
        if result is None:
            continue
        trace_sqrt, residual = result
        if residual > RESIDUAL_TOLERANCE:
            last_residual = min(last_residual, residual)
            continue
        value = mean_term + float(np.trace(ca) + np.trace(cb)) - 2.0 * trace_sqrt
        if value < -1e-6:
            raise NumericError(f"distance came out {value:.3e}, below the -1e-6 floor")
        return max(value, 0.0)
    raise NumericError(
        f"matrix square root residual {last_residual:.3e} exceeds {RESIDUAL_TOLERANCE:.0e}"
    )


def expand_crops(image: torch.Tensor, grid: int = 8, fraction: float = 0.5) -> list[torch.Tensor]:
    """Deterministic grid of overlapping crops covering the image.

    ``grid`` x ``grid`` crops of ``fraction`` the side length, top-left
    corners evenly spaced over the valid range.
    """
    image = as_image(image)
    h, w = image.shape[0], image.shape[1]
    ch, cw = max(int(h * fraction), 1), max(int(w * fraction), 1)
    ys = np.linspace(0, h - ch, grid).round().astype(int)
    xs = np.linspace(0, w - cw, grid).round().astype(int)
    return [image[y : y + ch, x : x + cw] for y in ys for x in xs]


def embed_images(images, embed) -> list[np.ndarray]:
    if isinstance(embed, EmbeddingSpec):
        embed = build_embedding(embed)
    return [embed.embed(img) for img in images]


def fid_score(images, reference: GaussianStats, embed, expansion: str = "auto") -> float:
    """Score an image set against reference statistics.

    Sets smaller than 16 images are expanded into each image's crop grid
    (``expansion="auto"``; "never" disables, "always" forces) so even a
    single hypothesis image yields a full covariance.
    """
    if not images:
        raise ConfigurationError("fid_score needs at least one image")
    if expansion not in ("auto", "never", "always"):
        raise ConfigurationError(f"expansion must be auto/never/always, got {expansion!r}")
    expand = expansion == "always" or (expansion == "auto" and len(images) < EXPANSION_THRESHOLD)
    if expand:
        images = [crop for img in images for crop in expand_crops(img)]
    stats = gaussian_stats(embed_images(images, embed))
    if float(np.abs(stats.covariance).max()) < 1e-18:
        raise NumericError(
            "embedding covariance is degenerate; score with more images or more varied patches"
        )
    return frechet_distance(stats, reference)


def save_stats(stats: GaussianStats, path) -> None:
    """Binary stats file: int64 dim, int64 count, mean, row-major covariance."""
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.array([stats.dim, stats.sample_count], dtype=np.int64).tofile(fh)
            stats.mean.astype(np.float64).tofile(fh)
            np.ascontiguousarray(stats.covariance, dtype=np.float64).tofile(fh)
        manifest = (
            "pairtune-stats v1\n"
            f"dim: {stats.dim}\n"
            f"sample-count: {stats.sample_count}\n"
            "layout: int64 dim, int64 count, float64 mean, float64 row-major covariance\n"
        )
        Path(str(path) + ".txt").write_text(manifest)
    except OSError as exc:
        raise IOFailure(f"cannot write stats file {path}: {exc}") from exc


def load_stats(path) -> GaussianStats:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read stats file {path}: {exc}") from exc
    if len(raw) < 16:
        raise IOFailure(f"stats file {path} is truncated")
    header = np.frombuffer(raw, dtype=np.int64, count=2)
    dim, count = int(header[0]), int(header[1])
    expected = 16 + 8 * (dim + dim * dim)
    if dim < 1 or len(raw) != expected:
        raise IOFailure(
            f"stats file {path} has {len(raw)} bytes, expected {expected} for dim {dim}"
        )
    body = np.frombuffer(raw, dtype=np.float64, offset=16)
    mean = body[:dim].copy()
    cov = body[dim:].reshape(dim, dim).copy()
    return GaussianStats(mean=mean, covariance=cov, sample_count=count)
