"""Dense correspondence: all-pairs cosine correlation and the softmax warp.

The correlation matrix holds the cosine similarity between every centralized
source descriptor and every centralized target descriptor, positions
flattened row-major. Warping rebuilds each source-aligned pixel as a
temperature-softmax-weighted average of target pixels, so every output pixel
is a convex combination of the target's pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import CentralizedFeatureVolume
from .errors import ConfigurationError
from .tensors import DTYPE

_NORM_FLOOR = 1e-24  # keeps zero-norm descriptors at similarity 0 instead of NaN


@dataclass
class CorrelationMatrix:
    """(Hs*Ws) x (Ht*Wt) cosine similarities, rows = source positions."""

    data: torch.Tensor
    source_shape: tuple[int, int]
    target_shape: tuple[int, int]


@dataclass
class WarpedImage:
    """Target pixels rearranged into the source's layout at feature resolution."""

    data: torch.Tensor  # H x W x 3
    alpha: float


def correlation_matrix(fs: CentralizedFeatureVolume, ft: CentralizedFeatureVolume) -> CorrelationMatrix:
    """Pairwise cosine similarity between source and target descriptors."""
    if fs.channels != ft.channels:
        raise ConfigurationError(
            f"channel mismatch: source {fs.channels} vs target {ft.channels}"
        )
    a = fs.flat()
    b = ft.flat()
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    denom = (na[:, None] * nb[None, :]).clamp_min(_NORM_FLOOR)
    data = (a @ b.T) / denom
    return CorrelationMatrix(
        data=data,
        source_shape=(fs.height, fs.width),
        target_shape=(ft.height, ft.width),
    )


def warp(target_image: torch.Tensor, m: CorrelationMatrix, alpha: float) -> WarpedImage:
    """Softmax-aggregate target pixels into the source layout.

    ``target_image`` must already be at the matrix's target feature
    resolution. Per source position the weights are softmax(alpha * row),
    which sum to one, so outputs stay inside the target's per-channel range.
    """
    if alpha <= 0:
        raise ConfigurationError(f"softmax temperature alpha must be > 0, got {alpha}")
    th, tw = m.target_shape
    if tuple(target_image.shape[:2]) != (th, tw):
        raise ConfigurationError(
            f"target image {tuple(target_image.shape[:2])} does not match "
            f"correlation target shape {(th, tw)}"
        )
    weights = torch.softmax(alpha * m.data, dim=1)
    flat = target_image.reshape(th * tw, -1).to(DTYPE)
    out = weights @ flat
    sh, sw = m.source_shape
    return WarpedImage(data=out.reshape(sh, sw, flat.shape[1]), alpha=float(alpha))


def dump_correlation(m: CorrelationMatrix, alpha: float, path) -> None:
    """Write the matrix as row-major float32 plus a plain-text header file.

    ``path`` gets the binary; ``path`` + ``.txt`` the header. Intended for
    offline inspection of a run's correspondence.
    """
    path = Path(path)
    m.data.detach().to(torch.float32).contiguous().numpy().tofile(path)
    header = (
        f"format: correlation-dump/1\n"
        f"dtype: float32 row-major\n"
        f"rows: {m.data.shape[0]}\n"
        f"cols: {m.data.shape[1]}\n"
        f"source_shape: {m.source_shape[0]} {m.source_shape[1]}\n"
        f"target_shape: {m.target_shape[0]} {m.target_shape[1]}\n"
        f"alpha: {alpha!r}\n"
    )
    path.with_name(path.name + ".txt").write_text(header)


def load_correlation(path) -> tuple[CorrelationMatrix, float]:
    """Read back a dump written by :func:`dump_correlation`."""
    path = Path(path)
    fields = {}
    for line in path.with_name(path.name + ".txt").read_text().splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    rows, cols = int(fields["rows"]), int(fields["cols"])
    data = np.fromfile(path, dtype=np.float32).reshape(rows, cols)
    src = tuple(int(v) for v in fields["source_shape"].split())
    tgt = tuple(int(v) for v in fields["target_shape"].split())
    m = CorrelationMatrix(
        data=torch.as_tensor(data, dtype=DTYPE), source_shape=src, target_shape=tgt
    )
    return m, float(fields["alpha"])
