"""Shared tensor conventions and small helpers.

Images and feature volumes are channels-last (H x W x C) float64 torch
tensors; convolutions permute to channels-first internally. Float64 keeps
the numeric oracles and finite-difference checks tight on CPU.
"""
from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

DTYPE = torch.float64


def as_image(array) -> torch.Tensor:
    """Coerce an array-like to an H x W x 3 float64 image tensor in [0, 1]."""
    t = torch.as_tensor(np.asarray(array) if not torch.is_tensor(array) else array, dtype=DTYPE)
    if t.ndim == 2:
        t = t.unsqueeze(-1).expand(-1, -1, 3).clone()
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ConfigurationError(f"expected H x W x 3 image, got shape {tuple(t.shape)}")
    return t


def to_chw(image: torch.Tensor) -> torch.Tensor:
    """H x W x C -> 1 x C x H x W, the layout conv ops expect."""
    return image.permute(2, 0, 1).unsqueeze(0)


def from_chw(batch: torch.Tensor) -> torch.Tensor:
    """1 x C x H x W -> H x W x C."""
    return batch.squeeze(0).permute(1, 2, 0)


def resize_image(image: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of an H x W x C image."""
    if tuple(image.shape[:2]) == (height, width):
        return image
    out = F.interpolate(to_chw(image), size=(height, width), mode="bilinear", align_corners=False)
    return from_chw(out)


def require_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def content_digest(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the concatenated float64 bytes of the given tensors."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().to(DTYPE).contiguous().numpy().tobytes())
    return h.hexdigest()
