"""Per-iteration augmented copies of the image pair.

The source image gets photometric deformations (per-channel color jitter,
additive noise); the target gets geometric ones (seeded scale/rotation/
translation). Every draw is a pure function of (spec seed, iteration), so
the whole augmentation stream replays bit-identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .seeding import rng_for
from .tensors import DTYPE, as_image, to_chw


@dataclass(frozen=True)
class PhotometricSpec:
    jitter_strength: float = 0.2
    noise_sigma: float = 0.02

    def __post_init__(self):
        if not (0.0 <= self.jitter_strength <= 1.0):
            raise ConfigurationError(
                f"jitter-strength must be in [0, 1], got {self.jitter_strength}"
            )
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise ConfigurationError(f"noise-sigma must be finite and >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class GeometricSpec:
    scale_range: tuple[float, float] = (0.9, 1.1)
    affine_jitter: float = 0.05

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi) or not math.isfinite(hi):
            raise ConfigurationError(f"scale-range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.affine_jitter < 0 or not math.isfinite(self.affine_jitter):
            raise ConfigurationError(f"affine-jitter must be finite and >= 0, got {self.affine_jitter}")


@dataclass(frozen=True)
class AugmentationSpec:
    photometric: PhotometricSpec = field(default_factory=PhotometricSpec)
    geometric: GeometricSpec = field(default_factory=GeometricSpec)
    seed: int = 0


def augment_photometric(image: torch.Tensor, spec: AugmentationSpec, iteration: int) -> torch.Tensor:
    """Seeded per-channel affine color jitter plus additive gaussian noise.

    Pixel positions never move; the per-channel map is monotone (positive
    gain), so with zero noise each channel's brightest pixel stays put.
    Output is clamped to [0, 1].
    """
    image = as_image(image)
    p = spec.photometric
    if p.jitter_strength == 0.0 and p.noise_sigma == 0.0:
        return image.clone()
    rng = rng_for("photometric", spec.seed, iteration)
    gain = 1.0 + p.jitter_strength * rng.uniform(-1.0, 1.0, size=3)
    bias = 0.5 * p.jitter_strength * rng.uniform(-1.0, 1.0, size=3)
    out = image * torch.as_tensor(gain, dtype=DTYPE) + torch.as_tensor(bias, dtype=DTYPE)
    if p.noise_sigma > 0:
        noise = rng.normal(0.0, p.noise_sigma, size=tuple(image.shape))
        out = out + torch.as_tensor(noise, dtype=DTYPE)
    return out.clamp(0.0, 1.0)


def draw_geometric_params(spec: AugmentationSpec, iteration: int) -> dict:
    """The seeded affine draw for one iteration, as loggable scalars."""
    g = spec.geometric
    rng = rng_for("geometric", spec.seed, iteration)
    scale = rng.uniform(g.scale_range[0], g.scale_range[1])
    rotation = g.affine_jitter * rng.uniform(-1.0, 1.0)
    tx = g.affine_jitter * rng.uniform(-1.0, 1.0)
    ty = g.affine_jitter * rng.uniform(-1.0, 1.0)
    return {"scale": float(scale), "rotation": float(rotation), "tx": float(tx), "ty": float(ty)}


def apply_affine(image: torch.Tensor, params: dict) -> torch.Tensor:
    """Resample ``image`` under the given affine params at the same size.

    ``scale`` scales the content (0.5 halves it), ``rotation`` is radians,
    ``tx``/``ty`` are offsets in normalized [-1, 1] coordinates. Bilinear,
    zero-padded (mirror padding folds content back in at strong
    zoom-outs, which breaks area scaling), clamped to [0, 1].
    """
    image = as_image(image)
    s, rot = params["scale"], params["rotation"]
    tx, ty = params["tx"], params["ty"]
    if s == 1.0 and rot == 0.0 and tx == 0.0 and ty == 0.0:
        return image.clone()
    c, sn = math.cos(rot) / s, math.sin(rot) / s
    theta = torch.tensor([[c, -sn, tx], [sn, c, ty]], dtype=DTYPE).unsqueeze(0)
    chw = to_chw(image)
    grid = F.affine_grid(theta, list(chw.shape), align_corners=False)
    out = F.grid_sample(chw, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)


def augment_geometric(
    image: torch.Tensor, spec: AugmentationSpec, iteration: int
) -> tuple[torch.Tensor, dict]:
    """Seeded random affine (scale, small rotation/translation) of ``image``.

    Returns the resampled image and the drawn transform parameters so the
    caller can log them.
    """
    params = draw_geometric_params(spec, iteration)
    g = spec.geometric
    if g.scale_range == (1.0, 1.0) and g.affine_jitter == 0.0:
        return as_image(image).clone(), {"scale": 1.0, "rotation": 0.0, "tx": 0.0, "ty": 0.0}
    return apply_affine(image, params), params


def sample_pair(
    source: torch.Tensor, target: torch.Tensor, spec: AugmentationSpec, iteration: int
) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """One iteration's augmented pair plus the loggable draw parameters.

    Photometric goes to the source, geometric to the target, on
    independent seeded streams.
    """
    aug_source = augment_photometric(source, spec, iteration)
    aug_target, geo_params = augment_geometric(target, spec, iteration)
    return aug_source, aug_target, geo_params
