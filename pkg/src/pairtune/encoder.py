"""Hierarchical feature encoder with pluggable backbones.

A backbone maps an image to an ordered list of tap feature maps at
decreasing spatial resolution. ``extract_features`` upsamples the coarser
taps to the finest tap's resolution bilinearly and concatenates them
channel-wise into one dense volume; ``centralize`` removes the per-channel
spatial mean so downstream cosine correlation sees zero-mean descriptors.

Two backbone kinds exist:

* ``toy-deterministic`` - a small stride-2 conv/tanh stack with seeded,
  reproducible initialization. Cheap enough for finite-difference tests,
  deep enough for multi-level taps.
* ``external-pretrained`` - resolved through a plugin factory named by
  ``weight_source`` (``"module.path:attribute"`` or
  ``"module.path:attribute@/weights/file"``). The factory receives the
  weight path and the tap levels and must return an object with the same
  ``tap_maps`` / ``parameters`` surface as :class:`ToyBackbone`.
"""
from __future__ import annotations

import importlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError, NumericError
from .seeding import rng_for
from .tensors import DTYPE, from_chw, resize_image, to_chw

TOY_WIDTHS = (8, 16, 32)


@dataclass(frozen=True)
class BackboneSpec:
    """Which backbone to build and which stage outputs to tap."""

    kind: str = "toy-deterministic"
    levels: tuple[int, ...] = (1, 2, 3)
    seed: int = 0
    weight_source: str | None = None

    def __post_init__(self):
        if self.kind not in ("toy-deterministic", "external-pretrained"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if not self.levels:
            raise ConfigurationError("backbone levels must be non-empty")
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))


@dataclass
class FeatureVolume:
    """Concatenated multi-level features at the finest tap resolution.

    ``data`` is H x W x C channels-last; ``level_offsets`` records, per
    contributing tap, the (level, start, stop) channel range it occupies.
    """

    data: torch.Tensor
    level_offsets: tuple[tuple[int, int, int], ...] = field(default_factory=tuple)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> torch.Tensor:
        """Row-major (H*W) x C view of the volume."""
        return self.data.reshape(-1, self.channels)

    def level_slice(self, level: int) -> torch.Tensor:
        for lv, start, stop in self.level_offsets:
            if lv == level:
                return self.data[:, :, start:stop]
        raise ConfigurationError(f"no tap level {level} in this volume")


@dataclass
class CentralizedFeatureVolume(FeatureVolume):
    """A FeatureVolume whose per-channel spatial mean is zero."""


class ToyBackbone(nn.Module):
    """Stride-2 conv stack with tanh after every stage.

    Initialization is drawn from a seeded stream, so two instances built
    with the same arguments are bit-identical. tanh keeps activations
    bounded and smooth, which the finite-difference gradient checks rely on.
    """

    def __init__(self, widths: tuple[int, ...] = TOY_WIDTHS, in_channels: int = 3, seed: int = 0):
        super().__init__()
        if not widths:
            raise ConfigurationError("toy backbone needs at least one stage")
        self.widths = tuple(widths)
        self.in_channels = in_channels
        self.seed = seed
        stages = []
        prev = in_channels
        for i, w in enumerate(self.widths):
            conv = nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1, dtype=DTYPE)
            rng = rng_for("toy-backbone", seed, i)
            fan_in = prev * 9
            weight = rng.normal(0.0, fan_in ** -0.5, size=tuple(conv.weight.shape))
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(weight, dtype=DTYPE))
                conv.bias.zero_()
            stages.append(conv)
            prev = w
        self.stages = nn.ModuleList(stages)

    @property
    def num_levels(self) -> int:
        return len(self.stages)

    def tap_maps(self, image: torch.Tensor) -> list[torch.Tensor]:
        """All stage outputs for an H x W x C image, each 1 x C' x H' x W'."""
        h, w = image.shape[0], image.shape[1]
        factor = 2 ** len(self.stages)
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input size {h}x{w} not divisible by backbone stride {factor}"
            )
        x = to_chw(image.to(DTYPE))
        taps = []
        for conv in self.stages:
            x = torch.tanh(conv(x))
            taps.append(x)
        return taps


def build_backbone(spec: BackboneSpec):
    """Instantiate the backbone a spec describes."""
    if spec.kind == "toy-deterministic":
        backbone = ToyBackbone(seed=spec.seed)
    else:
        if not spec.weight_source:
            raise ConfigurationError("external-pretrained backbone needs weight_source")
        locator, _, weight_path = spec.weight_source.partition("@")
        module_name, _, attr = locator.partition(":")
        if not attr:
            raise ConfigurationError(
                f"weight_source {spec.weight_source!r} is not 'module:attribute[@path]'"
            )
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot resolve backbone plugin {locator!r}: {exc}")
        backbone = factory(weight_path or None, spec.levels)
    max_level = getattr(backbone, "num_levels", max(spec.levels))
    for lv in spec.levels:
        if not 1 <= lv <= max_level:
            raise ConfigurationError(f"tap level {lv} outside 1..{max_level}")
    return backbone


def extract_features(image: torch.Tensor, backbone, levels: tuple[int, ...] | None = None) -> FeatureVolume:
    """Run the backbone and fuse the tapped levels into one volume.

    Coarser taps are bilinearly upsampled to the finest tap's spatial size
    and concatenated in the declared level order. The result stays on the
    autograd tape, so gradients flow back into the backbone parameters.
    """
    taps = backbone.tap_maps(image)
    if levels is None:
        levels = tuple(range(1, len(taps) + 1))
    for lv in levels:
        if not 1 <= lv <= len(taps):
            raise ConfigurationError(f"tap level {lv} outside 1..{len(taps)}")
    chosen = [(lv, taps[lv - 1]) for lv in levels]
    finest = max(chosen, key=lambda p: p[1].shape[-2] * p[1].shape[-1])
    target_hw = finest[1].shape[-2:]
    parts = []
    offsets = []
    start = 0
    for lv, tap in chosen:
        if not torch.isfinite(tap).all():
            raise NumericError(f"non-finite activations at tap level {lv}")
        if target_hw[0] % tap.shape[-2] or target_hw[1] % tap.shape[-1]:
            raise ConfigurationError(
                f"tap level {lv} size {tuple(tap.shape[-2:])} does not divide "
                f"finest size {tuple(target_hw)}"
            )
        if tap.shape[-2:] != target_hw:
            tap = torch.nn.functional.interpolate(
                tap, size=target_hw, mode="bilinear", align_corners=False
            )
        parts.append(from_chw(tap))
        stop = start + tap.shape[1]
        offsets.append((lv, start, stop))
        start = stop
    data = torch.cat(parts, dim=-1)
    return FeatureVolume(data=data, level_offsets=tuple(offsets))


def centralize(f: FeatureVolume) -> CentralizedFeatureVolume:
    """Subtract each channel's spatial mean over this one image."""
    if not torch.isfinite(f.data).all():
        raise NumericError("non-finite feature volume")
    mean = f.data.mean(dim=(0, 1), keepdim=True)
    return CentralizedFeatureVolume(data=f.data - mean, level_offsets=f.level_offsets)


def frozen_copy(backbone: nn.Module) -> nn.Module:
    """Detach a backbone from optimization: same weights, no gradients."""
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def downsample_to(image: torch.Tensor, volume: FeatureVolume) -> torch.Tensor:
    """Bilinear copy of an image at a feature volume's spatial resolution."""
    return resize_image(image, volume.height, volume.width)
