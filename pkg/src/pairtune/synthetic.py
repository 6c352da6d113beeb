"""Seeded synthetic test images: colored shapes on gradient backgrounds.

Used by the bundled configs, the test suite, and the default reference
statistics so nothing in the repo depends on downloaded data.
"""
from __future__ import annotations

import torch

from .seeding import rng_for
from .tensors import DTYPE

_PALETTE_A = [(0.9, 0.2, 0.2), (0.2, 0.7, 0.3), (0.25, 0.35, 0.9), (0.95, 0.8, 0.2)]
_PALETTE_B = [(0.3, 0.8, 0.9), (0.9, 0.4, 0.7), (0.85, 0.6, 0.2), (0.5, 0.3, 0.85)]


def _gradient(size: int, top, bottom) -> torch.Tensor:
    t = torch.linspace(0.0, 1.0, size, dtype=DTYPE).view(size, 1, 1)
    top = torch.tensor(top, dtype=DTYPE)
    bottom = torch.tensor(bottom, dtype=DTYPE)
    return (1.0 - t) * top + t * bottom + torch.zeros(size, size, 3, dtype=DTYPE)


def _paint(canvas: torch.Tensor, mask: torch.Tensor, color) -> None:
    canvas[mask] = torch.tensor(color, dtype=DTYPE)


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> torch.Tensor:
    ys = torch.arange(size, dtype=DTYPE).view(size, 1)
    xs = torch.arange(size, dtype=DTYPE).view(1, size)
    if kind == 0:  # disk
        return (xs - cx) ** 2 + (ys - cy) ** 2 < r**2
    if kind == 1:  # square
        return ((xs - cx).abs() < r) & ((ys - cy).abs() < r)
    # upward triangle: below the apex, inside the two slanted edges
    return (ys > cy - r) & (ys < cy + r) & ((xs - cx).abs() < (ys - cy + r) / 2)


def _layout(seed: int, size: int, count: int) -> list[tuple[int, float, float, float]]:
    rng = rng_for("shape-layout", seed, size, count)
    shapes = []
    for _ in range(count):
        kind = int(rng.integers(0, 3))
        r = size * rng.uniform(0.08, 0.16)
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        shapes.append((kind, cx, cy, r))
    return shapes


def colored_shapes_pair(seed: int, size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """A source/target pair sharing shape layout but not appearance.

    Both images carry the same seeded shapes; the target's are slightly
    displaced and recolored, so genuine correspondences exist without the
    pair being identical.
    """
    shapes = _layout(seed, size, count=4)
    rng = rng_for("shape-pair", seed, size)
    source = _gradient(size, (0.15, 0.15, 0.25), (0.35, 0.3, 0.2))
    target = _gradient(size, (0.85, 0.85, 0.75), (0.6, 0.65, 0.75))
    for i, (kind, cx, cy, r) in enumerate(shapes):
        _paint(source, _shape_mask(kind, size, cx, cy, r), _PALETTE_A[i % len(_PALETTE_A)])
        dx, dy = rng.uniform(-0.03 * size, 0.03 * size, size=2)
        _paint(target, _shape_mask(kind, size, cx + dx, cy + dy, r), _PALETTE_B[i % len(_PALETTE_B)])
    return source, target


def shape_image(seed: int, size: int = 64) -> torch.Tensor:
    """One seeded image with a few shapes; the reference-set unit."""
    rng = rng_for("shape-image", seed, size)
    top = rng.uniform(0.1, 0.9, size=3)
    bottom = rng.uniform(0.1, 0.9, size=3)
    canvas = _gradient(size, tuple(top), tuple(bottom))
    for i, (kind, cx, cy, r) in enumerate(_layout(seed * 7919 + 13, size, count=3)):
        color = rng.uniform(0.05, 0.95, size=3)
        _paint(canvas, _shape_mask(kind, size, cx, cy, r), tuple(color))
    return canvas


def shape_set(count: int = 8, size: int = 64, seed: int = 0) -> list[torch.Tensor]:
    """``count`` seeded shape images, for building reference statistics."""
    return [shape_image(seed * 1000 + i, size) for i in range(count)]
