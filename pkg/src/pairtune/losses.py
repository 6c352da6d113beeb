"""The four optimization objectives and their weighted combination.

* InfoNCE contrastive term: the warped image's descriptor at a source
  position is the pseudo-positive for that position's source descriptor;
  every other warped-image position is a negative.
* Perceptual term: squared Frobenius distance between Gram matrices of
  frozen-encoder activations, summed over the configured tap levels.
* Contextual term: nearest-neighbor contextual similarity (normalized
  cosine distances, bandwidth-exponentiated, row-normalized) between the
  two images' activations.

All terms are plain tensor functions; anything differentiable stays on the
autograd tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .encoder import FeatureVolume, extract_features
from .errors import ConfigurationError
from .seeding import rng_for
from .tensors import DTYPE

# Feature grids above this many positions get a seeded negative subsample.
FULL_NEGATIVES_LIMIT = 48 * 48
SUBSAMPLED_NEGATIVES = 512


@dataclass(frozen=True)
class LossWeights:
    """Term weights, InfoNCE temperature, and the negative-sampling rule."""

    lambda_perc: float = 1.0
    lambda_context: float = 1.0
    tau: float = 0.07
    negatives_per_anchor: int | str = "all"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.lambda_perc < 0 or self.lambda_context < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if isinstance(self.negatives_per_anchor, str):
            if self.negatives_per_anchor != "all":
                raise ConfigurationError(
                    f"negatives_per_anchor must be a positive int or 'all', "
                    f"got {self.negatives_per_anchor!r}"
                )
        elif self.negatives_per_anchor < 1:
            raise ConfigurationError("negatives_per_anchor must be >= 1")


@dataclass
class LossReport:
    """Scalar loss terms of one iteration; total is their weighted sum."""

    contrastive: float
    perceptual: float
    contextual: float
    total: float
    iteration: int = 0


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives, tau: float) -> torch.Tensor:
    """One InfoNCE term from raw dot-product logits.

    Returns -log( exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)) ),
    computed as a stable log-sum-exp; the value is always positive.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    if torch.is_tensor(negatives):
        neg = negatives.to(DTYPE)
        if neg.ndim == 1:
            neg = neg.unsqueeze(0)
    else:
        if len(negatives) == 0:
            raise ConfigurationError("info_nce needs at least one negative")
        neg = torch.stack([torch.as_tensor(n, dtype=DTYPE) for n in negatives])
    if neg.numel() == 0:
        raise ConfigurationError("info_nce needs at least one negative")
    anchor = torch.as_tensor(anchor, dtype=DTYPE)
    positive = torch.as_tensor(positive, dtype=DTYPE)
    pos_logit = anchor @ positive / tau
    neg_logits = neg @ anchor / tau
    gaps = torch.cat([torch.zeros(1, dtype=DTYPE), neg_logits - pos_logit])
    return torch.logsumexp(gaps, dim=0)


def _negative_indices(count: int, per_anchor: int, seed: int) -> torch.Tensor:
    """count x per_anchor negative indices, self-index excluded, seeded."""
    rng = rng_for("contrastive-negatives", seed, count, per_anchor)
    draws = rng.integers(0, count - 1, size=(count, per_anchor))
    anchors = torch.arange(count).unsqueeze(1).numpy()
    draws = draws + (draws >= anchors)  # skip over the anchor itself
    return torch.as_tensor(draws, dtype=torch.long)


def contrastive_loss(
    fs: FeatureVolume,
    fwarp: FeatureVolume,
    weights: LossWeights,
    seed: int = 0,
) -> torch.Tensor:
    """Sum of per-anchor InfoNCE terms between source and warped features.

    Anchor u takes the warped feature at u as its positive and warped
    features at other positions as negatives: all of them by default, or a
    seeded subsample when configured (and automatically for feature grids
    above 48 x 48).
    """
    if fs.data.shape != fwarp.data.shape:
        raise ConfigurationError(
            f"feature shape mismatch: {tuple(fs.data.shape)} vs {tuple(fwarp.data.shape)}"
        )
    n = fs.height * fs.width
    if n < 2:
        raise ConfigurationError("contrastive loss needs at least 2 positions for negatives")
    a = fs.flat()
    b = fwarp.flat()
    logits = (a @ b.T) / weights.tau
    pos = logits.diagonal()
    per_anchor = weights.negatives_per_anchor
    if per_anchor == "all" and n > FULL_NEGATIVES_LIMIT:
        per_anchor = SUBSAMPLED_NEGATIVES
    if per_anchor == "all":
        gaps = logits - pos[:, None]
        gaps = gaps.clone()
        gaps.fill_diagonal_(float("-inf"))  # the anchor position is never a negative
    else:
        idx = _negative_indices(n, int(per_anchor), seed)
        gaps = logits.gather(1, idx) - pos[:, None]
    zeros = torch.zeros(n, 1, dtype=DTYPE)
    per_anchor_loss = torch.logsumexp(torch.cat([zeros, gaps], dim=1), dim=1)
    return per_anchor_loss.sum()


def gram_matrix(act: torch.Tensor) -> torch.Tensor:
    """C x C Gram matrix of an H x W x C activation map, summed over positions."""
    flat = act.reshape(-1, act.shape[-1]).to(DTYPE)
    return flat.T @ flat


def _tap_activations(image: torch.Tensor, encoder, levels) -> list[torch.Tensor]:
    taps = encoder.tap_maps(image)
    if levels is None:
        levels = range(1, len(taps) + 1)
    return [taps[lv - 1].squeeze(0).permute(1, 2, 0) for lv in levels]


def perceptual_loss(xt: torch.Tensor, xwarp: torch.Tensor, encoder, levels=None) -> torch.Tensor:
    """Squared Frobenius distance between the two images' Gram matrices.

    ``encoder`` is the frozen perceptual backbone; the distance is summed
    over its configured tap levels.
    """
    if xt.shape != xwarp.shape:
        raise ConfigurationError(f"image shape mismatch: {tuple(xt.shape)} vs {tuple(xwarp.shape)}")
    total = torch.zeros((), dtype=DTYPE)
    for act_t, act_w in zip(_tap_activations(xt, encoder, levels), _tap_activations(xwarp, encoder, levels)):
        diff = gram_matrix(act_t) - gram_matrix(act_w)
        total = total + (diff * diff).sum()
    return total


def contextual_similarity(a: torch.Tensor, b: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """Row-normalized contextual similarity between two descriptor sets.

    ``a`` is N x C (reference rows), ``b`` is L x C. Cosine distances are
    taken after centering both sets by the reference mean, normalized per
    row by the row minimum, exponentiated with the bandwidth, and
    row-normalized to sum 1.
    """
    mu = a.mean(dim=0, keepdim=True)
    ac = a - mu
    bc = b - mu
    an = ac / ac.norm(dim=1, keepdim=True).clamp_min(1e-24)
    bn = bc / bc.norm(dim=1, keepdim=True).clamp_min(1e-24)
    dist = 1.0 - an @ bn.T
    dist_min = dist.min(dim=1, keepdim=True).values
    dist_rel = dist / (dist_min + 1e-5)
    w = torch.exp((1.0 - dist_rel) / bandwidth)
    return w / w.sum(dim=1, keepdim=True)


def contextual_loss(
    xt: torch.Tensor,
    xwarp: torch.Tensor,
    encoder,
    bandwidth: float = 0.5,
    levels=None,
) -> torch.Tensor:
    """Negative log of summed best-match contextual similarities.

    Per tap level: for each target position take the best similarity over
    all warped-image positions, sum those maxima, and accumulate
    -log(sum) across levels.
    """
    if bandwidth <= 0:
        raise ConfigurationError(f"contextual bandwidth must be > 0, got {bandwidth}")
    if xt.shape != xwarp.shape:
        raise ConfigurationError(f"image shape mismatch: {tuple(xt.shape)} vs {tuple(xwarp.shape)}")
    total = torch.zeros((), dtype=DTYPE)
    for act_t, act_w in zip(_tap_activations(xt, encoder, levels), _tap_activations(xwarp, encoder, levels)):
        sim = contextual_similarity(
            act_t.reshape(-1, act_t.shape[-1]),
            act_w.reshape(-1, act_w.shape[-1]),
            bandwidth,
        )
        total = total - torch.log(sim.max(dim=1).values.sum())
    return total


def total_loss(
    contrastive: torch.Tensor,
    perceptual: torch.Tensor,
    contextual: torch.Tensor,
    weights: LossWeights,
    iteration: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the three terms plus its scalar report."""
    contrastive = torch.as_tensor(contrastive, dtype=DTYPE)
    perceptual = torch.as_tensor(perceptual, dtype=DTYPE)
    contextual = torch.as_tensor(contextual, dtype=DTYPE)
    total = contrastive + weights.lambda_perc * perceptual + weights.lambda_context * contextual
    report = LossReport(
        contrastive=float(contrastive.detach()),
        perceptual=float(perceptual.detach()),
        contextual=float(contextual.detach()),
        total=float(total.detach()),
        iteration=iteration,
    )
    return total, report


def encode_image(image: torch.Tensor, backbone, levels=None) -> FeatureVolume:
    """Convenience wrapper so loss call sites read uniformly."""
    return extract_features(image, backbone, levels)
