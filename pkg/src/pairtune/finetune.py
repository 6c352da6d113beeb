"""Stage 1: per-pair online fine-tuning of the two encoder copies.

Each iteration pushes the original pair and a freshly augmented pair
through encode -> correlate -> warp -> re-encode, sums the two total
losses, and takes one optimizer step on the source- and target-encoder
parameters jointly. The perceptual encoder is a third, frozen copy.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import torch

from .augmentation import AugmentationSpec, sample_pair
from .correspondence import WarpedImage, correlation_matrix, warp
from .encoder import (
    BackboneSpec,
    build_backbone,
    centralize,
    downsample_to,
    extract_features,
    frozen_copy,
)
from .errors import ConfigurationError, NumericError
from .losses import LossReport, LossWeights, contrastive_loss, contextual_loss, perceptual_loss, total_loss
from .tensors import as_image, content_digest, resize_image


@dataclass(frozen=True)
class CftConfig:
    iterations: int = 200
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 100.0
    context_bandwidth: float = 0.5
    aug_pair_weight: float = 1.0
    # the raw Gram term alone reaches ~1e6 on ordinary inputs, so the
    # runaway guard sits well above the working range
    divergence_limit: float = 1e9
    weights: LossWeights = field(default_factory=LossWeights)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning-rate must be >= 0, got {self.learning_rate}")
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.context_bandwidth <= 0:
            raise ConfigurationError(f"context-bandwidth must be > 0, got {self.context_bandwidth}")
        if self.checkpoint_every < 0:
            raise ConfigurationError(f"checkpoint-every must be >= 0, got {self.checkpoint_every}")
        if self.divergence_limit <= 0:
            raise ConfigurationError(f"divergence-limit must be > 0, got {self.divergence_limit}")


@dataclass
class CftResult:
    warped: WarpedImage
    loss_trace: list[LossReport]
    final_params_digest: str
    elapsed: float
    checkpoints: list[tuple[int, torch.Tensor]] = field(default_factory=list)


def _pair_loss(xs, xt, ws, wt, perceptual, cfg: CftConfig, iteration: int):
    fs = extract_features(xs, ws)
    ft = extract_features(xt, wt)
    m = correlation_matrix(centralize(fs), centralize(ft))
    warped = warp(downsample_to(xt, ft), m, cfg.alpha)
    r_up = resize_image(warped.data, xs.shape[0], xs.shape[1])
    fwarp = extract_features(r_up, wt)
    l_cont = contrastive_loss(fs, fwarp, cfg.weights, seed=cfg.seed + iteration)
    l_perc = perceptual_loss(xt, r_up, perceptual)
    l_ctx = contextual_loss(xt, r_up, perceptual, bandwidth=cfg.context_bandwidth)
    total, report = total_loss(l_cont, l_perc, l_ctx, cfg.weights, iteration=iteration)
    return total, report, warped


def fine_tune(
    source: torch.Tensor,
    target: torch.Tensor,
    backbone: BackboneSpec,
    cfg: CftConfig,
    working_resolution: int = 256,
    log_sink=None,
) -> CftResult:
    """Optimize the encoder pair on one image pair; return the final warp.

    Inputs are resized to ``working_resolution`` first. The returned warp
    is recomputed from the original (non-augmented) pair under the final
    parameters and lives at feature resolution; ``log_sink``, when given,
    receives one record dict per iteration.
    """
    start = time.perf_counter()
    source = resize_image(as_image(source), working_resolution, working_resolution)
    target = resize_image(as_image(target), working_resolution, working_resolution)

    ws = build_backbone(backbone)
    wt = build_backbone(backbone)
    perceptual = frozen_copy(build_backbone(backbone))
    params = list(ws.parameters()) + list(wt.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))

    trace: list[LossReport] = []
    checkpoints: list[tuple[int, torch.Tensor]] = []
    last_finite: LossReport | None = None
    for it in range(cfg.iterations):
        aug_source, aug_target, geo_params = sample_pair(source, target, cfg.augmentation, it)
        orig_total, report, warped = _pair_loss(source, target, ws, wt, perceptual, cfg, it)
        aug_total, _, _ = _pair_loss(aug_source, aug_target, ws, wt, perceptual, cfg, it)
        objective = orig_total + cfg.aug_pair_weight * aug_total

        value = float(objective.detach())
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss at iteration {it}; last finite report: {last_finite}"
            )
        if value > cfg.divergence_limit:
            raise NumericError(
                f"loss diverged ({value:.3e} > {cfg.divergence_limit:.0e}) at iteration {it}; "
                f"last finite report: {last_finite}"
            )
        last_finite = report
        trace.append(report)
        if log_sink is not None:
            log_sink(
                {
                    "iteration": it,
                    "contrastive": report.contrastive,
                    "perceptual": report.perceptual,
                    "contextual": report.contextual,
                    "total": report.total,
                    "augment": geo_params,
                }
            )
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoints.append((it, warped.data.detach().clone()))

        optimizer.zero_grad()
        objective.backward()
        optimizer.step()

    with torch.no_grad():
        fs = extract_features(source, ws)
        ft = extract_features(target, wt)
        m = correlation_matrix(centralize(fs), centralize(ft))
        final_warp = warp(downsample_to(target, ft), m, cfg.alpha)

    digest = content_digest([p.detach() for p in params])
    return CftResult(
        warped=final_warp,
        loss_trace=trace,
        final_params_digest=digest,
        elapsed=time.perf_counter() - start,
        checkpoints=checkpoints,
    )
