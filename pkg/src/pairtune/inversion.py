"""Stage 2: multi-code inversion of a frozen generator with self-selection.

Each hypothesis fixes a composing layer and a latent-code count, then
optimizes the codes (and their per-channel mixing weights at that layer)
so the downsampled generator output matches the warped guidance image.
Hypotheses are scored against reference statistics and the minimum-score
one wins, with a documented deterministic tie-break.
"""
from __future__ import annotations

import importlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import extract_features
from .errors import ConfigurationError, PairtuneError
from .seeding import rng_for
from .tensors import DTYPE, as_image, content_digest, resize_image

GENERATOR_KINDS = ("toy-deterministic", "external-pretrained")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "toy-deterministic"
    latent_dim: int = 16
    layer_count: int = 9
    output_size: int = 1024
    weight_source: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigurationError(
                f"generator kind must be one of {GENERATOR_KINDS}, got {self.kind!r}"
            )
        if self.layer_count < 2:
            raise ConfigurationError(f"layer-count must be >= 2, got {self.layer_count}")
        if self.latent_dim < 1:
            raise ConfigurationError(f"latent-dim must be >= 1, got {self.latent_dim}")
        if self.kind == "toy-deterministic":
            expected = 4 * 2 ** (self.layer_count - 1)
            if self.output_size != expected:
                raise ConfigurationError(
                    f"toy generator with {self.layer_count} layers produces "
                    f"{expected}x{expected} images, config says {self.output_size}"
                )
        elif not self.weight_source:
            raise ConfigurationError("external-pretrained generator needs weight-source")


@dataclass(frozen=True)
class HypothesisConfig:
    composing_layer: int
    num_latents: int

    def __post_init__(self):
        if self.num_latents < 1:
            raise ConfigurationError(f"num-latents must be >= 1, got {self.num_latents}")


@dataclass(frozen=True)
class InversionOptConfig:
    steps: int = 300
    learning_rate: float = 0.05
    l2_weight: float = 1.0
    perceptual_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning-rate must be > 0, got {self.learning_rate}")
        if self.l2_weight < 0 or self.perceptual_weight < 0:
            raise ConfigurationError("distance weights must be non-negative")


@dataclass
class InversionHypothesis:
    composing_layer: int
    num_latents: int
    latents: torch.Tensor | None
    channel_importance: torch.Tensor | None
    image: torch.Tensor | None
    distance: float
    fid: float = math.nan
    failed: bool = False
    failure: str = ""

    def label(self) -> str:
        return f"layer{self.composing_layer}-codes{self.num_latents}"


@dataclass
class MgiResult:
    selected: InversionHypothesis
    all_hypotheses: list[InversionHypothesis]
    selection_rule: str
    generator_digest: str


class ToyGenerator(nn.Module):
    """Purely linear seeded generator: dense stem, then upsample+conv stages.

    Layer 1 maps a latent to a 4x4 feature map; each later layer doubles
    the resolution with bilinear upsampling followed by a 3x3 conv. There
    are no nonlinearities, so inversion under an L2 objective is an exact
    least-squares problem.
    """

    WIDTH = 8

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.stem = nn.Linear(spec.latent_dim, 4 * 4 * self.WIDTH)
        # all intermediate stages keep WIDTH channels; only the last maps to 3
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(self.WIDTH, 3 if i == spec.layer_count else self.WIDTH, 3, padding=1)
                for i in range(2, spec.layer_count + 1)
            ]
        )
        self.to(DTYPE)
        self._seed_weights()

    def _seed_weights(self):
        with torch.no_grad():
            rng = rng_for("toy-generator", self.spec.seed, 1)
            fan_in = self.spec.latent_dim
            self.stem.weight.copy_(
                torch.as_tensor(
                    rng.normal(0.0, fan_in**-0.5, size=tuple(self.stem.weight.shape)), dtype=DTYPE
                )
            )
            self.stem.bias.zero_()
            for i, conv in enumerate(self.convs, start=2):
                rng = rng_for("toy-generator", self.spec.seed, i)
                fan_in = conv.weight.shape[1] * 9
                conv.weight.copy_(
                    torch.as_tensor(
                        rng.normal(0.0, fan_in**-0.5, size=tuple(conv.weight.shape)), dtype=DTYPE
                    )
                )
                conv.bias.zero_()

    @property
    def layer_count(self) -> int:
        return self.spec.layer_count

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def channels_at(self, layer: int) -> int:
        if not 1 <= layer <= self.layer_count:
            raise ConfigurationError(
                f"composing-layer {layer} outside generator layer range 1..{self.layer_count}"
            )
        return 3 if layer == self.layer_count else self.WIDTH

    def features_to(self, z: torch.Tensor, layer: int) -> torch.Tensor:
        """Propagate one latent through layers 1..layer; returns 1 x C x H x W."""
        self.channels_at(layer)
        x = self.stem(z.to(DTYPE)).view(1, self.WIDTH, 4, 4)
        for i in range(2, layer + 1):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.convs[i - 2](x)
        return x

    def continue_from(self, feat: torch.Tensor, layer: int) -> torch.Tensor:
        """Propagate a composed feature map through layers layer+1..end."""
        x = feat
        for i in range(layer + 1, self.layer_count + 1):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.convs[i - 2](x)
        return x.squeeze(0).permute(1, 2, 0)


def build_generator(spec: GeneratorSpec) -> nn.Module:
    """Instantiate the generator a spec describes; weights end up frozen."""
    if spec.kind == "toy-deterministic":
        gen = ToyGenerator(spec)
    else:
        locator, _, path = spec.weight_source.partition("@")
        module_name, _, attr = locator.partition(":")
        if not module_name or not attr:
            raise ConfigurationError(
                f"weight-source must look like 'module:factory[@path]', got {spec.weight_source!r}"
            )
        try:
            factory = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot resolve generator weight-source: {exc}") from exc
        gen = factory(path or None, spec)
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen


def _resolve(gen) -> nn.Module:
    return build_generator(gen) if isinstance(gen, GeneratorSpec) else gen


def generate(gen, composing_layer: int, latents: torch.Tensor, channel_importance: torch.Tensor) -> torch.Tensor:
    """Compose per-latent features at one layer and finish the forward pass.

    ``latents`` is N x latent-dim, ``channel_importance`` N x C with C the
    channel count at the composing layer; the composed map is the
    importance-weighted sum of the per-latent feature maps, per channel.
    """
    gen = _resolve(gen)
    latents = torch.as_tensor(latents, dtype=DTYPE)
    channel_importance = torch.as_tensor(channel_importance, dtype=DTYPE)
    if latents.ndim != 2 or latents.shape[1] != gen.latent_dim:
        raise ConfigurationError(
            f"latents must be N x {gen.latent_dim}, got {tuple(latents.shape)}"
        )
    channels = gen.channels_at(composing_layer)
    if channel_importance.shape != (latents.shape[0], channels):
        raise ConfigurationError(
            f"channel-importance must be {latents.shape[0]} x {channels}, "
            f"got {tuple(channel_importance.shape)}"
        )
    composed = None
    for n in range(latents.shape[0]):
        feat = gen.features_to(latents[n], composing_layer)
        weighted = feat * channel_importance[n].view(1, channels, 1, 1)
        composed = weighted if composed is None else composed + weighted
    return gen.continue_from(composed, composing_layer)


def guidance_distance(
    image: torch.Tensor,
    guidance: torch.Tensor,
    opt: InversionOptConfig,
    perceptual=None,
    guidance_features: torch.Tensor | None = None,
) -> torch.Tensor:
    """Distance between a generator output and the guidance image.

    The output is bilinearly downsampled to the guidance size; the value
    mixes pixel MSE and, when a frozen perceptual encoder is given,
    feature-space MSE. ``guidance_features`` short-circuits re-encoding
    the constant guidance inside optimization loops.
    """
    guidance = as_image(guidance)
    down = resize_image(image, guidance.shape[0], guidance.shape[1])
    value = torch.zeros((), dtype=DTYPE)
    if opt.l2_weight > 0:
        value = value + opt.l2_weight * ((down - guidance) ** 2).mean()
    if opt.perceptual_weight > 0 and perceptual is not None:
        fd = extract_features(down.clamp(0.0, 1.0), perceptual)
        if guidance_features is None:
            guidance_features = extract_features(guidance, perceptual).data
        value = value + opt.perceptual_weight * ((fd.data - guidance_features) ** 2).mean()
    return value


def invert_hypothesis(
    guidance,
    gen,
    hyp: HypothesisConfig,
    opt: InversionOptConfig,
    perceptual=None,
) -> InversionHypothesis:
    """Optimize one hypothesis' latents and importances on the guidance.

    The generator stays frozen. A non-finite objective marks the
    hypothesis failed instead of raising, so the grid can continue.
    """
    if hasattr(guidance, "data") and not torch.is_tensor(guidance):
        guidance = guidance.data
    guidance = as_image(guidance)
    gen = _resolve(gen)
    channels = gen.channels_at(hyp.composing_layer)

    rng = rng_for("mgi-hyp", opt.seed, hyp.composing_layer, hyp.num_latents)
    latents = torch.as_tensor(
        rng.standard_normal((hyp.num_latents, gen.latent_dim)), dtype=DTYPE
    ).requires_grad_(True)
    importance = torch.full((hyp.num_latents, channels), 1.0 / hyp.num_latents, dtype=DTYPE)
    importance.requires_grad_(True)

    guidance_features = None
    if perceptual is not None and opt.perceptual_weight > 0:
        with torch.no_grad():
            guidance_features = extract_features(guidance, perceptual).data
    optimizer = torch.optim.Adam([latents, importance], lr=opt.learning_rate)
    for _ in range(opt.steps):
        optimizer.zero_grad()
        y = generate(gen, hyp.composing_layer, latents, importance)
        objective = guidance_distance(y, guidance, opt, perceptual, guidance_features)
        value = float(objective.detach())
        if not math.isfinite(value):
            return InversionHypothesis(
                composing_layer=hyp.composing_layer,
                num_latents=hyp.num_latents,
                latents=None,
                channel_importance=None,
                image=None,
                distance=math.inf,
                failed=True,
                failure=f"non-finite objective ({value})",
            )
        objective.backward()
        optimizer.step()
        with torch.no_grad():
            importance.clamp_(min=0.0)

    with torch.no_grad():
        y = generate(gen, hyp.composing_layer, latents, importance)
        distance = float(guidance_distance(y, guidance, opt, perceptual, guidance_features))
    return InversionHypothesis(
        composing_layer=hyp.composing_layer,
        num_latents=hyp.num_latents,
        latents=latents.detach().clone(),
        channel_importance=importance.detach().clone(),
        image=y.detach(),
        distance=distance,
    )


def run_mgi(
    guidance,
    gen,
    grid: list[HypothesisConfig],
    fid_reference,
    opt: InversionOptConfig,
    embed=None,
    perceptual=None,
    scorer=None,
    log_sink=None,
) -> MgiResult:
    """Invert every hypothesis, score each, pick the minimum-score one.

    ``scorer`` defaults to the reference-statistics score of the
    hypothesis image; pass a callable to substitute (tests use stubs).
    Ties break toward the lower composing layer, then fewer latents.
    """
    if not grid:
        raise ConfigurationError("hypothesis grid is empty")
    gen = _resolve(gen)
    digest_before = content_digest([p.detach() for p in gen.parameters()])
    if scorer is None:
        from .fid import fid_score

        def scorer(image):
            return fid_score([image.clamp(0.0, 1.0)], fid_reference, embed)

    hypotheses: list[InversionHypothesis] = []
    for hyp_cfg in grid:
        hyp = invert_hypothesis(guidance, gen, hyp_cfg, opt, perceptual)
        if not hyp.failed:
            hyp.fid = float(scorer(hyp.image))
        if log_sink is not None:
            log_sink(
                {
                    "hypothesis": hyp.label(),
                    "composing_layer": hyp.composing_layer,
                    "num_latents": hyp.num_latents,
                    "distance": hyp.distance,
                    "fid": hyp.fid,
                    "failed": hyp.failed,
                }
            )
        hypotheses.append(hyp)

    digest_after = content_digest([p.detach() for p in gen.parameters()])
    if digest_after != digest_before:
        raise PairtuneError("generator weights changed during inversion")

    alive = [h for h in hypotheses if not h.failed]
    if not alive:
        details = "; ".join(f"{h.label()}: {h.failure}" for h in hypotheses)
        raise PairtuneError(f"all inversion hypotheses failed ({details})")
    best_fid = min(h.fid for h in alive)
    tied = [h for h in alive if h.fid == best_fid]
    selected = min(tied, key=lambda h: (h.composing_layer, h.num_latents))
    rule = "min-fid"
    if len(tied) > 1:
        rule += ";tie-break:composing-layer,num-latents"
    return MgiResult(
        selected=selected,
        all_hypotheses=hypotheses,
        selection_rule=rule,
        generator_digest=digest_after,
    )
