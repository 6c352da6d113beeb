"""Run configuration: parsing, defaulting, validation, serialization.

The file format is YAML with kebab-case keys and an explicit schema
version. Validation collects every violation with its field path instead
of stopping at the first, so a bad file is fixable in one pass.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import yaml

from .augmentation import AugmentationSpec, GeometricSpec, PhotometricSpec
from .encoder import BackboneSpec
from .errors import ConfigValidationError, ConfigurationError
from .fid import EmbeddingSpec
from .finetune import CftConfig
from .inversion import GeneratorSpec, HypothesisConfig, InversionOptConfig
from .losses import LossWeights

SCHEMA_VERSION = 1
OUTPUT_ROOT_VAR = "PAIRTUNE_OUTPUT_ROOT"

TOY_GRID = [(1, 1), (1, 2), (1, 4), (2, 1), (2, 2), (2, 4)]
EXTERNAL_GRID = [(layer, codes) for layer in range(4, 9) for codes in (10, 20, 30, 40)]


@dataclass
class RunConfig:
    source_path: str | None = None
    target_path: str | None = None
    output_dir: str | None = None
    working_resolution: int = 256
    upsampling_factor: int = 4
    seed: int = 0
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec(kind="toy-deterministic"))
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    embed: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    fid_reference: str | None = None
    cft: CftConfig = field(default_factory=CftConfig)
    mgi_grid: tuple[HypothesisConfig, ...] = ()
    mgi_opt: InversionOptConfig = field(default_factory=InversionOptConfig)

    def resolved_output_dir(self) -> str:
        if self.output_dir:
            return self.output_dir
        return os.path.join(os.environ.get(OUTPUT_ROOT_VAR, "runs"), "latest")


class _Reader:
    """Pulls typed values out of the raw mapping, collecting errors by path."""

    def __init__(self, raw: dict, errors: list[str], prefix: str = ""):
        if not isinstance(raw, dict):
            errors.append(f"{prefix or 'config'}: expected a mapping, got {type(raw).__name__}")
            raw = {}
        self.raw = dict(raw)
        self.errors = errors
        self.prefix = prefix

    def path(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def child(self, key: str) -> "_Reader":
        value = self.raw.pop(key, {})
        if value is None:
            value = {}
        return _Reader(value, self.errors, self.path(key))

    def finish(self):
        for key in self.raw:
            self.errors.append(f"{self.path(key)}: unknown key")

    def value(self, key: str, default):
        return self.raw.pop(key, default)

    def scalar(self, key: str, default, kind, check=None, describe=""):
        value = self.raw.pop(key, default)
        if value is None:
            return default
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
            self.errors.append(
                f"{self.path(key)}: expected {kind.__name__}, got {value!r}"
            )
            return default
        if check is not None and not check(value):
            self.errors.append(f"{self.path(key)}: {describe}, got {value!r}")
            return default
        return value

    def integer(self, key, default, check=None, describe=""):
        return self.scalar(key, default, int, check, describe)

    def number(self, key, default, check=None, describe=""):
        return self.scalar(key, default, float, check, describe)

    def string(self, key, default, check=None, describe=""):
        return self.scalar(key, default, str, check, describe)


def _read_backbone(r: _Reader) -> BackboneSpec:
    kind = r.string("kind", "toy-deterministic", lambda v: v in ("toy-deterministic", "external-pretrained"), "must be toy-deterministic or external-pretrained")
    levels = r.value("levels", [1, 2, 3])
    if not isinstance(levels, list) or not levels or not all(isinstance(v, int) and v >= 1 for v in levels):
        r.errors.append(f"{r.path('levels')}: expected a non-empty list of positive integers")
        levels = [1, 2, 3]
    seed = r.integer("seed", 0)
    weight_source = r.string("weight-source", None)
    if kind == "external-pretrained" and not weight_source:
        r.errors.append(f"{r.path('weight-source')}: required for external-pretrained backbone")
        kind = "toy-deterministic"
        weight_source = None
    r.finish()
    return BackboneSpec(kind=kind, levels=tuple(levels), seed=seed, weight_source=weight_source)


def _read_generator(r: _Reader) -> GeneratorSpec:
    kind = r.string("kind", "toy-deterministic", lambda v: v in ("toy-deterministic", "external-pretrained"), "must be toy-deterministic or external-pretrained")
    latent_dim = r.integer("latent-dim", 16, lambda v: v >= 1, "must be >= 1")
    layer_count = r.integer("layer-count", 9, lambda v: v >= 2, "must be >= 2")
    default_size = 4 * 2 ** (layer_count - 1) if kind == "toy-deterministic" else 1024
    output_size = r.integer("output-size", default_size, lambda v: v >= 4, "must be >= 4")
    seed = r.integer("seed", 0)
    weight_source = r.string("weight-source", None)
    if kind == "toy-deterministic" and output_size != 4 * 2 ** (layer_count - 1):
        r.errors.append(
            f"{r.path('output-size')}: toy generator with {layer_count} layers produces "
            f"{4 * 2 ** (layer_count - 1)}, got {output_size}"
        )
        output_size = 4 * 2 ** (layer_count - 1)
    if kind == "external-pretrained" and not weight_source:
        r.errors.append(f"{r.path('weight-source')}: required for external-pretrained generator")
        kind = "toy-deterministic"
        weight_source = None
        output_size = 4 * 2 ** (layer_count - 1)
    r.finish()
    return GeneratorSpec(
        kind=kind,
        latent_dim=latent_dim,
        layer_count=layer_count,
        output_size=output_size,
        weight_source=weight_source,
        seed=seed,
    )


def _read_embed(r: _Reader) -> EmbeddingSpec:
    kind = r.string("kind", "toy-deterministic", lambda v: v in ("toy-deterministic", "external-pretrained"), "must be toy-deterministic or external-pretrained")
    output_dim = r.integer("output-dim", 16, lambda v: v >= 2, "must be >= 2")
    pooling = r.string("pooling", "spatial-mean", lambda v: v == "spatial-mean", "only spatial-mean is supported")
    seed = r.integer("seed", 0)
    weight_source = r.string("weight-source", None)
    if kind == "external-pretrained" and not weight_source:
        r.errors.append(f"{r.path('weight-source')}: required for external-pretrained embedding")
        kind = "toy-deterministic"
        weight_source = None
    r.finish()
    return EmbeddingSpec(kind=kind, output_dim=output_dim, pooling=pooling, seed=seed, weight_source=weight_source)


def _read_weights(r: _Reader) -> LossWeights:
    lambda_perc = r.number("lambda-perc", 1.0, lambda v: v >= 0, "must be >= 0")
    lambda_context = r.number("lambda-context", 1.0, lambda v: v >= 0, "must be >= 0")
    tau = r.number("tau", 0.07, lambda v: v > 0, "must be > 0")
    negatives = r.value("negatives-per-anchor", "all")
    if negatives != "all" and not (isinstance(negatives, int) and not isinstance(negatives, bool) and negatives >= 1):
        r.errors.append(f"{r.path('negatives-per-anchor')}: expected 'all' or a positive integer, got {negatives!r}")
        negatives = "all"
    r.finish()
    return LossWeights(lambda_perc=lambda_perc, lambda_context=lambda_context, tau=tau, negatives_per_anchor=negatives)


def _read_augmentation(r: _Reader, default_seed: int) -> AugmentationSpec:
    p = r.child("photometric")
    jitter = p.number("jitter-strength", 0.2, lambda v: 0 <= v <= 1, "must be in [0, 1]")
    noise = p.number("noise-sigma", 0.02, lambda v: v >= 0, "must be >= 0")
    p.finish()
    g = r.child("geometric")
    scale_range = g.value("scale-range", [0.9, 1.1])
    ok = (
        isinstance(scale_range, list)
        and len(scale_range) == 2
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in scale_range)
        and 0 < scale_range[0] <= scale_range[1]
    )
    if not ok:
        g.errors.append(f"{g.path('scale-range')}: expected [lo, hi] with 0 < lo <= hi, got {scale_range!r}")
        scale_range = [0.9, 1.1]
    affine = g.number("affine-jitter", 0.05, lambda v: v >= 0, "must be >= 0")
    g.finish()
    seed = r.integer("seed", default_seed)
    r.finish()
    return AugmentationSpec(
        photometric=PhotometricSpec(jitter_strength=jitter, noise_sigma=noise),
        geometric=GeometricSpec(scale_range=(float(scale_range[0]), float(scale_range[1])), affine_jitter=affine),
        seed=seed,
    )


def _read_cft(r: _Reader, default_seed: int) -> CftConfig:
    iterations = r.integer("iterations", 200, lambda v: v >= 1, "must be >= 1")
    learning_rate = r.number("learning-rate", 1e-4, lambda v: v > 0, "must be > 0")
    beta1 = r.number("beta1", 0.9, lambda v: 0 <= v < 1, "must be in [0, 1)")
    beta2 = r.number("beta2", 0.999, lambda v: 0 <= v < 1, "must be in [0, 1)")
    alpha = r.number("alpha", 100.0, lambda v: v > 0, "must be > 0")
    bandwidth = r.number("context-bandwidth", 0.5, lambda v: v > 0, "must be > 0")
    aug_weight = r.number("aug-pair-weight", 1.0, lambda v: v >= 0, "must be >= 0")
    divergence = r.number("divergence-limit", 1e9, lambda v: v > 0, "must be > 0")
    checkpoint = r.integer("checkpoint-every", 0, lambda v: v >= 0, "must be >= 0")
    weights = _read_weights(r.child("weights"))
    augmentation = _read_augmentation(r.child("augmentation"), default_seed)
    seed = r.integer("seed", default_seed)
    r.finish()
    return CftConfig(
        iterations=iterations,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        alpha=alpha,
        context_bandwidth=bandwidth,
        aug_pair_weight=aug_weight,
        divergence_limit=divergence,
        weights=weights,
        augmentation=augmentation,
        seed=seed,
        checkpoint_every=checkpoint,
    )


def _read_mgi(r: _Reader, generator: GeneratorSpec, default_seed: int):
    raw_grid = r.value("grid", None)
    grid: list[HypothesisConfig] = []
    if raw_grid is None:
        pairs = TOY_GRID if generator.kind == "toy-deterministic" else EXTERNAL_GRID
        grid = [HypothesisConfig(layer, codes) for layer, codes in pairs]
    elif not isinstance(raw_grid, list) or not raw_grid:
        r.errors.append(f"{r.path('grid')}: expected a non-empty list of [composing-layer, num-latents] pairs")
    else:
        for i, entry in enumerate(raw_grid):
            if (
                not isinstance(entry, list)
                or len(entry) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in entry)
            ):
                r.errors.append(f"{r.path('grid')}[{i}]: expected [composing-layer, num-latents], got {entry!r}")
                continue
            layer, codes = entry
            if not 1 <= layer <= generator.layer_count:
                r.errors.append(
                    f"{r.path('grid')}[{i}]: composing-layer {layer} outside 1..{generator.layer_count}"
                )
                continue
            if codes < 1:
                r.errors.append(f"{r.path('grid')}[{i}]: num-latents must be >= 1, got {codes}")
                continue
            grid.append(HypothesisConfig(layer, codes))
    steps = r.integer("steps", 300, lambda v: v >= 0, "must be >= 0")
    learning_rate = r.number("learning-rate", 0.05, lambda v: v > 0, "must be > 0")
    l2_weight = r.number("l2-weight", 1.0, lambda v: v >= 0, "must be >= 0")
    perceptual_weight = r.number("perceptual-weight", 1.0, lambda v: v >= 0, "must be >= 0")
    seed = r.integer("seed", default_seed)
    r.finish()
    opt = InversionOptConfig(
        steps=steps,
        learning_rate=learning_rate,
        l2_weight=l2_weight,
        perceptual_weight=perceptual_weight,
        seed=seed,
    )
    return tuple(grid), opt


def validate_config(text: str) -> RunConfig:
    """Parse config text, apply defaults, and return the resolved config.

    Raises ConfigValidationError carrying every violation as
    "field.path: message"; nothing is reported piecemeal.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"config: not valid YAML ({exc})"])
    if raw is None:
        raw = {}
    errors: list[str] = []
    r = _Reader(raw, errors)

    schema = r.integer("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        errors.append(f"schema: unsupported version {schema}, this build reads {SCHEMA_VERSION}")
    source_path = r.string("source-path", None)
    target_path = r.string("target-path", None)
    if not source_path:
        errors.append("source-path: required")
    if not target_path:
        errors.append("target-path: required")
    output_dir = r.string("output-dir", None)
    working_resolution = r.integer("working-resolution", 256, lambda v: v >= 8, "must be >= 8")
    upsampling_factor = r.integer("upsampling-factor", 4, lambda v: v >= 1, "must be >= 1")
    seed = r.integer("seed", 0)

    backbone = _read_backbone(r.child("backbone"))
    generator = _read_generator(r.child("generator"))
    embed = _read_embed(r.child("embed"))
    fid_reference = r.string("fid-reference", None)
    cft = _read_cft(r.child("cft"), seed)
    mgi_grid, mgi_opt = _read_mgi(r.child("mgi"), generator, seed)
    r.finish()

    if backbone.kind == "toy-deterministic":
        if any(lv > 3 for lv in backbone.levels):
            errors.append("backbone.levels: toy backbone has levels 1..3")
        if working_resolution % 8 != 0:
            errors.append(
                f"working-resolution: toy backbone needs a multiple of 8, got {working_resolution}"
            )
    if generator.output_size != working_resolution * upsampling_factor:
        errors.append(
            f"generator.output-size: must equal working-resolution x upsampling-factor "
            f"({working_resolution} x {upsampling_factor} = {working_resolution * upsampling_factor}), "
            f"got {generator.output_size}"
        )

    if errors:
        raise ConfigValidationError(errors)
    return RunConfig(
        source_path=source_path,
        target_path=target_path,
        output_dir=output_dir,
        working_resolution=working_resolution,
        upsampling_factor=upsampling_factor,
        seed=seed,
        backbone=backbone,
        generator=generator,
        embed=embed,
        fid_reference=fid_reference,
        cft=cft,
        mgi_grid=mgi_grid,
        mgi_opt=mgi_opt,
    )


def config_to_dict(cfg: RunConfig) -> dict:
    """The full resolved config as a plain mapping with kebab-case keys."""
    return {
        "schema": SCHEMA_VERSION,
        "source-path": cfg.source_path,
        "target-path": cfg.target_path,
        "output-dir": cfg.output_dir,
        "working-resolution": cfg.working_resolution,
        "upsampling-factor": cfg.upsampling_factor,
        "seed": cfg.seed,
        "backbone": {
            "kind": cfg.backbone.kind,
            "levels": list(cfg.backbone.levels),
            "seed": cfg.backbone.seed,
            "weight-source": cfg.backbone.weight_source,
        },
        "generator": {
            "kind": cfg.generator.kind,
            "latent-dim": cfg.generator.latent_dim,
            "layer-count": cfg.generator.layer_count,
            "output-size": cfg.generator.output_size,
            "seed": cfg.generator.seed,
            "weight-source": cfg.generator.weight_source,
        },
        "embed": {
            "kind": cfg.embed.kind,
            "output-dim": cfg.embed.output_dim,
            "pooling": cfg.embed.pooling,
            "seed": cfg.embed.seed,
            "weight-source": cfg.embed.weight_source,
        },
        "fid-reference": cfg.fid_reference,
        "cft": {
            "iterations": cfg.cft.iterations,
            "learning-rate": cfg.cft.learning_rate,
            "beta1": cfg.cft.beta1,
            "beta2": cfg.cft.beta2,
            "alpha": cfg.cft.alpha,
            "context-bandwidth": cfg.cft.context_bandwidth,
            "aug-pair-weight": cfg.cft.aug_pair_weight,
            "divergence-limit": cfg.cft.divergence_limit,
            "checkpoint-every": cfg.cft.checkpoint_every,
            "seed": cfg.cft.seed,
            "weights": {
                "lambda-perc": cfg.cft.weights.lambda_perc,
                "lambda-context": cfg.cft.weights.lambda_context,
                "tau": cfg.cft.weights.tau,
                "negatives-per-anchor": cfg.cft.weights.negatives_per_anchor,
            },
            "augmentation": {
                "photometric": {
                    "jitter-strength": cfg.cft.augmentation.photometric.jitter_strength,
                    "noise-sigma": cfg.cft.augmentation.photometric.noise_sigma,
                },
                "geometric": {
                    "scale-range": list(cfg.cft.augmentation.geometric.scale_range),
                    "affine-jitter": cfg.cft.augmentation.geometric.affine_jitter,
                },
                "seed": cfg.cft.augmentation.seed,
            },
        },
        "mgi": {
            "grid": [[h.composing_layer, h.num_latents] for h in cfg.mgi_grid],
            "steps": cfg.mgi_opt.steps,
            "learning-rate": cfg.mgi_opt.learning_rate,
            "l2-weight": cfg.mgi_opt.l2_weight,
            "perceptual-weight": cfg.mgi_opt.perceptual_weight,
            "seed": cfg.mgi_opt.seed,
        },
    }


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def apply_override(raw: dict, assignment: str) -> None:
    """Apply one dotted-path override like "cft.alpha=50" to the raw mapping."""
    path, sep, value_text = assignment.partition("=")
    if not sep or not path.strip():
        raise ConfigurationError(f"override must look like path.to.key=value, got {assignment!r}")
    try:
        value = yaml.safe_load(value_text)
    except yaml.YAMLError:
        value = value_text
    node = raw
    keys = path.strip().split(".")
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value
