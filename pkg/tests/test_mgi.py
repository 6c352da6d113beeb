"""Multi-code inversion: composition algebra, inversion, and self-selection."""
import math

import pytest
import torch

from pairtune.errors import ConfigurationError, PairtuneError
from pairtune.inversion import (
    GeneratorSpec,
    HypothesisConfig,
    InversionOptConfig,
    ToyGenerator,
    build_generator,
    generate,
    guidance_distance,
    invert_hypothesis,
    run_mgi,
)
from pairtune.seeding import rng_for
from pairtune.tensors import DTYPE, content_digest, resize_image

SMALL = GeneratorSpec(latent_dim=4, layer_count=2, output_size=8, seed=1)


def _latents(seed, n, dim=4):
    return torch.as_tensor(rng_for("mgi-test", seed).standard_normal((n, dim)), dtype=DTYPE)


def test_generator_spec_validation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec(layer_count=1, output_size=4)
    with pytest.raises(ConfigurationError):
        GeneratorSpec(layer_count=3, output_size=64)  # toy 3-layer makes 16x16
    with pytest.raises(ConfigurationError):
        GeneratorSpec(kind="external-pretrained", output_size=64)
    with pytest.raises(ConfigurationError):
        GeneratorSpec(kind="elephant")


def test_generator_output_size_follows_layers():
    gen = build_generator(SMALL)
    z = _latents(0, 1)
    out = generate(gen, 1, z, torch.ones(1, 8, dtype=DTYPE))
    assert out.shape == (8, 8, 3)
    assert all(not p.requires_grad for p in gen.parameters())


def test_single_latent_unit_importance_is_plain_generation():
    gen = build_generator(SMALL)
    z = _latents(1, 1)
    out = generate(gen, 1, z, torch.ones(1, 8, dtype=DTYPE))
    with torch.no_grad():
        plain = gen.continue_from(gen.features_to(z[0], 1), 1)
    assert torch.allclose(out, plain, atol=1e-12)


def test_duplicated_latent_with_halved_importance_is_unchanged():
    gen = build_generator(SMALL)
    z = _latents(2, 1)
    single = generate(gen, 1, z, torch.ones(1, 8, dtype=DTYPE))
    doubled = generate(
        gen, 1, torch.cat([z, z]), torch.full((2, 8), 0.5, dtype=DTYPE)
    )
    assert torch.allclose(single, doubled, atol=1e-12)


def test_two_layer_composition_matches_matrix_arithmetic():
    # Hand-set weights keep every feature map spatially constant, so the
    # whole forward pass reduces to explicit matrix products (interior
    # pixels only; zero padding bends the one-pixel border).
    gen = build_generator(SMALL)
    rng = rng_for("mgi-linear-oracle", 0)
    w = torch.as_tensor(rng.normal(0, 1, (8, 4)), dtype=DTYPE)
    kernel = torch.as_tensor(rng.normal(0, 1, (3, 8, 3, 3)), dtype=DTYPE)
    with torch.no_grad():
        for c in range(8):
            for p in range(16):
                gen.stem.weight[c * 16 + p] = w[c]
        gen.stem.bias.zero_()
        gen.convs[0].weight.copy_(kernel)
        gen.convs[0].bias.zero_()

    latents = _latents(3, 2)
    importance = torch.as_tensor(rng.uniform(0.0, 1.0, (2, 8)), dtype=DTYPE)
    out = generate(gen, 1, latents, importance)

    mix = torch.zeros(8, dtype=DTYPE)
    for n in range(2):
        mix += importance[n] * (w @ latents[n])
    ksum = kernel.sum(dim=(2, 3))
    want = ksum @ mix
    interior = out[1:7, 1:7, :]
    assert float((interior - want.view(1, 1, 3)).abs().max()) <= 1e-6


def test_generate_validates_shapes():
    gen = build_generator(SMALL)
    with pytest.raises(ConfigurationError):
        generate(gen, 0, _latents(0, 1), torch.ones(1, 8, dtype=DTYPE))
    with pytest.raises(ConfigurationError):
        generate(gen, 3, _latents(0, 1), torch.ones(1, 8, dtype=DTYPE))
    with pytest.raises(ConfigurationError):
        generate(gen, 1, _latents(0, 1, dim=5), torch.ones(1, 8, dtype=DTYPE))
    with pytest.raises(ConfigurationError):
        generate(gen, 1, _latents(0, 2), torch.ones(2, 7, dtype=DTYPE))


def test_inversion_reaches_in_range_guidance():
    gen = build_generator(SMALL)
    z_true = _latents(7, 1)
    with torch.no_grad():
        clean = generate(gen, 1, z_true, torch.ones(1, 8, dtype=DTYPE))
    guidance = resize_image(clean, 4, 4)
    opt = InversionOptConfig(steps=500, learning_rate=0.1, perceptual_weight=0.0, seed=0)
    hyp = invert_hypothesis(guidance, gen, HypothesisConfig(1, 1), opt)
    assert not hyp.failed
    down = resize_image(hyp.image, 4, 4)
    assert float((down - guidance).abs().max()) <= 1e-3
    assert hyp.distance <= 1e-6


def test_zero_steps_keeps_initialization():
    gen = build_generator(SMALL)
    guidance = resize_image(
        generate(gen, 1, _latents(8, 1), torch.ones(1, 8, dtype=DTYPE)).detach(), 4, 4
    )
    opt = InversionOptConfig(steps=0, perceptual_weight=0.0, seed=3)
    hyp = invert_hypothesis(guidance, gen, HypothesisConfig(2, 2), opt)
    init = torch.as_tensor(
        rng_for("mgi-hyp", 3, 2, 2).standard_normal((2, gen.latent_dim)), dtype=DTYPE
    )
    assert torch.equal(hyp.latents, init)
    assert torch.allclose(
        hyp.channel_importance, torch.full((2, 3), 0.5, dtype=DTYPE)
    )
    with torch.no_grad():
        y = generate(gen, 2, init, hyp.channel_importance)
        want = float(guidance_distance(y, guidance, opt))
    assert hyp.distance == pytest.approx(want, rel=1e-12)


def test_inversion_replay_is_deterministic():
    gen = build_generator(SMALL)
    guidance = resize_image(
        generate(gen, 1, _latents(9, 1), torch.ones(1, 8, dtype=DTYPE)).detach(), 4, 4
    )
    opt = InversionOptConfig(steps=20, perceptual_weight=0.0, seed=4)
    a = invert_hypothesis(guidance, gen, HypothesisConfig(1, 2), opt)
    b = invert_hypothesis(guidance, gen, HypothesisConfig(1, 2), opt)
    assert torch.equal(a.latents, b.latents)
    assert a.distance == b.distance
    other = invert_hypothesis(
        guidance, gen, HypothesisConfig(1, 2),
        InversionOptConfig(steps=20, perceptual_weight=0.0, seed=5),
    )
    assert not torch.equal(a.latents, other.latents)


def test_non_finite_objective_marks_hypothesis_failed():
    gen = build_generator(SMALL)
    guidance = torch.zeros(4, 4, 3, dtype=DTYPE)
    guidance[0, 0, 0] = float("nan")
    opt = InversionOptConfig(steps=4, perceptual_weight=0.0)
    hyp = invert_hypothesis(guidance, gen, HypothesisConfig(1, 1), opt)
    assert hyp.failed
    assert "non-finite" in hyp.failure
    assert hyp.image is None and math.isinf(hyp.distance)


def test_importance_stays_non_negative():
    gen = build_generator(SMALL)
    guidance = resize_image(
        generate(gen, 1, _latents(10, 1), torch.ones(1, 8, dtype=DTYPE)).detach(), 4, 4
    )
    opt = InversionOptConfig(steps=50, learning_rate=0.2, perceptual_weight=0.0)
    hyp = invert_hypothesis(guidance, gen, HypothesisConfig(1, 4), opt)
    assert float(hyp.channel_importance.min()) >= 0.0


def _quick_grid_run(scorer, grid=None, steps=0):
    gen = build_generator(SMALL)
    guidance = torch.full((4, 4, 3), 0.5, dtype=DTYPE)
    opt = InversionOptConfig(steps=steps, perceptual_weight=0.0, seed=0)
    grid = grid or [HypothesisConfig(1, 1), HypothesisConfig(1, 2), HypothesisConfig(2, 1)]
    return run_mgi(guidance, gen, grid, fid_reference=None, opt=opt, scorer=scorer)


def test_single_entry_grid_selects_it():
    result = _quick_grid_run(lambda image: 123.0, grid=[HypothesisConfig(2, 2)])
    assert result.selected.label() == "layer2-codes2"
    assert result.selection_rule == "min-fid"


def test_stub_scores_pick_the_argmin():
    scores = iter([5.0, 2.0, 9.0])
    result = _quick_grid_run(lambda image: next(scores))
    assert result.selected.label() == "layer1-codes2"
    assert [h.fid for h in result.all_hypotheses] == [5.0, 2.0, 9.0]
    assert result.selected.fid <= min(h.fid for h in result.all_hypotheses)


def test_ties_break_toward_lower_layer_then_fewer_codes():
    result = _quick_grid_run(lambda image: 1.0)
    assert result.selected.label() == "layer1-codes1"
    assert "tie-break:composing-layer,num-latents" in result.selection_rule


def test_grid_order_does_not_change_selection():
    grid = [HypothesisConfig(1, 1), HypothesisConfig(1, 2), HypothesisConfig(2, 1)]

    def scorer(image):
        # depends only on the image, so order cannot leak in
        return float(image.abs().sum())

    forward = _quick_grid_run(scorer, grid=list(grid), steps=5)
    backward = _quick_grid_run(scorer, grid=list(reversed(grid)), steps=5)
    assert forward.selected.label() == backward.selected.label()
    by_label = lambda r: {h.label(): (h.distance, h.fid) for h in r.all_hypotheses}
    assert by_label(forward) == by_label(backward)


def test_generator_frozen_across_run():
    gen = build_generator(SMALL)
    digest = content_digest([p.detach() for p in gen.parameters()])
    guidance = torch.full((4, 4, 3), 0.25, dtype=DTYPE)
    opt = InversionOptConfig(steps=10, perceptual_weight=0.0)
    result = run_mgi(guidance, gen, [HypothesisConfig(1, 1)], None, opt, scorer=lambda i: 0.0)
    assert result.generator_digest == digest
    assert content_digest([p.detach() for p in gen.parameters()]) == digest


def test_all_failed_hypotheses_raise_with_diagnostics():
    gen = build_generator(SMALL)
    guidance = torch.zeros(4, 4, 3, dtype=DTYPE)
    guidance[0, 0, 0] = float("nan")
    opt = InversionOptConfig(steps=4, perceptual_weight=0.0)
    grid = [HypothesisConfig(1, 1), HypothesisConfig(2, 1)]
    with pytest.raises(PairtuneError, match="layer1-codes1"):
        run_mgi(guidance, gen, grid, None, opt, scorer=lambda i: 0.0)


def test_empty_grid_rejected():
    gen = build_generator(SMALL)
    with pytest.raises(ConfigurationError):
        run_mgi(torch.zeros(4, 4, 3, dtype=DTYPE), gen, [], None, InversionOptConfig())


def test_opt_config_validation():
    with pytest.raises(ConfigurationError):
        InversionOptConfig(steps=-1)
    with pytest.raises(ConfigurationError):
        InversionOptConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        InversionOptConfig(l2_weight=-1.0)
    with pytest.raises(ConfigurationError):
        HypothesisConfig(1, 0)


def test_toy_generator_seeding_is_reproducible():
    a = ToyGenerator(SMALL)
    b = ToyGenerator(SMALL)
    assert content_digest([p.detach() for p in a.parameters()]) == content_digest(
        [p.detach() for p in b.parameters()]
    )
    c = ToyGenerator(GeneratorSpec(latent_dim=4, layer_count=2, output_size=8, seed=2))
    assert content_digest([p.detach() for p in a.parameters()]) != content_digest(
        [p.detach() for p in c.parameters()]
    )
