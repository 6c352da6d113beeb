"""Loss terms against high-precision and hand-computed oracles."""
import math

import mpmath
import numpy as np
import pytest
import torch

from conftest import seeded_image, seeded_volume
from pairtune.encoder import ToyBackbone
from pairtune.errors import ConfigurationError
from pairtune.losses import (
    LossReport,
    LossWeights,
    contextual_loss,
    contextual_similarity,
    contrastive_loss,
    gram_matrix,
    info_nce,
    perceptual_loss,
    total_loss,
)
from pairtune.seeding import rng_for
from pairtune.tensors import DTYPE


class _IdentityEncoder:
    """Single tap equal to the raw image, for hand-computable loss values."""

    def tap_maps(self, image):
        return [image.permute(2, 0, 1).unsqueeze(0)]


def _vec(*values):
    return torch.tensor(values, dtype=DTYPE)


def _info_nce_oracle(anchor, positive, negatives, tau):
    """Direct ratio form at 50 decimal digits."""
    with mpmath.workdps(50):
        pos = mpmath.exp(mpmath.mpf(float(anchor @ positive)) / tau)
        denom = pos
        for neg in negatives:
            denom += mpmath.exp(mpmath.mpf(float(anchor @ neg)) / tau)
        return float(-mpmath.log(pos / denom))


def test_info_nce_equal_logits_is_ln2():
    anchor = _vec(1.0, 0.0)
    # positive and negative tie, so the model is maximally unsure
    for tau in (0.07, 0.5, 1.0):
        loss = info_nce(anchor, _vec(0.3, 0.1), [_vec(0.3, 0.1)], tau)
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-12)


def test_info_nce_saturates_with_wide_margin():
    tau = 0.1
    anchor = _vec(1.0, 0.0)
    positive = _vec(60.0 * tau, 0.0)
    negative = _vec(0.0, 5.0)  # zero dot with the anchor, margin 60 tau
    assert float(info_nce(anchor, positive, [negative], tau)) < 1e-6


def test_info_nce_matches_high_precision_oracle():
    rng = rng_for("nce-oracle", 0)
    for case in range(5):
        anchor = torch.as_tensor(rng.normal(0, 1, 6), dtype=DTYPE)
        positive = torch.as_tensor(rng.normal(0, 1, 6), dtype=DTYPE)
        negatives = [torch.as_tensor(rng.normal(0, 1, 6), dtype=DTYPE) for _ in range(7)]
        for tau in (0.07, 1.0):
            got = float(info_nce(anchor, positive, negatives, tau))
            want = _info_nce_oracle(anchor, positive, negatives, tau)
            assert abs(got - want) <= 1e-9, f"case {case} tau {tau}"


def test_info_nce_validates_inputs():
    with pytest.raises(ConfigurationError):
        info_nce(_vec(1.0), _vec(1.0), [_vec(1.0)], tau=0.0)
    with pytest.raises(ConfigurationError):
        info_nce(_vec(1.0), _vec(1.0), [], tau=0.1)


def test_contrastive_orthonormal_matches_closed_form():
    # Orthonormal identical volumes: positive logit 1, every negative logit 0.
    eye = torch.eye(4, dtype=DTYPE).reshape(2, 2, 4)
    fs = seeded_volume(0, 2, 2, 4)
    fs.data = eye
    weights = LossWeights(tau=1.0)
    got = float(contrastive_loss(fs, fs, weights))
    per_anchor = -math.log(math.e / (math.e + 3.0))
    assert got == pytest.approx(4.0 * per_anchor, abs=1e-9)


def test_contrastive_matches_high_precision_oracle():
    fs = seeded_volume(40, 2, 2, 3)
    fw = seeded_volume(41, 2, 2, 3)
    tau = 0.07
    got = float(contrastive_loss(fs, fw, LossWeights(tau=tau)))
    a = fs.flat().numpy()
    b = fw.flat().numpy()
    with mpmath.workdps(50):
        want = mpmath.mpf(0)
        for i in range(4):
            denom = mpmath.mpf(0)
            for j in range(4):
                denom += mpmath.exp(mpmath.mpf(float(np.dot(a[i], b[j]))) / tau)
            pos = mpmath.exp(mpmath.mpf(float(np.dot(a[i], b[i]))) / tau)
            want -= mpmath.log(pos / denom)
        want = float(want)
    assert abs(got - want) <= 1e-8


def test_contrastive_subsampling_is_seeded():
    fs = seeded_volume(42, 4, 4, 6)
    fw = seeded_volume(43, 4, 4, 6)
    weights = LossWeights(tau=0.07, negatives_per_anchor=5)
    first = float(contrastive_loss(fs, fw, weights, seed=1))
    again = float(contrastive_loss(fs, fw, weights, seed=1))
    other = float(contrastive_loss(fs, fw, weights, seed=2))
    assert first == again
    assert first != other
    full = float(contrastive_loss(fs, fw, LossWeights(tau=0.07)))
    assert first != full


def test_contrastive_needs_two_positions():
    fs = seeded_volume(44, 1, 1, 3)
    with pytest.raises(ConfigurationError):
        contrastive_loss(fs, fs, LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(tau=-0.1)
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_perc=-1.0)
    with pytest.raises(ConfigurationError):
        LossWeights(negatives_per_anchor="half")
    with pytest.raises(ConfigurationError):
        LossWeights(negatives_per_anchor=0)


def test_gram_one_hot_activation():
    act = torch.zeros(2, 2, 2, dtype=DTYPE)
    act[0, 0, 0] = 2.0
    want = torch.tensor([[4.0, 0.0], [0.0, 0.0]], dtype=DTYPE)
    assert torch.allclose(gram_matrix(act), want)


def test_gram_duplicate_channels_give_equal_rows():
    base = torch.as_tensor(rng_for("gram-dup", 0).normal(0, 1, (3, 3)), dtype=DTYPE)
    act = torch.stack([base, base], dim=-1)
    g = gram_matrix(act)
    assert torch.allclose(g[0], g[1], atol=1e-12)
    assert float(g[0, 0]) == pytest.approx(float(g[0, 1]), abs=1e-12)


def test_gram_matches_double_loop():
    act = torch.as_tensor(rng_for("gram-oracle", 0).normal(0, 1, (3, 3, 2)), dtype=DTYPE)
    got = gram_matrix(act)
    flat = act.reshape(9, 2)
    for c in range(2):
        for cp in range(2):
            want = sum(float(flat[u, c]) * float(flat[u, cp]) for u in range(9))
            assert abs(float(got[c, cp]) - want) <= 1e-8


def test_gram_is_spatial_permutation_invariant():
    act = torch.as_tensor(rng_for("gram-perm", 0).normal(0, 1, (4, 4, 3)), dtype=DTYPE)
    perm = torch.as_tensor(rng_for("gram-perm", 1).permutation(16))
    shuffled = act.reshape(16, 3)[perm].reshape(4, 4, 3)
    assert torch.allclose(gram_matrix(act), gram_matrix(shuffled), atol=1e-10)


def test_perceptual_identity_is_zero(backbone):
    image = seeded_image(50, 16)
    assert float(perceptual_loss(image, image, backbone).detach()) <= 1e-8


def test_perceptual_matches_hand_grams():
    xt = torch.tensor(
        [[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]],
        dtype=DTYPE,
    )
    xw = torch.zeros_like(xt)
    got = float(perceptual_loss(xt, xw, _IdentityEncoder()))
    diff = gram_matrix(xt) - gram_matrix(xw)
    want = float((diff * diff).sum())
    assert got == pytest.approx(want, abs=1e-6)
    # and against a by-hand expansion of the same Gram
    flat = xt.reshape(4, 3).numpy()
    g = flat.T @ flat
    assert want == pytest.approx(float((g * g).sum()), abs=1e-6)


def test_perceptual_rejects_shape_mismatch(backbone):
    with pytest.raises(ConfigurationError):
        perceptual_loss(seeded_image(0, 16), seeded_image(0, 32), backbone)


def test_contextual_single_position_is_zero():
    image = torch.full((1, 1, 3), 0.25, dtype=DTYPE)
    other = torch.full((1, 1, 3), 0.75, dtype=DTYPE)
    loss = contextual_loss(image, other, _IdentityEncoder(), bandwidth=0.5)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_contextual_prefers_identical_layout(backbone):
    image = seeded_image(51, 16)
    perm = torch.as_tensor(rng_for("ctx-perm", 0).permutation(256))
    shuffled = image.reshape(256, 3)[perm].reshape(16, 16, 3)
    same = float(contextual_loss(image, image, backbone).detach())
    moved = float(contextual_loss(image, shuffled, backbone).detach())
    assert same < moved


def test_contextual_matches_stepwise_oracle():
    xt = seeded_image(52, 2)
    xw = seeded_image(53, 2)
    h = 0.5
    got = float(contextual_loss(xt, xw, _IdentityEncoder(), bandwidth=h))

    a = xt.reshape(4, 3).numpy()
    b = xw.reshape(4, 3).numpy()
    mu = a.mean(axis=0)
    ac, bc = a - mu, b - mu
    ac = ac / np.linalg.norm(ac, axis=1, keepdims=True)
    bc = bc / np.linalg.norm(bc, axis=1, keepdims=True)
    dist = 1.0 - ac @ bc.T
    rel = dist / (dist.min(axis=1, keepdims=True) + 1e-5)
    w = np.exp((1.0 - rel) / h)
    x = w / w.sum(axis=1, keepdims=True)
    want = -math.log(float(x.max(axis=1).sum()))
    assert got == pytest.approx(want, abs=1e-6)


def test_contextual_similarity_rows_sum_to_one():
    a = torch.as_tensor(rng_for("ctx-rows", 0).normal(0, 1, (5, 4)), dtype=DTYPE)
    b = torch.as_tensor(rng_for("ctx-rows", 1).normal(0, 1, (7, 4)), dtype=DTYPE)
    sim = contextual_similarity(a, b, bandwidth=0.5)
    assert sim.shape == (5, 7)
    assert torch.allclose(sim.sum(dim=1), torch.ones(5, dtype=DTYPE), atol=1e-12)
    assert float(sim.min()) >= 0.0


def test_contextual_rejects_bad_bandwidth(backbone):
    image = seeded_image(0, 16)
    with pytest.raises(ConfigurationError):
        contextual_loss(image, image, backbone, bandwidth=0.0)


def test_total_loss_arithmetic():
    weights = LossWeights(lambda_perc=1.0, lambda_context=1.0)
    total, report = total_loss(
        torch.tensor(1.0, dtype=DTYPE),
        torch.tensor(1.5, dtype=DTYPE),
        torch.tensor(1.0, dtype=DTYPE),
        weights,
        iteration=7,
    )
    assert float(total) == pytest.approx(3.5, abs=1e-12)
    assert isinstance(report, LossReport)
    assert report.contrastive == 1.0
    assert report.perceptual == 1.5
    assert report.contextual == 1.0
    assert report.total == pytest.approx(3.5, abs=1e-12)
    assert report.iteration == 7


def test_total_loss_applies_weights():
    weights = LossWeights(lambda_perc=2.0, lambda_context=0.5)
    rng = rng_for("total-oracle", 0)
    for _ in range(5):
        c, p, x = rng.normal(0, 1, 3)
        total, _ = total_loss(
            torch.tensor(c, dtype=DTYPE),
            torch.tensor(p, dtype=DTYPE),
            torch.tensor(x, dtype=DTYPE),
            weights,
        )
        assert float(total) == pytest.approx(c + 2.0 * p + 0.5 * x, abs=1e-12)


def test_contrastive_gradient_matches_finite_differences():
    fs = seeded_volume(60, 2, 2, 3)
    data = seeded_volume(61, 2, 2, 3).data.clone().requires_grad_(True)
    fw = seeded_volume(61, 2, 2, 3)
    fw.data = data
    weights = LossWeights(tau=0.5)
    loss = contrastive_loss(fs, fw, weights)
    loss.backward()
    h = 1e-4
    coords = [(0, 0, 0), (0, 1, 2), (1, 0, 1), (1, 1, 0), (0, 0, 2)]
    for y, x, c in coords:
        analytic = float(data.grad[y, x, c])
        with torch.no_grad():
            base = float(data[y, x, c])
            data[y, x, c] = base + h
            fw.data = data
            plus = float(contrastive_loss(fs, fw, weights))
            data[y, x, c] = base - h
            fw.data = data
            minus = float(contrastive_loss(fs, fw, weights))
            data[y, x, c] = base
            fw.data = data
        fd = (plus - minus) / (2 * h)
        rel = abs(fd - analytic) / max(abs(analytic), 1e-6)
        assert rel <= 1e-3, f"coord {(y, x, c)}: fd={fd} analytic={analytic}"


def test_image_loss_gradient_matches_finite_differences(backbone):
    xt = seeded_image(62, 8)
    xw = seeded_image(63, 8).clone().requires_grad_(True)

    def scalar():
        return perceptual_loss(xt, xw, backbone) + contextual_loss(xt, xw, backbone)

    loss = scalar()
    loss.backward()
    h = 1e-4
    coords = [(0, 0, 0), (3, 4, 1), (7, 7, 2), (2, 6, 0), (5, 1, 2)]
    for y, x, c in coords:
        analytic = float(xw.grad[y, x, c])
        with torch.no_grad():
            base = float(xw[y, x, c])
            xw[y, x, c] = base + h
            plus = float(scalar())
            xw[y, x, c] = base - h
            minus = float(scalar())
            xw[y, x, c] = base
        fd = (plus - minus) / (2 * h)
        rel = abs(fd - analytic) / max(abs(analytic), max(abs(fd), 1e-6))
        assert rel <= 1e-3, f"coord {(y, x, c)}: fd={fd} analytic={analytic}"
