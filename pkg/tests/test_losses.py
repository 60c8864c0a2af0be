import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from attnsr.imaging import ShapeError
from attnsr.losses import (
    FeatureExtractor,
    LossWeights,
    discriminator_loss,
    generator_adversarial_loss,
    generator_total_loss,
    l1_loss,
    perceptual_loss,
    relativistic_map,
    total_discriminator_loss,
)
from helpers import central_difference

LN4 = 2 * math.log(2)


def scalar_sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def scalar_bce_loss(c_r: np.ndarray, c_f: np.ndarray) -> float:
    """Loop-over-pixels oracle for the discriminator objective."""
    mean_r, mean_f = float(c_r.mean()), float(c_f.mean())
    total = 0.0
    for a, b in zip(c_r.ravel(), c_f.ravel()):
        total += -math.log(scalar_sigmoid(a - mean_f)) - math.log(1.0 - scalar_sigmoid(b - mean_r))
    return total / c_r.size


# relativistic map

def test_map_equal_constants_is_half():
    c = torch.full((2, 1, 3, 3), 1.7)
    assert torch.allclose(relativistic_map(c, c), torch.full_like(c, 0.5), rtol=0, atol=1e-6)


def test_map_saturates():
    c_b = torch.randn(1, 1, 4, 4)
    out = relativistic_map(c_b.mean() + torch.full_like(c_b, 40.0), c_b)
    assert torch.allclose(out, torch.ones_like(out))


def test_map_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.normal(size=(1, 1, 2, 2)) * 3, rng.normal(size=(1, 1, 2, 2)) * 3
        out = relativistic_map(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        mean_b = sum(b.ravel()) / 4
        expected = np.array([scalar_sigmoid(x - mean_b) for x in a.ravel()]).reshape(a.shape)
        assert np.max(np.abs(out - expected)) < 1e-6


def test_map_shape_mismatch():
    with pytest.raises(ShapeError):
        relativistic_map(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4))


# adversarial losses

def test_losses_symmetric_point():
    c = torch.full((3, 1, 8, 8), -0.4, dtype=torch.float64)
    assert discriminator_loss(c, c).item() == pytest.approx(LN4, abs=1e-12)
    assert generator_adversarial_loss(c, c).item() == pytest.approx(LN4, abs=1e-12)


def test_perfect_discrimination_limit():
    c_r, c_f = torch.full((1, 1, 4, 4), 50.0), torch.full((1, 1, 4, 4), -50.0)
    assert discriminator_loss(c_r, c_f).item() < 1e-12
    assert generator_adversarial_loss(c_f, c_r).item() < 1e-12


def test_generator_wins_limit():
    c_r, c_f = torch.full((1, 1, 4, 4), -50.0), torch.full((1, 1, 4, 4), 50.0)
    assert generator_adversarial_loss(c_r, c_f).item() < 1e-12


def test_discriminator_loss_scalar_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        c_r, c_f = rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 2, 2))
        got = discriminator_loss(torch.from_numpy(c_r), torch.from_numpy(c_f)).item()
        assert got == pytest.approx(scalar_bce_loss(c_r, c_f), abs=1e-6)


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 30.0))
def test_argument_swap_identity(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(2, 1, 4, 4, generator=g) * scale
    b = torch.randn(2, 1, 4, 4, generator=g) * scale
    assert generator_adversarial_loss(a, b).item() == discriminator_loss(b, a).item()


@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 80.0))
def test_adversarial_losses_nonnegative_finite(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 1, 6, 6, generator=g) * scale
    b = torch.randn(1, 1, 6, 6, generator=g) * scale
    for value in (discriminator_loss(a, b), generator_adversarial_loss(a, b)):
        assert torch.isfinite(value) and value.item() >= 0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        discriminator_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_gradient_direction_at_symmetric_point():
    c_r = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    c_f = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    shift = torch.zeros((), dtype=torch.float64)

    def real_shifted():
        return discriminator_loss(c_r + shift, c_f)

    def fake_shifted():
        return discriminator_loss(c_r, c_f + shift)

    shift_view = shift.view(1)
    assert central_difference(real_shifted, shift_view, (0,)) < 0
    assert central_difference(fake_shifted, shift_view, (0,)) > 0


# aggregation

def test_total_discriminator_loss_default_weights():
    assert total_discriminator_loss(0.3, 0.7, LossWeights()) == pytest.approx(1.0, abs=1e-15)


def test_total_discriminator_loss_single_scale():
    w = LossWeights(lambda2=0.0)
    assert total_discriminator_loss(0.8, 123.0, w) == pytest.approx(0.8)
    assert total_discriminator_loss(0.8, None, LossWeights()) == 0.8


def test_total_discriminator_loss_weighted():
    assert total_discriminator_loss(1.0, 1.0, LossWeights(lambda1=2.0, lambda2=3.0)) == 5.0


def test_generator_total_default_weights():
    assert generator_total_loss(2.0, 1.0, 1.0, 0.5, LossWeights()) == pytest.approx(2.7, abs=1e-12)


def test_generator_total_pure_l1():
    w = LossWeights(lambda1=0.0, lambda2=0.0, perceptual_weight=0.0, adversarial_weight=0.0, eta=1.0)
    assert generator_total_loss(5.0, 7.0, 9.0, 0.25, w) == 0.25


def test_generator_total_zero_components():
    assert generator_total_loss(0.0, 0.0, 0.0, 0.0, LossWeights()) == 0.0


@given(parts=st.lists(st.floats(0, 10), min_size=4, max_size=4), index=st.integers(0, 3), k=st.floats(0, 5))
def test_generator_total_linear_in_each_component(parts, index, k):
    w = LossWeights(lambda1=0.7, lambda2=1.3, eta=0.5, perceptual_weight=2.0, adversarial_weight=0.1)
    base = generator_total_loss(*parts, w)
    scaled = list(parts)
    scaled[index] *= k
    zeroed = list(parts)
    zeroed[index] = 0.0
    rest = generator_total_loss(*zeroed, w)
    assert generator_total_loss(*scaled, w) == pytest.approx(rest + k * (base - rest), rel=1e-9, abs=1e-9)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(eta=-1.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0, 0.0, 0.0)


# perceptual / L1

def test_perceptual_identical_is_zero():
    ext = FeatureExtractor.random_pyramid(seed=1)
    x = torch.rand(1, 3, 32, 32)
    assert perceptual_loss(x, x.clone(), ext).item() == 0.0


def test_perceptual_symmetric():
    ext = FeatureExtractor.random_pyramid(seed=1)
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    assert perceptual_loss(a, b, ext).item() == perceptual_loss(b, a, ext).item()


def test_perceptual_identity_extractor_offset():
    hr = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    got = perceptual_loss(hr + 0.1, hr, FeatureExtractor.identity()).item()
    assert got == pytest.approx(0.1, abs=1e-12)


def test_perceptual_positive_for_different_images():
    ext = FeatureExtractor.random_pyramid(seed=2)
    a = torch.rand(1, 3, 32, 32)
    assert perceptual_loss(a, a.flip(-1), ext).item() > 0


def test_perceptual_shape_mismatch():
    with pytest.raises(ShapeError):
        perceptual_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16), FeatureExtractor.identity())


def test_feature_extractor_frozen_and_seeded():
    a, b = FeatureExtractor.random_pyramid(seed=5), FeatureExtractor.random_pyramid(seed=5)
    assert all(not p.requires_grad for p in a.parameters())
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    a.train()
    assert not a.training


def test_feature_extractor_gradient_reaches_input_only():
    ext = FeatureExtractor.random_pyramid(seed=0)
    sr = torch.rand(1, 3, 16, 16, requires_grad=True)
    perceptual_loss(sr, torch.rand(1, 3, 16, 16), ext).backward()
    assert sr.grad is not None and sr.grad.abs().sum() > 0
    assert all(p.grad is None for p in ext.parameters())


def test_feature_extractor_file_round_trip(tmp_path):
    ext = FeatureExtractor.random_pyramid(seed=9)
    ext.save(tmp_path / "feat.pt")
    loaded = FeatureExtractor.from_file(tmp_path / "feat.pt")
    x = torch.rand(1, 3, 16, 16)
    for fa, fb in zip(ext(x), loaded(x)):
        assert torch.equal(fa, fb)
    assert loaded.taps == ext.taps and loaded.layer_weights == ext.layer_weights


def test_l1_loss():
    a = torch.zeros(1, 3, 4, 4)
    assert l1_loss(a + 0.5, a).item() == 0.5
