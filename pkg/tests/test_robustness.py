import itertools

import numpy as np
import pytest

from deepstamp import dataio, robustness, stamping
from deepstamp.errors import InsufficientSamples

from conftest import random_batch, random_watermark


def test_identical_watermarks_have_zero_randomness(watermark):
    r = robustness.randomness(np.stack([watermark.rgba()] * 5))
    assert r.mean_pairwise_l2 == 0.0 and r.per_pixel_variance == 0.0 and r.n_samples == 5


def test_constant_offset_distance():
    a = np.full((4, 32, 32), 0.3, np.float32)
    r = robustness.randomness(np.stack([a, a + 0.1]))
    assert r.mean_pairwise_l2 == pytest.approx(0.1, abs=1e-6)


def test_randomness_matches_brute_force():
    planes = np.random.default_rng(0).random((6, 4, 5, 5)).astype(np.float32)
    r = robustness.randomness(planes)
    m = planes.size // 6
    dists = [
        np.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(planes[i].ravel(), planes[j].ravel())) / m)
        for i, j in itertools.combinations(range(6), 2)
    ]
    var = np.mean([np.var([float(planes[k].ravel()[e]) for k in range(6)]) for e in range(m)])
    assert r.mean_pairwise_l2 == pytest.approx(np.mean(dists), abs=1e-6)
    assert r.per_pixel_variance == pytest.approx(var, abs=1e-6)


def test_randomness_subsamples_large_batches():
    planes = np.random.default_rng(1).random((50, 4, 2, 2)).astype(np.float32)
    r = robustness.randomness(planes, max_pairs_n=20)
    assert r.n_samples == 50 and r.mean_pairwise_l2 > 0


def test_randomness_needs_two():
    with pytest.raises(InsufficientSamples):
        robustness.randomness(np.zeros((1, 4, 2, 2), np.float32))


def quantized(batch):
    return dataio.decode_cifar(dataio.encode_cifar(batch))


def test_static_attack_inverts_exactly(watermark):
    clean = quantized(random_batch(64, seed=2))
    stamped = quantized(stamping.stamp(clean, watermark, 0.5))
    est, residual = robustness.mean_estimate_attack(stamped, clean, 0.5)
    assert residual <= 1 / 255
    covered = watermark.alpha[0] > 0.5
    assert np.allclose(est.alpha[0][covered], 1.0, atol=0.02)


def test_attack_without_watermark(watermark):
    clean = random_batch(16, seed=3)
    est, residual = robustness.mean_estimate_attack(clean, clean, 0.0)
    assert np.abs(est.alpha * est.rgb).max() == pytest.approx(0.0, abs=1e-9)
    assert residual == pytest.approx(0.0, abs=1e-9)


def test_per_image_variation_raises_residual(watermark):
    clean = quantized(random_batch(64, seed=4))
    static = quantized(stamping.stamp(clean, watermark, 0.5))
    planes = np.random.default_rng(0).random((64, 4, 32, 32)).astype(np.float32)
    varied = quantized(stamping.stamp_learned(clean, planes, 0.5))
    _, r_static = robustness.mean_estimate_attack(static, clean, 0.5)
    _, r_varied = robustness.mean_estimate_attack(varied, clean, 0.5)
    assert r_varied > r_static


def test_attack_without_reference_estimates_location(watermark):
    clean = random_batch(64, seed=5)
    stamped = stamping.stamp(clean, watermark, 1.0)
    est, residual = robustness.mean_estimate_attack(stamped, None, 1.0)
    assert residual is None
    inside = est.alpha[0][watermark.alpha[0] > 0.5].mean()
    outside = est.alpha[0][watermark.alpha[0] < 0.5].mean()
    assert inside > outside


def test_attack_needs_eight_images(watermark):
    clean = random_batch(7)
    with pytest.raises(InsufficientSamples):
        robustness.mean_estimate_attack(clean, clean, 0.5)


def test_attack_is_deterministic():
    clean = random_batch(16, seed=6)
    stamped = stamping.stamp(clean, random_watermark(1), 0.7)
    a = robustness.mean_estimate_attack(stamped, clean, 0.7)
    b = robustness.mean_estimate_attack(stamped, clean, 0.7)
    assert a[1] == b[1] and np.array_equal(a[0].rgb, b[0].rgb)
