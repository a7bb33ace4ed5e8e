from __future__ import annotations

import numpy as np
import pytest

from tta_bench.corruptions import (
    CORRUPTIONS,
    SEVERITIES,
    CorruptionSpec,
    apply_corruption,
    compose,
    default_pairs,
    default_triplets,
    psnr,
    severity_table,
    severity_table_version,
)
from tta_bench.data import generate_synthshapes

ALL_TAUS = sorted(CORRUPTIONS)


@pytest.fixture(scope="module")
def images():
    return generate_synthshapes(10, 4, seed=21).images[:32]


def test_registry_has_ten_corruptions():
    assert len(CORRUPTIONS) == 10
    assert set(severity_table()) == set(CORRUPTIONS)
    assert severity_table_version() >= 1


@pytest.mark.parametrize("tau", ALL_TAUS)
def test_strength_increases_with_severity(tau):
    values = severity_table()[tau]
    assert len(values) == 5
    assert all(a < b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("mu", SEVERITIES)
def test_gaussian_noise_std_on_mid_gray(mu):
    gray = np.full((3, 32, 32), 0.5, dtype=np.float32)
    spec = CorruptionSpec("gaussian_noise", mu)
    out = apply_corruption(gray, spec, rng_seed=mu, clamp=False)
    std = float(np.std(out.astype(np.float64) - 0.5))
    assert abs(std - spec.strength) / spec.strength < 0.05


def test_brightness_is_additive_on_interior():
    g = np.random.default_rng(0)
    img = g.uniform(0.2, 0.45, size=(3, 32, 32)).astype(np.float32)
    for mu in SEVERITIES:
        spec = CorruptionSpec("brightness", mu)
        out = apply_corruption(img, spec, 0)
        interior = img + spec.strength < 1.0
        np.testing.assert_allclose(out[interior], (img + spec.strength)[interior], atol=1e-6)


@pytest.mark.parametrize("tau", ALL_TAUS)
def test_median_psnr_decreases_with_severity(tau, images):
    med = []
    for mu in SEVERITIES:
        spec = CorruptionSpec(tau, mu)
        med.append(np.median([psnr(x, apply_corruption(x, spec, 100 + i)) for i, x in enumerate(images)]))
    assert all(a > b for a, b in zip(med, med[1:])), med


@pytest.mark.parametrize("tau", ALL_TAUS)
def test_deterministic_and_in_range(tau, images):
    spec = CorruptionSpec(tau, 5)
    a = apply_corruption(images[0], spec, 42)
    b = apply_corruption(images[0], spec, 42)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 32, 32)
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_stochastic_corruptions_depend_on_seed(images):
    for tau in ("gaussian_noise", "impulse_noise", "snow", "frost"):
        spec = CorruptionSpec(tau, 3)
        assert not np.array_equal(apply_corruption(images[1], spec, 1), apply_corruption(images[1], spec, 2))


def test_singleton_compose_matches_apply(images):
    spec = CorruptionSpec("snow", 4)
    assert compose(images[2], [spec], 9).tobytes() == apply_corruption(images[2], spec, 9).tobytes()


def test_compose_is_order_sensitive(images):
    b, z = CorruptionSpec("brightness", 5), CorruptionSpec("zoom_blur", 5)
    assert not np.allclose(compose(images[3], [b, z], 0), compose(images[3], [z, b], 0))


def test_compose_nests_left_to_right(images):
    a, b = CorruptionSpec("fog", 2), CorruptionSpec("contrast", 3)
    inner = apply_corruption(images[4], a, 5)
    # deterministic second stage, so its seed does not matter
    np.testing.assert_array_equal(compose(images[4], [a, b], 5), apply_corruption(inner, b, 0))


def test_default_stacks():
    pairs, trips = default_pairs(), default_triplets()
    assert len(pairs) == 5 and len(trips) == 5
    assert {tuple(s.tau for s in p) for p in pairs} == {
        ("brightness", "zoom_blur"), ("fog", "impulse_noise"), ("snow", "defocus_blur"),
        ("snow", "motion_blur"), ("zoom_blur", "gaussian_noise"),
    }
    assert ("frost", "fog", "snow") in {tuple(s.tau for s in t) for t in trips}
    assert all(s.mu == 5 for stack in pairs + trips for s in stack)
    assert all(len(t) == 3 for t in trips)


def test_errors():
    with pytest.raises(ValueError):
        compose(np.zeros((3, 32, 32)), [], 0)
    with pytest.raises(ValueError, match="unknown corruption"):
        CorruptionSpec("rain", 3)
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 6)
    with pytest.raises(ValueError):
        apply_corruption(np.full((3, 32, 32), 1.5), CorruptionSpec("fog", 1), 0)
