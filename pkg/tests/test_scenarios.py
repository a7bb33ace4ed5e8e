from __future__ import annotations

import numpy as np
import pytest

from tta_bench.corruptions import CorruptionSpec, stack_label
from tta_bench.data import generate_synthshapes, sealed_labels
from tta_bench.scenarios import DEFAULT_S1_SIZES, make_target_domain, scaled, scenario1, scenario2, scenario3, scenario4

NOISE = [CorruptionSpec("gaussian_noise", 5)]


@pytest.fixture(scope="module")
def clean():
    return generate_synthshapes(10, 60, seed=30)


@pytest.fixture(scope="module")
def d_t(clean):
    return make_target_domain(clean, NOISE, seed=11)


@pytest.fixture(scope="module")
def domains(clean):
    taus = ("gaussian_noise", "fog", "motion_blur", "contrast", "snow")
    small = clean.subset(np.arange(100))
    return [make_target_domain(small, [CorruptionSpec(t, 5)], 11) for t in taus]


def test_target_domain_copies_labels(clean, d_t):
    np.testing.assert_array_equal(d_t.labels, clean.labels)
    assert d_t.domain_set == {stack_label(NOISE)}
    assert not np.array_equal(d_t.images, clean.images)
    with pytest.raises(ValueError):
        make_target_domain(clean, [], 0)


def test_target_domain_deterministic(clean, d_t):
    assert make_target_domain(clean.subset(range(20)), NOISE, 11).digest() == d_t.subset(range(20)).digest()


def test_s1_sizes(d_t):
    split = scenario1(d_t, 512, seed=1)
    assert len(split.delta_t) == 512
    assert len(np.unique(split.delta_t.indices)) == 512
    assert split.delta_ood is None
    full = scenario1(d_t, len(d_t), seed=1)
    assert set(full.delta_t.indices.tolist()) == set(range(len(d_t)))
    with pytest.raises(ValueError):
        scenario1(d_t, len(d_t) + 1, 0)


def test_s1_default_sweep():
    assert {64, 128, 512, 8192} <= set(DEFAULT_S1_SIZES)
    assert DEFAULT_S1_SIZES[0] == 1


def test_s1_purity(d_t):
    a, b = scenario1(d_t, 100, 3), scenario1(d_t, 100, 3)
    np.testing.assert_array_equal(a.delta_t.indices, b.delta_t.indices)
    assert not np.array_equal(a.delta_t.indices, scenario1(d_t, 100, 4).delta_t.indices)


def test_s2_category_disjointness(d_t):
    split = scenario2(d_t, 3, 50, seed=0)
    assert len(split.delta_t) == 150
    in_cats = set(sealed_labels(split.delta_t).tolist())
    ood_cats = set(sealed_labels(split.delta_ood).tolist())
    assert len(in_cats) == 3
    assert in_cats.isdisjoint(ood_cats)
    assert in_cats | ood_cats == set(range(10))
    assert len(split.delta_ood) == 7 * 60


def test_s2_full_scale_sizing_rule():
    # k categories times the per-class draw
    assert 3 * 960 == 2880
    assert scaled(960, 0.2) == 192


def test_s2_last_category_left_out(d_t):
    split = scenario2(d_t, 9, 10, seed=2)
    assert len(set(sealed_labels(split.delta_ood).tolist())) == 1
    with pytest.raises(ValueError):
        scenario2(d_t, 10, 10, seed=2)
    with pytest.raises(ValueError):
        scenario2(d_t, 2, 61, seed=2)


def test_s2_purity(d_t):
    a, b = scenario2(d_t, 2, 20, 5), scenario2(d_t, 2, 20, 5)
    np.testing.assert_array_equal(a.delta_t.indices, b.delta_t.indices)
    assert a.descriptor["categories"] == b.descriptor["categories"]


def test_s3_domain_disjointness(domains):
    split = scenario3(domains, 2, 40, seed=1)
    assert len(split.delta_t) == 80
    assert len(split.delta_t.domain_set) == 2
    assert split.delta_t.domain_set.isdisjoint(split.delta_ood.domain_set)
    assert len(split.delta_ood) == 3 * 100
    assert len(split.d_t) == 500


def test_s3_all_domains_leaves_ood_empty(domains):
    split = scenario3(domains, 5, 10, seed=1)
    assert len(split.delta_ood) == 0
    assert len(split.delta_t) == 50
    with pytest.raises(ValueError):
        scenario3(domains, 6, 10, seed=1)
    with pytest.raises(ValueError):
        scenario3(domains, 2, 101, seed=1)


def test_s3_four_domain_sizing():
    assert 4 * 960 == 3840


def test_s4_stack_domain_digest(clean):
    stack = [CorruptionSpec("brightness", 5), CorruptionSpec("zoom_blur", 5)]
    split = scenario4(clean.subset(range(80)), stack, 32, seed=1, domain_seed=11)
    assert split.delta_t.domain_set == split.d_t.domain_set == {stack_label(stack)}
    assert len(split.d_t) == 80
    assert split.descriptor["depth"] == 2


def test_s4_singleton_matches_s1(clean):
    small = clean.subset(range(50))
    s4 = scenario4(small, NOISE, 20, seed=2, domain_seed=11)
    s1 = scenario1(make_target_domain(small, NOISE, 11), 20, 2)
    np.testing.assert_array_equal(s4.delta_t.indices, s1.delta_t.indices)
    assert s4.d_t.digest() == s1.d_t.digest()
