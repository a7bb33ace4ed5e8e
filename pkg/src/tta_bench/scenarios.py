"""Target-domain construction and the four adaptation-data samplers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corruptions import CorruptionSpec, compose, stack_label
from .data import AdaptationSet, LabeledDataset, concat, image_seed
from .seeding import rng

DEFAULT_S1_SIZES = tuple(2 ** i for i in range(14))   # 1 .. 8192
FULL_SCALE_PER_CLASS = 960
FULL_SCALE_PER_DOMAIN = 960
DEFAULT_SCALE = 0.2


def scaled(count: int, scale: float) -> int:
    return max(1, int(round(count * scale)))


@dataclass
class ScenarioSplit:
    delta_t: AdaptationSet
    d_t: LabeledDataset
    delta_ood: AdaptationSet | None = None
    descriptor: dict = field(default_factory=dict)


def make_target_domain(source: LabeledDataset, specs: Sequence[CorruptionSpec], seed: int) -> LabeledDataset:
    """Corrupt every image of ``source`` with the stack ``specs``; labels are copied."""
    if not specs:
        raise ValueError("make_target_domain needs at least one corruption")
    specs = list(specs)
    images = np.stack([compose(img, specs, image_seed(seed, i)) for i, img in enumerate(source.images)])
    tags = np.full(len(source), stack_label(specs), dtype=object)
    return LabeledDataset(images, source.labels.copy(), tags, source.class_count)


def _choose(n: int, size: int, seed: int, *path) -> np.ndarray:
    return np.sort(rng(seed, *path).choice(n, size, replace=False))


def scenario1(d_t: LabeledDataset, size: int, seed: int) -> ScenarioSplit:
    if not 1 <= size <= len(d_t):
        raise ValueError(f"size must be in [1, {len(d_t)}], got {size}")
    idx = _choose(len(d_t), size, seed, "s1")
    return ScenarioSplit(AdaptationSet(d_t, idx), d_t, None, {"scenario": "s1", "size": size, "seed": seed})


def scenario2(d_t: LabeledDataset, k: int, per_class: int, seed: int) -> ScenarioSplit:
    """``per_class`` samples from each of ``k`` seed-chosen categories; the rest is out-of-distribution."""
    cats_all = sorted(d_t.category_set)
    if not 1 <= k < len(cats_all):
        raise ValueError(f"k must be in [1, {len(cats_all) - 1}], got {k}")
    cats = sorted(int(c) for c in rng(seed, "s2", "categories").choice(cats_all, k, replace=False))
    chosen = []
    for c in cats:
        pool = np.flatnonzero(d_t.labels == c)
        if len(pool) < per_class:
            raise ValueError(f"class {c} has {len(pool)} samples, {per_class} requested")
        chosen.append(pool[_choose(len(pool), per_class, seed, "s2", "samples", c)])
    ood = np.flatnonzero(~np.isin(d_t.labels, cats))
    desc = {"scenario": "s2", "k": k, "per_class": per_class, "categories": cats, "seed": seed}
    return ScenarioSplit(AdaptationSet(d_t, np.concatenate(chosen)), d_t, AdaptationSet(d_t, ood), desc)


def scenario3(domains: Sequence[LabeledDataset], k: int, per_domain: int, seed: int) -> ScenarioSplit:
    """Pool ``per_domain`` samples from each of ``k`` seed-chosen domains; unchosen domains are out-of-distribution."""
    if not 1 <= k <= len(domains):
        raise ValueError(f"k must be in [1, {len(domains)}], got {k}")
    tags = [next(iter(d.domain_set)) for d in domains]
    if any(len(d.domain_set) != 1 for d in domains) or len(set(tags)) != len(tags):
        raise ValueError("each domain dataset must carry exactly one distinct domain tag")
    d_t = concat(domains)
    offsets = np.cumsum([0] + [len(d) for d in domains])
    picked = sorted(int(i) for i in rng(seed, "s3", "domains").choice(len(domains), k, replace=False))
    chosen, ood = [], []
    for i, dom in enumerate(domains):
        if i in picked:
            if per_domain > len(dom):
                raise ValueError(f"domain {tags[i]} has {len(dom)} samples, {per_domain} requested")
            chosen.append(offsets[i] + _choose(len(dom), per_domain, seed, "s3", "samples", tags[i]))
        else:
            ood.append(np.arange(offsets[i], offsets[i + 1]))
    ood_idx = np.concatenate(ood) if ood else np.zeros(0, dtype=np.intp)
    desc = {"scenario": "s3", "k": k, "per_domain": per_domain, "domains": [tags[i] for i in picked], "seed": seed}
    return ScenarioSplit(AdaptationSet(d_t, np.concatenate(chosen)), d_t, AdaptationSet(d_t, ood_idx), desc)


def scenario4(
    source: LabeledDataset,
    stack: Sequence[CorruptionSpec],
    n: int,
    seed: int,
    domain_seed: int | None = None,
    d_t: LabeledDataset | None = None,
) -> ScenarioSplit:
    """Adaptation and test data both follow the full corruption stack.

    ``d_t`` may be passed pre-built (it must equal
    ``make_target_domain(source, stack, domain_seed)``) to reuse work across seeds.
    """
    if d_t is None:
        d_t = make_target_domain(source, stack, seed if domain_seed is None else domain_seed)
    split = scenario1(d_t, n, seed)
    split.descriptor = {"scenario": "s4", "stack": stack_label(stack), "depth": len(stack), "n": n, "seed": seed}
    return split
