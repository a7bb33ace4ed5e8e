"""Versioned JSON run configuration, ``--set`` overrides, validation and scenario-cell construction."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .corruptions import CORRUPTIONS, SEVERITIES, CorruptionSpec, specs_from, stack_label
from .data import LabeledDataset, generate_synthshapes, load_cifar10_binary
from .evaluation import Cell
from .methods import METHOD_IDS, AdaptConfig
from .model import ARCHS
from .scenarios import (
    DEFAULT_SCALE,
    FULL_SCALE_PER_CLASS,
    FULL_SCALE_PER_DOMAIN,
    make_target_domain,
    scaled,
    scenario1,
    scenario2,
    scenario3,
    scenario4,
)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "TTA_BENCH_OUTPUT_ROOT"
SCENARIO_IDS = ("s1", "s2", "s3", "s4")
CORPORA = ("synthshapes", "cifar10")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    corpus: str = "synthshapes"
    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 300
    train_seed: int = 1
    test_seed: int = 2
    # cifar10 binaries (data_batch_*.bin / test_batch.bin)
    train_path: str | None = None
    test_path: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None


@dataclass
class ModelConfig:
    arch: str = "smallcnn-32"
    init_seed: int = 7
    epochs: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    train_seed: int = 3
    path: str = "source.bota"


@dataclass
class ScenarioConfig:
    id: str = "s1"
    # corruption stack defining D_T for s1 and s2
    corruption: list = field(default_factory=lambda: [["gaussian_noise", 5]])
    domain_seed: int = 11
    sizes: list = field(default_factory=lambda: [32, 64, 512, 2048])
    categories: list = field(default_factory=lambda: [2, 5, 8])
    # s2/s3 draw sizes are the full-scale 960 times this factor unless set explicitly
    scale: float = DEFAULT_SCALE
    per_class: int | None = None
    split_seed: int = 0
    domains: list = field(default_factory=lambda: [["gaussian_noise", 5], ["fog", 5], ["motion_blur", 5], ["contrast", 5], ["snow", 5]])
    domain_counts: list = field(default_factory=lambda: [1, 2, 3, 4])
    per_domain: int | None = None
    stacks: list = field(default_factory=lambda: [
        [["frost", 5]], [["fog", 5]], [["snow", 5]],
        [["frost", 5], ["fog", 5]],
        [["frost", 5], ["fog", 5], ["snow", 5]],
    ])
    n: int = 512

    def class_draw(self) -> int:
        return self.per_class if self.per_class is not None else scaled(FULL_SCALE_PER_CLASS, self.scale)

    def domain_draw(self) -> int:
        return self.per_domain if self.per_domain is not None else scaled(FULL_SCALE_PER_DOMAIN, self.scale)


@dataclass
class ProfileConfig:
    # profiled runs adapt on one scenario-1 split of this size
    size: int = 512
    seed: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    methods: list = field(default_factory=lambda: list(METHOD_IDS))
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    adapt: dict = field(default_factory=dict)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    output_dir: str = "runs/default"
    # cpu time varies run to run; leave it out of the summary CSV unless asked
    summary_timing: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig.from_dict(self.adapt)

    def output_path(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
        return root / self.output_dir

    def model_path(self) -> Path:
        p = Path(self.model.path)
        return p if p.is_absolute() else self.output_path() / p


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check_stack(stack, where: str) -> list[CorruptionSpec]:
    if not isinstance(stack, list) or not stack:
        raise ConfigError(f"{where}: expected a non-empty list of [corruption, severity] pairs")
    for item in stack:
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise ConfigError(f"{where}: bad corruption entry {item!r}")
        tau, mu = item
        if tau not in CORRUPTIONS:
            raise ConfigError(f"{where}: unknown corruption {tau!r}; known: {sorted(CORRUPTIONS)}")
        if mu not in SEVERITIES:
            raise ConfigError(f"{where}: severity must be one of {list(SEVERITIES)}, got {mu!r}")
    return specs_from([tuple(i) for i in stack])


def _positive_ints(values, where: str) -> None:
    if not isinstance(values, list) or not values or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in values):
        raise ConfigError(f"{where}: expected a non-empty list of positive integers")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg.schema_version} unsupported (expected {SCHEMA_VERSION})")
    d = cfg.dataset
    if d.corpus not in CORPORA:
        raise ConfigError(f"dataset.corpus must be one of {list(CORPORA)}")
    if d.corpus == "cifar10" and not (d.train_path and d.test_path):
        raise ConfigError("dataset.corpus=cifar10 needs dataset.train_path and dataset.test_path")
    if d.corpus == "synthshapes" and not 2 <= d.classes <= 10:
        raise ConfigError("dataset.classes must be in [2, 10] for synthshapes")
    if cfg.model.arch not in ARCHS:
        raise ConfigError(f"model.arch must be one of {sorted(ARCHS)}")
    if cfg.model.epochs < 0 or cfg.model.lr <= 0 or cfg.model.batch_size < 1:
        raise ConfigError("model: epochs >= 0, lr > 0 and batch_size >= 1 required")
    if not cfg.methods:
        raise ConfigError("methods must not be empty")
    bad = [m for m in cfg.methods if m not in METHOD_IDS]
    if bad:
        raise ConfigError(f"unknown method id(s) {bad}; known: {list(METHOD_IDS)}")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError("methods must be unique")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds) or len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    try:
        cfg.adapt_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"adapt: {exc}") from exc
    s = cfg.scenario
    if not s.scale > 0:
        raise ConfigError("scenario.scale must be > 0")
    for name in ("per_class", "per_domain"):
        v = getattr(s, name)
        if v is not None and (not isinstance(v, int) or v < 1):
            raise ConfigError(f"scenario.{name} must be a positive integer or null")
    if cfg.profile.size < 1:
        raise ConfigError("profile.size must be >= 1")
    if s.id not in SCENARIO_IDS:
        raise ConfigError(f"scenario.id must be one of {list(SCENARIO_IDS)}")
    _check_stack(s.corruption, "scenario.corruption")
    if s.id == "s1":
        _positive_ints(s.sizes, "scenario.sizes")
    elif s.id == "s2":
        _positive_ints(s.categories, "scenario.categories")
    elif s.id == "s3":
        _positive_ints(s.domain_counts, "scenario.domain_counts")
        for i, dom in enumerate(s.domains):
            _check_stack([dom], f"scenario.domains[{i}]")
        if max(s.domain_counts) > len(s.domains):
            raise ConfigError("scenario.domain_counts exceeds the number of domains")
    elif s.id == "s4":
        if not s.stacks:
            raise ConfigError("scenario.stacks must not be empty")
        for i, st in enumerate(s.stacks):
            _check_stack(st, f"scenario.stacks[{i}]")
    return cfg


def from_dict(data: dict) -> RunConfig:
    try:
        cfg = _build(RunConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; values parse as JSON and fall back to plain strings."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not an object")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))


# --- data and scenario construction --------------------------------------------------------

def load_train_test(d: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if d.corpus == "synthshapes":
        return generate_synthshapes(d.classes, d.train_per_class, d.train_seed), generate_synthshapes(d.classes, d.test_per_class, d.test_seed)
    return (load_cifar10_binary(d.train_path, d.train_subset, d.train_seed),
            load_cifar10_binary(d.test_path, d.test_subset, d.test_seed))


def _with_scale(build, scale: float):
    def wrapped(seed: int):
        split = build(seed)
        split.descriptor["scale"] = scale
        return split
    return wrapped


def scenario_cells(cfg: RunConfig, clean_test: LabeledDataset) -> list[Cell]:
    """One cell per sweep value; target domains are built once and shared across seeds."""
    s = cfg.scenario
    if s.id in ("s1", "s2"):
        d_t = make_target_domain(clean_test, _check_stack(s.corruption, "scenario.corruption"), s.domain_seed)
        if s.id == "s1":
            return [Cell("s1", str(n), lambda seed, n=n: scenario1(d_t, n, seed)) for n in s.sizes]
        # the adaptation split stays fixed across repetitions; seeds only reorder batches
        return [Cell("s2", str(k), _with_scale(lambda seed, k=k: scenario2(d_t, k, s.class_draw(), s.split_seed), s.scale)) for k in s.categories]
    if s.id == "s3":
        domains = [make_target_domain(clean_test, [CorruptionSpec(t, m)], s.domain_seed) for t, m in s.domains]
        return [Cell("s3", str(k), _with_scale(lambda seed, k=k: scenario3(domains, k, s.domain_draw(), seed), s.scale)) for k in s.domain_counts]
    cells = []
    for st in s.stacks:
        specs = _check_stack(st, "scenario.stacks")
        d_t = make_target_domain(clean_test, specs, s.domain_seed)
        cells.append(Cell("s4", stack_label(specs), lambda seed, specs=specs, d_t=d_t: scenario4(clean_test, specs, s.n, seed, s.domain_seed, d_t)))
    return cells
