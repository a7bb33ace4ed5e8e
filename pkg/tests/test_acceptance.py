"""Acceptance criteria, each checked at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py``; a one-line verdict per
criterion is printed in the terminal summary. The session trains the default
source model once (a few minutes on one core) and reuses it throughout.
"""

from __future__ import annotations

import statistics
import time

import pytest

from conftest import record_criterion
from grad_cases import END_TO_END_TOL, GRAD_CASES, OP_TOL, end_to_end_gradcheck, run_case
from tta_bench.config import RunConfig, load_train_test
from tta_bench.corruptions import CorruptionSpec, specs_from
from tta_bench.data import generate_synthshapes
from tta_bench.evaluation import Cell, accuracy, run_grid
from tta_bench.methods import METHOD_IDS, METHODS, UPDATE_SETS, AdaptConfig, run_periodic_adaptation
from tta_bench.model import build_model, parameter_diff, pretrain_source
from tta_bench.profiler import profile_methods
from tta_bench.scenarios import make_target_domain, scenario1, scenario2, scenario4
from tta_bench.tensor import counting

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture(scope="module")
def world():
    cfg = RunConfig()
    train, test = load_train_test(cfg.dataset)
    m = cfg.model
    history: list[float] = []
    t0 = time.perf_counter()
    source = pretrain_source(build_model(m.arch, 10, m.init_seed), train, m.epochs, m.lr, m.train_seed, m.batch_size, m.momentum, history)
    train_s = time.perf_counter() - t0
    d_t = make_target_domain(test, specs_from([tuple(p) for p in cfg.scenario.corruption]), cfg.scenario.domain_seed)
    return {"cfg": cfg, "source": source, "test": test, "d_t": d_t, "history": history, "train_s": train_s}


def medians(records, method, param, key="d_t", field="gains"):
    vals = [r.gains[key] if field == "gains" else r.metrics[key]["xi"] for r in records
            if r.method == method and r.param == param and not r.failed]
    return statistics.median(vals), len(vals)


# 1 ------------------------------------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst_op = max(run_case(name) for name in GRAD_CASES)
    worst_e2e = max(end_to_end_gradcheck(8, seed) for seed in (0, 1, 2))
    elapsed = time.perf_counter() - t0
    ok = worst_op < OP_TOL and worst_e2e < END_TO_END_TOL and elapsed < 60
    record_criterion(1, ok, f"{len(GRAD_CASES)} op checks max rel err {worst_op:.2e} (<1e-4), end-to-end {worst_e2e:.2e} (<1e-3), {elapsed:.1f}s")
    assert ok


# 2 ------------------------------------------------------------------------------------

def test_c02_source_competence(world):
    clean = accuracy(world["source"], world["test"], "clean").xi
    h = world["history"]
    decreasing = h[0] > h[1] > h[2]
    ok = clean >= 0.90 and world["train_s"] <= 300 and decreasing
    record_criterion(2, ok, f"clean accuracy {clean:.4f} (>=0.90), training {world['train_s']:.0f}s (<=300s), first losses {h[0]:.3f}>{h[1]:.3f}>{h[2]:.3f}")
    assert ok


# 3 ------------------------------------------------------------------------------------

def test_c03_shift_hurts(world):
    clean = accuracy(world["source"], world["test"], "clean").xi
    shifted = accuracy(world["source"], world["d_t"]).xi
    ok = shifted <= clean - 0.20
    record_criterion(3, ok, f"gaussian_noise@5 accuracy {shifted:.4f} vs clean {clean:.4f} (drop {clean - shifted:.4f} >= 0.20)")
    assert ok


# 4 and 11 share the scenario-1 grid -----------------------------------------------------

@pytest.fixture(scope="module")
def s1_grid(world):
    d_t = world["d_t"]
    cells = [Cell("s1", str(n), lambda seed, n=n: scenario1(d_t, n, seed)) for n in (64, 2048)]
    t0 = time.perf_counter()
    records, rows = run_grid(cells, ["tent", "shot"], world["source"], AdaptConfig(), SEEDS, trace=False)
    return records, rows, time.perf_counter() - t0


def test_c04_scenario1_trend(s1_grid):
    records, _, elapsed = s1_grid
    g = {(m, n): medians(records, m, str(n))[0] for m in ("tent", "shot") for n in (64, 2048)}
    ok = (g["tent", 2048] >= g["tent", 64] and g["shot", 2048] >= g["shot", 64]
          and g["shot", 2048] >= 1.3 and elapsed <= 1200)
    record_criterion(4, ok, (f"median gain tent 64->2048 {g['tent', 64]:.3f}->{g['tent', 2048]:.3f}, "
                             f"shot {g['shot', 64]:.3f}->{g['shot', 2048]:.3f} (>=1.3), {elapsed:.0f}s"))
    assert ok


def test_c11_entropy_descent(s1_grid):
    records, _, _ = s1_grid
    tent = [r for r in records if r.method == "tent" and r.param == "2048"]
    lower = sum(r.metrics["delta_t"]["mean_entropy"] < r.source_metrics["delta_t"]["mean_entropy"] for r in tent)
    ok = len(tent) == 5 and lower >= 4
    detail = ", ".join(f"{r.source_metrics['delta_t']['mean_entropy']:.3f}->{r.metrics['delta_t']['mean_entropy']:.3f}" for r in tent)
    record_criterion(11, ok, f"TENT lowers mean entropy on the adaptation set in {lower}/5 seeds ({detail})")
    assert ok


# 5 ------------------------------------------------------------------------------------

def test_c05_small_data_failure_mode(world):
    d_t = world["d_t"]
    cells = [Cell("s1", "32", lambda seed: scenario1(d_t, 32, seed))]
    records, _ = run_grid(cells, list(METHOD_IDS), world["source"], AdaptConfig(), SEEDS, trace=False)
    g = {m: medians(records, m, "32")[0] for m in METHOD_IDS}
    ok = all(v <= 1.10 for v in g.values())
    record_criterion(5, ok, "median gains at |adaptation set|=32: " + ", ".join(f"{m} {v:.3f}" for m, v in sorted(g.items())) + " (all <=1.10)")
    assert ok


# 6 ------------------------------------------------------------------------------------

def test_c06_scenario2_generalization(world):
    d_t = world["d_t"]
    s = world["cfg"].scenario
    cells = [Cell("s2", "2", lambda seed: scenario2(d_t, 2, s.class_draw(), s.split_seed))]
    records, _ = run_grid(cells, ["shot"], world["source"], AdaptConfig(), SEEDS, trace=False)
    adapted = statistics.median(r.metrics["delta_ood"]["xi"] for r in records)
    src = records[0].source_metrics["delta_ood"]["xi"]
    ok = adapted > src and len(records) == 5
    record_criterion(6, ok, f"k=2: SHOT median accuracy on the OOD set {adapted:.4f} > source {src:.4f} (gain {adapted / src:.3f})")
    assert ok


# 7 ------------------------------------------------------------------------------------

def test_c07_scenario4_degradation(world):
    clean = generate_synthshapes(10, 100, seed=2)
    frost, fog, snow = (CorruptionSpec(t, 5) for t in ("frost", "fog", "snow"))
    stacks = {"frost": [frost], "fog": [fog], "snow": [snow], "frost+fog": [frost, fog], "frost+fog+snow": [frost, fog, snow]}
    records = []
    for key, stack in stacks.items():
        d_t = make_target_domain(clean, stack, 11)
        cell = Cell("s4", key, lambda seed, stack=stack, d_t=d_t: scenario4(clean, stack, 512, seed, 11, d_t))
        # the two-deep prefix only enters the SHOT chain
        methods = ["shot"] if key == "frost+fog" else list(METHOD_IDS)
        records += run_grid([cell], methods, world["source"], AdaptConfig(), SEEDS, trace=False)[0]
    med = {(r.method, r.param): medians(records, r.method, r.param, field="xi")[0] for r in records}
    trip = "frost+fog+snow"
    below = {m: all(med[m, trip] <= med[m, k] for k in ("frost", "fog", "snow")) for m in METHOD_IDS}
    chain = [med["shot", "frost"], med["shot", "frost+fog"], med["shot", trip]]
    monotone = chain[0] >= chain[1] >= chain[2]
    ok = all(below.values()) and monotone
    detail = ", ".join(f"{m} {min(med[m, k] for k in ('frost', 'fog', 'snow')):.3f}>={med[m, trip]:.3f}" for m in METHOD_IDS)
    record_criterion(7, ok, f"triplet <= singletons ({detail}); SHOT 1->2->3 {chain[0]:.3f}>={chain[1]:.3f}>={chain[2]:.3f}")
    assert ok


# 8 ------------------------------------------------------------------------------------

def test_c08_update_set_contracts(world):
    t0 = time.perf_counter()
    split = scenario1(world["d_t"], 256, seed=1)
    source = world["source"]
    changed = {}
    for m in METHOD_IDS:
        adapted = METHODS[m](source, split.delta_t, AdaptConfig(seed=1))
        changed[m] = {source.param_group(p) for p in parameter_diff(source, adapted)}
    elapsed = time.perf_counter() - t0
    ok = all(changed[m] == UPDATE_SETS[m] for m in METHOD_IDS) and elapsed < 60
    record_criterion(8, ok, "; ".join(f"{m}: {sorted(changed[m]) or '-'}" for m in METHOD_IDS) + f" ({elapsed:.1f}s)")
    assert ok


# 9 ------------------------------------------------------------------------------------

def test_c09_protocol_fidelity(world, tmp_path):
    source, d_t = world["source"], world["d_t"]
    split = scenario1(d_t, 512, seed=1)
    cfg = AdaptConfig(seed=1)
    probe = d_t.images[:500]
    checks = {}
    for m in METHOD_IDS:
        in_memory = METHODS[m](source, split.delta_t, cfg)
        outcome = run_periodic_adaptation(m, source, split, cfg, tmp_path)
        checks[m] = in_memory.predict_logits(probe).tobytes() == outcome.model.predict_logits(probe).tobytes()
    round_trip = all(checks.values())

    before = source.digest()
    a, b = accuracy(source, d_t), accuracy(source, d_t)
    pure = source.digest() == before and a == b

    with counting() as c:
        METHODS["tent"](source, split.delta_t, cfg)
    batches_ok = c.batch_sizes == [64] * 8

    cell = Cell("s1", "64", lambda seed: scenario1(d_t, 64, seed))
    _, rows = run_grid([cell], ["none"], source, cfg, SEEDS, tmp_path / "grid", trace=False)
    five = rows[0]["seed_count"] == 5
    ok = round_trip and pure and batches_ok and five
    record_criterion(9, ok, f"reload==in-memory logits for all methods: {round_trip}; eval pure: {pure}; batches of 64: {batches_ok}; 5-seed medians: {five}")
    assert ok


# 10 -----------------------------------------------------------------------------------

def test_c10_profiler_ordering(world, tmp_path):
    cfg = world["cfg"]
    split = scenario1(world["d_t"], cfg.profile.size, cfg.profile.seed)
    adapt = AdaptConfig(seed=cfg.profile.seed)
    first = profile_methods(list(METHOD_IDS), world["source"], split, adapt, tmp_path)
    second = profile_methods(list(METHOD_IDS), world["source"], split, adapt, tmp_path)
    rel = {r.method: r.relative_peak for r in first}
    deterministic = [(r.method, r.peak_bytes) for r in first] == [(r.method, r.peak_bytes) for r in second]
    ok = (rel["none"] == 1.0 and rel["t3a"] < rel["tent"] and rel["t3a"] < rel["shot"]
          and all(rel[m] > 1.0 for m in ("tent", "sar", "shot")) and deterministic)
    record_criterion(10, ok, "relative peaks " + ", ".join(f"{m} {v:.3f}" for m, v in sorted(rel.items())) + f"; repeat identical: {deterministic}")
    assert ok


# method ordering at a mid-sized adaptation set (not a numbered criterion) ------------------

def test_shot_beats_tent_at_512(world):
    d_t = world["d_t"]
    cells = [Cell("s1", "512", lambda seed: scenario1(d_t, 512, seed))]
    records, _ = run_grid(cells, ["tent", "shot"], world["source"], AdaptConfig(), SEEDS, trace=False)
    shot, tent = medians(records, "shot", "512")[0], medians(records, "tent", "512")[0]
    print(f"median gain at 512: shot {shot:.4f}, tent {tent:.4f}")
    assert shot > tent
