import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BASE, small_space
from nas_tracksearch.cost import BUDGET_PRESETS, INFINITE_BUDGET, Budget, genome_cost
from nas_tracksearch.evaluators import SyntheticEvaluator
from nas_tracksearch.evolution import (
    CSV_FIELDS,
    BudgetExhaustedError,
    EnumerationCapError,
    EvaluationError,
    SearchConfig,
    brute_force,
    crossover,
    load_config,
    mutate,
    run_search,
    sample_feasible,
    write_history_csv,
)
from nas_tracksearch.space import FULL_SPACE, Genome, GenomeError, random_genome, validate

SIZES = np.array([len(c) for c in FULL_SPACE.gene_choices])


# -- mutation ---------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_mutation_zero_is_identity(seed):
    g = random_genome(seed)
    assert mutate(g, 0.0, np.random.default_rng(seed)) == g


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_mutation_and_crossover_stay_valid(seed, p):
    rng = np.random.default_rng(seed)
    a, b = random_genome(rng), random_genome(rng)
    assert validate(mutate(a, p, rng)) == []
    assert validate(crossover(a, b, rng)) == []
    assert validate(crossover(a, b, rng, kind="single_point")) == []


def test_full_mutation_matches_parent_at_chance_rate():
    rng = np.random.default_rng(0)
    parent = random_genome(1)
    n = 10_000
    same = np.zeros(len(SIZES))
    pv = np.array(parent.values(), dtype=object)
    for _ in range(n):
        same += np.array(mutate(parent, 1.0, rng).values(), dtype=object) == pv
    p = 1 / SIZES
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(same - n * p) < 3 * sigma)


def test_mutation_rate_changes_expected_gene_count():
    rng = np.random.default_rng(1)
    parent = random_genome(2)
    pv = np.array(parent.values(), dtype=object)
    n = 5_000
    changed = np.array([(np.array(mutate(parent, 0.1, rng).values(), dtype=object) != pv).sum()
                        for _ in range(n)])
    per_gene = 0.1 * (1 - 1 / SIZES)
    expected = per_gene.sum()
    sigma = np.sqrt((per_gene * (1 - per_gene)).sum() / n)
    assert abs(changed.mean() - expected) < 4 * sigma


# -- crossover --------------------------------------------------------------


def test_crossover_equal_parents():
    g = random_genome(3)
    assert crossover(g, g, np.random.default_rng(0)) == g


def test_crossover_genes_come_from_parents():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a, b = random_genome(rng), random_genome(rng)
        c = crossover(a, b, rng)
        assert all(x in (y, z) for x, y, z in zip(c.values(), a.values(), b.values()))


def test_crossover_source_frequency_is_half():
    rng = np.random.default_rng(5)
    a = Genome.from_values([c[0] for c in FULL_SPACE.gene_choices])
    b = Genome.from_values([c[1] for c in FULL_SPACE.gene_choices])
    n = 10_000
    from_a = np.zeros(len(SIZES))
    av = np.array(a.values(), dtype=object)
    for _ in range(n):
        from_a += np.array(crossover(a, b, rng).values(), dtype=object) == av
    assert np.all(np.abs(from_a - n / 2) < 3 * np.sqrt(n / 4) + 1)


def test_crossover_space_mismatch():
    sp = small_space()
    with pytest.raises(GenomeError):
        crossover(random_genome(11), BASE, np.random.default_rng(0), sp)


# -- feasibility sampling ---------------------------------------------------


def test_sample_feasible_infinite_budget_takes_first_proposal():
    assert sample_feasible(FULL_SPACE, INFINITE_BUDGET, np.random.default_rng(8)) == random_genome(
        np.random.default_rng(8))


@pytest.mark.parametrize("preset", ["mobile", "largeA", "largeB"])
def test_sample_feasible_presets(preset):
    budget = BUDGET_PRESETS[preset]
    g = sample_feasible(FULL_SPACE, budget, np.random.default_rng(0), 1000)
    assert budget.admits(genome_cost(g))


def test_sample_feasible_empty_region():
    with pytest.raises(BudgetExhaustedError):
        sample_feasible(FULL_SPACE, Budget(1, 1), np.random.default_rng(0), 50)


# -- search -----------------------------------------------------------------

OPEN = small_space(backbone={i: (0, 3, 5) for i in range(4)}, output_layers=(3, 7),
                   head_layers={0: ("k3", "skip")})  # 81 backbones x 2 outputs x 2 cls x 2 reg = 648


def test_search_space_size():
    assert OPEN.cardinality <= 729


def test_search_deterministic_and_jobs_invariant():
    cfg = SearchConfig(population_size=16, generations=5, parent_k=4, rng_seed=3)
    ev = SyntheticEvaluator(1)
    a, b = run_search(cfg, ev, OPEN), run_search(cfg, ev, OPEN, jobs=4)
    assert a.best == b.best and a.history == b.history and a.total_evaluations == b.total_evaluations


def test_zero_generations_returns_initial_best():
    cfg = SearchConfig(population_size=10, generations=0, parent_k=3, rng_seed=1)
    ev = SyntheticEvaluator(0)
    r = run_search(cfg, ev)
    assert r.history == []
    assert r.best_fitness == r.initial_best_fitness == max(ev(g) for g in r.evaluated)


def test_degenerate_config_only_evaluates_initial_population():
    cfg = SearchConfig(population_size=12, generations=6, parent_k=12, mutation_prob=0.0,
                       crossover_fraction=0.0, rng_seed=2)
    r = run_search(cfg, SyntheticEvaluator(0))
    init = run_search(SearchConfig(population_size=12, generations=0, parent_k=12, rng_seed=2), SyntheticEvaluator(0))
    assert {g.values() for g in r.evaluated} == {g.values() for g in init.evaluated}
    assert r.best == init.best


@pytest.mark.parametrize("preset", ["mobile", "largeA"])
def test_every_evaluated_genome_is_feasible(preset):
    budget = BUDGET_PRESETS[preset]
    seen = []

    def ev(g):
        seen.append(genome_cost(g))
        return SyntheticEvaluator(4)(g)

    r = run_search(SearchConfig(population_size=16, generations=4, parent_k=4, budget=budget), ev)
    assert seen and all(budget.admits(c) for c in seen)
    assert budget.admits(genome_cost(r.best))


def test_history_monotone_and_sized():
    cfg = SearchConfig(population_size=20, generations=8, parent_k=5, rng_seed=7)
    r = run_search(cfg, SyntheticEvaluator(2))
    assert len(r.history) == cfg.generations
    best = [h.best_fitness for h in r.history]
    assert all(x <= y for x, y in zip([r.initial_best_fitness] + best, best))
    assert r.best_fitness == best[-1]


def test_search_finds_oracle_optimum():
    ev = SyntheticEvaluator(5)
    target = brute_force(OPEN, ev)
    hits = sum(run_search(SearchConfig(rng_seed=s), ev, OPEN).best == target for s in range(5))
    assert hits >= 4


def test_evaluator_failure_carries_genome():
    def boom(g):
        raise RuntimeError("nope")

    with pytest.raises(EvaluationError) as info:
        run_search(SearchConfig(population_size=4, generations=1, parent_k=2), boom)
    assert isinstance(info.value.genome, Genome)


def test_exhaustion_in_population_fill():
    with pytest.raises(BudgetExhaustedError):
        run_search(SearchConfig(population_size=4, generations=1, parent_k=2, budget=Budget(1, 1),
                                max_rejection_tries=5), SyntheticEvaluator(0))


@pytest.mark.parametrize("kw", [dict(parent_k=100), dict(mutation_prob=1.5), dict(population_size=0),
                                dict(crossover="two_point"), dict(generations=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SearchConfig(**kw)


def test_config_json_roundtrip(tmp_path):
    cfg = SearchConfig(population_size=8, generations=3, parent_k=2, budget=BUDGET_PRESETS["mobile"])
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    (tmp_path / "inf.json").write_text(json.dumps(SearchConfig().to_dict()))
    assert load_config(tmp_path / "inf.json") == SearchConfig()


def test_history_csv(tmp_path):
    r = run_search(SearchConfig(population_size=8, generations=3, parent_k=2), SyntheticEvaluator(0))
    write_history_csv(r, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_FIELDS) and len(lines) == 4


# -- brute force ------------------------------------------------------------


def test_brute_force_single_genome():
    assert brute_force([BASE], SyntheticEvaluator(0)) == BASE


def test_brute_force_agrees_with_independent_enumeration():
    sp = small_space(backbone={2: (0, 1, 2, 3, 4, 5)}, output_layers=(0, 4, 7), head_channels=(128, 256))
    ev = SyntheticEvaluator(9)
    best_score, best = None, None
    for bb2, out, ch in itertools.product(range(6), (0, 4, 7), (128, 256)):
        vals = list(BASE.values())
        vals[24:33] = vals[15:24]  # the helper space builds both branches from cls genes
        vals[2], vals[14], vals[15], vals[24] = bb2, out, ch, ch
        g = Genome.from_values(vals)
        key = (-ev(g), genome_cost(g).macs)
        if best_score is None or key < best_score:
            best_score, best = key, g
    assert brute_force(sp, ev) == best


def test_brute_force_respects_budget():
    sp = small_space(output_layers=tuple(range(8)))
    costs = sorted(genome_cost(g).macs for g in sp.enumerate())
    budget = Budget(costs[3], float("inf"))
    best = brute_force(sp, SyntheticEvaluator(0), budget)
    assert genome_cost(best).macs <= costs[3]


def test_brute_force_cap():
    with pytest.raises(EnumerationCapError):
        brute_force(FULL_SPACE, SyntheticEvaluator(0))
