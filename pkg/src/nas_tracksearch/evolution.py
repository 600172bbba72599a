"""Constrained evolutionary search over genomes, and a brute-force oracle for reduced spaces."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .cost import BUDGET_PRESETS, INFINITE_BUDGET, Budget, Cost, genome_cost
from .space import FULL_SPACE, Genome, GenomeError, Space, encode, random_genome

log = logging.getLogger(__name__)

Evaluator = Callable[[Genome], float]
DEFAULT_ENUMERATION_CAP = 10**6


class SearchError(Exception):
    pass


class BudgetExhaustedError(SearchError):
    """No feasible genome found within the allowed number of proposals."""


class EnumerationCapError(SearchError):
    pass


class EvaluationError(SearchError):
    def __init__(self, genome: Genome, cause: BaseException):
        super().__init__(f"evaluator failed on {encode(genome)}: {cause!r}")
        self.genome = genome
        self.cause = cause


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 64
    generations: int = 40
    parent_k: int = 16
    mutation_prob: float = 0.1
    crossover_fraction: float = 0.5
    budget: Budget = INFINITE_BUDGET
    rng_seed: int = 0
    max_rejection_tries: int = 1000
    crossover: str = "uniform"

    def __post_init__(self):
        if self.population_size < 1:
            raise ValueError("population_size must be positive")
        if not 1 <= self.parent_k <= self.population_size:
            raise ValueError("parent_k must lie in [1, population_size]")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if not 0.0 <= self.crossover_fraction <= 1.0:
            raise ValueError("crossover_fraction must lie in [0, 1]")
        if self.generations < 0 or self.max_rejection_tries < 1:
            raise ValueError("generations must be >= 0 and max_rejection_tries >= 1")
        if self.crossover not in ("uniform", "single_point"):
            raise ValueError(f"unknown crossover {self.crossover!r}")

    @classmethod
    def from_dict(cls, d: dict) -> SearchConfig:
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        b = d.get("budget")
        if isinstance(b, str):
            d["budget"] = BUDGET_PRESETS[b]
        elif isinstance(b, dict):
            d["budget"] = Budget(float(b.get("flops_max", math.inf)), float(b.get("params_max", math.inf)))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = {k: (v if math.isfinite(v) else None) for k, v in d["budget"].items()}
        return {"schema_version": 1, **d}


def load_config(path: str | Path) -> SearchConfig:
    d = json.loads(Path(path).read_text())
    if isinstance(d.get("budget"), dict):
        d["budget"] = {k: (math.inf if v is None else v) for k, v in d["budget"].items()}
    return SearchConfig.from_dict(d)


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_macs: int
    best_params: int
    rejections: int


@dataclass
class SearchResult:
    best: Genome
    best_fitness: float
    history: list[GenerationStats]
    total_evaluations: int
    initial_best_fitness: float
    evaluated: list[Genome] = field(default_factory=list, repr=False)


# --------------------------------------------------------------------------
# Variation operators


def _check_in(space: Space, *genomes: Genome) -> None:
    for g in genomes:
        if not space.contains(g):
            raise GenomeError(f"genome not in the search space: {encode(g)}")


def mutate(g: Genome, p: float, rng: np.random.Generator, space: Space = FULL_SPACE) -> Genome:
    """Resample each gene uniformly from its choice set with probability ``p``."""
    _check_in(space, g)
    vals = list(g.values())
    hits = rng.random(len(vals)) < p
    for i, choices in enumerate(space.gene_choices):
        if hits[i]:
            vals[i] = choices[int(rng.integers(len(choices)))]
    return Genome.from_values(vals)


def crossover(a: Genome, b: Genome, rng: np.random.Generator, space: Space = FULL_SPACE,
              kind: str = "uniform") -> Genome:
    _check_in(space, a, b)
    va, vb = a.values(), b.values()
    if kind == "uniform":
        take_a = rng.random(len(va)) < 0.5
    elif kind == "single_point":
        cut = int(rng.integers(1, len(va)))
        take_a = np.arange(len(va)) < cut
    else:
        raise ValueError(f"unknown crossover {kind!r}")
    return Genome.from_values([x if t else y for x, y, t in zip(va, vb, take_a)])


def sample_feasible(space: Space, budget: Budget, rng: np.random.Generator, max_tries: int = 1000,
                    cost_fn: Callable[[Genome], Cost] = genome_cost) -> Genome:
    """Rejection-sample a uniformly proposed genome that satisfies ``budget``."""
    if max_tries < 1:
        raise ValueError("max_tries must be >= 1")
    for _ in range(max_tries):
        g = random_genome(rng, space)
        if budget.admits(cost_fn(g)):
            return g
    raise BudgetExhaustedError(f"no feasible genome in {max_tries} proposals under {budget}")


# --------------------------------------------------------------------------
# Search


def _rank_key(fitness: float, cost: Cost, g: Genome):
    return (-fitness, cost.macs, encode(g))


class _Scorer:
    """Memoized fitness and cost lookups; evaluations may run on a thread pool."""

    def __init__(self, evaluator: Evaluator, jobs: int = 1):
        self.evaluator = evaluator
        self.jobs = jobs
        self.fitness: dict[str, float] = {}
        self.costs: dict[str, Cost] = {}
        self.evaluated: list[Genome] = []

    def cost(self, g: Genome) -> Cost:
        k = encode(g)
        if k not in self.costs:
            self.costs[k] = genome_cost(g)
        return self.costs[k]

    def _eval_one(self, g: Genome) -> float:
        try:
            return float(self.evaluator(g))
        except Exception as exc:  # propagated with the genome attached
            raise EvaluationError(g, exc) from exc

    def score(self, genomes: list[Genome]) -> list[float]:
        todo, seen = [], set()
        for g in genomes:
            k = encode(g)
            if k not in self.fitness and k not in seen:
                seen.add(k)
                todo.append(g)
        if self.jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.jobs) as ex:
                results = list(ex.map(self._eval_one, todo))
        else:
            results = [self._eval_one(g) for g in todo]
        for g, f in zip(todo, results):
            self.fitness[encode(g)] = f
            self.evaluated.append(g)
        return [self.fitness[encode(g)] for g in genomes]

    def key(self, g: Genome):
        return _rank_key(self.fitness[encode(g)], self.cost(g), g)


def _stream(seed: int, generation: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), generation, slot])


def run_search(cfg: SearchConfig, evaluator: Evaluator, space: Space = FULL_SPACE,
               jobs: int = 1) -> SearchResult:
    """Top-k evolutionary search with crossover, mutation and budget rejection.

    Each population slot draws from its own RNG stream derived from
    ``(seed, generation, slot)``, so results do not depend on ``jobs``.
    Slot 0 of every new population carries the best genome seen so far.
    """
    scorer = _Scorer(evaluator, jobs)
    budget = cfg.budget
    pop = [sample_feasible(space, budget, _stream(cfg.rng_seed, 0, j), cfg.max_rejection_tries, scorer.cost)
           for j in range(cfg.population_size)]
    scorer.score(pop)
    best = min(pop, key=scorer.key)
    initial_best = scorer.fitness[encode(best)]
    history: list[GenerationStats] = []
    n_cross = round(cfg.crossover_fraction * cfg.population_size)

    for gen in range(1, cfg.generations + 1):
        parents = sorted(pop, key=scorer.key)[:cfg.parent_k]
        children, rejections = [], 0
        for slot in range(1, cfg.population_size):
            rng = _stream(cfg.rng_seed, gen, slot)
            for _ in range(cfg.max_rejection_tries):
                if slot <= n_cross:
                    i, j = rng.choice(len(parents), 2, replace=len(parents) < 2)
                    child = crossover(parents[i], parents[j], rng, space, cfg.crossover)
                else:
                    child = mutate(parents[int(rng.integers(len(parents)))], cfg.mutation_prob, rng, space)
                if budget.admits(scorer.cost(child)):
                    break
                rejections += 1
            else:
                raise BudgetExhaustedError(
                    f"generation {gen}: no feasible offspring in {cfg.max_rejection_tries} tries")
            children.append(child)
        pop = [best] + children
        fits = scorer.score(pop)
        best = min(pop, key=scorer.key)
        c = scorer.cost(best)
        history.append(GenerationStats(gen, scorer.fitness[encode(best)], float(np.mean(fits)),
                                       c.macs, c.params, rejections))
        log.debug("generation %d best %.6f mean %.6f rejections %d", gen,
                  history[-1].best_fitness, history[-1].mean_fitness, rejections)

    return SearchResult(best, scorer.fitness[encode(best)], history, len(scorer.fitness),
                        initial_best, scorer.evaluated)


def brute_force(space_subset: Space | Iterable[Genome], evaluator: Evaluator,
                budget: Budget = INFINITE_BUDGET, cap: int = DEFAULT_ENUMERATION_CAP) -> Genome:
    """Exact feasible argmax by enumeration, ties broken as in :func:`run_search`."""
    if isinstance(space_subset, Space):
        if space_subset.cardinality > cap:
            raise EnumerationCapError(
                f"space has {space_subset.cardinality} genomes, enumeration cap is {cap}")
        genomes: Iterable[Genome] = space_subset.enumerate()
    else:
        genomes = list(space_subset)
        if len(genomes) > cap:
            raise EnumerationCapError(f"{len(genomes)} genomes exceed enumeration cap {cap}")
    best, best_key = None, None
    for g in genomes:
        c = genome_cost(g)
        if not budget.admits(c):
            continue
        k = _rank_key(float(evaluator(g)), c, g)
        if best_key is None or k < best_key:
            best, best_key = g, k
    if best is None:
        raise BudgetExhaustedError("no feasible genome in the enumerated set")
    return best


# --------------------------------------------------------------------------
# Logs

CSV_FIELDS = ("generation", "best_fitness", "mean_fitness", "best_macs", "best_params", "rejections")


def write_history_csv(result: SearchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for h in result.history:
            w.writerow([h.generation, repr(h.best_fitness), repr(h.mean_fitness),
                        h.best_macs, h.best_params, h.rejections])
