"""Steady-state genetic algorithm over kernel-size genomes.

Each generation draws parent pairs by roulette wheel, recombines them with
single-point crossover and random mutation, and lets the fittest offspring
replace the weakest member (only if it is at least as fit).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, EvaluationError, StateError
from .genome import KERNEL_CHOICES, Genome, NetworkTemplate, random_genome, validate

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class GaConfig:
    population_size: int = 100
    max_generations: int = 20
    crossover_rate: float = 0.5
    mutation_probability: float = 0.2
    master_seed: int = 0
    offspring_per_generation: int = 1  # crossover pairs per generation

    def __post_init__(self):
        if self.population_size < 2:
            raise ConfigError(f"population_size must be >= 2, got {self.population_size}")
        if self.max_generations < 1:
            raise ConfigError(f"max_generations must be >= 1, got {self.max_generations}")
        if not 0 <= self.crossover_rate <= 1:
            raise ConfigError(f"crossover_rate must lie in [0, 1], got {self.crossover_rate}")
        if not 0 <= self.mutation_probability <= 1:
            raise ConfigError(f"mutation_probability must lie in [0, 1], got {self.mutation_probability}")
        if self.offspring_per_generation < 1:
            raise ConfigError("offspring_per_generation must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")


@dataclass
class Individual:
    genome: Genome
    fitness: float | None = None


@dataclass
class Population:
    members: list
    fitness_cache: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.members)

    def fitnesses(self) -> np.ndarray:
        if any(m.fitness is None for m in self.members):
            raise StateError("population has unevaluated members")
        return np.array([m.fitness for m in self.members], dtype=float)

    def best_index(self) -> int:
        return int(np.argmax(self.fitnesses()))

    def worst_index(self) -> int:
        return int(np.argmin(self.fitnesses()))


@dataclass
class SearchReport:
    generations: list
    best_genome: Genome | None
    best_fitness: float | None
    evaluations: int
    seed: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "generations": self.generations,
            "best_genome": None if self.best_genome is None else str(self.best_genome),
            "best_fitness": self.best_fitness,
            "evaluations": self.evaluations,
            "seed": self.seed,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def init_population(config: GaConfig, template: NetworkTemplate, rng: np.random.Generator) -> Population:
    return Population([Individual(random_genome(template, rng)) for _ in range(config.population_size)])


def roulette_select(population: Population, rng: np.random.Generator) -> int:
    """Pick an index with probability proportional to fitness (uniform if all are zero)."""
    fit = population.fitnesses()
    total = fit.sum()
    if total <= 0:
        return int(rng.integers(len(fit)))
    cum = np.cumsum(fit)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(i, len(fit) - 1)


def single_point_crossover(parent_a: Genome, parent_b: Genome, rng: np.random.Generator, cut: int | None = None):
    """Swap tails at a cut drawn uniformly from 1..len-1."""
    n = len(parent_a)
    if n != len(parent_b):
        raise ConfigError(f"crossover parents differ in length ({n} vs {len(parent_b)})")
    if n < 2:
        return Genome(parent_a.genes), Genome(parent_b.genes)
    k = int(rng.integers(1, n)) if cut is None else cut
    if not 1 <= k < n:
        raise ConfigError(f"cut {k} outside 1..{n - 1}")
    a, b = parent_a.genes, parent_b.genes
    return Genome(a[:k] + b[k:]), Genome(b[:k] + a[k:])


def random_mutation(genome: Genome, rng: np.random.Generator, r: int | None = None, return_count: bool = False):
    """Re-draw ``r`` distinct genes, each to one of the two other kernel sizes.

    ``r`` is drawn uniformly from 0..len inclusive unless given.
    """
    n = len(genome)
    if r is None:
        r = int(rng.integers(0, n + 1))
    genes = list(genome.genes)
    for pos in rng.choice(n, size=r, replace=False):
        others = [k for k in KERNEL_CHOICES if k != genes[pos]]
        genes[pos] = others[int(rng.integers(2))]
    out = Genome(tuple(genes))
    return (out, r) if return_count else out


def _checked_fitness(value, genome) -> float:
    try:
        f = float(value)
    except (TypeError, ValueError) as exc:
        raise EvaluationError(f"fitness for {genome} is not a number: {value!r}", genome=genome) from exc
    if not 0.0 <= f <= 1.0:
        raise EvaluationError(f"fitness {f} for {genome} outside [0, 1]", genome=genome)
    return f


def evaluate_genomes(genomes, fitness_fn, cache: dict, executor=None) -> list:
    """Fitness for each genome, consulting and filling ``cache``.

    Distinct uncached genomes are evaluated once each, in first-seen order;
    with an ``executor`` they are dispatched through ``executor.map``.
    Returns ``(fitnesses, calls)``.
    """
    todo, seen = [], set()
    for g in genomes:
        key = str(g)
        if key not in cache and key not in seen:
            seen.add(key)
            todo.append(g)
    results = executor.map(fitness_fn, todo) if executor is not None and todo else map(fitness_fn, todo)
    it = iter(results)
    for g in todo:
        try:
            value = next(it)
        except EvaluationError as exc:
            exc.genome = exc.genome if exc.genome is not None else g
            raise
        except Exception as exc:
            raise EvaluationError(f"fitness evaluation of {g} failed: {exc}", genome=g) from exc
        cache[str(g)] = _checked_fitness(value, g)
    return [cache[str(g)] for g in genomes], len(todo)


def _record(population: Population, generation: int) -> dict:
    fit = population.fitnesses()
    best = int(np.argmax(fit))
    return {
        "gen": generation,
        "best": float(fit[best]),
        "mean": float(fit.mean()),
        "min": float(fit.min()),
        "best_genome": str(population.members[best].genome),
    }


def evaluate_population(population: Population, fitness_fn, executor=None) -> int:
    pending = [m for m in population.members if m.fitness is None]
    values, calls = evaluate_genomes([m.genome for m in pending], fitness_fn, population.fitness_cache, executor)
    for m, v in zip(pending, values):
        m.fitness = v
    return calls


def step_generation(population: Population, fitness_fn, config: GaConfig, template: NetworkTemplate,
                    rng: np.random.Generator, generation: int = 0, executor=None):
    """Advance one generation in place; returns ``(record, fitness_fn_calls)``."""
    calls = evaluate_population(population, fitness_fn, executor)

    offspring = []
    for _ in range(config.offspring_per_generation):
        pa = population.members[roulette_select(population, rng)].genome
        pb = population.members[roulette_select(population, rng)].genome
        if rng.random() < config.crossover_rate:
            c1, c2 = single_point_crossover(pa, pb, rng)
        else:
            c1, c2 = Genome(pa.genes), Genome(pb.genes)
        for child in (c1, c2):
            if rng.random() < config.mutation_probability:
                child = random_mutation(child, rng)
            problems = validate(child, template)
            if problems:
                raise StateError(f"operator produced invalid genome {child}: {problems}")
            offspring.append(child)

    values, more = evaluate_genomes(offspring, fitness_fn, population.fitness_cache, executor)
    replace_worst(population, offspring, values)
    return _record(population, generation), calls + more


def replace_worst(population: Population, offspring, values) -> int | None:
    """Put the fittest offspring in place of the least fit member if it is at least as fit.

    Ties pick the lowest index on both sides. Returns the replaced index or None.
    """
    best_child = int(np.argmax(values))
    worst = population.worst_index()
    if values[best_child] < population.members[worst].fitness:
        return None
    population.members[worst] = Individual(offspring[best_child], float(values[best_child]))
    return worst


def _best_of(population: Population):
    i = population.best_index()
    return population.members[i].genome, population.members[i].fitness


def _report(population, records, evaluations, config, extra=None) -> SearchReport:
    if population is not None and all(m.fitness is not None for m in population.members):
        genome, fitness = _best_of(population)
    else:
        genome, fitness = None, None
    return SearchReport(list(records), genome, fitness, evaluations, config.master_seed, dict(extra or {}))


def _state(population, rng, records, evaluations, config, template, generation, extra) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "generation": generation,
        "ga_config": config.__dict__,
        "template_hash": template.fingerprint(),
        "rng_state": rng.bit_generator.state,
        "members": [[str(m.genome), m.fitness] for m in population.members],
        "fitness_cache": population.fitness_cache,
        "records": records,
        "evaluations": evaluations,
        "extra": extra or {},
    }


def save_checkpoint(path, state: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(state, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        with open(path) as f:
            state = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise StateError(f"cannot read checkpoint {path}: {exc}") from exc
    required = {"version", "generation", "ga_config", "template_hash", "rng_state", "members",
                "fitness_cache", "records", "evaluations"}
    missing = required - set(state)
    if missing or state["version"] != CHECKPOINT_VERSION:
        raise StateError(f"corrupt checkpoint {path} (missing {sorted(missing)})")
    return state


def run_search(config: GaConfig, template: NetworkTemplate, fitness_fn: Callable, executor=None,
               checkpoint_dir=None, on_generation=None, extra=None, _resume_state=None) -> SearchReport:
    """Run ``max_generations`` GA steps and return the report.

    With ``checkpoint_dir`` set, ``generation_XXX.json`` is written after each
    generation. ``on_generation(record)`` is called after every step; raising
    from it stops the search (the checkpoint for that step is already on disk).
    Evaluation failures re-raise as EvaluationError with ``report`` attached.
    """
    if _resume_state is None:
        rng = np.random.default_rng(config.master_seed)
        population = init_population(config, template, rng)
        records, evaluations, start = [], 0, 1
    else:
        s = _resume_state
        rng = np.random.default_rng()
        rng.bit_generator.state = s["rng_state"]
        population = Population([Individual(Genome.parse(g), f) for g, f in s["members"]],
                                dict(s["fitness_cache"]))
        records, evaluations, start = list(s["records"]), s["evaluations"], s["generation"] + 1

    for gen in range(start, config.max_generations + 1):
        try:
            record, calls = step_generation(population, fitness_fn, config, template, rng, gen, executor)
        except EvaluationError as exc:
            exc.report = _report(population, records, len(population.fitness_cache), config, extra)
            raise
        evaluations += calls
        records.append(record)
        log.info("generation %d: best %.4f mean %.4f min %.4f (%s)",
                 gen, record["best"], record["mean"], record["min"], record["best_genome"])
        if checkpoint_dir is not None:
            state = _state(population, rng, records, evaluations, config, template, gen, extra)
            save_checkpoint(os.path.join(checkpoint_dir, f"generation_{gen:03d}.json"), state)
        if on_generation is not None:
            on_generation(record)
    return _report(population, records, evaluations, config, extra)


def resume_search(state: dict, config: GaConfig, template: NetworkTemplate, fitness_fn: Callable,
                  executor=None, checkpoint_dir=None, on_generation=None, extra=None) -> SearchReport:
    """Continue a search from a loaded checkpoint state."""
    if state["template_hash"] != template.fingerprint():
        raise ConfigError("checkpoint was written for a different network template")
    if GaConfig(**state["ga_config"]) != config:
        raise ConfigError("checkpoint was written with a different GA configuration")
    return run_search(config, template, fitness_fn, executor, checkpoint_dir, on_generation,
                      extra if extra is not None else state.get("extra"), _resume_state=state)


def latest_checkpoint(checkpoint_dir):
    names = sorted(n for n in os.listdir(checkpoint_dir) if n.startswith("generation_") and n.endswith(".json"))
    return os.path.join(checkpoint_dir, names[-1]) if names else None
