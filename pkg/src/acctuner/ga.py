"""Genetic search over offload genomes.

One seeded generator drives everything in a fixed call order (initialization,
then per generation: selection, crossover, mutation), so a run is replayable
from its seed.  Measured times are cached by genome: a pattern that reappears
costs nothing to re-evaluate, which matters because good patterns reappear a
lot once the population converges.
"""

from __future__ import annotations

import bisect
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (FitnessDomainError, LengthMismatch, ZeroGeneLength)

Genome = tuple  # fixed-length tuple of 0/1 ints, position i = i-th eligible loop


def fitness(time_s: float) -> float:
    """time^(-1/2): shorter is fitter, with a soft top so one fast individual
    cannot monopolize selection."""
    if time_s <= 0:
        raise FitnessDomainError(f"fitness undefined for time {time_s!r}")
    return time_s ** -0.5


@dataclass
class GAConfig:
    population: int = 10
    generations: int = 10
    crossover_rate: float = 0.9
    mutation_rate: float = 0.05
    timeout_s: float = 180.0
    penalty_time_s: float = 1000.0
    rng_seed: int = 0
    elitism_count: int = 1

    def __post_init__(self):
        if self.population < 1 or self.generations < 1:
            raise ValueError("population and generations must be positive")
        if not (0.0 <= self.crossover_rate <= 1.0):
            raise ValueError("crossover_rate outside [0, 1]")
        if not (0.0 <= self.mutation_rate <= 1.0):
            raise ValueError("mutation_rate outside [0, 1]")
        if self.elitism_count < 0 or self.elitism_count >= self.population:
            raise ValueError("elitism_count must be in [0, population)")

    @classmethod
    def from_json(cls, doc: dict) -> "GAConfig":
        return cls(**{k: doc[k] for k in doc
                      if k in cls.__dataclass_fields__})  # type: ignore[attr-defined]


@dataclass(frozen=True)
class Individual:
    genome: Genome
    time_s: float            # effective time: penalty already applied
    fitness: float
    eval_source: str         # "fresh" | "cache" | "penalty"
    timed_out: bool = False
    diagnostic: str = ""

    def to_json(self) -> dict:
        return {"genome": genome_str(self.genome), "time_s": self.time_s,
                "fitness": self.fitness, "eval_source": self.eval_source,
                "timed_out": self.timed_out}


@dataclass
class GenerationRecord:
    generation: int
    individuals: list[Individual]
    best_genome: Genome        # best so far across the whole run
    best_time_s: float

    def to_json(self) -> dict:
        return {"generation": self.generation,
                "individuals": [i.to_json() for i in self.individuals],
                "best_genome": genome_str(self.best_genome),
                "best_time_s": self.best_time_s}


def genome_str(genome: Genome) -> str:
    return "".join(str(b) for b in genome)


def genome_from_str(text: str) -> Genome:
    return tuple(int(c) for c in text)


def init_population(gene_len: int, m: int, rng: random.Random) -> list[Genome]:
    """M genomes with every bit drawn uniformly from {0, 1}."""
    if gene_len < 1:
        raise ZeroGeneLength("no eligible loops: nothing to offload")
    if m < 1:
        raise ValueError("population must be positive")
    return [tuple(rng.randint(0, 1) for _ in range(gene_len)) for _ in range(m)]


def roulette_pick(population: list[Individual], rng: random.Random) -> Individual:
    """Fitness-proportional draw; fitness is always > 0 so the wheel is sound."""
    cumulative = []
    total = 0.0
    for ind in population:
        total += ind.fitness
        cumulative.append(total)
    r = rng.random() * total
    return population[bisect.bisect_left(cumulative, r)]


def crossover(parent_a: Genome, parent_b: Genome, pc: float,
              rng: random.Random) -> tuple[Genome, Genome]:
    """One-point crossover with probability pc; otherwise copies."""
    if len(parent_a) != len(parent_b):
        raise LengthMismatch(f"{len(parent_a)} vs {len(parent_b)}")
    n = len(parent_a)
    if n < 2 or rng.random() >= pc:
        return tuple(parent_a), tuple(parent_b)
    cut = rng.randint(1, n - 1)
    return (parent_a[:cut] + parent_b[cut:], parent_b[:cut] + parent_a[cut:])


def mutate(genome: Genome, pm: float, rng: random.Random) -> Genome:
    """Independent bit flips with probability pm each."""
    return tuple(bit ^ 1 if rng.random() < pm else bit for bit in genome)


class EvalCache:
    """Genome -> (effective time, timed_out, penalized, diagnostic)."""

    def __init__(self):
        self._store: dict[Genome, tuple[float, bool, bool, str]] = {}

    def __contains__(self, genome: Genome) -> bool:
        return genome in self._store

    def get(self, genome: Genome):
        return self._store[genome]

    def put(self, genome: Genome, value) -> None:
        self._store[genome] = value

    def __len__(self) -> int:
        return len(self._store)


def evaluate_with_cache(genome: Genome, evaluator, cache: EvalCache,
                        penalty_time_s: float) -> Individual:
    """One Individual per genome; the evaluator runs at most once per genome."""
    if genome in cache:
        time_s, timed_out, penalized, diag = cache.get(genome)
        return Individual(genome, time_s, fitness(time_s), "cache", timed_out, diag)
    measured = evaluator.measure(genome)
    time_s, timed_out, penalized, diag = _effective(measured, penalty_time_s)
    cache.put(genome, (time_s, timed_out, penalized, diag))
    source = "penalty" if penalized else "fresh"
    return Individual(genome, time_s, fitness(time_s), source, timed_out, diag)


def _effective(measured, penalty_time_s: float) -> tuple[float, bool, bool, str]:
    if measured.failure is not None:
        return penalty_time_s, False, True, measured.failure
    if measured.timed_out:
        return penalty_time_s, True, False, ""
    return measured.seconds, False, False, ""


@dataclass
class GAResult:
    best: Individual
    records: list[GenerationRecord]
    evaluations: int

    @property
    def best_time_s(self) -> float:
        return self.best.time_s


def run_ga(config: GAConfig, gene_len: int, evaluator,
           on_generation: Optional[Callable[[GenerationRecord], None]] = None) -> GAResult:
    """T generations of evaluate, select with elitism, crossover, mutate.

    Returns the best individual ever evaluated, not merely the last
    generation's best, plus the full per-generation records.
    """
    rng = random.Random(config.rng_seed)
    genomes = init_population(gene_len, config.population, rng)
    cache = EvalCache()
    records: list[GenerationRecord] = []
    best: Optional[Individual] = None
    evaluations = 0

    for gen in range(config.generations):
        individuals, fresh = _evaluate_generation(genomes, evaluator, cache, config)
        evaluations += fresh
        for ind in individuals:
            if best is None or ind.time_s < best.time_s:
                best = ind
        record = GenerationRecord(gen, individuals, best.genome, best.time_s)
        records.append(record)
        if on_generation is not None:
            on_generation(record)
        if gen == config.generations - 1:
            break
        genomes = _next_generation(individuals, config, rng)

    return GAResult(best, records, evaluations)


def _evaluate_generation(genomes: list[Genome], evaluator, cache: EvalCache,
                         config: GAConfig) -> tuple[list[Individual], int]:
    pending: list[Genome] = []
    seen = set()
    for g in genomes:
        if g not in cache and g not in seen:
            pending.append(g)
            seen.add(g)
    capacity = getattr(evaluator, "max_concurrency", 1) or 1
    measured: dict[Genome, object] = {}
    if capacity > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=capacity) as pool:
            for g, m in zip(pending, pool.map(evaluator.measure, pending)):
                measured[g] = m
    else:
        for g in pending:
            measured[g] = evaluator.measure(g)
    # commit in genome order so records are deterministic
    individuals = []
    for g in genomes:
        if g in cache:
            time_s, timed_out, penalized, diag = cache.get(g)
            individuals.append(Individual(g, time_s, fitness(time_s), "cache",
                                          timed_out, diag))
        else:
            time_s, timed_out, penalized, diag = _effective(measured[g],
                                                            config.penalty_time_s)
            cache.put(g, (time_s, timed_out, penalized, diag))
            source = "penalty" if penalized else "fresh"
            individuals.append(Individual(g, time_s, fitness(time_s), source,
                                          timed_out, diag))
    return individuals, len(pending)


def _next_generation(individuals: list[Individual], config: GAConfig,
                     rng: random.Random) -> list[Genome]:
    ranked = sorted(range(len(individuals)),
                    key=lambda i: (-individuals[i].fitness, i))
    next_genomes: list[Genome] = [individuals[i].genome
                                  for i in ranked[:config.elitism_count]]
    while len(next_genomes) < config.population:
        if config.population - len(next_genomes) == 1:
            # odd slot: plain copy of a selected parent, still mutated
            parent = roulette_pick(individuals, rng)
            next_genomes.append(mutate(parent.genome, config.mutation_rate, rng))
            break
        pa = roulette_pick(individuals, rng)
        pb = roulette_pick(individuals, rng)
        ca, cb = crossover(pa.genome, pb.genome, config.crossover_rate, rng)
        next_genomes.append(mutate(ca, config.mutation_rate, rng))
        next_genomes.append(mutate(cb, config.mutation_rate, rng))
    return next_genomes
