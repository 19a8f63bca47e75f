"""Hybrid genetic algorithm over mixed binary/real schedules.

Binary status genes and real-valued genes (fractional statuses, settings,
initial levels) share one chromosome. Reproduction follows an elitist
scheme with normalized geometric ranking selection, a linear-combination
operator, a single-split crossover and direct transfer. Every
``n_res`` generations the non-elite population is re-randomized.

Randomness is drawn from per-slot streams keyed on (seed, purpose,
generation, slot), so the outcome does not depend on evaluation order.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .fitness import FitnessReport
from .network import ConfigError, NetworkModel, Schedule

log = logging.getLogger(__name__)

_INIT, _BREED, _INJECT, _RESET = range(4)


class GAError(RuntimeError):
    """Fitness evaluation failed during a generation."""


@dataclass(frozen=True)
class GaConfig:
    n_pop: int = 300
    n_gen: int = 5000
    n_res: int = 100
    f_elit: float = 0.01
    f_rand: float = 0.10
    p0: float = 0.05
    p_com: float = 0.40
    p_crs: float = 0.50
    p_mut: float = 0.01
    epsilon: float = 0.1
    penalty_factor: float = 1000.0
    seed: int = 0
    shared_rcom: bool = True

    def __post_init__(self):
        problems = []
        if not 0.0 < self.p0 < 1.0:
            problems.append("p0 must lie in (0, 1)")
        for name in ("f_elit", "f_rand", "p_com", "p_crs", "p_mut"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.p_com + self.p_crs > 1.0:
            problems.append("p_com + p_crs must not exceed 1")
        if self.f_elit + self.f_rand >= 1.0:
            problems.append("f_elit + f_rand must be below 1")
        if not 0.0 <= self.epsilon <= 0.2:
            problems.append("epsilon must lie in [0, 0.2]")
        if not self.penalty_factor > 0:
            problems.append("penalty_factor must be > 0")
        for name in ("n_pop", "n_gen", "n_res"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ConfigError("GA config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "GaConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"GA config: unknown field(s) {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "GaConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc

    def counts(self) -> tuple[int, int, int]:
        """(elites, random injections, offspring) adding up to ``n_pop``."""
        n_elit = min(math.ceil(self.f_elit * self.n_pop), self.n_pop)
        n_rand = min(math.ceil(self.f_rand * self.n_pop), self.n_pop - n_elit)
        return n_elit, n_rand, self.n_pop - n_elit - n_rand


@dataclass
class Individual:
    schedule: Schedule
    fitness: Optional[FitnessReport] = None


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def selection_probability(r: int, p0: float, n_pop: int) -> float:
    """Normalized geometric ranking probability of rank ``r`` (0 = fittest)."""
    if not 0 <= r < n_pop:
        raise ValueError(f"rank {r} outside [0, {n_pop})")
    return p0 * (1.0 - p0) ** r / (1.0 - (1.0 - p0) ** n_pop)


def sample_rank(u, p0: float, n_pop: int):
    """Inverse CDF of the geometric ranking distribution for uniform ``u``."""
    q = 1.0 - p0
    tail = 1.0 - q ** n_pop
    r = np.floor(np.log1p(-np.asarray(u) * tail) / math.log(q))
    return np.clip(r, 0, n_pop - 1).astype(int)


def select_parent(sorted_population: Sequence[Individual], p0: float, rng: np.random.Generator) -> Individual:
    """Draw one individual from a population sorted best-first."""
    if not sorted_population:
        raise ValueError("cannot select from an empty population")
    return sorted_population[int(sample_rank(rng.random(), p0, len(sorted_population)))]


# ---------------------------------------------------------------------------
# reproduction operators
# ---------------------------------------------------------------------------

def _check_dims(a: Schedule, b: Schedule) -> None:
    for name in ("statuses", "settings", "initial_levels"):
        if getattr(a, name).shape != getattr(b, name).shape:
            raise ConfigError(f"parents differ in {name} shape")


def _binary_mask(schedule: Schedule, binary_rows) -> np.ndarray:
    if binary_rows is None:
        return np.zeros(schedule.statuses.shape[0], dtype=bool)
    return np.asarray(binary_rows, dtype=bool)


def combine_linear(parent_a: Schedule, parent_b: Schedule, epsilon: float, rng: np.random.Generator,
                   binary_rows=None, shared: bool = True, r_com: Optional[float] = None) -> Schedule:
    """Blend two parents gene by gene.

    Real genes become ``a + r * (b - a)`` with ``r`` uniform in
    ``[-epsilon, 1 + epsilon)`` (one draw per call when ``shared``), clamped
    to [0, 1]. Binary genes are copied from either parent with equal odds.
    """
    _check_dims(parent_a, parent_b)
    binary = _binary_mask(parent_a, binary_rows)
    va, vb = parent_a.to_vector(), parent_b.to_vector()
    if r_com is None:
        size = None if shared else va.size
        r_com = rng.uniform(-epsilon, 1.0 + epsilon, size)
    child = np.clip(va + r_com * (vb - va), 0.0, 1.0)

    m = parent_a.statuses.shape[1]
    gene_binary = np.zeros(va.size, dtype=bool)
    gene_binary[: binary.size * m] = np.repeat(binary, m)
    pick_b = rng.random(va.size) < 0.5
    child[gene_binary] = np.where(pick_b, vb, va)[gene_binary]
    return _rebuild(parent_a, child)


def _rebuild(like: Schedule, vector: np.ndarray) -> Schedule:
    ns, nset = like.statuses.size, like.settings.size
    return Schedule(vector[:ns].reshape(like.statuses.shape),
                    vector[ns:ns + nset].reshape(like.settings.shape),
                    vector[ns + nset:])


def split_matrix(a: np.ndarray, b: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Take ``a`` before ``index`` along ``axis`` and ``b`` from there on."""
    out = np.array(b, dtype=float)
    sl = [slice(None)] * out.ndim
    sl[axis] = slice(0, index)
    out[tuple(sl)] = np.asarray(a)[tuple(sl)]
    return out


def _split_index(n: int, rng: np.random.Generator) -> int:
    # an interior cut when one exists; otherwise the whole array comes from one parent
    return int(rng.integers(1, n)) if n > 1 else int(rng.integers(0, 2))


def crossover_split(parent_a: Schedule, parent_b: Schedule, rng: np.random.Generator) -> Schedule:
    """Single-split crossover applied to each part of the chromosome.

    Matrices are cut along rows or columns (50/50); the initial-level vector
    is cut at one point.
    """
    _check_dims(parent_a, parent_b)
    parts = []
    for name in ("statuses", "settings"):
        a, b = getattr(parent_a, name), getattr(parent_b, name)
        if a.size == 0:
            parts.append(a.copy())
            continue
        axis = int(rng.integers(0, 2))
        parts.append(split_matrix(a, b, axis, _split_index(a.shape[axis], rng)))
    a, b = parent_a.initial_levels, parent_b.initial_levels
    levels = split_matrix(a, b, 0, _split_index(a.size, rng)) if a.size else a.copy()
    return Schedule(parts[0], parts[1], levels)


def mutate(schedule: Schedule, p_mut: float, rng: np.random.Generator, binary_rows=None) -> Schedule:
    """Independently mutate each gene with probability ``p_mut``.

    Binary genes flip; real genes are redrawn uniformly in [0, 1].
    """
    binary = _binary_mask(schedule, binary_rows)
    v = schedule.to_vector().copy()
    m = schedule.statuses.shape[1]
    hit = rng.random(v.size) < p_mut
    fresh = rng.random(v.size)
    gene_binary = np.zeros(v.size, dtype=bool)
    gene_binary[: binary.size * m] = np.repeat(binary, m)
    v[hit & gene_binary] = 1.0 - v[hit & gene_binary]
    v[hit & ~gene_binary] = fresh[hit & ~gene_binary]
    return _rebuild(schedule, v)


# ---------------------------------------------------------------------------
# generational loop
# ---------------------------------------------------------------------------

FitnessFn = Callable[[Sequence[Schedule]], list[FitnessReport]]


def _rng(config: GaConfig, purpose: int, generation: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, purpose, generation, slot])


def _evaluate(individuals: list[Individual], fitness_fn: FitnessFn, generation: int) -> None:
    todo = [ind for ind in individuals if ind.fitness is None]
    try:
        reports = fitness_fn([ind.schedule for ind in todo])
    except Exception as exc:
        raise GAError(f"fitness evaluation failed in generation {generation} "
                      f"({len(todo)} individuals): {exc}") from exc
    if len(reports) != len(todo):
        raise GAError(f"fitness function returned {len(reports)} reports for {len(todo)} schedules")
    for ind, rep in zip(todo, reports):
        ind.fitness = rep


def sort_population(population: list[Individual]) -> list[Individual]:
    """Best first; ties keep their current order."""
    return sorted(population, key=lambda ind: ind.fitness.penalized)


def random_population(model: NetworkModel, config: GaConfig, n: int, purpose: int = _INIT,
                      generation: int = 0) -> list[Individual]:
    return [Individual(Schedule.random(model, _rng(config, purpose, generation, i))) for i in range(n)]


def breed(sorted_population: Sequence[Individual], config: GaConfig, rng: np.random.Generator,
          binary_rows=None) -> Schedule:
    """One offspring: parent selection, reproduction, mutation."""
    a = select_parent(sorted_population, config.p0, rng).schedule
    b = select_parent(sorted_population, config.p0, rng).schedule
    u = rng.random()
    if u < config.p_com:
        child = combine_linear(a, b, config.epsilon, rng, binary_rows, config.shared_rcom)
    elif u < config.p_com + config.p_crs:
        child = crossover_split(a, b, rng)
    else:
        child = a if rng.random() < 0.5 else b
    return mutate(child, config.p_mut, rng, binary_rows)


def step_generation(population: list[Individual], config: GaConfig, fitness_fn: FitnessFn,
                    model: NetworkModel, generation: int = 1, reset: bool = False) -> list[Individual]:
    """Produce and evaluate generation ``generation`` from its predecessor.

    With ``reset`` the offspring slots are filled with fresh random
    individuals as well, keeping only the elites.
    """
    ranked = sort_population(population)
    n_elit, n_rand, n_breed = config.counts()
    nxt = [Individual(ind.schedule, ind.fitness) for ind in ranked[:n_elit]]
    nxt += random_population(model, config, n_rand, _INJECT, generation)
    if reset:
        nxt += [Individual(Schedule.random(model, _rng(config, _RESET, generation, i))) for i in range(n_breed)]
    else:
        binary = model.binary_rows
        nxt += [Individual(breed(ranked, config, _rng(config, _BREED, generation, i), binary))
                for i in range(n_breed)]
    _evaluate(nxt, fitness_fn, generation)
    return nxt


@dataclass
class GaResult:
    best: Individual
    history: list[dict]
    population: list[Individual]


def run_ga(model: NetworkModel, fitness_fn: FitnessFn, config: GaConfig,
           callback: Optional[Callable[[int, list[Individual]], None]] = None) -> GaResult:
    """Evolve ``config.n_gen`` generations and return the best schedule found."""
    population = random_population(model, config, config.n_pop)
    _evaluate(population, fitness_fn, 0)
    history: list[dict] = []
    best: Optional[Individual] = None
    for g in range(config.n_gen):
        if g > 0:
            population = step_generation(population, config, fitness_fn, model, g,
                                         reset=(g % config.n_res == 0))
        ranked = sort_population(population)
        top = ranked[0]
        if best is None or top.fitness.penalized < best.fitness.penalized:
            best = Individual(top.schedule, top.fitness)
        history.append({
            "generation": g,
            "best_penalized": top.fitness.penalized,
            "mean_penalized": float(np.mean([ind.fitness.penalized for ind in population])),
            "best_objective": top.fitness.objective,
            "best_violation": top.fitness.violation,
        })
        if callback is not None:
            callback(g, ranked)
        if g % 50 == 0 or g == config.n_gen - 1:
            log.debug("generation %d: best F* %.6f", g, top.fitness.penalized)
    return GaResult(best, history, sort_population(population))


def write_history(history: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["generation", "best_penalized", "mean_penalized", "best_objective", "best_violation"])
        for row in history:
            writer.writerow([row["generation"], repr(row["best_penalized"]), repr(row["mean_penalized"]),
                             repr(row["best_objective"]), repr(row["best_violation"])])
