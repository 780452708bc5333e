"""Coordinator loop for the cooperative co-evolutionary search.

Each generation measures population diversity, picks variation rates,
decomposes the population into blocks for the workers, merges the elite blocks
they return into full candidates, evaluates the candidates, keeps the best N
individuals and breeds offspring from them.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import tempfile
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from diversity import DiversityConfig, Mode, RateDecision, ThresholdState, decide_rates, fixed_rates, spdi
from evaluators import Evaluator
from genetic_ops import ORIGIN_RANK, Individual, Origin, Population, apply_variation
from madts import EliteSet, MadtsConfig, WorkerReport, WorkerSession, feedback_from_list, feedback_to_list
from rng_utils import make_stream, restore_stream, stream_state
from search_space import (
    Block,
    BlockTag,
    Chromosome,
    SearchSpace,
    decompose,
    encode_many,
    parse_tag,
    random_chromosome,
    reassemble,
    space_hash,
    space_size,
    tag_to_str,
)
from transport import WorkerFailure


LOGGER = logging.getLogger("macc")
CHECKPOINT_VERSION = 1
EVOLUTION_TOP = 5
TARGET_FRACTION = 0.99


class CheckpointError(RuntimeError):
    """A checkpoint that cannot be written, parsed or applied."""


@dataclass(frozen=True)
class AblationFlags:
    disable_macc: bool = False
    disable_madts: bool = False
    disable_spdi: bool = False

    @property
    def method(self) -> str:
        if self.disable_macc:
            return "w/o MACC"
        if self.disable_madts:
            return "w/o MADTS"
        if self.disable_spdi:
            return "w/o SPDI"
        return "full"


ABLATION_VARIANTS = (
    AblationFlags(),
    AblationFlags(disable_macc=True),
    AblationFlags(disable_madts=True),
    AblationFlags(disable_spdi=True),
)


@dataclass(frozen=True)
class RunConfig:
    population_size: int = 20
    generations: int = 30
    local_steps: int = 5
    elites: int = 5
    eval_budget: int = 125
    master_seed: int = 0
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    madts: MadtsConfig = field(default_factory=MadtsConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    tournament_size: int = 2
    eval_parallelism: int = 1
    eval_cap: Optional[int] = None
    checkpoint_every: int = 0
    record_wallclock: bool = False

    def __post_init__(self):
        checks = (
            (self.population_size >= 2, "population_size must be >= 2"),
            (self.generations >= 1, "generations must be >= 1"),
            (self.local_steps >= 1, "local_steps must be >= 1"),
            (self.elites >= 1, "elites must be >= 1"),
            (self.eval_budget >= 1, "eval_budget must be >= 1"),
            (self.tournament_size >= 1, "tournament_size must be >= 1"),
            (self.eval_parallelism >= 1, "eval_parallelism must be >= 1"),
            (self.eval_cap is None or self.eval_cap >= 1, "eval_cap must be >= 1"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
        )
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    def offspring_count(self, space: SearchSpace) -> int:
        """Offspring per generation; the GA baseline also gets the merge budget."""
        if not self.ablation.disable_macc:
            return self.population_size
        return self.population_size + min(self.eval_budget, self.elites ** len(space.block_tags))

    def budget_cap(self, space: SearchSpace) -> int:
        """Most true evaluations a full run can spend without an explicit cap."""
        per_generation = self.population_size + min(self.eval_budget, self.elites ** len(space.block_tags))
        return self.population_size + self.generations * per_generation

    def madts_for_run(self) -> MadtsConfig:
        """Worker settings; the surrogate is switched off for the MADTS ablation."""
        if self.ablation.disable_madts:
            return replace(self.madts, use_surrogate=False)
        return self.madts

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        data["diversity"] = DiversityConfig(**data["diversity"])
        data["madts"] = MadtsConfig(**data["madts"])
        data["ablation"] = AblationFlags(**data["ablation"])
        return cls(**data)


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    spdi_value: float
    tau: float
    mode: Mode
    p_cross: float
    p_mut: float
    true_evals_cumulative: int
    merged_candidates_count: int
    wallclock_ms: int = 0
    counters: dict = field(default_factory=dict, compare=False)

    def to_row(self) -> dict:
        return {
            "generation": self.generation,
            "best_fitness": self.best_fitness,
            "mean_fitness": self.mean_fitness,
            "spdi": self.spdi_value,
            "tau": self.tau,
            "mode": self.mode.value,
            "p_cross": self.p_cross,
            "p_mut": self.p_mut,
            "true_evals_cum": self.true_evals_cumulative,
            "merged_count": self.merged_candidates_count,
            "wallclock_ms": self.wallclock_ms,
        }


@dataclass
class RunResult:
    space: SearchSpace
    config: RunConfig
    best_chromosome: Chromosome
    best_fitness: float
    best_found_at: int
    trace: list[GenerationRecord]
    improvements: list[tuple[int, float]]
    evolution: list[tuple[int, int, tuple[int, ...], float]]
    true_evals: int

    def evals_to_reach(self, target: float) -> Optional[int]:
        """True evaluations spent when the incumbent first reached ``target``."""
        for evals, fitness in self.improvements:
            if fitness >= target:
                return evals
        return None


class WorkerPool(Protocol):
    def dispatch(self, generation: int, blocks: dict, context: Chromosome,
                 local_steps: int, elite_count: int) -> dict[BlockTag, WorkerReport]: ...

    def feedback(self, generation: int, feedback: dict[BlockTag, dict]) -> None: ...

    def restore(self, snapshots: dict, feedback: dict) -> None: ...

    def close(self) -> None: ...


class InProcessWorkerPool:
    """All M+1 workers in this process, stepped on a thread pool."""

    def __init__(self, space: SearchSpace, config: MadtsConfig, evaluator: Evaluator, master_seed: int):
        self.space = space
        self.master_seed = master_seed
        self.sessions = {
            tag: WorkerSession(space, tag, config, evaluator, master_seed) for tag in space.block_tags
        }
        self._executor = ThreadPoolExecutor(max_workers=len(self.sessions), thread_name_prefix="macc-worker")

    def dispatch(self, generation, blocks, context, local_steps, elite_count):
        futures = {
            tag: self._executor.submit(
                session.run_generation, generation, blocks[tag], context, local_steps, elite_count
            )
            for tag, session in self.sessions.items()
        }
        return {tag: futures[tag].result() for tag in self.space.block_tags}

    def feedback(self, generation, feedback):
        for tag in self.space.block_tags:
            self.sessions[tag].apply_feedback(generation, feedback.get(tag, {}))

    def restore(self, snapshots, feedback):
        for tag, session in self.sessions.items():
            session.restore(snapshots.get(tag), feedback.get(tag), self.master_seed)

    def close(self):
        self._executor.shutdown(wait=True)


class EvaluationLedger:
    """Counted, memoised access to the evaluator plus the incumbent it implies."""

    def __init__(self, evaluator: Evaluator, cap: Optional[int] = None, parallelism: int = 1):
        self.evaluator = evaluator
        self.cap = cap
        self.parallelism = parallelism
        self.memo: dict[tuple[int, ...], float] = {}
        self.incumbent: Optional[Individual] = None
        self.best_found_at = 0
        self.improvements: list[tuple[int, float]] = []

    @property
    def true_evals(self) -> int:
        return self.evaluator.true_eval_counter

    def remaining(self) -> Optional[int]:
        if self.cap is None:
            return None
        return max(0, self.cap - self.true_evals)

    def known(self, c: Chromosome) -> bool:
        return c.alleles in self.memo

    def evaluate(self, chromosomes: Sequence[Chromosome], origin: Origin, born: int) -> list[Individual]:
        """Evaluate fresh chromosomes and commit the results in input order."""
        fresh = [c for c in dict.fromkeys(chromosomes) if c.alleles not in self.memo]
        if self.parallelism > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                scores = list(pool.map(self.evaluator.eval_global, fresh))
        else:
            scores = [self.evaluator.eval_global(c) for c in fresh]
        for c, score in zip(fresh, scores):
            self.memo[c.alleles] = score
            if self.incumbent is None or score > self.incumbent.fitness:
                self.incumbent = Individual(c, score, origin, born)
                self.best_found_at = self.true_evals
                self.improvements.append((self.true_evals, score))
        return [Individual(c, self.memo[c.alleles], origin, born) for c in chromosomes]


@dataclass
class EngineState:
    space: SearchSpace
    config: RunConfig
    population: Population
    ledger: EvaluationLedger
    rng: np.random.Generator
    threshold: Optional[ThresholdState] = None
    trace: list[GenerationRecord] = field(default_factory=list)
    evolution: list[tuple[int, int, tuple[int, ...], float]] = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    feedback: dict = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)

    @property
    def generation(self) -> int:
        return self.population.generation


def dedup_chromosomes(chromosomes: Sequence[Chromosome]) -> list[Chromosome]:
    return list(dict.fromkeys(chromosomes))


def merge_elites(space: SearchSpace, elite_sets: Sequence[EliteSet]) -> list[Chromosome]:
    """Full Cartesian product of the elite sets, one chromosome per combination.

    Duplicates are kept; callers deduplicate.
    """
    by_tag = {}
    for elite_set in elite_sets:
        if elite_set.block_tag in by_tag:
            raise ValueError(f"two elite sets for block {tag_to_str(elite_set.block_tag)}")
        by_tag[elite_set.block_tag] = elite_set
    missing = [tag_to_str(t) for t in space.block_tags if t not in by_tag]
    if missing:
        raise ValueError(f"no elite set for block(s) {', '.join(missing)}")
    ordered = [by_tag[tag].blocks for tag in space.block_tags]
    return [reassemble(space, combo) for combo in itertools.product(*ordered)]


def merge_estimates(space: SearchSpace, elite_sets: Sequence[EliteSet]) -> list[float]:
    """Surrogate estimate per merged candidate, aligned with ``merge_elites``."""
    by_tag = {elite_set.block_tag: elite_set for elite_set in elite_sets}
    ordered = [by_tag[tag].estimates for tag in space.block_tags]
    return [float(sum(combo)) for combo in itertools.product(*ordered)]


def evaluate_candidates(
    candidates: Sequence[Chromosome],
    ledger: EvaluationLedger,
    budget: int,
    rng: np.random.Generator,
    estimates: Optional[Sequence[float]] = None,
    born: int = 0,
) -> list[Individual]:
    """Evaluate merged candidates within ``budget`` fresh evaluations.

    Candidates already in the memo cost nothing and are always returned. When
    more fresh candidates exist than the budget allows, they are ranked by
    ``estimates`` (descending, stable) or, without estimates, in a seeded random
    order.
    """
    if not candidates:
        raise ValueError("no candidates to evaluate")
    if estimates is not None and len(estimates) != len(candidates):
        raise ValueError("one estimate per candidate is required")
    first = {}
    for index, c in enumerate(candidates):
        first.setdefault(c, index)
    unique = list(first)
    known = [c for c in unique if ledger.known(c)]
    fresh = [c for c in unique if not ledger.known(c)]
    allowed = budget if ledger.remaining() is None else min(budget, ledger.remaining())
    if len(fresh) > allowed:
        if estimates is not None:
            fresh = sorted(fresh, key=lambda c: -estimates[first[c]])[:allowed]
        else:
            order = rng.permutation(len(fresh))
            fresh = [fresh[int(i)] for i in order[:allowed]]
    chosen = set(known) | set(fresh)
    selected = [c for c in unique if c in chosen]
    return ledger.evaluate(selected, Origin.MERGED_ELITE, born)


def _survivor_key(individual: Individual):
    return (-individual.fitness, individual.born, ORIGIN_RANK[individual.origin], individual.chromosome.alleles)


def select_survivors(
    current: Population,
    candidates: Sequence[Individual],
    n: int,
    space: Optional[SearchSpace] = None,
    rng: Optional[np.random.Generator] = None,
    ledger: Optional[EvaluationLedger] = None,
) -> Population:
    """Elitist truncation over ``current`` and ``candidates``.

    Duplicates by allele vector keep the higher fitness. Order: fitness
    descending, then older individuals, then origin, then alleles. A union
    smaller than ``n`` is padded with fresh random evaluated chromosomes.
    """
    best: dict[tuple[int, ...], Individual] = {}
    for individual in list(current.members) + list(candidates):
        if individual.fitness is None:
            raise ValueError(f"individual {list(individual.chromosome.alleles)} is not evaluated")
        held = best.get(individual.chromosome.alleles)
        if held is None or individual.fitness > held.fitness:
            best[individual.chromosome.alleles] = individual
    ranked = sorted(best.values(), key=_survivor_key)[:n]
    if len(ranked) < n:
        if space is None or rng is None or ledger is None:
            raise ValueError("padding the population needs a space, a random stream and a ledger")
        ranked.extend(_fresh_individuals(space, rng, ledger, n - len(ranked), ranked, current.generation))
    return Population(ranked, current.generation)


def _fresh_individuals(space, rng, ledger, count, existing, born) -> list[Individual]:
    taken = {m.chromosome.alleles for m in existing}
    distinct_left = space_size(space) - len(taken)
    fresh: list[Chromosome] = []
    while len(fresh) < count:
        c = random_chromosome(space, rng)
        if c.alleles in taken and distinct_left > 0:
            continue
        if c.alleles not in taken:
            distinct_left -= 1
        taken.add(c.alleles)
        fresh.append(c)
    return ledger.evaluate(fresh, Origin.INIT, born)


def block_populations(space: SearchSpace, population: Population) -> dict[BlockTag, list[Block]]:
    blocks = {tag: [] for tag in space.block_tags}
    for member in population.members:
        for block in decompose(space, member.chromosome):
            blocks[block.block_tag].append(block)
    return blocks


def global_feedback(space: SearchSpace, evaluated: Sequence[Individual]) -> dict[BlockTag, dict]:
    """Best global fitness of any evaluated chromosome containing each block."""
    feedback = {tag: {} for tag in space.block_tags}
    for individual in evaluated:
        for block in decompose(space, individual.chromosome):
            held = feedback[block.block_tag].get(block)
            if held is None or individual.fitness > held:
                feedback[block.block_tag][block] = individual.fitness
    return feedback


def _rates(state: EngineState, value: float) -> RateDecision:
    if state.config.ablation.disable_spdi:
        return fixed_rates(value, state.threshold, state.config.diversity)
    return decide_rates(value, state.threshold, state.config.diversity)


def _dispatch_with_retry(state: EngineState, pool: WorkerPool, generation: int, checkpoint_path) -> dict:
    blocks = block_populations(state.space, state.population)
    context = state.ledger.incumbent.chromosome
    config = state.config
    for attempt in (1, 2):
        try:
            return pool.dispatch(generation, blocks, context, config.local_steps, config.elites)
        except WorkerFailure as exc:
            if attempt == 2:
                LOGGER.error(
                    "Worker failed twice; aborting run",
                    extra={"event": "run_aborted", "generation": generation},
                )
                if checkpoint_path is not None:
                    checkpoint_save(state, checkpoint_path)
                raise
            LOGGER.warning(
                f"Worker failure, retrying generation: {exc}",
                extra={"event": "generation_retry", "generation": generation},
            )
            pool.restore(state.snapshots, resent_feedback(state))
    raise AssertionError("unreachable")


def resent_feedback(state: EngineState) -> dict[BlockTag, dict]:
    return {tag: feedback_from_list(tag, items) for tag, items in state.feedback.items()}


def run_generation(state: EngineState, pool: Optional[WorkerPool] = None,
                   checkpoint_path=None) -> tuple[EngineState, GenerationRecord]:
    started = time.perf_counter()
    config, space, ledger = state.config, state.space, state.ledger
    generation = state.generation + 1
    before = Counter(state.counters)

    value = spdi(encode_many(space, [m.chromosome for m in state.population.members]), state.counters)
    if state.threshold is None:
        state.threshold = ThresholdState(value, config.diversity.tau_fraction * value)
    rates = _rates(state, value)

    merged_count = 0
    survivors = state.population
    if not config.ablation.disable_macc:
        if pool is None:
            raise ValueError("a worker pool is required unless MACC is disabled")
        reports = _dispatch_with_retry(state, pool, generation, checkpoint_path)
        elite_sets = [reports[tag].elites for tag in space.block_tags]
        for tag in space.block_tags:
            state.snapshots[tag] = reports[tag].snapshot
            state.counters["proposals"] += reports[tag].proposals
            state.counters["surrogate_fits"] += reports[tag].fits
        candidates = merge_elites(space, elite_sets)
        merged_count = len(dedup_chromosomes(candidates))
        estimates = None if config.ablation.disable_madts else merge_estimates(space, elite_sets)
        evaluated = evaluate_candidates(candidates, ledger, config.eval_budget, state.rng, estimates, generation)
        feedback = global_feedback(space, evaluated)
        pool.feedback(generation, feedback)
        state.feedback = {tag: feedback_to_list(items) for tag, items in feedback.items()}
        survivors = select_survivors(state.population, evaluated, config.population_size, space, state.rng, ledger)

    offspring = apply_variation(
        space, survivors, rates, state.rng, config.tournament_size, config.offspring_count(space)
    )
    state.counters["offspring"] += len(offspring)
    remaining = ledger.remaining()
    evaluated_offspring = []
    for child in offspring:
        if ledger.known(child.chromosome):
            evaluated_offspring.append(replace(child, fitness=ledger.memo[child.chromosome.alleles]))
        elif remaining is None or remaining > 0:
            evaluated_offspring.extend(ledger.evaluate([child.chromosome], child.origin, child.born))
            remaining = ledger.remaining()
    population = select_survivors(survivors, evaluated_offspring, config.population_size, space, state.rng, ledger)
    state.population = Population(population.members, generation)

    for rank, member in enumerate(state.population.members[:EVOLUTION_TOP], start=1):
        state.evolution.append((generation, rank, member.chromosome.alleles, member.fitness))
    record = GenerationRecord(
        generation=generation,
        best_fitness=ledger.incumbent.fitness,
        mean_fitness=float(np.mean(state.population.fitnesses())),
        spdi_value=value,
        tau=state.threshold.tau,
        mode=rates.mode,
        p_cross=rates.p_cross,
        p_mut=rates.p_mut,
        true_evals_cumulative=ledger.true_evals,
        merged_candidates_count=merged_count,
        wallclock_ms=int((time.perf_counter() - started) * 1000) if config.record_wallclock else 0,
        counters=dict(state.counters - before),
    )
    state.trace.append(record)
    LOGGER.info(
        f"Generation {generation}: best {record.best_fitness:.6f}, mode {rates.mode.value}, "
        f"{record.true_evals_cumulative} true evaluations",
        extra={"event": "generation_finished", "generation": generation},
    )
    return state, record


def init_state(config: RunConfig, space: SearchSpace, evaluator: Evaluator) -> EngineState:
    """Random distinct initial population of size N, truly evaluated."""
    evaluator.restore_counter(0)
    rng = make_stream(config.master_seed, "coordinator")
    ledger = EvaluationLedger(evaluator, config.eval_cap, config.eval_parallelism)
    members = _fresh_individuals(space, rng, ledger, config.population_size, [], 0)
    population = Population(sorted(members, key=_survivor_key), 0)
    return EngineState(space=space, config=config, population=population, ledger=ledger, rng=rng)


def run_search(
    config: RunConfig,
    space: SearchSpace,
    evaluator: Evaluator,
    pool: Optional[WorkerPool] = None,
    checkpoint_path=None,
    resume_from=None,
    on_generation: Optional[Callable[[GenerationRecord], None]] = None,
) -> RunResult:
    """Run T generations (or continue a checkpoint) and return the incumbent."""
    if resume_from is not None:
        state = checkpoint_load(resume_from, space, evaluator)
        config = state.config
    else:
        state = init_state(config, space, evaluator)
    LOGGER.info(
        f"Search started: method {config.ablation.method}, generation {state.generation}/{config.generations}",
        extra={"event": "run_started", "seed": config.master_seed, "method": config.ablation.method},
    )
    owns_pool = pool is None and not config.ablation.disable_macc
    if owns_pool:
        pool = InProcessWorkerPool(space, config.madts_for_run(), evaluator, config.master_seed)
    try:
        if pool is not None and resume_from is not None:
            pool.restore(state.snapshots, resent_feedback(state))
        while state.generation < config.generations:
            remaining = state.ledger.remaining()
            if remaining is not None and remaining == 0:
                LOGGER.info(
                    "Evaluation cap reached; stopping early",
                    extra={"event": "eval_cap_reached", "generation": state.generation},
                )
                break
            state, record = run_generation(state, pool, checkpoint_path)
            if on_generation is not None:
                on_generation(record)
            if (
                checkpoint_path is not None
                and config.checkpoint_every
                and state.generation % config.checkpoint_every == 0
            ):
                checkpoint_save(state, checkpoint_path)
    finally:
        if owns_pool:
            pool.close()
    incumbent = state.ledger.incumbent
    LOGGER.info(
        f"Search finished: best {incumbent.fitness:.6f} after {state.ledger.true_evals} true evaluations",
        extra={"event": "run_finished", "seed": config.master_seed, "method": config.ablation.method},
    )
    return RunResult(
        space=space,
        config=config,
        best_chromosome=incumbent.chromosome,
        best_fitness=incumbent.fitness,
        best_found_at=state.ledger.best_found_at,
        trace=list(state.trace),
        improvements=list(state.ledger.improvements),
        evolution=list(state.evolution),
        true_evals=state.ledger.true_evals,
    )


@dataclass(frozen=True)
class AblationRow:
    method: str
    mean_best: float
    std_best: float
    best_best: float
    true_evals_mean: float
    evals_to_target_mean: Optional[float]
    optimum_hits: int
    delta_vs_full: Optional[float] = None
    delta_best_vs_full: Optional[float] = None
    delta_evals_to_target_vs_full: Optional[float] = None


@dataclass
class AblationResult:
    rows: list[AblationRow]
    runs: dict[str, list[RunResult]]
    reference_optimum: float
    eval_cap: int


def run_ablation_suite(
    config: RunConfig,
    space: SearchSpace,
    evaluator: Evaluator,
    seeds: Sequence[int],
    reference_optimum: Optional[float] = None,
) -> AblationResult:
    """Full method and the three ablations over ``seeds`` under one evaluation cap."""
    if len(seeds) < 2:
        raise ValueError("the ablation suite needs at least two seeds")
    cap = config.eval_cap or config.budget_cap(space)
    runs: dict[str, list[RunResult]] = {}
    for flags in ABLATION_VARIANTS:
        runs[flags.method] = []
        for seed in seeds:
            variant = replace(config, ablation=flags, master_seed=int(seed), eval_cap=cap, checkpoint_every=0)
            runs[flags.method].append(run_search(variant, space, evaluator))
    if reference_optimum is None:
        reference_optimum = max(r.best_fitness for results in runs.values() for r in results)
    rows = [_ablation_row(method, results, reference_optimum) for method, results in runs.items()]
    full = rows[0]
    rows = [rows[0]] + [
        replace(
            row,
            delta_vs_full=row.mean_best - full.mean_best,
            delta_best_vs_full=row.best_best - full.best_best,
            delta_evals_to_target_vs_full=None
            if row.evals_to_target_mean is None or full.evals_to_target_mean is None
            else row.evals_to_target_mean - full.evals_to_target_mean,
        )
        for row in rows[1:]
    ]
    return AblationResult(rows, runs, reference_optimum, cap)


def _ablation_row(method: str, results: Sequence[RunResult], optimum: float) -> AblationRow:
    best = np.asarray([r.best_fitness for r in results])
    reached = [r.evals_to_reach(TARGET_FRACTION * optimum) for r in results]
    reached = [x for x in reached if x is not None]
    return AblationRow(
        method=method,
        mean_best=float(best.mean()),
        std_best=float(best.std(ddof=1)),
        best_best=float(best.max()),
        true_evals_mean=float(np.mean([r.true_evals for r in results])),
        evals_to_target_mean=float(np.mean(reached)) if reached else None,
        optimum_hits=int(sum(1 for r in results if math.isclose(r.best_fitness, optimum, abs_tol=1e-12))),
    )


def _individual_to_list(individual: Individual) -> list:
    return [list(individual.chromosome.alleles), individual.fitness, individual.origin.value, individual.born]


def _individual_from_list(item) -> Individual:
    alleles, fitness, origin, born = item
    return Individual(Chromosome(tuple(int(a) for a in alleles)), float(fitness), Origin(origin), int(born))


def checkpoint_to_dict(state: EngineState) -> dict:
    ledger = state.ledger
    return {
        "version": CHECKPOINT_VERSION,
        "space_hash": space_hash(state.space),
        "config": state.config.to_dict(),
        "generation": state.generation,
        "population": [_individual_to_list(m) for m in state.population.members],
        "incumbent": _individual_to_list(ledger.incumbent),
        "best_found_at": ledger.best_found_at,
        "improvements": [list(item) for item in ledger.improvements],
        "memo": [[list(alleles), score] for alleles, score in ledger.memo.items()],
        "true_evals": ledger.true_evals,
        "rng": stream_state(state.rng),
        "threshold": None if state.threshold is None else asdict(state.threshold),
        "trace": [
            {**record.to_row(), "counters": record.counters} for record in state.trace
        ],
        "evolution": [[g, rank, list(alleles), fitness] for g, rank, alleles, fitness in state.evolution],
        "counters": dict(state.counters),
        "snapshots": {tag_to_str(tag): snap for tag, snap in state.snapshots.items()},
        "feedback": {tag_to_str(tag): items for tag, items in state.feedback.items()},
    }


def checkpoint_save(state: EngineState, path) -> Path:
    """Write the checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(checkpoint_to_dict(state), handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    LOGGER.info(
        f"Checkpoint written at generation {state.generation}",
        extra={"event": "checkpoint_saved", "generation": state.generation, "file_path": str(path)},
    )
    return path


def read_checkpoint(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data.get('version')!r}")
    return data


def checkpoint_load(path, space: SearchSpace, evaluator: Evaluator) -> EngineState:
    """Rebuild the engine state; nothing is applied unless the whole file parses."""
    data = read_checkpoint(path)
    if data.get("space_hash") != space_hash(space):
        raise CheckpointError(f"{path}: checkpoint was written for a different search space")
    try:
        config = RunConfig.from_dict(data["config"])
        ledger = EvaluationLedger(evaluator, config.eval_cap, config.eval_parallelism)
        ledger.memo = {tuple(int(a) for a in alleles): float(score) for alleles, score in data["memo"]}
        ledger.incumbent = _individual_from_list(data["incumbent"])
        ledger.best_found_at = int(data["best_found_at"])
        ledger.improvements = [(int(e), float(f)) for e, f in data["improvements"]]
        population = Population([_individual_from_list(m) for m in data["population"]], int(data["generation"]))
        threshold = None if data["threshold"] is None else ThresholdState(**data["threshold"])
        trace = [
            GenerationRecord(
                generation=int(row["generation"]),
                best_fitness=float(row["best_fitness"]),
                mean_fitness=float(row["mean_fitness"]),
                spdi_value=float(row["spdi"]),
                tau=float(row["tau"]),
                mode=Mode(row["mode"]),
                p_cross=float(row["p_cross"]),
                p_mut=float(row["p_mut"]),
                true_evals_cumulative=int(row["true_evals_cum"]),
                merged_candidates_count=int(row["merged_count"]),
                wallclock_ms=int(row["wallclock_ms"]),
                counters=dict(row.get("counters", {})),
            )
            for row in data["trace"]
        ]
        evolution = [(int(g), int(r), tuple(int(a) for a in alleles), float(f)) for g, r, alleles, f in data["evolution"]]
        snapshots = {parse_tag(tag): snap for tag, snap in data["snapshots"].items()}
        feedback = {parse_tag(tag): items for tag, items in data["feedback"].items()}
        rng = restore_stream(data["rng"])
        true_evals = int(data["true_evals"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    evaluator.restore_counter(true_evals)
    return EngineState(
        space=space,
        config=config,
        population=population,
        ledger=ledger,
        rng=rng,
        threshold=threshold,
        trace=trace,
        evolution=evolution,
        snapshots=snapshots,
        feedback=feedback,
        counters=Counter(data.get("counters", {})),
    )
