"""Dual-track worker logic.

Modality workers fuse their local block scores with the coordinator's global
feedback, keep a bounded archive, refit a GP surrogate and inject one
acquisition-guided proposal per local step. The fusion worker has no
surrogate: it samples blocks at random and its archive is filled only from
global feedback.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from evaluators import Evaluator
from genetic_ops import block_gene_exchange, block_mutation, tournament_index
from gp_surrogate import (
    DEFAULT_GRID,
    Archive,
    GpModel,
    SurrogateDegenerateError,
    archive_insert,
    candidate_pool,
    fit,
    make_entry,
    predict,
    propose_next,
)
from rng_utils import make_stream, restore_stream, stream_state
from search_space import (
    FUSION,
    Block,
    BlockTag,
    Chromosome,
    SearchSpace,
    block_space_size,
    encode_block,
    parse_tag,
    random_block,
    tag_to_str,
)


LOGGER = logging.getLogger("macc")
PRIOR_SCORE = 0.5


@dataclass(frozen=True)
class MadtsConfig:
    window: int = 20
    epsilon: float = 1e-6
    beta: float = 2.0
    archive_capacity: int = 256
    local_population: int = 20
    local_exchange_rate: float = 0.8
    local_mutation_rate: float = 0.1
    tournament_size: int = 2
    enumeration_limit: int = 10_000
    sample_size: int = 1_000
    use_surrogate: bool = True

    def __post_init__(self):
        if self.window < 2 or self.archive_capacity < 1 or self.local_population < 2:
            raise ValueError("window >= 2, archive_capacity >= 1 and local_population >= 2 are required")
        if self.epsilon <= 0 or self.beta < 0:
            raise ValueError("epsilon must be > 0 and beta >= 0")
        for rate in (self.local_exchange_rate, self.local_mutation_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("local rates must be probabilities")


@dataclass
class FusionState:
    window_size: int = 20
    epsilon: float = 1e-6
    window: deque = field(default_factory=deque)
    sigma2_local: float = 0.0
    sigma2_global: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.window_size)


@dataclass
class WorkerState:
    block_tag: BlockTag
    archive: Archive
    population: list[Block] = field(default_factory=list)
    fusion_state: Optional[FusionState] = None
    model: Optional[GpModel] = None
    local_scores: dict = field(default_factory=dict)
    feedback: dict = field(default_factory=dict)
    context: Optional[Chromosome] = None
    generation: int = 0
    fit_count: int = 0
    proposal_count: int = 0

    @property
    def is_fusion(self) -> bool:
        return self.block_tag == FUSION


@dataclass(frozen=True)
class EliteSet:
    block_tag: BlockTag
    blocks: tuple[Block, ...]
    estimates: tuple[float, ...]


def compute_alpha(sigma2_local: float, sigma2_global: float, epsilon: float) -> float:
    return sigma2_local / (sigma2_local + sigma2_global + epsilon)


def fused_score(f_global: float, f_local: float, alpha: float) -> float:
    return alpha * f_global + (1.0 - alpha) * f_local


def _sample_variance(column: np.ndarray) -> float:
    # constant columns are exactly 0, not a float-rounding residue
    if np.ptp(column) == 0:
        return 0.0
    return float(np.var(column, ddof=1))


def update_fusion_state(state: FusionState, local_score: float, global_score: float) -> FusionState:
    state.window.append((float(local_score), float(global_score)))
    if len(state.window) < 2:
        state.sigma2_local = state.sigma2_global = 0.0
    else:
        pairs = np.asarray(state.window)
        state.sigma2_local = _sample_variance(pairs[:, 0])
        state.sigma2_global = _sample_variance(pairs[:, 1])
    state.alpha = compute_alpha(state.sigma2_local, state.sigma2_global, state.epsilon)
    return state


def new_worker(tag: BlockTag, config: MadtsConfig) -> WorkerState:
    fusion_state = None if tag == FUSION else FusionState(config.window, config.epsilon)
    return WorkerState(block_tag=tag, archive=Archive(config.archive_capacity), fusion_state=fusion_state)


def begin_generation(state: WorkerState, generation: int, blocks, context: Optional[Chromosome]) -> WorkerState:
    """Adopt the blocks the coordinator dispatched for ``generation``."""
    for block in blocks:
        if block.block_tag != state.block_tag:
            raise ValueError(f"worker {tag_to_str(state.block_tag)} received a {tag_to_str(block.block_tag)} block")
    if context != state.context:
        # local scores of frozen-context evaluators depend on the incumbent
        state.local_scores.clear()
    state.population = list(blocks)
    state.context = context
    state.generation = generation
    return state


def apply_global_feedback(state: WorkerState, space: SearchSpace, feedback: dict, generation: int,
                          evaluator: Optional[Evaluator] = None) -> WorkerState:
    """Take the coordinator's per-block global scores for ``generation``.

    The fusion worker archives them directly. Modality workers pair them with
    local scores to update the fusion variances and keep them for fusing.
    """
    state.feedback = dict(feedback)
    if state.is_fusion:
        for block, score in sorted(feedback.items(), key=lambda item: item[0].alleles):
            archive_insert(state.archive, make_entry(space, block, score, generation))
        return state
    for block, score in sorted(feedback.items(), key=lambda item: item[0].alleles):
        update_fusion_state(state.fusion_state, _local_score(state, block, evaluator), score)
    return state


def _local_score(state: WorkerState, block: Block, evaluator: Evaluator) -> float:
    if block not in state.local_scores:
        state.local_scores[block] = evaluator.eval_local(block, state.context)
    return state.local_scores[block]


def _fused(state: WorkerState, block: Block, local: float) -> float:
    if block in state.feedback:
        return fused_score(state.feedback[block], local, state.fusion_state.alpha)
    return local


def _evolve_blocks(state: WorkerState, space: SearchSpace, scores: list[float], keep: list[Block],
                   rng: np.random.Generator, config: MadtsConfig) -> list[Block]:
    nxt = list(keep)
    while len(nxt) < len(state.population):
        a = state.population[tournament_index(scores, config.tournament_size, rng)]
        b = state.population[tournament_index(scores, config.tournament_size, rng)]
        if len(a.alleles) > 1 and rng.random() < config.local_exchange_rate:
            a, b = block_gene_exchange(a, b, rng)
        children = [a, b]
        for i, child in enumerate(children):
            if rng.random() < config.local_mutation_rate:
                children[i] = block_mutation(space, child, rng)
        nxt.extend(children[: len(state.population) - len(nxt)])
    return nxt


def modality_worker_step(state: WorkerState, space: SearchSpace, rng: np.random.Generator,
                         evaluator: Evaluator, config: MadtsConfig) -> WorkerState:
    """Score, fuse, archive, refit, propose and evolve, in that order."""
    if state.is_fusion:
        raise ValueError("modality_worker_step called on the fusion worker")
    fused = []
    for block in state.population:
        score = _fused(state, block, _local_score(state, block, evaluator))
        fused.append(score)
        archive_insert(state.archive, make_entry(space, block, score, state.generation))

    proposal = None
    if config.use_surrogate and len(state.archive) >= 2:
        try:
            state.model = fit(state.archive, DEFAULT_GRID)
            state.fit_count += 1
            pool = candidate_pool(space, state.block_tag, rng, config.enumeration_limit, config.sample_size)
            proposal = propose_next(space, state.model, pool, config.beta)
        except SurrogateDegenerateError:
            state.model = None
            LOGGER.warning(
                "Surrogate degenerate; proposing a random block",
                extra={"event": "surrogate_degenerate", "worker_tag": tag_to_str(state.block_tag),
                       "generation": state.generation},
            )
    if proposal is None:
        proposal = random_block(space, state.block_tag, rng)
    state.proposal_count += 1

    worst = int(np.argmin(fused))
    best = int(np.argmax(fused))
    population_scores = list(fused)
    population_scores[worst] = _fused(state, proposal, _local_score(state, proposal, evaluator))
    keep = [state.population[best], proposal] if best != worst else [proposal]
    state.population[worst] = proposal
    state.population = _evolve_blocks(state, space, population_scores, keep[: len(state.population)], rng, config)
    return state


def fusion_worker_step(state: WorkerState, space: SearchSpace, rng: np.random.Generator,
                       config: MadtsConfig) -> WorkerState:
    """Resample the local fusion blocks; no local scoring and no surrogate."""
    if not state.is_fusion:
        raise ValueError("fusion_worker_step called on a modality worker")
    size = max(len(state.population), config.local_population)
    state.population = [random_block(space, FUSION, rng) for _ in range(size)]
    state.proposal_count += 1
    return state


def worker_step(state: WorkerState, space: SearchSpace, rng: np.random.Generator,
                evaluator: Evaluator, config: MadtsConfig) -> WorkerState:
    if state.is_fusion:
        return fusion_worker_step(state, space, rng, config)
    return modality_worker_step(state, space, rng, evaluator, config)


def extract_elites(state: WorkerState, space: SearchSpace, count: int, rng: np.random.Generator) -> EliteSet:
    """Top ``count`` archive blocks, padded with random distinct blocks.

    Each elite carries the worker's score estimate: the GP mean when a model
    exists, else the archived score, and the neutral prior for padding.
    """
    chosen = [entry.block for entry in state.archive.ranked()[:count]]
    estimates = []
    for block in chosen:
        if state.model is not None:
            estimates.append(predict(state.model, encode_block(space, block))[0])
        else:
            estimates.append(state.archive.get(block).score)
    target = min(count, block_space_size(space, state.block_tag))
    while len(chosen) < target:
        block = random_block(space, state.block_tag, rng)
        if block not in chosen:
            chosen.append(block)
            estimates.append(PRIOR_SCORE)
    return EliteSet(state.block_tag, tuple(chosen), tuple(float(e) for e in estimates))


def feedback_to_list(feedback: dict) -> list:
    return [[list(block.alleles), float(score)] for block, score in sorted(feedback.items(), key=lambda i: i[0].alleles)]


def feedback_from_list(tag: BlockTag, items) -> dict:
    return {Block(tag, tuple(int(a) for a in alleles)): float(score) for alleles, score in items}


def worker_to_dict(state: WorkerState) -> dict:
    """JSON snapshot; the GP model is refit from the archive on the next step."""
    return {
        "block_tag": tag_to_str(state.block_tag),
        "generation": state.generation,
        "context": None if state.context is None else list(state.context.alleles),
        "feedback": feedback_to_list(state.feedback),
        "fit_count": state.fit_count,
        "proposal_count": state.proposal_count,
        "capacity": state.archive.capacity,
        "archive": [
            [list(e.block.alleles), e.score, e.generation_added] for e in state.archive.entries
        ],
        "local_scores": [[list(b.alleles), s] for b, s in state.local_scores.items()],
        "fusion": None
        if state.fusion_state is None
        else {
            "window_size": state.fusion_state.window_size,
            "epsilon": state.fusion_state.epsilon,
            "window": [list(pair) for pair in state.fusion_state.window],
        },
    }


def worker_from_dict(data: dict, space: SearchSpace) -> WorkerState:
    tag = parse_tag(data["block_tag"])
    archive = Archive(int(data["capacity"]))
    for alleles, score, generation in data["archive"]:
        archive.entries.append(make_entry(space, Block(tag, tuple(alleles)), score, generation))
    fusion = None
    if data["fusion"] is not None:
        fusion = FusionState(data["fusion"]["window_size"], data["fusion"]["epsilon"])
        for local, glob in data["fusion"]["window"]:
            update_fusion_state(fusion, local, glob)
    return WorkerState(
        block_tag=tag,
        archive=archive,
        fusion_state=fusion,
        local_scores={Block(tag, tuple(a)): float(s) for a, s in data["local_scores"]},
        feedback=feedback_from_list(tag, data["feedback"]),
        context=None if data["context"] is None else Chromosome(tuple(data["context"])),
        generation=int(data["generation"]),
        fit_count=int(data["fit_count"]),
        proposal_count=int(data["proposal_count"]),
    )


@dataclass(frozen=True)
class WorkerReport:
    """What a worker hands back at the end of a generation's local phase."""

    elites: EliteSet
    snapshot: dict
    proposals: int
    fits: int


class WorkerSession:
    """One worker's state, random stream and evaluator.

    The same object backs the in-process pool and a remote TCP worker, which is
    what keeps both transport modes drawing identical numbers.
    """

    def __init__(self, space: SearchSpace, tag: BlockTag, config: MadtsConfig,
                 evaluator: Optional[Evaluator], master_seed: int):
        self.space = space
        self.config = config
        self.evaluator = evaluator
        self.state = new_worker(tag, config)
        self.rng = make_stream(master_seed, f"worker:{tag_to_str(tag)}")
        self._marks = (0, 0)

    @property
    def tag(self) -> BlockTag:
        return self.state.block_tag

    def begin(self, generation: int, blocks, context: Optional[Chromosome]):
        self._marks = (self.state.proposal_count, self.state.fit_count)
        begin_generation(self.state, generation, blocks, context)

    def step(self):
        worker_step(self.state, self.space, self.rng, self.evaluator, self.config)

    def finish(self, elite_count: int) -> WorkerReport:
        proposals, fits = self._marks
        elites = extract_elites(self.state, self.space, elite_count, self.rng)
        return WorkerReport(
            elites=elites,
            snapshot=self.snapshot(),
            proposals=self.state.proposal_count - proposals,
            fits=self.state.fit_count - fits,
        )

    def run_generation(self, generation: int, blocks, context: Optional[Chromosome],
                       local_steps: int, elite_count: int) -> WorkerReport:
        self.begin(generation, blocks, context)
        for _ in range(local_steps):
            self.step()
        return self.finish(elite_count)

    def apply_feedback(self, generation: int, feedback: dict):
        apply_global_feedback(self.state, self.space, feedback, generation, self.evaluator)

    def snapshot(self) -> dict:
        return {"worker": worker_to_dict(self.state), "rng": stream_state(self.rng)}

    def restore(self, snapshot: Optional[dict], feedback: Optional[dict] = None, master_seed: int = 0):
        """Reset to ``snapshot`` (or to a fresh worker) and replay ``feedback``."""
        if snapshot is None:
            self.state = new_worker(self.tag, self.config)
            self.rng = make_stream(master_seed, f"worker:{tag_to_str(self.tag)}")
        else:
            self.state = worker_from_dict(snapshot["worker"], self.space)
            self.rng = restore_stream(snapshot["rng"])
        if feedback:
            self.apply_feedback(self.state.generation, feedback)
