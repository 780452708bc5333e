"""Population container and variation operators.

Global operators work on full chromosomes: tournament selection, the
cross-modality block crossover and single-gene mutation. The block-local
variants (gene exchange and mutation inside one block) are what workers use to
evolve their own block populations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from search_space import Block, Chromosome, SearchSpace, decompose, reassemble


LOGGER = logging.getLogger("macc")


class UnevaluatedError(ValueError):
    """Selection met an individual without fitness."""


class InvalidOperandError(ValueError):
    pass


class Origin(str, Enum):
    INIT = "init"
    CROSSOVER = "crossover"
    MUTATION = "mutation"
    MERGED_ELITE = "merged-elite"


# Survivor tie-break: older origins first.
ORIGIN_RANK = {Origin.INIT: 0, Origin.MERGED_ELITE: 1, Origin.CROSSOVER: 2, Origin.MUTATION: 3}


@dataclass
class Individual:
    chromosome: Chromosome
    fitness: Optional[float] = None
    origin: Origin = Origin.INIT
    born: int = 0

    def __post_init__(self):
        if self.fitness is not None and not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness must lie in [0, 1], got {self.fitness}")


@dataclass
class Population:
    members: list[Individual] = field(default_factory=list)
    generation: int = 0

    def __len__(self):
        return len(self.members)

    def best(self) -> Individual:
        evaluated = [m for m in self.members if m.fitness is not None]
        if not evaluated:
            raise UnevaluatedError("population has no evaluated member")
        return max(evaluated, key=lambda m: m.fitness)

    def fitnesses(self) -> list[float]:
        return [m.fitness for m in self.members]


def tournament_index(fitnesses: Sequence[Optional[float]], k: int, rng: np.random.Generator) -> int:
    """Index of the tournament winner among ``k`` distinct uniform draws.

    Contestants are drawn without replacement, so ``k`` is capped at the
    population size. Ties go to the earlier index.
    """
    n = len(fitnesses)
    if n == 0:
        raise ValueError("cannot select from an empty population")
    if k < 1:
        raise ValueError(f"tournament size must be >= 1, got {k}")
    drawn = rng.choice(n, size=min(k, n), replace=False)
    winner = None
    for index in sorted(int(i) for i in drawn):
        fitness = fitnesses[index]
        if fitness is None:
            raise UnevaluatedError(f"member {index} has no fitness")
        if winner is None or fitness > fitnesses[winner]:
            winner = index
    return winner


def tournament_select(pop: Population, k: int, rng: np.random.Generator) -> Individual:
    return pop.members[tournament_index(pop.fitnesses(), k, rng)]


def cross_modality_crossover(
    space: SearchSpace, a: Chromosome, b: Chromosome, m: int, m_prime: int
) -> tuple[Chromosome, Chromosome]:
    """Exchange modality blocks between two parents.

    ``a'`` takes ``b``'s block for modality ``m_prime``; ``b'`` takes ``a``'s
    block for modality ``m``. Fusion genes are never touched.
    """
    if m == m_prime:
        raise InvalidOperandError(f"crossover needs two distinct modalities, got {m} twice")
    for tag in (m, m_prime):
        if not isinstance(tag, int) or not 1 <= tag <= space.modality_count:
            raise InvalidOperandError(f"{tag!r} is not a modality of this space")
    blocks_a = {blk.block_tag: blk for blk in decompose(space, a)}
    blocks_b = {blk.block_tag: blk for blk in decompose(space, b)}
    child_a = dict(blocks_a)
    child_a[m_prime] = blocks_b[m_prime]
    child_b = dict(blocks_b)
    child_b[m] = blocks_a[m]
    return reassemble(space, list(child_a.values())), reassemble(space, list(child_b.values()))


def _replacement_allele(current: int, cardinality: int, rng: np.random.Generator) -> int:
    new = int(rng.integers(0, cardinality - 1))
    return new + 1 if new >= current else new


def global_mutation(space: SearchSpace, c: Chromosome, rng: np.random.Generator) -> Chromosome:
    """Replace one uniformly chosen gene by a different candidate."""
    j = int(rng.integers(0, len(c.alleles)))
    alleles = list(c.alleles)
    alleles[j] = _replacement_allele(alleles[j], space.genes[j].cardinality, rng)
    return Chromosome(tuple(alleles))


def block_mutation(space: SearchSpace, b: Block, rng: np.random.Generator) -> Block:
    gene_ids = space.genes_of(b.block_tag)
    j = int(rng.integers(0, len(b.alleles)))
    alleles = list(b.alleles)
    alleles[j] = _replacement_allele(alleles[j], space.genes[gene_ids[j]].cardinality, rng)
    return Block(b.block_tag, tuple(alleles))


def block_gene_exchange(a: Block, b: Block, rng: np.random.Generator) -> tuple[Block, Block]:
    """Swap one uniformly chosen gene position between two blocks of one tag."""
    if a.block_tag != b.block_tag:
        raise InvalidOperandError("gene exchange needs two blocks of the same tag")
    j = int(rng.integers(0, len(a.alleles)))
    left, right = list(a.alleles), list(b.alleles)
    left[j], right[j] = right[j], left[j]
    return Block(a.block_tag, tuple(left)), Block(b.block_tag, tuple(right))


def _modality_pair(modality_count: int, rng: np.random.Generator) -> tuple[int, int]:
    m = int(rng.integers(1, modality_count + 1))
    m_prime = int(rng.integers(1, modality_count))
    if m_prime >= m:
        m_prime += 1
    return m, m_prime


def apply_variation(
    space: SearchSpace,
    pop: Population,
    rates,
    rng: np.random.Generator,
    tournament_size: int = 2,
    offspring_count: Optional[int] = None,
) -> list[Individual]:
    """Generational offspring: tournament parents, block crossover, mutation.

    ``rates`` carries ``p_cross`` and ``p_mut``. Offspring are unevaluated and
    stamped with the population's next generation index.
    """
    if not 0.0 <= rates.p_cross <= 1.0 or not 0.0 <= rates.p_mut <= 1.0:
        raise ValueError("variation rates must be probabilities")
    n = len(pop) if offspring_count is None else offspring_count
    can_cross = space.modality_count >= 2
    if not can_cross and rates.p_cross > 0:
        LOGGER.warning(
            "Single-modality space: crossover degenerates to cloning",
            extra={"event": "crossover_disabled", "generation": pop.generation},
        )
    fitnesses = pop.fitnesses()
    born = pop.generation + 1
    offspring: list[Individual] = []
    while len(offspring) < n:
        parent_a = pop.members[tournament_index(fitnesses, tournament_size, rng)]
        parent_b = pop.members[tournament_index(fitnesses, tournament_size, rng)]
        pair = [
            Individual(parent_a.chromosome, None, parent_a.origin, born),
            Individual(parent_b.chromosome, None, parent_b.origin, born),
        ]
        if can_cross and rng.random() < rates.p_cross:
            m, m_prime = _modality_pair(space.modality_count, rng)
            child_a, child_b = cross_modality_crossover(
                space, parent_a.chromosome, parent_b.chromosome, m, m_prime
            )
            pair = [
                Individual(child_a, None, Origin.CROSSOVER, born),
                Individual(child_b, None, Origin.CROSSOVER, born),
            ]
        for index, child in enumerate(pair):
            if rng.random() < rates.p_mut:
                origin = child.origin if child.origin == Origin.CROSSOVER else Origin.MUTATION
                pair[index] = replace(
                    child, chromosome=global_mutation(space, child.chromosome, rng), origin=origin
                )
        offspring.extend(pair[: n - len(offspring)])
    return offspring
